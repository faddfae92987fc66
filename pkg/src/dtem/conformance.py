"""Conformance vectors for the grouping operators.

File grammar (one case per block, ``#`` starts a comment line)::

    case <name>
    r <int>
    tau <float>                 # soft case; omit for a hard case
    sim <rows> <cols>
    <cols floats>               # repeated <rows> times
    mask                        # optional; 1 marks an invalid pair
    <cols 0/1 values>           # repeated <rows> times
    matching <a>:<b> ...        # hard: selected edges in selection order
    adjacency                   # soft: expected relaxed adjacency
    <cols floats>               # repeated <rows> times
    tol <float>                 # soft only; max absolute error
    end

Values are whitespace separated. Floats are written with ``repr`` so files
round-trip exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import merge as mg


@dataclass
class Case:
    name: str
    r: int
    sim: np.ndarray
    tau: float | None = None
    mask: np.ndarray | None = None
    matching: list[tuple[int, int]] | None = None
    adjacency: np.ndarray | None = None
    tol: float = 1e-9

    @property
    def soft(self) -> bool:
        return self.tau is not None


@dataclass
class Result:
    name: str
    ok: bool
    detail: str


class FormatError(ValueError):
    pass


def _matrix(lines: list[str], pos: int, rows: int, cols: int, kind=float) -> tuple[np.ndarray, int]:
    out = []
    for i in range(rows):
        if pos + i >= len(lines):
            raise FormatError("matrix runs past end of file")
        vals = lines[pos + i].split()
        if len(vals) != cols:
            raise FormatError(f"expected {cols} values, got {len(vals)}: {lines[pos + i]!r}")
        out.append([kind(v) for v in vals])
    return np.array(out, dtype=float if kind is float else bool).reshape(rows, cols), pos + rows


def parse(text: str) -> list[Case]:
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    cases: list[Case] = []
    pos = 0
    while pos < len(lines):
        head = lines[pos].split()
        if head[0] != "case" or len(head) != 2:
            raise FormatError(f"expected 'case <name>', got {lines[pos]!r}")
        fields: dict = {"name": head[1]}
        pos += 1
        shape = None
        while True:
            if pos >= len(lines):
                raise FormatError(f"case {fields['name']}: missing 'end'")
            key, *rest = lines[pos].split()
            pos += 1
            if key == "end":
                break
            if key == "r":
                fields["r"] = int(rest[0])
            elif key == "tau":
                fields["tau"] = float(rest[0])
            elif key == "tol":
                fields["tol"] = float(rest[0])
            elif key == "sim":
                shape = (int(rest[0]), int(rest[1]))
                fields["sim"], pos = _matrix(lines, pos, *shape)
            elif key == "mask":
                if shape is None:
                    raise FormatError("mask before sim")
                fields["mask"], pos = _matrix(lines, pos, *shape, kind=lambda v: v == "1")
            elif key == "adjacency":
                if shape is None:
                    raise FormatError("adjacency before sim")
                fields["adjacency"], pos = _matrix(lines, pos, *shape)
            elif key == "matching":
                fields["matching"] = [tuple(int(t) for t in item.split(":")) for item in rest]
            else:
                raise FormatError(f"unknown key {key!r}")
        if "r" not in fields or "sim" not in fields:
            raise FormatError(f"case {fields['name']}: needs r and sim")
        case = Case(**fields)
        if case.soft and case.adjacency is None:
            raise FormatError(f"soft case {case.name} has no adjacency")
        if not case.soft and case.matching is None:
            raise FormatError(f"hard case {case.name} has no matching")
        cases.append(case)
    return cases


def _rows_text(m: np.ndarray, fmt=repr) -> list[str]:
    return [" ".join(fmt(float(v)) for v in row) for row in m]


def serialize(cases: list[Case]) -> str:
    out = []
    for c in cases:
        out.append(f"case {c.name}")
        out.append(f"r {c.r}")
        if c.soft:
            out.append(f"tau {c.tau!r}")
        out.append(f"sim {c.sim.shape[0]} {c.sim.shape[1]}")
        out.extend(_rows_text(c.sim))
        if c.mask is not None:
            out.append("mask")
            out.extend(" ".join("1" if v else "0" for v in row) for row in c.mask)
        if c.soft:
            out.append("adjacency")
            out.extend(_rows_text(c.adjacency))
            out.append(f"tol {c.tol!r}")
        else:
            out.append("matching " + " ".join(f"{a}:{b}" for a, b in c.matching))
        out.append("end")
        out.append("")
    return "\n".join(out)


def load(path) -> list[Case]:
    return parse(Path(path).read_text())


def default_vectors() -> list[Case]:
    return parse(resources.files("dtem").joinpath("data/vectors.txt").read_text())


def check(case: Case) -> Result:
    sim = mg.SimilarityMatrix(np.array(case.sim, dtype=np.float64), case.mask)
    if case.soft:
        got = mg.soft_group(sim, case.r, case.tau).values.data
        err = float(np.max(np.abs(got - case.adjacency))) if got.size else 0.0
        return Result(case.name, err <= case.tol, f"max abs err {err:.3g} (tol {case.tol:.3g})")
    m = mg.hard_group(sim, case.r)
    got = [(int(a), int(b)) for a, b in zip(m.src, m.dst)]
    want = [tuple(p) for p in case.matching]
    return Result(case.name, got == want, f"got {got}, expected {want}")


def run(cases: list[Case]) -> list[Result]:
    return [check(c) for c in cases]


# -- reference generator -----------------------------------------------------
def reference_hard(sim: np.ndarray, r: int, mask: np.ndarray | None = None) -> list[tuple[int, int]]:
    """Plain-loop matching: each row's first maximum, rows ranked by value then index."""
    valid = np.ones(sim.shape, bool) if mask is None else ~mask
    best = []
    for i in range(sim.shape[0]):
        cols = [j for j in range(sim.shape[1]) if valid[i, j]]
        if not cols:
            continue
        j = cols[0]
        for c in cols[1:]:
            if sim[i, c] > sim[i, j]:
                j = c
        best.append((-sim[i, j], i, j))
    best.sort(key=lambda t: (t[0], t[1]))
    return [(i, j) for _, i, j in best[:r]]


def reference_soft(sim: np.ndarray, r: int, tau: float, mask: np.ndarray | None = None,
                   eps: float = 1e-6) -> np.ndarray:
    """Plain numpy relaxed top-r without any tape machinery."""
    valid = np.ones(sim.shape, bool) if mask is None else ~mask
    s = sim.astype(np.float64).copy()
    acc = np.zeros_like(s)
    for _ in range(r):
        z = np.where(valid, s / tau, -np.inf)
        z = z - z[valid].max()
        p = np.where(valid, np.exp(z), 0.0)
        p /= p.sum()
        acc += p
        s = s + np.log(np.maximum(1.0 - p.sum(axis=1, keepdims=True), eps))
    return acc / np.maximum(acc.sum(axis=1, keepdims=True), 1.0)


def generate(seed: int = 0, n_hard: int = 12, n_soft: int = 12) -> list[Case]:
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(n_hard):
        na, nb = rng.integers(1, 6), rng.integers(1, 6)
        if i % 3 == 0:
            sim = rng.integers(-1, 2, (na, nb)).astype(float)  # ties
        else:
            sim = np.round(rng.uniform(-1, 1, (na, nb)), 3)
        mask = rng.random((na, nb)) < 0.2 if i % 4 == 1 else None
        rows = int(((~mask).any(axis=1)).sum()) if mask is not None else na
        r = int(rng.integers(0, rows + 1))
        cases.append(Case(f"hard-{i}", r, sim, mask=mask, matching=reference_hard(sim, r, mask)))
    for i in range(n_soft):
        na, nb = rng.integers(1, 6), rng.integers(1, 6)
        sim = np.round(rng.uniform(-10, 10, (na, nb)), 3)
        tau = float([0.1, 0.5, 1.0, 2.0][i % 4])
        mask = rng.random((na, nb)) < 0.2 if i % 3 == 2 else None
        if mask is not None:
            mask[:, 0] = False
        r = int(rng.integers(0, na + 1))
        adj = reference_soft(sim, r, tau, mask)
        cases.append(Case(f"soft-{i}", r, sim, tau=tau, mask=mask, adjacency=adj, tol=1e-9))
    return cases
