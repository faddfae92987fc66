"""Randomized finite-difference suite over the merging composites.

Each instance draws a small token set (N <= 12), a partition, a reduction
rate r <= 3 and a temperature, then compares tape gradients against central
differences for three pipelines:

* ``soft``: soft_group then soft_merge, w.r.t. the similarity matrix
* ``embed``: linear embedding, cosine similarity, soft_group, soft_merge,
  w.r.t. the embedding weights
* ``hard``: hard_merge for a fixed matching, w.r.t. the token features

The clipping denominator of soft grouping is a stop-gradient, so the oracle
freezes it at its base-point value. Perturbed evaluations run in extended
precision; gradients far below 64-bit round-off would otherwise swamp the
relative-error metric.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import merge as mg
from .merge import PrecisionError

PIPELINES = ("soft", "embed", "hard")
TAUS = (0.1, 0.5, 1.0)


@dataclass
class SuiteReport:
    instances: int = 0
    max_err: dict[str, float] = field(default_factory=lambda: {p: 0.0 for p in PIPELINES})
    max_rowsum: float = 0.0
    seconds: float = 0.0

    def worst(self) -> float:
        return max(self.max_err.values())

    def passed(self, tol: float = 1e-4) -> bool:
        return self.worst() < tol and self.max_rowsum <= 1.0 + 1e-12


@dataclass
class Instance:
    feats: np.ndarray
    sizes: np.ndarray
    part: mg.BipartitePartition
    sim: np.ndarray
    r: int
    tau: float

    @property
    def n(self) -> int:
        return self.feats.shape[0]


def draw_instance(rng: np.random.Generator, tau: float | None = None) -> Instance:
    n = int(rng.integers(4, 13))
    d = int(rng.integers(2, 5))  # width 1 makes every cosine exactly +-1
    feats = rng.uniform(-1, 1, (n, d))
    sizes = rng.uniform(0.5, 2.0, n)
    part = mg.partition(mg.TokenState.initial(feats))
    r = int(rng.integers(1, min(3, part.size_a) + 1))
    tau = float(rng.choice(TAUS)) if tau is None else tau
    sim = rng.uniform(-1, 1, (part.size_a, part.size_b))
    return Instance(feats, sizes, part, sim, r, tau)


def _state(inst: Instance, dtype, feats=None) -> mg.TokenState:
    n = inst.n
    x = inst.feats if feats is None else feats
    return mg.TokenState(ad.as_tensor(x) if isinstance(x, ad.Tensor) else ad.Tensor(x, dtype=dtype),
                         ad.Tensor(inst.sizes, dtype=dtype), np.zeros(n, bool), np.zeros(n, bool))


def _merge_loss(state: mg.TokenState) -> ad.Tensor:
    return ad.sum_(state.features * state.features) + ad.sum_(state.sizes * state.sizes)


def _frozen_rowsum(sim: np.ndarray, r: int, tau: float) -> np.ndarray:
    steps = mg.soft_group(mg.SimilarityMatrix(sim), r, tau, keep_history=True).per_step
    return np.sum(steps, axis=0).sum(axis=-1, keepdims=True)


def soft_loss_fn(inst: Instance, frozen: np.ndarray | None = None):
    def f(s: ad.Tensor) -> ad.Tensor:
        adj = mg.soft_group(mg.SimilarityMatrix(s), inst.r, inst.tau, frozen_rowsum=frozen)
        return _merge_loss(mg.soft_merge(_state(inst, s.dtype), inst.part, adj))

    return f


def check_soft(inst: Instance, oracle_dtype=np.longdouble) -> tuple[float, float]:
    """(max rel-err, max row sum of the adjacency)."""
    adj = mg.soft_group(mg.SimilarityMatrix(inst.sim), inst.r, inst.tau).values.data
    frozen = _frozen_rowsum(inst.sim, inst.r, inst.tau)
    err = ad.finite_difference_check(soft_loss_fn(inst, frozen), inst.sim, oracle_dtype=oracle_dtype)
    return err, float(adj.sum(axis=-1).max())


def check_embed(inst: Instance, rng: np.random.Generator, oracle_dtype=np.longdouble) -> float:
    d = inst.feats.shape[1]
    w0 = rng.uniform(-1, 1, (d, 3))
    ia, ib = inst.part.index_a, inst.part.index_b

    def sim_of(w: ad.Tensor) -> mg.SimilarityMatrix:
        z = ad.Tensor(inst.feats, dtype=w.dtype) @ w
        za, zb = ad.getitem(z, ia), ad.getitem(z, ib)
        return mg.similarity(za, zb, pre_scale=1.0)

    base = sim_of(ad.Tensor(w0)).values.data
    frozen = _frozen_rowsum(base, inst.r, inst.tau)

    def f(w: ad.Tensor) -> ad.Tensor:
        adj = mg.soft_group(sim_of(w), inst.r, inst.tau, frozen_rowsum=frozen)
        return _merge_loss(mg.soft_merge(_state(inst, w.dtype), inst.part, adj))

    return ad.finite_difference_check(f, w0, oracle_dtype=oracle_dtype)


def check_hard(inst: Instance, oracle_dtype=np.longdouble) -> float:
    match = mg.hard_group(mg.SimilarityMatrix(inst.sim), inst.r)

    def f(x: ad.Tensor) -> ad.Tensor:
        return _merge_loss(mg.hard_merge(_state(inst, x.dtype, x), inst.part, match))

    return ad.finite_difference_check(f, inst.feats, oracle_dtype=oracle_dtype)


def run_suite(n_instances: int = 120, seed: int = 0, taus=TAUS) -> SuiteReport:
    """64-bit suite; taus cycle over instances."""
    report = SuiteReport()
    t0 = time.perf_counter()
    for i in range(n_instances):
        rng = np.random.default_rng([seed, i])
        inst = draw_instance(rng, taus[i % len(taus)])
        err, rowsum = check_soft(inst)
        report.max_err["soft"] = max(report.max_err["soft"], err)
        report.max_rowsum = max(report.max_rowsum, rowsum)
        report.max_err["embed"] = max(report.max_err["embed"], check_embed(inst, rng))
        report.max_err["hard"] = max(report.max_err["hard"], check_hard(inst))
        report.instances += 1
    report.seconds = time.perf_counter() - t0
    return report


def check_32bit(n_instances: int, seed: int, tau: float, tol: float = 1e-2) -> float:
    """Compare 32-bit tape gradients of the soft pipeline against 64-bit ones.

    Raises :class:`PrecisionError` with a "rerun in 64-bit" hint when the
    32-bit pass is non-finite or disagrees by more than ``tol``.
    """
    worst = 0.0
    for i in range(n_instances):
        inst = draw_instance(np.random.default_rng([seed, i]), tau)
        grads = {}
        for dt in (np.float32, np.float64):
            leaf = ad.Tensor(inst.sim.astype(dt), requires_grad=True)
            try:
                loss = soft_loss_fn(inst)(leaf)
                grads[dt] = ad.backward(loss, [leaf])[leaf].astype(np.float64)
            except PrecisionError:
                raise
            except ad.NonFiniteError as exc:
                raise PrecisionError(
                    f"non-finite values at tau={tau} in {np.dtype(dt).name}: {exc}; rerun in 64-bit"
                ) from exc
        a, b = grads[np.float32], grads[np.float64]
        err = float(np.max(np.abs(a - b) / np.maximum(1e-12, np.abs(a) + np.abs(b))))
        if not np.isfinite(err) or err > tol:
            raise PrecisionError(
                f"32-bit gradients disagree with 64-bit (rel-err {err:.3g}) at tau={tau}; rerun in 64-bit"
            )
        worst = max(worst, err)
    return worst
