"""Grouping and merging operators over bipartite token partitions.

Hard path (inference): :func:`hard_group` picks the ``r`` most similar
A-to-B edges, :func:`hard_merge` pools them by effective size and drops the
sources. Soft path (training): :func:`soft_group` relaxes the top-``r`` edge
selection into a continuous adjacency and :func:`soft_merge` pools in
proportion to it while keeping every token.

Arrays may be unbatched (``features`` [N, d]) or carry one leading batch
axis ([B, N, d]); index arrays follow suit ([K] or [B, K]).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_FLOOR = 1e-6
NORM_FLOOR = 1e-8
DEFAULT_SIM_SCALE = 0.1
DEFAULT_TAU = 0.1


@dataclass
class TokenState:
    features: Tensor
    sizes: Tensor
    excluded: np.ndarray
    protected: np.ndarray

    def __post_init__(self):
        self.features = ad.as_tensor(self.features)
        self.sizes = ad.as_tensor(self.sizes)
        self.excluded = np.asarray(self.excluded, dtype=bool)
        self.protected = np.asarray(self.protected, dtype=bool)
        if (self.excluded & self.protected).any():
            raise ValueError("protected tokens cannot be excluded")

    @classmethod
    def initial(cls, features, protected=None) -> "TokenState":
        """Fresh state: unit sizes, nothing excluded."""
        features = ad.as_tensor(features)
        lead = features.shape[:-1]
        if protected is None:
            protected = np.zeros(lead, dtype=bool)
        return cls(
            features,
            Tensor(np.ones(lead, dtype=features.dtype)),
            np.zeros(lead, dtype=bool),
            np.broadcast_to(np.asarray(protected, dtype=bool), lead).copy(),
        )

    @property
    def batched(self) -> bool:
        return self.features.ndim == 3

    @property
    def n_tokens(self) -> int:
        return self.features.shape[-2]


@dataclass
class BipartitePartition:
    index_a: np.ndarray
    index_b: np.ndarray

    @property
    def size_a(self) -> int:
        return self.index_a.shape[-1]

    @property
    def size_b(self) -> int:
        return self.index_b.shape[-1]


@dataclass
class SimilarityMatrix:
    values: Tensor
    mask: np.ndarray | None = None  # True marks an invalid pair

    def __post_init__(self):
        self.values = ad.as_tensor(self.values)
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def valid(self) -> np.ndarray:
        if self.mask is None:
            return np.ones(self.values.shape, dtype=bool)
        return ~np.broadcast_to(self.mask, self.values.shape)


@dataclass
class SoftAdjacency:
    values: Tensor
    per_step: list[np.ndarray] | None = None


@dataclass
class HardMatching:
    src: np.ndarray  # A-local row indices, [r] or [B, r]
    dst: np.ndarray  # B-local column indices

    @property
    def r(self) -> int:
        return self.src.shape[-1]

    def adjacency(self, size_a: int, size_b: int) -> np.ndarray:
        """Binary adjacency E' with ones at the selected edges."""
        src, dst = np.atleast_2d(self.src), np.atleast_2d(self.dst)
        out = np.zeros((src.shape[0], size_a, size_b))
        rows = np.arange(src.shape[0])[:, None]
        out[rows, src, dst] = 1.0
        return out if self.src.ndim == 2 else out[0]


# -- batching helpers ---------------------------------------------------------
def _batch_state(state: TokenState) -> tuple[TokenState, bool]:
    if state.batched:
        return state, False
    return (
        TokenState(
            ad.reshape(state.features, (1,) + state.features.shape),
            ad.reshape(state.sizes, (1,) + state.sizes.shape),
            state.excluded[None],
            state.protected[None],
        ),
        True,
    )


def _unbatch_state(state: TokenState) -> TokenState:
    return TokenState(
        ad.reshape(state.features, state.features.shape[1:]),
        ad.reshape(state.sizes, state.sizes.shape[1:]),
        state.excluded[0],
        state.protected[0],
    )


def _rows(x) -> np.ndarray:
    return np.atleast_2d(np.asarray(x))


# -- partition ---------------------------------------------------------------
def partition(state: TokenState, r: int = 0, scheme: str = "alternate") -> BipartitePartition:
    """Split non-excluded tokens into disjoint sets A and B.

    Non-protected tokens alternate by rank (even rank to A, odd to B);
    protected tokens always go to B. Every batch row must yield the same
    set sizes.
    """
    if scheme != "alternate":
        raise ValueError(f"unknown partition scheme {scheme!r}")
    excluded = _rows(state.excluded)
    protected = _rows(state.protected)
    index_a, index_b = [], []
    for exc, prot in zip(excluded, protected):
        active = np.flatnonzero(~exc)
        if active.size < 2:
            raise ValueError("partition needs at least 2 non-excluded tokens")
        free = active[~prot[active]]
        a = free[0::2]
        b = np.sort(np.concatenate([free[1::2], active[prot[active]]]))
        index_a.append(a)
        index_b.append(b)
    if len({len(a) for a in index_a}) != 1 or len({len(b) for b in index_b}) != 1:
        raise ValueError("batch rows disagree on partition sizes")
    ia, ib = np.stack(index_a), np.stack(index_b)
    if r > ia.shape[1]:
        raise ValueError(f"r={r} exceeds |A|={ia.shape[1]}")
    if not state.batched:
        ia, ib = ia[0], ib[0]
    return BipartitePartition(ia, ib)


def split_tokens(x: Tensor, p: BipartitePartition) -> tuple[Tensor, Tensor]:
    """Gather the A-rows and B-rows of ``x`` ([N, k] or [B, N, k])."""
    if x.ndim == 2:
        return ad.getitem(x, p.index_a), ad.getitem(x, p.index_b)
    return ad.gather_rows(x, p.index_a), ad.gather_rows(x, p.index_b)


# -- similarity --------------------------------------------------------------
def similarity(
    emb_a: Tensor,
    emb_b: Tensor,
    pre_scale: float = DEFAULT_SIM_SCALE,
    mask: np.ndarray | None = None,
) -> SimilarityMatrix:
    """Cosine similarity between A and B embeddings, divided by ``pre_scale``."""
    values = ad.cosine_similarity(ad.as_tensor(emb_a), ad.as_tensor(emb_b), NORM_FLOOR)
    if pre_scale != 1.0:
        values = values * (1.0 / pre_scale)
    return SimilarityMatrix(values, mask)


# -- hard path ---------------------------------------------------------------
def _hard_group_batched(s: np.ndarray, valid: np.ndarray | None, r: int) -> tuple[np.ndarray, np.ndarray]:
    masked = s if valid is None else np.where(valid, s, -np.inf)
    best_b = np.argmax(masked, axis=-1)  # first maximum: lowest b-index on ties
    best = np.take_along_axis(masked, best_b[..., None], axis=-1)[..., 0]
    if valid is None:
        if r > s.shape[-2]:
            raise ValueError(f"r={r} exceeds the {s.shape[-2]} valid candidate rows")
        key = -best
    else:
        row_ok = valid.any(axis=-1)
        n_ok = int(row_ok.sum(axis=-1).min(initial=s.shape[-2]))
        if r > n_ok:
            raise ValueError(f"r={r} exceeds the {n_ok} valid candidate rows")
        # rows without candidates sort last
        key = np.where(row_ok, -best, np.inf)
    # stable sort keeps the lower a-index first among equal scores
    src = np.argsort(key, axis=-1, kind="stable")[..., :r]
    return src, np.take_along_axis(best_b, src, axis=-1)


def hard_group(sim: SimilarityMatrix, r: int) -> HardMatching:
    """Bipartite soft matching: per-row best edge, then the ``r`` best rows.

    Ties prefer the lower A-index, then the lower B-index. Batched inputs
    ([B, |A|, |B|]) are handled in one vectorized pass.
    """
    s = sim.values.data
    valid = None if sim.mask is None else sim.valid
    if s.ndim == 2:
        src, dst = _hard_group_batched(s[None], None if valid is None else valid[None], r)
        return HardMatching(src[0], dst[0])
    return HardMatching(*_hard_group_batched(s, valid, r))


def merge_assignment(
    n_tokens: int, p: BipartitePartition, m: HardMatching
) -> tuple[np.ndarray, np.ndarray]:
    """Kept token indices and the old-to-new index map of a hard merge.

    Survivors keep their relative order; each source maps to the new slot of
    its destination.
    """
    ia, ib = _rows(p.index_a), _rows(p.index_b)
    src, dst = _rows(m.src), _rows(m.dst)
    rows = np.arange(ia.shape[0])[:, None]
    src_g = ia[rows, src]
    dst_g = ib[rows, dst]
    removed = np.zeros((ia.shape[0], n_tokens), dtype=bool)
    removed[rows, src_g] = True
    keep = np.stack([np.flatnonzero(~row) for row in removed])
    assign = np.full((ia.shape[0], n_tokens), -1, dtype=np.intp)
    assign[rows, keep] = np.arange(keep.shape[1])
    assign[rows, src_g] = assign[rows, dst_g]
    return keep, assign


def hard_merge(state: TokenState, p: BipartitePartition, m: HardMatching) -> TokenState:
    """Size-weighted pooling of each matched source into its destination.

    Sources are removed, so the token count drops by ``r``.
    """
    state, squeeze = _batch_state(state)
    ia, ib = _rows(p.index_a), _rows(p.index_b)
    src, dst = _rows(m.src), _rows(m.dst)
    rows = np.arange(ia.shape[0])[:, None]
    src_g, dst_g = ia[rows, src], ib[rows, dst]
    keep, _ = merge_assignment(state.n_tokens, BipartitePartition(ia, ib), HardMatching(src, dst))

    x, size = state.features, state.sizes
    size_col = ad.reshape(size, size.shape + (1,))
    weighted = x * size_col
    src_mass = ad.gather_rows(size, src_g)
    src_weighted = ad.gather_rows(weighted, src_g)
    num = ad.index_add_rows(weighted, dst_g, src_weighted)
    den = ad.index_add_rows(size, dst_g, src_mass)
    received = np.zeros(size.shape, dtype=bool)
    received[rows, dst_g] = True
    pooled = num / ad.reshape(ad.clamp_min(den, LOG_FLOOR), den.shape + (1,))
    feats = ad.where(received[..., None], pooled, x)

    out = TokenState(
        ad.gather_rows(feats, keep),
        ad.gather_rows(den, keep),
        state.excluded[rows, keep],
        state.protected[rows, keep],
    )
    return _unbatch_state(out) if squeeze else out


# -- soft path ---------------------------------------------------------------
# 32-bit logits carry absolute error ~|S/tau| * 6e-8; keep it below ~1e-3
MAX_LOGIT_32 = 1.6e4


class PrecisionError(ArithmeticError):
    """The requested computation is not trustworthy at this precision."""


def soft_group(
    sim: SimilarityMatrix,
    r: int,
    tau: float = DEFAULT_TAU,
    eps: float = LOG_FLOOR,
    keep_history: bool = False,
    frozen_rowsum: np.ndarray | None = None,
) -> SoftAdjacency:
    """Relaxed top-``r`` edge selection with row-wise clipping.

    Each of ``r`` rounds takes a global softmax over all valid entries and
    then pushes down every row in proportion to the mass it just received.
    The accumulated selection is divided row-wise by ``max(1, rowsum)``,
    with the row sum held constant for differentiation. ``frozen_rowsum``
    substitutes a fixed row-sum array for that constant, which lets
    finite-difference oracles reproduce the stop-gradient.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if r > sim.values.shape[-2]:
        raise ValueError(f"r={r} exceeds |A|={sim.values.shape[-2]}")
    valid = sim.valid
    scores = sim.values
    if scores.dtype == np.float32 and valid.any():
        peak = float(np.abs(scores.data[valid]).max()) / tau
        if peak > MAX_LOGIT_32:
            raise PrecisionError(
                f"|S|/tau reaches {peak:.3g} at tau={tau}, beyond 32-bit resolution; rerun in 64-bit"
            )
    total = None
    history = [] if keep_history else None
    try:
        for _ in range(r):
            step = ad.softmax(scores * (1.0 / tau), axis=(-2, -1), mask=valid)
            total = step if total is None else total + step
            if history is not None:
                history.append(step.data.copy())
            taken = ad.sum_(step, axis=-1, keepdims=True)
            scores = scores + ad.log(1.0 - taken, floor=eps)
        if total is None:
            return SoftAdjacency(Tensor(np.zeros(sim.values.shape, dtype=sim.values.dtype)), history)
        if frozen_rowsum is None:
            rowsum = ad.stop_gradient(ad.sum_(total, axis=-1, keepdims=True))
        else:
            rowsum = ad.Tensor(np.asarray(frozen_rowsum, dtype=total.dtype))
        adj = total / ad.clamp_min(rowsum, 1.0)
    except ad.NonFiniteError as exc:
        raise ad.NonFiniteError(
            f"soft grouping produced non-finite values at tau={tau} "
            f"in {sim.values.dtype}; rerun in 64-bit"
        ) from exc
    return SoftAdjacency(adj, history)


def soft_merge(
    state: TokenState, p: BipartitePartition, adj: SoftAdjacency | Tensor, eps: float = LOG_FLOOR
) -> TokenState:
    """Pool A into B in proportion to the soft adjacency; keep all tokens.

    B-tokens take the size-weighted mean of themselves and their weighted
    sources and grow by the absorbed mass. A-tokens keep their features and
    shrink by the fraction of themselves given away.
    """
    e = adj.values if isinstance(adj, SoftAdjacency) else ad.as_tensor(adj)
    state, squeeze = _batch_state(state)
    ia, ib = _rows(p.index_a), _rows(p.index_b)
    if e.ndim == 2:
        e = ad.reshape(e, (1,) + e.shape)
    if e.shape[-2:] != (ia.shape[1], ib.shape[1]):
        raise ValueError(f"adjacency shape {e.shape} does not match partition")

    x, size = state.features, state.sizes
    xa, xb = ad.gather_rows(x, ia), ad.gather_rows(x, ib)
    ma, mb = ad.gather_rows(size, ia), ad.gather_rows(size, ib)
    w = e * ad.reshape(ma, ma.shape + (1,))  # e_ij * m_i
    mass_in = ad.sum_(w, axis=-2)
    mb_new = mb + mass_in
    num = xb * ad.reshape(mb, mb.shape + (1,)) + ad.swapaxes(w, -1, -2) @ xa
    xb_new = num / ad.reshape(ad.clamp_min(mb_new, eps), mb_new.shape + (1,))
    ma_new = ma * (1.0 - ad.sum_(e, axis=-1))

    feats = ad.scatter_rows(x, ib, xb_new)
    sizes = ad.scatter_rows(ad.scatter_rows(size, ia, ma_new), ib, mb_new)
    out = TokenState(feats, sizes, state.excluded, state.protected)
    return _unbatch_state(out) if squeeze else out


def exclude_minimum(state: TokenState, r: int) -> TokenState:
    """Flag the ``r`` smallest-size eligible tokens as excluded (ties: lower index)."""
    if r == 0:
        return state
    sizes = _rows(state.sizes.data)
    excluded = _rows(state.excluded).copy()
    protected = _rows(state.protected)
    for row in range(sizes.shape[0]):
        eligible = np.flatnonzero(~excluded[row] & ~protected[row])
        if eligible.size < r:
            raise ValueError(f"only {eligible.size} tokens eligible for exclusion, need {r}")
        order = eligible[np.argsort(sizes[row, eligible], kind="stable")]
        excluded[row, order[:r]] = True
    if not state.batched:
        excluded = excluded[0]
    return replace(state, excluded=excluded)


def proportional_bias(sizes, excluded: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Per-key attention bias ``log(size)`` and the mask of keys allowed to attend.

    Zero-size and excluded tokens are masked out instead of receiving log 0.
    """
    sizes = ad.as_tensor(sizes)
    allowed = sizes.data > 0
    if excluded is not None:
        allowed = allowed & ~np.asarray(excluded, dtype=bool)
    bias = ad.log(sizes, floor=LOG_FLOOR)
    return bias, allowed


def merge_unmerge(
    component: Callable[[Tensor], Tensor],
    state: TokenState,
    p: BipartitePartition,
    m: HardMatching,
) -> TokenState:
    """Run ``component`` on hard-merged tokens, then copy outputs back to members.

    The result has the original token count and sizes; adding the residual
    is left to the caller.
    """
    merged = hard_merge(state, p, m)
    out = component(merged.features)
    if out.shape != merged.features.shape:
        raise ValueError("component must preserve the token count and width")
    _, assign = merge_assignment(state.n_tokens, p, m)
    if out.ndim == 2:
        expanded = ad.getitem(out, assign[0])
    else:
        expanded = ad.gather_rows(out, assign)
    return TokenState(expanded, state.sizes, state.excluded, state.protected)
