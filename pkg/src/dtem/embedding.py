"""Per-block decoupled embeddings used only to score token similarity."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class EmbeddingParams:
    """One stack of affine layers per transformer block.

    ``layers[block]`` is a list of ``(weight, bias)`` pairs; weights are
    stored as [in, out] so that ``z = x @ W + b``.
    """

    d: int
    d_out: int
    depth: int = 0
    hidden: int | None = None
    seed: int = 0
    layers: list[list[tuple[Tensor, Tensor]]] = field(default_factory=list)

    @property
    def n_blocks(self) -> int:
        return len(self.layers)

    def parameters(self) -> list[Tensor]:
        return [t for block in self.layers for pair in block for t in pair]

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for b, block in enumerate(self.layers):
            for i, (w, bias) in enumerate(block):
                out[f"blocks.{b}.{i}.weight"] = w
                out[f"blocks.{b}.{i}.bias"] = bias
        return out

    def n_params(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def requires_grad_(self, flag: bool) -> "EmbeddingParams":
        for p in self.parameters():
            p.requires_grad = flag
        return self


def layer_shapes(d: int, d_out: int, depth: int, hidden: int | None) -> list[tuple[int, int]]:
    widths = [d] + [hidden or d] * depth + [d_out]
    return list(zip(widths[:-1], widths[1:]))


def param_count(d: int, d_out: int, depth: int = 0, hidden: int | None = None, n_blocks: int = 1) -> int:
    return n_blocks * sum(i * o + o for i, o in layer_shapes(d, d_out, depth, hidden))


def init(
    seed: int,
    d: int,
    d_out: int,
    depth: int = 0,
    hidden: int | None = None,
    n_blocks: int = 1,
    dtype=np.float64,
) -> EmbeddingParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    if d_out < 1:
        raise ValueError("embedding width must be at least 1")
    rng = np.random.default_rng(seed)
    layers = []
    for _ in range(n_blocks):
        block = []
        for fan_in, fan_out in layer_shapes(d, d_out, depth, hidden):
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
            block.append((Tensor(w, requires_grad=True), Tensor(np.zeros(fan_out, dtype), requires_grad=True)))
        layers.append(block)
    return EmbeddingParams(d, d_out, depth, hidden, seed, layers)


def embed(x: Tensor, params: EmbeddingParams, block: int = 0) -> Tensor:
    """Map block input features [..., N, d] to merge embeddings [..., N, d_out].

    The input is detached, so gradients from the merge path stop at the
    embedding parameters. Hidden layers use tanh.
    """
    z = ad.stop_gradient(x)
    stack = params.layers[block]
    for i, (w, b) in enumerate(stack):
        z = z @ w + b
        if i < len(stack) - 1:
            z = ad.tanh(z)
    return z
