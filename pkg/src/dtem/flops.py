"""Analytic multiply-accumulate counts for ViTs under uniform token reduction.

One multiply-accumulate counts as one FLOP. Norms, softmax, biases and
activations are ignored.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from .embedding import layer_shapes
from .vit import ViTConfig, count_trace


@dataclass(frozen=True)
class CostBreakdown:
    patch_embed: int
    attn_linear: tuple[int, ...]  # per block, qkv + output projection
    attn_quadratic: tuple[int, ...]  # per block, scores + weighted values
    mlp: tuple[int, ...]
    embedding: tuple[int, ...]
    head: int

    @property
    def total(self) -> int:
        return (self.patch_embed + self.head + sum(self.attn_linear) + sum(self.attn_quadratic)
                + sum(self.mlp) + sum(self.embedding))

    @property
    def gflops(self) -> float:
        return self.total / 1e9

    def embedding_fraction(self) -> float:
        return sum(self.embedding) / self.total


def vit_flops(config: ViTConfig, with_dtem_embedding: bool = False, r: int | None = None) -> CostBreakdown:
    """MAC count of one forward pass for a single image.

    Attention in block l sees N - r*l tokens and the MLP sees r fewer, since
    merging sits between them. The merge embedding is evaluated on the
    attention-side tokens and is only counted when some merging happens.
    """
    r = config.r if r is None else r
    d = config.dim
    attn_n, mlp_n = count_trace(config, r)
    patch_in = config.channels * config.patch * config.patch
    embed_macs = sum(i * o for i, o in layer_shapes(d, config.embed_dim, config.embed_depth, None))
    use_embed = with_dtem_embedding and r > 0
    return CostBreakdown(
        patch_embed=config.n_patches * patch_in * d,
        attn_linear=tuple(4 * n * d * d for n in attn_n),
        attn_quadratic=tuple(2 * n * n * d for n in attn_n),
        mlp=tuple(2 * config.mlp_ratio * n * d * d for n in mlp_n),
        embedding=tuple(n * embed_macs if use_embed else 0 for n in attn_n),
        head=d * config.classes,
    )


def sweep(config: ViTConfig, r_values, with_dtem_embedding: bool = True) -> list[tuple[int, float, float]]:
    """(r, GFLOPs, percent of the unreduced model) rows."""
    base = vit_flops(config, with_dtem_embedding, r=0).total
    rows = []
    for r in r_values:
        total = vit_flops(config, with_dtem_embedding, r=r).total
        rows.append((int(r), total / 1e9, 100.0 * total / base))
    return rows


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["r", "gflops", "pct_baseline"])
    for r, g, pct in rows:
        w.writerow([r, f"{g:.4f}", f"{pct:.2f}"])
    return buf.getvalue()
