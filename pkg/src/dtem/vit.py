"""A small pre-norm ViT classifier with token merging between attention and MLP."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint
from . import embedding as emb
from . import merge as mg
from .autodiff import Tensor

MERGE_MODES = ("none", "hard-keys", "hard-decoupled", "soft-decoupled")


@dataclass(frozen=True)
class ViTConfig:
    grid: int = 8  # patches per side
    patch: int = 2  # pixels per patch side
    channels: int = 1
    dim: int = 32
    heads: int = 2
    depth: int = 4
    mlp_ratio: int = 4
    classes: int = 4
    r: int = 8
    merge_mode: str = "none"
    tau: float = 0.1
    sim_scale: float = 0.1
    embed_dim: int = 8
    embed_depth: int = 0
    prop_attn: bool = True

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim={self.dim} not divisible by heads={self.heads}")
        if self.merge_mode not in MERGE_MODES:
            raise ValueError(f"merge_mode must be one of {MERGE_MODES}")
        if self.r < 0:
            raise ValueError("r must be non-negative")
        if self.r * self.depth >= self.n_tokens:
            raise ValueError(f"r*depth={self.r * self.depth} leaves no tokens (N={self.n_tokens})")

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def n_tokens(self) -> int:
        return self.n_patches + 1

    @property
    def image_size(self) -> int:
        return self.grid * self.patch

    def replace(self, **changes) -> "ViTConfig":
        return dataclasses.replace(self, **changes)


PRESETS = {
    "toy": ViTConfig(),
    "deit-t": ViTConfig(grid=14, patch=16, channels=3, dim=192, heads=3, depth=12,
                        classes=1000, r=16, embed_dim=64),
    "deit-s": ViTConfig(grid=14, patch=16, channels=3, dim=384, heads=6, depth=12,
                        classes=1000, r=16, embed_dim=64),
    "deit-b": ViTConfig(grid=14, patch=16, channels=3, dim=768, heads=12, depth=12,
                        classes=1000, r=16, embed_dim=64),
    "mae-l": ViTConfig(grid=14, patch=16, channels=3, dim=1024, heads=16, depth=24,
                       classes=1000, r=8, embed_dim=128),
}


def count_trace(config: ViTConfig, r: int | None = None) -> tuple[list[int], list[int]]:
    """Token counts seen by attention and by the MLP of each block."""
    r = config.r if r is None else r
    n = config.n_tokens
    if r * config.depth >= n:
        raise ValueError(f"r*depth={r * config.depth} >= N={n}")
    attn = [n - r * l for l in range(config.depth)]
    mlp = [n - r * (l + 1) for l in range(config.depth)]
    return attn, mlp


def param_count(config: ViTConfig) -> int:
    """Backbone parameter count without allocating the model."""
    d, hidden = config.dim, config.dim * config.mlp_ratio
    per_block = 4 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * hidden + hidden) + (hidden * d + d)
    return (
        config.channels * config.patch**2 * d + d  # patch embedding
        + d  # class token
        + config.n_tokens * d  # position embedding
        + config.depth * per_block
        + 2 * d  # final norm
        + d * config.classes + config.classes
    )


@dataclass
class ForwardTrace:
    attn_counts: list[int] = field(default_factory=list)
    mlp_counts: list[int] = field(default_factory=list)
    matchings: list[tuple[mg.BipartitePartition, mg.HardMatching]] = field(default_factory=list)
    adjacencies: list[np.ndarray] = field(default_factory=list)
    similarities: list[np.ndarray] = field(default_factory=list)  # S per block, before /tau
    assignment: np.ndarray | None = None  # [B, N] input token -> final token

    def n_groups(self) -> list[int]:
        if self.assignment is None:
            raise ValueError("soft forward passes have no discrete groups")
        return [len(np.unique(row)) for row in self.assignment]


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """[B, C, H, W] -> [B, (H/p)*(W/p), C*p*p], patches in row-major order."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[:, None]
    b, c, h, w = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(b, c, gh, patch, gw, patch)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, c * patch * patch)


def sincos_position(grid: int, d: int) -> np.ndarray:
    """2-D sine/cosine table [1 + grid*grid, d]; the class-token row is zero.

    Used to initialize the learnable position embedding. Small random
    initializations left the toy model unable to localize patterns.
    """
    q = d // 4
    omega = 1.0 / 100.0 ** (np.arange(q) / max(q, 1))
    ys, xs = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    ys, xs = ys.reshape(-1, 1) * omega, xs.reshape(-1, 1) * omega
    table = np.concatenate([np.sin(ys), np.cos(ys), np.sin(xs), np.cos(xs)], axis=1)
    table = np.pad(table, ((0, 0), (0, d - table.shape[1])))
    return np.concatenate([np.zeros((1, d)), table], axis=0)


class ToyViT:
    def __init__(self, config: ViTConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ViTConfig, seed: int = 0, dtype=np.float64) -> "ToyViT":
        rng = np.random.default_rng(seed)
        d, c = config.dim, config.channels
        hidden = d * config.mlp_ratio

        def dense(name, fan_in, fan_out):
            bound = 1.0 / np.sqrt(fan_in)
            params[f"{name}.weight"] = rng.uniform(-bound, bound, (fan_in, fan_out))
            params[f"{name}.bias"] = np.zeros(fan_out)

        params: dict[str, np.ndarray] = {}
        dense("patch_embed", c * config.patch**2, d)
        params["cls_token"] = rng.normal(0.0, 0.02, (1, 1, d))
        params["pos_embed"] = sincos_position(config.grid, d)
        for l in range(config.depth):
            for ln in ("norm1", "norm2"):
                params[f"blocks.{l}.{ln}.weight"] = np.ones(d)
                params[f"blocks.{l}.{ln}.bias"] = np.zeros(d)
            dense(f"blocks.{l}.qkv", d, 3 * d)
            dense(f"blocks.{l}.proj", d, d)
            dense(f"blocks.{l}.fc1", d, hidden)
            dense(f"blocks.{l}.fc2", hidden, d)
        params["norm.weight"] = np.ones(d)
        params["norm.bias"] = np.zeros(d)
        dense("head", d, config.classes)
        tensors = {k: Tensor(v.astype(dtype), requires_grad=True) for k, v in params.items()}
        return cls(config, tensors)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def requires_grad_(self, flag: bool) -> "ToyViT":
        for p in self.params.values():
            p.requires_grad = flag
        return self

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    # -- forward ----------------------------------------------------------
    def _linear(self, x: Tensor, name: str) -> Tensor:
        return x @ self.params[f"{name}.weight"] + self.params[f"{name}.bias"]

    def _attention(self, h: Tensor, l: int, sizes: Tensor, excluded: np.ndarray, prop_attn: bool):
        b, n, d = h.shape
        heads = self.config.heads
        dh = d // heads
        qkv = self._linear(h, f"blocks.{l}.qkv")

        def split(i):
            part = qkv[:, :, i * d:(i + 1) * d]
            return ad.swapaxes(ad.reshape(part, (b, n, heads, dh)), 1, 2)

        q, k, v = split(0), split(1), split(2)
        scores = (q @ ad.swapaxes(k, -1, -2)) * (dh**-0.5)
        bias, allowed = mg.proportional_bias(sizes, excluded)
        if prop_attn:
            scores = scores + ad.reshape(bias, (b, 1, 1, n))
        attn = ad.softmax(scores, axis=-1, mask=allowed[:, None, None, :])
        out = ad.reshape(ad.swapaxes(attn @ v, 1, 2), (b, n, d))
        return self._linear(out, f"blocks.{l}.proj"), ad.mean(k, axis=1)

    def forward(
        self,
        images,
        embedding: emb.EmbeddingParams | None = None,
        merge_mode: str | None = None,
        r: int | None = None,
        trace: bool = False,
        tau: float | None = None,
    ) -> tuple[Tensor, ForwardTrace | None]:
        """Class logits [B, classes]; optionally a :class:`ForwardTrace`.

        ``merge_mode``, ``r`` and ``tau`` default to the config values.
        """
        cfg = self.config
        mode = cfg.merge_mode if merge_mode is None else merge_mode
        r = cfg.r if r is None else r
        tau = cfg.tau if tau is None else tau
        if mode not in MERGE_MODES:
            raise ValueError(f"unknown merge mode {mode!r}")
        if mode in ("hard-decoupled", "soft-decoupled") and embedding is None and r > 0:
            raise ValueError(f"merge mode {mode!r} needs an embedding")
        if mode == "none":
            r = 0
        dtype = self.params["pos_embed"].dtype

        patches = Tensor(patchify(images, cfg.patch).astype(dtype))
        b = patches.shape[0]
        x = self._linear(patches, "patch_embed")
        cls = self.params["cls_token"] + np.zeros((b, 1, cfg.dim), dtype=dtype)
        x = ad.concat([cls, x], axis=1) + self.params["pos_embed"]

        n = cfg.n_tokens
        protected = np.zeros((b, n), dtype=bool)
        protected[:, 0] = True
        state = mg.TokenState(x, Tensor(np.ones((b, n), dtype=dtype)), np.zeros((b, n), bool), protected)
        tr = ForwardTrace() if trace else None
        assignment = np.tile(np.arange(n), (b, 1))
        soft = mode == "soft-decoupled"

        for l in range(cfg.depth):
            p = self.params
            x_in = state.features
            h = ad.layer_norm(state.features, p[f"blocks.{l}.norm1.weight"], p[f"blocks.{l}.norm1.bias"])
            attn_out, keys = self._attention(h, l, state.sizes, state.excluded, cfg.prop_attn)
            state = dataclasses.replace(state, features=state.features + attn_out)
            if tr is not None:
                tr.attn_counts.append(int((~state.excluded[0]).sum()))

            if r > 0:
                if mode == "hard-keys":
                    metric, scale = ad.stop_gradient(keys), 1.0
                else:
                    # the residual stream keeps token magnitude, which layer norm removes
                    metric, scale = emb.embed(x_in, embedding, l), cfg.sim_scale
                part = mg.partition(state, r)
                za, zb = mg.split_tokens(metric, part)
                sim = mg.similarity(za, zb, pre_scale=scale)
                if tr is not None:
                    tr.similarities.append(sim.values.data.copy())
                if soft:
                    adj = mg.soft_group(sim, r, tau)
                    state = mg.soft_merge(state, part, adj)
                    state = mg.exclude_minimum(state, r)
                    if tr is not None:
                        tr.adjacencies.append(adj.values.data.copy())
                else:
                    match = mg.hard_group(sim, r)
                    _, step_assign = mg.merge_assignment(state.n_tokens, part, match)
                    assignment = np.take_along_axis(step_assign, assignment, axis=1)
                    state = mg.hard_merge(state, part, match)
                    if tr is not None:
                        tr.matchings.append((part, match))
            if tr is not None:
                tr.mlp_counts.append(int((~state.excluded[0]).sum()))

            h2 = ad.layer_norm(state.features, p[f"blocks.{l}.norm2.weight"], p[f"blocks.{l}.norm2.bias"])
            mlp = self._linear(ad.gelu(self._linear(h2, f"blocks.{l}.fc1")), f"blocks.{l}.fc2")
            state = dataclasses.replace(state, features=state.features + mlp)

        out = ad.layer_norm(state.features, self.params["norm.weight"], self.params["norm.bias"])
        logits = self._linear(out[:, 0, :], "head")
        if tr is not None and not soft:
            tr.assignment = assignment
        return logits, tr

    # -- persistence ---------------------------------------------------------
    def save(self, path, embedding: emb.EmbeddingParams | None = None, seed: int = 0) -> None:
        meta = {k: _token(v) for k, v in dataclasses.asdict(self.config).items()}
        meta["seed"] = seed
        tensors = {k: v.data for k, v in self.params.items()}
        if embedding is not None:
            meta.update({f"embedding.{k}": _token(v) for k, v in _embedding_meta(embedding).items()})
            tensors.update({f"embedding.{k}": v.data for k, v in embedding.named_parameters().items()})
        checkpoint.save(path, "vit", meta, tensors)

    @classmethod
    def load(cls, path, dtype=np.float64) -> tuple["ToyViT", emb.EmbeddingParams | None]:
        kind, meta, tensors = checkpoint.load(path)
        if kind != "vit":
            raise ValueError(f"{path}: expected a vit checkpoint, found {kind!r}")
        fields = {f.name: f.type for f in dataclasses.fields(ViTConfig)}
        config = ViTConfig(**{k: _parse(meta[k], fields[k]) for k in fields if k in meta})
        params = {
            k: Tensor(v.astype(dtype), requires_grad=True)
            for k, v in tensors.items()
            if not k.startswith("embedding.")
        }
        embedding = None
        if "embedding.d" in meta:
            sub = {k[len("embedding."):]: v for k, v in meta.items() if k.startswith("embedding.")}
            arrays = {k[len("embedding."):]: v for k, v in tensors.items() if k.startswith("embedding.")}
            embedding = _embedding_from(sub, arrays, dtype)
        return cls(config, params), embedding


def _token(value) -> str:
    return str(value)


def _parse(text: str, type_name) -> object:
    name = type_name if isinstance(type_name, str) else type_name.__name__
    if name == "bool":
        return text == "True"
    if name == "int":
        return int(text)
    if name == "float":
        return float(text)
    return text


def _embedding_meta(e: emb.EmbeddingParams) -> dict[str, object]:
    return {
        "d": e.d,
        "d_out": e.d_out,
        "depth": e.depth,
        "hidden": e.hidden if e.hidden is not None else "none",
        "seed": e.seed,
        "n_blocks": e.n_blocks,
    }


def _embedding_from(meta: dict[str, str], arrays: dict[str, np.ndarray], dtype) -> emb.EmbeddingParams:
    hidden = None if meta["hidden"] == "none" else int(meta["hidden"])
    params = emb.init(0, int(meta["d"]), int(meta["d_out"]), int(meta["depth"]), hidden,
                      int(meta["n_blocks"]), dtype)
    params.seed = int(meta["seed"])
    for name, t in params.named_parameters().items():
        t.data = arrays[name].astype(dtype)
    return params


def save_embedding(path, params: emb.EmbeddingParams) -> None:
    checkpoint.save(path, "embedding", _embedding_meta(params),
                    {k: v.data for k, v in params.named_parameters().items()})


def load_embedding(path, dtype=np.float64) -> emb.EmbeddingParams:
    kind, meta, tensors = checkpoint.load(path)
    if kind != "embedding":
        raise ValueError(f"{path}: expected an embedding checkpoint, found {kind!r}")
    return _embedding_from(meta, tensors, dtype)
