"""Desk-scale training and evaluation on a synthetic quadrant task.

Three regimes share one minibatch loop:

* ``pretrain``: plain backbone training without merging.
* ``train_modular``: only the merge embeddings learn, through the soft
  merging path; the backbone is frozen.
* ``train_e2e``: one soft embedding step, then ``ratio`` backbone steps that
  use hard merging with the current embedding.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from . import embedding as emb
from .flops import vit_flops
from .vit import ToyViT

TRAIN_MODES = ("modular", "end-to-end-alternating")


class TrainingDiverged(RuntimeError):
    """A training step produced a non-finite value."""


# -- data ------------------------------------------------------------------
_PATTERN = np.array(
    [[0, 1, 0],
     [1, 1, 1],
     [0, 1, 0]], dtype=np.float64)


@dataclass
class SyntheticTask:
    """Four classes; class k has a bright plus sign somewhere in quadrant k.

    Pixel noise keeps background tokens mutually dissimilar. Optional solid
    2x2 distractor squares can be added. Each split has its own random
    stream.
    """

    seed: int = 0
    n_train: int = 1024
    n_val: int = 512
    n_test: int = 1024
    size: int = 16
    noise: float = 0.7
    amplitude: float = 2.0
    distractor: float = 1.5
    n_distractors: int = 0
    classes: int = 4
    splits: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.size % 2 or self.size < 8:
            raise ValueError("image size must be even and at least 8")
        # one stream per split, so resizing one split leaves the others unchanged
        for i, (name, count) in enumerate((("train", self.n_train), ("val", self.n_val), ("test", self.n_test))):
            self.splits[name] = self._generate(np.random.default_rng([self.seed, i]), count)

    def _generate(self, rng: np.random.Generator, count: int) -> tuple[np.ndarray, np.ndarray]:
        half = self.size // 2
        labels = np.arange(count) % self.classes
        rng.shuffle(labels)
        images = rng.normal(0.0, self.noise, (count, 1, self.size, self.size))
        span = half - _PATTERN.shape[0] + 1
        for i, k in enumerate(labels):
            qy, qx = divmod(int(k), 2)
            y = qy * half + rng.integers(span)
            x = qx * half + rng.integers(span)
            images[i, 0, y:y + 3, x:x + 3] += self.amplitude * _PATTERN
            for _ in range(self.n_distractors):
                dy, dx = rng.integers(self.size - 1, size=2)
                images[i, 0, dy:dy + 2, dx:dx + 2] += self.distractor
        return images, labels

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return self.splits[name]


# -- configuration -----------------------------------------------------------
@dataclass(frozen=True)
class TrainConfig:
    mode: str = "modular"
    lr_embedding: float = 1e-4
    lr_backbone: float = 1e-4
    epochs: int = 10
    batch_size: int = 32
    r_train: int = 8  # soft reduction rate for embedding updates
    r_backbone: int = 7  # hard reduction rate for backbone updates
    ratio: int = 9  # backbone steps per embedding step
    embed_stride: int = 1  # modular: update the embedding every k-th minibatch
    tau: float | None = None
    seed: int = 0
    dtype: str = "float64"
    eval_split: str = "val"
    eval_batch: int = 256
    keep_best: bool = False  # restore the parameters of the best validation epoch

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"mode must be one of {TRAIN_MODES}")
        if self.batch_size < 1 or self.epochs < 0 or self.ratio < 0 or self.embed_stride < 1:
            raise ValueError("batch_size, embed_stride >= 1 and epochs, ratio >= 0 required")
        np.dtype(self.dtype)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


# -- optimizer ---------------------------------------------------------------
class Adam:
    """Adaptive moment estimation without weight decay."""

    def __init__(self, params: list[ad.Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: dict[ad.Tensor, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = (p.data - self.lr * update).astype(p.data.dtype, copy=False)


# -- helpers -----------------------------------------------------------------
def param_hash(tensors) -> str:
    h = hashlib.sha256()
    for t in tensors:
        arr = np.ascontiguousarray(t.data)
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def cast_model(model: ToyViT, dtype) -> ToyViT:
    params = {k: ad.Tensor(v.data.astype(dtype), requires_grad=True) for k, v in model.params.items()}
    return ToyViT(model.config, params)


def cast_embedding(params: emb.EmbeddingParams, dtype) -> emb.EmbeddingParams:
    layers = [[(ad.Tensor(w.data.astype(dtype), requires_grad=True),
                ad.Tensor(b.data.astype(dtype), requires_grad=True)) for w, b in block]
              for block in params.layers]
    return dataclasses.replace(params, layers=layers)


def minibatches(n: int, batch_size: int, epochs: int, seed: int) -> Iterator[tuple[int, np.ndarray]]:
    """(epoch, indices) pairs; one seeded permutation per epoch, last partial batch kept."""
    rng = np.random.default_rng(seed)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield epoch, order[start:start + batch_size]


def evaluate(
    model: ToyViT,
    images: np.ndarray,
    labels: np.ndarray,
    embedding: emb.EmbeddingParams | None = None,
    merge_mode: str = "none",
    r: int | None = None,
    batch: int = 256,
) -> tuple[float, float]:
    """(accuracy, mean cross-entropy) without recording a tape."""
    flags = [p.requires_grad for p in model.parameters()]
    model.requires_grad_(False)
    eflags = None
    if embedding is not None:
        eflags = [p.requires_grad for p in embedding.parameters()]
        embedding.requires_grad_(False)
    correct, loss_sum = 0, 0.0
    try:
        for start in range(0, len(labels), batch):
            x, y = images[start:start + batch], labels[start:start + batch]
            logits, _ = model.forward(x, embedding, merge_mode, r)
            correct += int((logits.data.argmax(axis=1) == y).sum())
            loss_sum += ad.cross_entropy(logits, y).item() * len(y)
    finally:
        for p, f in zip(model.parameters(), flags):
            p.requires_grad = f
        if embedding is not None:
            for p, f in zip(embedding.parameters(), eflags):
                p.requires_grad = f
    n = max(len(labels), 1)
    return correct / n, loss_sum / n


@dataclass
class MetricsLog:
    rows: list[tuple[int, str, float, float]] = field(default_factory=list)
    best_epoch: int | None = None

    def add(self, epoch: int, split: str, acc: float, loss: float) -> None:
        self.rows.append((epoch, split, acc, loss))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "split", "acc", "loss"])
        for epoch, split, acc, loss in self.rows:
            w.writerow([epoch, split, f"{acc:.6f}", f"{loss:.6f}"])
        return buf.getvalue()

    def last(self, split: str) -> tuple[float, float]:
        for epoch, s, acc, loss in reversed(self.rows):
            if s == split:
                return acc, loss
        raise KeyError(split)


# -- the shared loop ---------------------------------------------------------
def step_roles(mode: str, n_steps: int, ratio: int = 9, embed_stride: int = 1) -> list[str]:
    """Per-minibatch role: 'embedding', 'backbone' or 'skip'.

    End-to-end runs cycles of one embedding step followed by ``ratio``
    backbone steps, one cycle entry per minibatch.
    """
    if mode == "modular":
        return ["embedding" if i % embed_stride == 0 else "skip" for i in range(n_steps)]
    if mode == "end-to-end-alternating":
        return ["embedding" if i % (ratio + 1) == 0 else "backbone" for i in range(n_steps)]
    if mode == "pretrain":
        return ["backbone"] * n_steps
    raise ValueError(f"unknown schedule {mode!r}")


def _schedule_loop(
    model: ToyViT,
    embedding: emb.EmbeddingParams | None,
    task: SyntheticTask,
    cfg: TrainConfig,
    schedule: str,
    backbone_mode: str,
    eval_mode: str,
    eval_r: int,
) -> MetricsLog:
    images, labels = task.split("train")
    val_x, val_y = task.split(cfg.eval_split)
    images = images.astype(cfg.np_dtype)
    val_x = val_x.astype(cfg.np_dtype)
    steps_per_epoch = -(-len(labels) // cfg.batch_size)
    roles = step_roles(schedule, steps_per_epoch * cfg.epochs, cfg.ratio, cfg.embed_stride)

    log = MetricsLog()
    acc, loss = evaluate(model, val_x, val_y, embedding, eval_mode, eval_r, cfg.eval_batch)
    log.add(0, cfg.eval_split, acc, loss)

    opt_bb = Adam(model.parameters(), cfg.lr_backbone)
    opt_emb = Adam(embedding.parameters(), cfg.lr_embedding) if embedding is not None else None
    running, correct, count = 0.0, 0, 0
    prev_epoch = 1
    # epoch 0 is the untrained starting point and never wins the selection
    tracked = _trainable(model, embedding, schedule)
    best = (-1.0, 0, None)
    last_loss = float("nan")
    for step, (epoch, idx) in enumerate(minibatches(len(labels), cfg.batch_size, cfg.epochs, cfg.seed)):
        if epoch != prev_epoch:
            acc = _log_epoch(log, prev_epoch, running, correct, count, model, embedding, val_x, val_y, cfg,
                             eval_mode, eval_r)
            if cfg.keep_best and acc > best[0]:
                best = (acc, prev_epoch, [t.data.copy() for t in tracked])
            running, correct, count, prev_epoch = 0.0, 0, 0, epoch
        role = roles[step]
        if role == "skip":
            continue
        x, y = images[idx], labels[idx]
        try:
            if role == "embedding":
                model.requires_grad_(False)
                embedding.requires_grad_(True)
                logits, _ = model.forward(x, embedding, "soft-decoupled", cfg.r_train, tau=cfg.tau)
                loss_t = ad.cross_entropy(logits, y)
                opt_emb.step(ad.backward(loss_t, wrt=embedding.parameters(), allow_unused=True))
            else:
                model.requires_grad_(True)
                if embedding is not None:
                    embedding.requires_grad_(False)
                logits, _ = model.forward(x, embedding, backbone_mode, cfg.r_backbone)
                loss_t = ad.cross_entropy(logits, y)
                opt_bb.step(ad.backward(loss_t, wrt=model.parameters(), allow_unused=True))
        except ad.NonFiniteError as exc:
            raise TrainingDiverged(
                f"non-finite value at step {step} (epoch {epoch}, role {role}): {exc}; "
                f"last finite loss {last_loss:.6g}, dtype {cfg.dtype}, tau {cfg.tau}, "
                f"lr_embedding {cfg.lr_embedding}, lr_backbone {cfg.lr_backbone}"
            ) from exc
        last_loss = loss_t.item()
        running += last_loss * len(y)
        correct += int((logits.data.argmax(axis=1) == y).sum())
        count += len(y)
    if cfg.epochs > 0:
        acc = _log_epoch(log, prev_epoch, running, correct, count, model, embedding, val_x, val_y, cfg,
                         eval_mode, eval_r)
        if cfg.keep_best and acc > best[0]:
            best = (acc, prev_epoch, [t.data.copy() for t in tracked])
    if cfg.keep_best and best[2] is not None:
        for t, data in zip(tracked, best[2]):
            t.data = data
        log.best_epoch = best[1]
    return log


def _run_schedule(model: ToyViT, embedding, *args) -> MetricsLog:
    try:
        return _schedule_loop(model, embedding, *args)
    finally:
        model.requires_grad_(True)
        if embedding is not None:
            embedding.requires_grad_(True)


def _log_epoch(log, epoch, running, correct, count, model, embedding, val_x, val_y, cfg, eval_mode, eval_r):
    # train rows average over the minibatches actually stepped, in their training mode
    if count:
        log.add(epoch, "train", correct / count, running / count)
    acc, loss = evaluate(model, val_x, val_y, embedding, eval_mode, eval_r, cfg.eval_batch)
    log.add(epoch, cfg.eval_split, acc, loss)
    return acc


def _trainable(model: ToyViT, embedding, schedule: str) -> list[ad.Tensor]:
    params = [] if schedule == "modular" else list(model.parameters())
    return params + (list(embedding.parameters()) if embedding is not None else [])


# -- public regimes ----------------------------------------------------------
def pretrain(model: ToyViT, task: SyntheticTask, cfg: TrainConfig) -> MetricsLog:
    """Train every backbone parameter with merging disabled."""
    return _run_schedule(model, None, task, cfg, "pretrain", "none", "none", 0)


def train_modular(
    model: ToyViT, embedding: emb.EmbeddingParams, task: SyntheticTask, cfg: TrainConfig
) -> tuple[emb.EmbeddingParams, MetricsLog]:
    """Update only ``embedding``; the backbone stays bitwise unchanged."""
    cfg = dataclasses.replace(cfg, mode="modular")
    before = param_hash(model.parameters())
    log = _run_schedule(model, embedding, task, cfg, "modular", "none", "hard-decoupled", cfg.r_train)
    if param_hash(model.parameters()) != before:
        raise AssertionError("backbone parameters changed during modular training")
    return embedding, log


def train_e2e(
    model: ToyViT, embedding: emb.EmbeddingParams, task: SyntheticTask, cfg: TrainConfig
) -> tuple[ToyViT, emb.EmbeddingParams, MetricsLog]:
    """Alternate soft embedding steps with hard-merging backbone steps."""
    cfg = dataclasses.replace(cfg, mode="end-to-end-alternating")
    log = _run_schedule(model, embedding, task, cfg, "end-to-end-alternating", "hard-decoupled",
                        "hard-decoupled", cfg.r_train)
    return model, embedding, log


def eval_sweep(
    model: ToyViT,
    embedding: emb.EmbeddingParams | None,
    images: np.ndarray,
    labels: np.ndarray,
    r_values,
    merge_mode: str = "hard-decoupled",
    batch: int = 256,
) -> list[tuple[int, float, float]]:
    """(r, accuracy, GFLOPs) per evaluation reduction rate."""
    cfg = model.config
    rows = []
    for r in r_values:
        r = int(r)
        if r * cfg.depth >= cfg.n_tokens:
            raise ValueError(f"r={r} leaves no tokens: r*L={r * cfg.depth} >= N={cfg.n_tokens}")
        mode = merge_mode if r > 0 else "none"
        acc, _ = evaluate(model, images, labels, embedding, mode, r, batch)
        gflops = vit_flops(cfg, with_dtem_embedding=mode.endswith("decoupled"), r=r).gflops
        rows.append((r, acc, gflops))
    return rows


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["r", "acc", "gflops"])
    for r, acc, g in rows:
        w.writerow([r, f"{acc:.6f}", f"{g:.6f}"])
    return buf.getvalue()


# -- paired trend trial ------------------------------------------------------
@dataclass
class TrialResult:
    seed: int
    plain_acc: float
    tome_acc: float
    modular_sweep: list[tuple[int, float, float]]
    e2e_acc: float
    lr_embedding: float | None = None

    @property
    def modular_acc(self) -> float:
        return self.modular_sweep[0][1]


def trend_trial(
    seed: int,
    pretrain_epochs: int = 20,
    epochs: int = 10,
    lr_pretrain: float = 1e-3,
    lr_grid=(1e-3, 1e-2),
    lr_backbone: float = 1e-4,
    r: int = 8,
    r_values=(8, 6, 4, 2),
    dtype: str = "float32",
    task: SyntheticTask | None = None,
) -> TrialResult:
    """Pretrain a toy backbone, then compare ToMe, modular and end-to-end runs.

    Every run keeps its best validation epoch. The embedding step size is
    picked from ``lr_grid`` by modular validation accuracy. End-to-end reuses
    that step size and the same epoch selection. Both start from the same
    backbone and embedding initialization and take the same number of
    minibatch steps. Test images are only used for the reported numbers.
    """
    from .vit import ViTConfig

    task = task or SyntheticTask(seed=seed)
    cfg = ViTConfig(r=r)
    dt = np.dtype(dtype)
    model = ToyViT.init(cfg, seed, dtype=dt)
    pretrain(model, task, TrainConfig(epochs=pretrain_epochs, lr_backbone=lr_pretrain, dtype=dtype, seed=seed,
                                      keep_best=True))
    tx, ty = task.split("test")
    tx = tx.astype(dt)
    plain, _ = evaluate(model, tx, ty)
    tome, _ = evaluate(model, tx, ty, None, "hard-keys", r)

    e_init = emb.init(seed, cfg.dim, cfg.embed_dim, cfg.embed_depth, n_blocks=cfg.depth, dtype=dt)
    best = None
    for lr in lr_grid:
        tcfg = TrainConfig(epochs=epochs, lr_embedding=lr, lr_backbone=lr_backbone, r_train=r,
                           dtype=dtype, seed=seed + 1000, keep_best=True)
        e_mod = cast_embedding(e_init, dt)
        _, log = train_modular(model, e_mod, task, tcfg)
        val = max(acc for _, split, acc, _ in log.rows[1:] if split == tcfg.eval_split)
        if best is None or val > best[0]:
            best = (val, tcfg, e_mod)
    _, tcfg, e_mod = best
    sweep = eval_sweep(model, e_mod, tx, ty, r_values)

    backbone = cast_model(model, dt)
    e_e2e = cast_embedding(e_init, dt)
    train_e2e(backbone, e_e2e, task, tcfg)
    e2e, _ = evaluate(backbone, tx, ty, e_e2e, "hard-decoupled", r)
    return TrialResult(seed, plain, tome, sweep, e2e, tcfg.lr_embedding)
