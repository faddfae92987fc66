"""Command-line entry point.

Every subcommand reads the same flat ``key = value`` run configuration.
Values come from the dataclass defaults, then ``--config FILE``, then
``--<key> VALUE`` flags. Unknown keys are an error.

Exit codes: 0 success, 1 a check failed, 2 bad usage or configuration,
3 the result needs 64-bit precision, 4 training diverged.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import conformance, flops, gradsuite, train, visualize
from . import embedding as emb
from .merge import PrecisionError
from .vit import MERGE_MODES, PRESETS, ToyViT, ViTConfig

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_PRECISION, EXIT_DIVERGED = 0, 1, 2, 3, 4

GEOMETRY = ("grid", "patch", "channels", "dim", "heads", "depth", "mlp_ratio", "classes", "r",
            "embed_dim", "embed_depth")

SWEEP_R = {
    "toy": (8, 6, 4, 2),
    "deit-t": (16, 15, 14, 13, 12, 11),
    "deit-s": (16, 15, 14, 13, 12, 11),
    "deit-b": (16, 15, 14, 13, 12, 11),
    "mae-l": (8,),
}


def _key(default, help_text: str):
    return field(default=default, metadata={"help": help_text})


@dataclass
class RunConfig:
    preset: str = _key("toy", f"model geometry preset: {', '.join(PRESETS)}")
    grid: int | None = _key(None, "patches per image side (default: preset)")
    patch: int | None = _key(None, "pixels per patch side (default: preset)")
    channels: int | None = _key(None, "image channels (default: preset)")
    dim: int | None = _key(None, "embedding width d (default: preset)")
    heads: int | None = _key(None, "attention heads (default: preset)")
    depth: int | None = _key(None, "transformer blocks L (default: preset)")
    mlp_ratio: int | None = _key(None, "MLP hidden width / d (default: preset)")
    classes: int | None = _key(None, "output classes (default: preset)")
    r: int | None = _key(None, "tokens merged per block (default: preset)")
    embed_dim: int | None = _key(None, "merge embedding width d' (default: preset)")
    embed_depth: int | None = _key(None, "hidden layers in the merge embedding (default: preset)")
    merge_mode: str = _key("hard-decoupled", f"merge mode: {', '.join(MERGE_MODES)}")
    tau: float = _key(0.1, "soft grouping temperature")
    sim_scale: float = _key(0.1, "similarity is divided by this factor")
    prop_attn: bool = _key(True, "add log effective size to attention logits (true/false)")
    seed: int = _key(0, "base random seed")
    seeds: int = _key(1, "repetitions (gradcheck suites, consecutive seeds)")
    dtype: str = _key("float64", "float64 or float32")
    train_mode: str = _key("modular", "pretrain, modular or end-to-end-alternating")
    epochs: int = _key(10, "training epochs")
    batch_size: int = _key(32, "minibatch size")
    lr_pretrain: float = _key(1e-3, "backbone step size for pretraining")
    lr_embedding: float = _key(1e-4, "embedding step size")
    lr_backbone: float = _key(1e-4, "backbone step size in end-to-end training")
    r_train: int = _key(8, "soft reduction rate for embedding updates")
    r_backbone: int = _key(7, "hard reduction rate for end-to-end backbone updates")
    ratio: int = _key(9, "backbone steps per embedding step (end-to-end)")
    n_train: int = _key(1024, "synthetic training images")
    n_val: int = _key(512, "synthetic validation images")
    n_test: int = _key(1024, "synthetic test images")
    noise: float = _key(0.7, "synthetic pixel noise std")
    r_values: str = _key("", "comma-separated reduction rates for sweeps (default: preset)")
    instances: int = _key(120, "random instances per gradient suite")
    tol: float = _key(1e-4, "gradient suite relative-error bound")
    checkpoint: str = _key("", "input checkpoint path")
    out: str = _key("", "output path (checkpoint, CSV or pixmap)")
    metrics: str = _key("", "metrics CSV path")
    vectors: str = _key("", "conformance vector file (default: bundled)")
    image_index: int = _key(0, "test image to visualize")
    cell: int = _key(8, "pixmap pixels per patch side")

    # -- conversion --------------------------------------------------------
    def vit_config(self) -> ViTConfig:
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {', '.join(PRESETS)}")
        changes = {k: getattr(self, k) for k in GEOMETRY if getattr(self, k) is not None}
        changes.update(merge_mode=self.merge_mode, tau=self.tau, sim_scale=self.sim_scale,
                       prop_attn=self.prop_attn)
        return PRESETS[self.preset].replace(**changes)

    def sweep_r(self) -> list[int]:
        if self.r_values:
            return [int(v) for v in self.r_values.split(",") if v.strip()]
        return list(SWEEP_R.get(self.preset, (self.vit_config().r,)))

    def task(self) -> train.SyntheticTask:
        return train.SyntheticTask(seed=self.seed, n_train=self.n_train, n_val=self.n_val,
                                   n_test=self.n_test, noise=self.noise)

    def train_config(self) -> train.TrainConfig:
        mode = "modular" if self.train_mode == "pretrain" else self.train_mode
        return train.TrainConfig(mode=mode, lr_embedding=self.lr_embedding, lr_backbone=self.lr_backbone,
                                 epochs=self.epochs, batch_size=self.batch_size, r_train=self.r_train,
                                 r_backbone=self.r_backbone, ratio=self.ratio, tau=self.tau,
                                 seed=self.seed, dtype=self.dtype)


_TYPES = typing.get_type_hints(RunConfig)
KEYS = tuple(f.name for f in dataclasses.fields(RunConfig))


def _base_type(name: str):
    tp = _TYPES[name]
    args = [a for a in typing.get_args(tp) if a is not type(None)]
    return args[0] if args else tp


def _optional(name: str) -> bool:
    return type(None) in typing.get_args(_TYPES[name])


def parse_value(name: str, text: str):
    if name not in KEYS:
        raise KeyError(f"unknown config key {name!r}")
    text = text.strip()
    if text == "" and _optional(name):
        return None
    tp = _base_type(name)
    if tp is bool:
        low = text.lower()
        if low not in ("true", "false"):
            raise ValueError(f"{name}: expected true or false, got {text!r}")
        return low == "true"
    return tp(text)


def format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in KEYS:
            raise KeyError(f"line {lineno}: unknown config key {key!r}")
        values[key] = parse_value(key, value)
    return dataclasses.replace(base or RunConfig(), **values)


def serialize_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {format_value(getattr(cfg, k))}\n" for k in KEYS)


# -- commands ----------------------------------------------------------------
def cmd_gradcheck(cfg: RunConfig, out) -> int:
    status = EXIT_OK
    for rep in range(cfg.seeds):
        seed = cfg.seed + rep
        report = gradsuite.run_suite(cfg.instances, seed)
        ok = report.passed(cfg.tol)
        errs = " ".join(f"{p}={report.max_err[p]:.3e}" for p in gradsuite.PIPELINES)
        print(f"suite {rep + 1}/{cfg.seeds} seed={seed} instances={report.instances} {errs} "
              f"max_rowsum={report.max_rowsum:.15f} {'PASS' if ok else 'FAIL'}", file=out)
        if not ok:
            status = EXIT_FAIL
    if np.dtype(cfg.dtype) == np.float32:
        try:
            worst = gradsuite.check_32bit(min(cfg.instances, 20), cfg.seed, cfg.tau)
        except PrecisionError as exc:
            print(f"32-bit check at tau={cfg.tau}: {exc}", file=out)
            return EXIT_PRECISION
        print(f"32-bit check at tau={cfg.tau}: max rel-err vs 64-bit {worst:.3e} PASS", file=out)
    return status


def cmd_conformance(cfg: RunConfig, out, generate: bool = False) -> int:
    if generate:
        text = conformance.serialize(conformance.generate(cfg.seed))
        if cfg.out:
            Path(cfg.out).write_text(text)
        else:
            out.write(text)
        return EXIT_OK
    cases = conformance.load(cfg.vectors) if cfg.vectors else conformance.default_vectors()
    results = conformance.run(cases)
    for res in results:
        print(f"{'PASS' if res.ok else 'FAIL'} {res.name}: {res.detail}", file=out)
    failed = sum(not r.ok for r in results)
    print(f"{len(results) - failed}/{len(results)} cases passed", file=out)
    return EXIT_FAIL if failed else EXIT_OK


def cmd_flops(cfg: RunConfig, out) -> int:
    vc = cfg.vit_config()
    with_embed = vc.merge_mode.endswith("decoupled")
    rows = flops.sweep(vc, [0] + [r for r in cfg.sweep_r() if r != 0], with_embed)
    text = flops.sweep_csv(rows)
    if cfg.out:
        Path(cfg.out).write_text(text)
    out.write(text)
    print(f"# {cfg.preset}: d={vc.dim} L={vc.depth} N={vc.n_tokens} embedding={'on' if with_embed else 'off'}",
          file=out)
    print(f"# {'r':>4} {'GFLOPs':>10} {'% base':>8}", file=out)
    for r, g, pct in rows:
        print(f"# {r:>4} {g:>10.3f} {pct:>8.2f}", file=out)
    return EXIT_OK


def _write_metrics(cfg: RunConfig, log: train.MetricsLog) -> None:
    if cfg.metrics:
        Path(cfg.metrics).write_text(log.to_csv())


def _load(cfg: RunConfig):
    dt = np.dtype(cfg.dtype)
    if not cfg.checkpoint:
        raise ValueError("this command needs --checkpoint")
    return ToyViT.load(cfg.checkpoint, dtype=dt)


def cmd_train(cfg: RunConfig, out) -> int:
    if not cfg.out:
        raise ValueError("train needs --out for the checkpoint")
    dt = np.dtype(cfg.dtype)
    task = cfg.task()
    if cfg.train_mode == "pretrain":
        model = ToyViT.init(cfg.vit_config(), cfg.seed, dtype=dt)
        tcfg = dataclasses.replace(cfg.train_config(), lr_backbone=cfg.lr_pretrain)
        log = train.pretrain(model, task, tcfg)
        model.save(cfg.out, seed=cfg.seed)
    else:
        model, embedding = _load(cfg)
        if embedding is None:
            vc = model.config
            embedding = emb.init(cfg.seed, vc.dim, vc.embed_dim, vc.embed_depth, n_blocks=vc.depth, dtype=dt)
        tcfg = cfg.train_config()
        if cfg.train_mode == "modular":
            _, log = train.train_modular(model, embedding, task, tcfg)
        elif cfg.train_mode == "end-to-end-alternating":
            _, _, log = train.train_e2e(model, embedding, task, tcfg)
        else:
            raise ValueError(f"unknown train_mode {cfg.train_mode!r}")
        model.save(cfg.out, embedding, seed=cfg.seed)
    _write_metrics(cfg, log)
    out.write(log.to_csv())
    return EXIT_OK


def cmd_eval(cfg: RunConfig, out) -> int:
    model, embedding = _load(cfg)
    x, y = cfg.task().split("test")
    r = cfg.r if cfg.r is not None else model.config.r
    acc, loss = train.evaluate(model, x.astype(np.dtype(cfg.dtype)), y, embedding, cfg.merge_mode, r)
    print("merge_mode,r,acc,loss", file=out)
    print(f"{cfg.merge_mode},{r},{acc:.6f},{loss:.6f}", file=out)
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, out) -> int:
    model, embedding = _load(cfg)
    x, y = cfg.task().split("test")
    rows = train.eval_sweep(model, embedding, x.astype(np.dtype(cfg.dtype)), y, cfg.sweep_r(), cfg.merge_mode)
    text = train.sweep_csv(rows)
    if cfg.out:
        Path(cfg.out).write_text(text)
    out.write(text)
    return EXIT_OK


def cmd_visualize(cfg: RunConfig, out) -> int:
    if cfg.merge_mode == "soft-decoupled":
        raise ValueError("soft merging has no discrete groups to render; use a hard merge mode")
    dt = np.dtype(cfg.dtype)
    if cfg.checkpoint:
        model, embedding = ToyViT.load(cfg.checkpoint, dtype=dt)
    else:
        vc = cfg.vit_config()
        model = ToyViT.init(vc, cfg.seed, dtype=dt)
        embedding = emb.init(cfg.seed, vc.dim, vc.embed_dim, vc.embed_depth, n_blocks=vc.depth, dtype=dt)
    vc = model.config
    x, _ = cfg.task().split("test")
    image = x[cfg.image_index:cfg.image_index + 1]
    if image.shape[-1] != vc.image_size or image.shape[1] != vc.channels:
        raise ValueError(f"visualize needs {vc.channels}x{vc.image_size}x{vc.image_size} inputs")
    r = cfg.r if cfg.r is not None else vc.r
    _, trace = model.forward(image.astype(dt), embedding, cfg.merge_mode, r, trace=True)
    data = visualize.render_ppm(trace.assignment[0], vc.grid, cell=cfg.cell)
    if cfg.out:
        Path(cfg.out).write_bytes(data)
    else:
        out.write(data.decode("ascii"))
    print(f"groups={trace.n_groups()[0]} tokens={vc.n_tokens} r={r if cfg.merge_mode != 'none' else 0} "
          f"depth={vc.depth}", file=sys.stderr)
    return EXIT_OK


COMMANDS = {
    "gradcheck": (cmd_gradcheck, "finite-difference suite over the merging composites"),
    "conformance": (cmd_conformance, "check grouping operators against conformance vectors"),
    "flops": (cmd_flops, "analytic GFLOPs table for a preset across reduction rates"),
    "train": (cmd_train, "pretrain a backbone or train merge embeddings"),
    "eval": (cmd_eval, "test accuracy of a checkpoint at one reduction rate"),
    "sweep": (cmd_sweep, "accuracy and GFLOPs across reduction rates"),
    "visualize": (cmd_visualize, "render merge groups of one image as a P3 pixmap"),
}


def build_parser() -> argparse.ArgumentParser:
    keys = argparse.ArgumentParser(add_help=False)
    group = keys.add_argument_group("configuration keys (also valid in --config files)")
    group.add_argument("--config", help="key = value configuration file")
    for f in dataclasses.fields(RunConfig):
        shown = format_value(f.default) or "unset"
        group.add_argument(f"--{f.name}", default=argparse.SUPPRESS, metavar="VALUE",
                           help=f"{f.metadata['help']} [{shown}]")
    parser = argparse.ArgumentParser(prog="dtem", description="Decoupled token embedding for merging.",
                                     parents=[keys])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, parents=[keys])
        if name == "conformance":
            p.add_argument("--generate", action="store_true", help="write freshly generated vectors")
    return parser


def resolve(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = parse_config(Path(args.config).read_text(), cfg)
    overrides = {k: parse_value(k, str(getattr(args, k))) for k in KEYS if hasattr(args, k)}
    return dataclasses.replace(cfg, **overrides)


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args)
        fn = COMMANDS[args.command][0]
        if args.command == "conformance":
            return fn(cfg, out, generate=args.generate)
        return fn(cfg, out)
    except PrecisionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECISION
    except train.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (KeyError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
