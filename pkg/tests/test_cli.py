import io

import pytest

from dtem import cli, train
from dtem.cli import RunConfig


def run(argv):
    out = io.StringIO()
    code = cli.main(argv, out=out)
    return code, out.getvalue()


# -- configuration -------------------------------------------------------------
def test_config_round_trip():
    cfg = RunConfig(preset="deit-s", r=12, tau=0.25, prop_attn=False, r_values="16,12", dim=None)
    assert cli.parse_config(cli.serialize_config(cfg)) == cfg


def test_serialized_config_lists_every_key():
    keys = [line.split(" = ")[0] for line in cli.serialize_config(RunConfig()).splitlines()]
    assert keys == list(cli.KEYS)


def test_comments_and_blank_lines():
    cfg = cli.parse_config("# header\n\nseed = 4  # trailing\nprop_attn = FALSE\n")
    assert cfg.seed == 4 and cfg.prop_attn is False


def test_unknown_key_rejected():
    with pytest.raises(KeyError):
        cli.parse_config("temperature = 0.1\n")


def test_malformed_line_rejected():
    with pytest.raises(ValueError):
        cli.parse_config("seed 4\n")


def test_bad_bool_rejected():
    with pytest.raises(ValueError):
        cli.parse_value("prop_attn", "yes")


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["flops", "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for key in cli.KEYS:
        assert f"--{key}" in text, key


def test_flag_overrides_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 3\ntau = 0.5\n")
    args = cli.build_parser().parse_args(["flops", "--config", str(path), "--seed", "9"])
    cfg = cli.resolve(args)
    assert cfg.seed == 9 and cfg.tau == 0.5


def test_preset_geometry_overrides():
    vc = RunConfig(preset="deit-s", r=11).vit_config()
    assert vc.dim == 384 and vc.r == 11
    with pytest.raises(ValueError):
        RunConfig(preset="vit-h").vit_config()


def test_task_and_training_config_follow_keys():
    cfg = RunConfig(n_train=8, n_val=4, n_test=4, noise=0.3, ratio=4, train_mode="end-to-end-alternating")
    task = cfg.task()
    assert (task.n_train, task.noise) == (8, 0.3)
    tc = cfg.train_config()
    assert tc.mode == "end-to-end-alternating" and tc.ratio == 4


# -- commands and exit codes ------------------------------------------------------
def test_flops_command():
    code, text = run(["flops", "--preset", "deit-s"])
    assert code == cli.EXIT_OK
    rows = [line for line in text.splitlines() if line and not line.startswith("#")]
    assert rows[0] == "r,gflops,pct_baseline" and len(rows) == 8


def test_unknown_preset_is_usage_error():
    assert run(["flops", "--preset", "vit-h"])[0] == cli.EXIT_USAGE


def test_unknown_flag_exits_two():
    with pytest.raises(SystemExit) as exc:
        cli.main(["flops", "--temperature", "1"])
    assert exc.value.code == 2


def test_conformance_command_passes():
    code, text = run(["conformance"])
    assert code == cli.EXIT_OK and "FAIL" not in text


def test_conformance_failure_exits_one(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("case x\nr 1\nsim 1 2\n0.1 0.9\nmatching 0:0\nend\n")
    code, text = run(["conformance", "--vectors", str(bad)])
    assert code == cli.EXIT_FAIL and "FAIL x" in text


def test_gradcheck_runs_requested_suites():
    code, text = run(["gradcheck", "--instances", "3", "--seeds", "2"])
    assert code == cli.EXIT_OK
    assert [line.split()[1] for line in text.splitlines()] == ["1/2", "2/2"]


def test_gradcheck_32bit_precision_exit():
    code, text = run(["gradcheck", "--instances", "2", "--dtype", "float32", "--tau", "1e-5"])
    assert code == cli.EXIT_PRECISION and "64-bit" in text


def test_divergence_exit(monkeypatch, tmp_path):
    def boom(*args, **kwargs):
        raise train.TrainingDiverged("non-finite loss")

    monkeypatch.setattr(train, "pretrain", boom)
    code, _ = run(["train", "--train_mode", "pretrain", "--out", str(tmp_path / "m.ckpt")])
    assert code == cli.EXIT_DIVERGED


def test_missing_checkpoint_is_usage_error():
    assert run(["eval"])[0] == cli.EXIT_USAGE


def test_train_eval_sweep_round(tmp_path):
    small = ["--n_train", "32", "--n_val", "16", "--n_test", "16", "--epochs", "1"]
    ckpt, emb_ckpt = tmp_path / "m.ckpt", tmp_path / "e.ckpt"
    code, text = run(["train", "--train_mode", "pretrain", "--out", str(ckpt), *small])
    assert code == 0 and text.startswith("epoch,split,acc,loss")
    metrics = tmp_path / "metrics.csv"
    code, _ = run(["train", "--checkpoint", str(ckpt), "--out", str(emb_ckpt), "--metrics", str(metrics), *small])
    assert code == 0 and metrics.read_text().startswith("epoch,split,acc,loss")
    code, text = run(["eval", "--checkpoint", str(emb_ckpt), "--r", "4", *small])
    assert code == 0 and text.splitlines()[1].startswith("hard-decoupled,4,")
    code, text = run(["sweep", "--checkpoint", str(emb_ckpt), *small])
    assert code == 0 and [line.split(",")[0] for line in text.splitlines()] == ["r", "8", "6", "4", "2"]


def test_visualize_rejects_soft_mode():
    assert run(["visualize", "--merge_mode", "soft-decoupled"])[0] == cli.EXIT_USAGE
