import dataclasses

import numpy as np
import pytest

from dtem import autodiff as ad
from dtem import embedding as emb
from dtem import train
from dtem.train import SyntheticTask, TrainConfig
from dtem.vit import ToyViT, ViTConfig

SMALL = dict(n_train=64, n_val=32, n_test=32)


@pytest.fixture(scope="module")
def small():
    task = SyntheticTask(seed=0, **SMALL)
    model = ToyViT.init(ViTConfig(), seed=0)
    train.pretrain(model, task, TrainConfig(epochs=1, lr_backbone=1e-3))
    return task, model


def fresh_embedding(cfg=ViTConfig(), seed=0):
    return emb.init(seed, cfg.dim, cfg.embed_dim, n_blocks=cfg.depth)


def snapshot(params):
    return [p.data.copy() for p in params]


# -- task ----------------------------------------------------------------------
def test_task_is_class_balanced_and_seeded():
    a, b = SyntheticTask(seed=3, **SMALL), SyntheticTask(seed=3, **SMALL)
    for split in ("train", "val", "test"):
        xa, ya = a.split(split)
        assert np.array_equal(xa, b.split(split)[0]) and np.array_equal(ya, b.split(split)[1])
        assert xa.shape[1:] == (1, 16, 16)
        assert np.bincount(ya, minlength=4).tolist() == [len(ya) // 4] * 4
    assert not np.array_equal(a.split("train")[0], SyntheticTask(seed=4, **SMALL).split("train")[0])


def test_pattern_sits_in_its_quadrant():
    task = SyntheticTask(seed=1, n_train=8, n_val=4, n_test=4, noise=0.0)
    x, y = task.split("train")
    for img, k in zip(x[:, 0], y):
        qy, qx = divmod(int(k), 2)
        quad = img[qy * 8:(qy + 1) * 8, qx * 8:(qx + 1) * 8]
        assert quad.sum() == pytest.approx(img.sum()) and quad.sum() == pytest.approx(10.0)


def test_rejects_bad_image_size():
    with pytest.raises(ValueError):
        SyntheticTask(size=7)


# -- schedules ------------------------------------------------------------------
def test_alternation_one_to_nine():
    roles = train.step_roles("end-to-end-alternating", 100, ratio=9)
    assert roles.count("embedding") == 10 and roles.count("backbone") == 90
    assert roles[:11] == ["embedding"] + ["backbone"] * 9 + ["embedding"]


def test_modular_stride():
    roles = train.step_roles("modular", 25, embed_stride=10)
    assert [i for i, r in enumerate(roles) if r == "embedding"] == [0, 10, 20]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mode="joint")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_minibatches_cover_each_epoch():
    batches = list(train.minibatches(10, 4, 2, seed=0))
    assert [len(i) for _, i in batches] == [4, 4, 2, 4, 4, 2]
    for epoch in (1, 2):
        idx = np.concatenate([i for e, i in batches if e == epoch])
        assert sorted(idx.tolist()) == list(range(10))


# -- modular training -----------------------------------------------------------
def test_zero_epochs_logs_only_initial_evaluation(small):
    task, model = small
    e = fresh_embedding()
    before = snapshot(e.parameters())
    _, log = train.train_modular(model, e, task, TrainConfig(epochs=0))
    assert [row[:2] for row in log.rows] == [(0, "val")]
    assert all(np.array_equal(a, p.data) for a, p in zip(before, e.parameters()))


def test_modular_leaves_backbone_bitwise_unchanged(small):
    task, model = small
    before = train.param_hash(model.parameters())
    e = fresh_embedding()
    start = snapshot(e.parameters())
    _, log = train.train_modular(model, e, task, TrainConfig(epochs=1, lr_embedding=1e-3))
    assert train.param_hash(model.parameters()) == before
    assert any(not np.array_equal(a, p.data) for a, p in zip(start, e.parameters()))
    assert [row[:2] for row in log.rows] == [(0, "val"), (1, "train"), (1, "val")]


def test_modular_is_reproducible(small):
    task, model = small
    runs = []
    for _ in range(2):
        e = fresh_embedding()
        _, log = train.train_modular(model, e, task, TrainConfig(epochs=1, lr_embedding=1e-3))
        runs.append((snapshot(e.parameters()), log.to_csv()))
    assert runs[0][1] == runs[1][1]
    assert all(np.array_equal(a, b) for a, b in zip(runs[0][0], runs[1][0]))


def test_keep_best_restores_selected_epoch(small):
    task, model = small
    e = fresh_embedding()
    cfg = TrainConfig(epochs=3, lr_embedding=1e-2, keep_best=True)
    _, log = train.train_modular(model, e, task, cfg)
    vals = [acc for epoch, split, acc, _ in log.rows if split == "val" and epoch > 0]
    assert log.best_epoch == 1 + int(np.argmax(vals))
    x, y = task.split("val")
    acc, _ = train.evaluate(model, x, y, e, "hard-decoupled", 8)
    assert acc == max(vals)


# -- end-to-end ---------------------------------------------------------------
def test_zero_backbone_rate_matches_thinned_modular(small):
    task, model = small
    e1, e2 = fresh_embedding(), fresh_embedding()
    base = dict(epochs=1, lr_embedding=1e-3, batch_size=8)
    m1 = train.cast_model(model, np.float64)
    train.train_e2e(m1, e1, task, TrainConfig(lr_backbone=0.0, ratio=9, **base))
    train.train_modular(model, e2, task, TrainConfig(embed_stride=10, **base))
    assert train.param_hash(m1.parameters()) == train.param_hash(model.parameters())
    assert all(np.array_equal(a.data, b.data) for a, b in zip(e1.parameters(), e2.parameters()))


def test_e2e_updates_both_sides(small):
    task, model = small
    m = train.cast_model(model, np.float64)
    e = fresh_embedding()
    before_m, before_e = train.param_hash(m.parameters()), train.param_hash(e.parameters())
    train.train_e2e(m, e, task, TrainConfig(epochs=1, lr_embedding=1e-3, lr_backbone=1e-4, batch_size=8))
    assert train.param_hash(m.parameters()) != before_m
    assert train.param_hash(e.parameters()) != before_e


def test_divergence_is_reported(small, monkeypatch):
    task, model = small
    real = ad.cross_entropy

    def poisoned(logits, labels):
        if logits.requires_grad:  # training steps only, not evaluation
            ad.Tensor([np.nan])
        return real(logits, labels)

    monkeypatch.setattr(train.ad, "cross_entropy", poisoned)
    with pytest.raises(train.TrainingDiverged, match="step 0"):
        train.train_modular(model, fresh_embedding(), task, TrainConfig(epochs=1))


# -- evaluation -----------------------------------------------------------------
def test_sweep_at_zero_reduction_equals_plain(small):
    task, model = small
    x, y = task.split("test")
    rows = train.eval_sweep(model, fresh_embedding(), x, y, [0, 8])
    assert rows[0][1] == train.evaluate(model, x, y)[0]
    assert rows[1][2] < rows[0][2]


def test_sweep_is_deterministic(small):
    task, model = small
    x, y = task.split("test")
    e = fresh_embedding()
    a = train.sweep_csv(train.eval_sweep(model, e, x, y, [8, 6, 4, 2]))
    assert a == train.sweep_csv(train.eval_sweep(model, e, x, y, [8, 6, 4, 2]))
    assert a.splitlines()[0] == "r,acc,gflops" and len(a.splitlines()) == 5


def test_sweep_rejects_exhausting_rate(small):
    task, model = small
    x, y = task.split("test")
    with pytest.raises(ValueError):
        train.eval_sweep(model, fresh_embedding(), x, y, [17])


def test_evaluate_restores_grad_flags(small):
    task, model = small
    x, y = task.split("test")
    train.evaluate(model, x, y)
    assert all(p.requires_grad for p in model.parameters())


def test_metrics_csv_format():
    log = train.MetricsLog()
    log.add(0, "val", 0.5, 1.25)
    log.add(1, "train", 0.75, 0.5)
    assert log.to_csv() == "epoch,split,acc,loss\n0,val,0.500000,1.250000\n1,train,0.750000,0.500000\n"
    assert log.last("val") == (0.5, 1.25)


def test_adam_first_step_moves_by_lr():
    p = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = train.Adam([p], lr=0.1)
    opt.step({p: np.array([3.0, -0.5])})
    assert np.allclose(p.data, [0.9, -1.9])


def test_float32_training_stays_float32(small):
    task, model = small
    m = train.cast_model(model, np.float32)
    e = train.cast_embedding(fresh_embedding(), np.float32)
    train.train_modular(m, e, task, TrainConfig(epochs=1, dtype="float32", lr_embedding=1e-3))
    assert all(p.data.dtype == np.float32 for p in e.parameters())


@pytest.mark.slow
def test_plain_backbone_clears_sanity_bar():
    task = SyntheticTask(seed=0)
    model = ToyViT.init(ViTConfig(), seed=0, dtype=np.float32)
    train.pretrain(model, task, TrainConfig(epochs=20, lr_backbone=1e-3, dtype="float32", keep_best=True))
    x, y = task.split("test")
    assert train.evaluate(model, x.astype(np.float32), y)[0] > 0.95


def test_trial_result_reports_training_rate():
    res = train.TrialResult(0, 0.9, 0.8, [(8, 0.85, 0.1)], 0.86, 1e-3)
    assert res.modular_acc == 0.85 and dataclasses.asdict(res)["lr_embedding"] == 1e-3
