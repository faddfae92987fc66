import numpy as np
import pytest

from dtem import autodiff as ad
from dtem import embedding as emb
from dtem import vit
from dtem.autodiff import Tensor
from dtem.vit import PRESETS, ToyViT, ViTConfig


@pytest.fixture(scope="module")
def toy():
    cfg = PRESETS["toy"]
    model = ToyViT.init(cfg, seed=0)
    e = emb.init(1, cfg.dim, cfg.embed_dim, n_blocks=cfg.depth)
    images = np.random.default_rng(2).normal(size=(3, 1, cfg.image_size, cfg.image_size))
    return cfg, model, e, images


# -- config and token counts ---------------------------------------------------
def test_count_trace_deit():
    attn, mlp = vit.count_trace(ViTConfig(grid=14, depth=12, r=16, dim=48, heads=3))
    assert attn == list(range(197, 20, -16)) and attn[-1] == 21
    assert mlp == [a - 16 for a in attn]


def test_count_trace_toy():
    assert vit.count_trace(PRESETS["toy"]) == ([65, 57, 49, 41], [57, 49, 41, 33])
    assert vit.count_trace(PRESETS["toy"], r=0) == ([65] * 4, [65] * 4)


def test_count_trace_rejects_exhaustion():
    with pytest.raises(ValueError):
        vit.count_trace(PRESETS["toy"], r=17)


def test_config_validation():
    with pytest.raises(ValueError):
        ViTConfig(dim=30, heads=4)
    with pytest.raises(ValueError):
        ViTConfig(r=17)
    with pytest.raises(ValueError):
        ViTConfig(merge_mode="cluster")


def test_patchify_order():
    img = np.arange(16.0).reshape(1, 1, 4, 4)
    p = vit.patchify(img, 2)
    assert p.shape == (1, 4, 4)
    assert p[0, 1].tolist() == [2.0, 3.0, 6.0, 7.0]


def test_sincos_table():
    t = vit.sincos_position(8, 32)
    assert t.shape == (65, 32) and np.all(t[0] == 0)
    assert len(np.unique(t[1:], axis=0)) == 64


# -- forward equivalences --------------------------------------------------------
def test_zero_reduction_all_modes_agree(toy):
    cfg, model, e, images = toy
    ref, _ = model.forward(images, e, "none", 0)
    for mode in vit.MERGE_MODES:
        out, _ = model.forward(images, e, mode, 0)
        assert np.array_equal(out.data, ref.data), mode


def test_proportional_attention_with_unit_sizes_is_plain_attention(toy):
    cfg, model, e, images = toy
    plain = ToyViT(cfg.replace(prop_attn=False), model.params)
    a, _ = model.forward(images, merge_mode="none")
    b, _ = plain.forward(images, merge_mode="none")
    assert np.array_equal(a.data, b.data)


def selection_margin(s: np.ndarray, r: int) -> np.ndarray:
    """Smallest similarity gap that decides the top-r matching, per batch row.

    Covers consecutive gaps among the r+1 largest row maxima and the gap to
    the runner-up inside each selected row. A soft round leaks roughly
    exp(-gap / tau) of its mass across any of these.
    """
    top = np.sort(s, axis=-1)
    rowmax = top[..., -1]
    order = np.argsort(-rowmax, axis=-1, kind="stable")
    ranked = np.take_along_axis(rowmax, order, -1)[:, :r + 1]
    within = np.take_along_axis(top[..., -1] - top[..., -2], order[:, :r], -1).min(-1)
    return np.minimum((-np.diff(ranked, axis=-1)).min(-1), within)


def test_soft_matches_hard_in_sharp_limit(toy):
    cfg, model, e, _ = toy
    tau = 3e-4
    images = np.random.default_rng(2).normal(size=(256, 1, cfg.image_size, cfg.image_size))
    hard, tr = model.forward(images, e, "hard-decoupled", 8, trace=True)
    soft, _ = model.forward(images, e, "soft-decoupled", 8, tau=tau)
    margin = np.min([selection_margin(s, 8) for s in tr.similarities], axis=0)
    distinct = margin >= 10 * tau
    assert distinct.sum() >= 3
    assert np.max(np.abs(hard.data - soft.data)[distinct]) < 1e-3


def test_soft_path_keeps_tokens(toy):
    cfg, model, e, images = toy
    _, tr = model.forward(images, e, "soft-decoupled", 8, trace=True)
    assert tr.attn_counts == [65, 57, 49, 41] and tr.mlp_counts == [57, 49, 41, 33]
    assert len(tr.adjacencies) == 4 and tr.assignment is None
    with pytest.raises(ValueError):
        tr.n_groups()


def test_hard_keys_equals_decoupled_with_key_projection(toy, monkeypatch):
    cfg, model, _, images = toy
    d, heads = cfg.dim, cfg.heads
    dh = d // heads
    key = emb.init(0, d, dh, n_blocks=cfg.depth)
    for l in range(cfg.depth):
        w = model.params[f"blocks.{l}.qkv.weight"].data[:, d:2 * d]
        b = model.params[f"blocks.{l}.qkv.bias"].data[d:2 * d]
        key.layers[l] = [(Tensor(w.reshape(d, heads, dh).mean(axis=1)), Tensor(b.reshape(heads, dh).mean(axis=0)))]
    real = emb.embed

    def normed(x, params, block=0):
        p = model.params
        h = ad.layer_norm(x, p[f"blocks.{block}.norm1.weight"], p[f"blocks.{block}.norm1.bias"])
        return real(h, params, block)

    a, ta = model.forward(images, None, "hard-keys", 8, trace=True)
    monkeypatch.setattr(vit.emb, "embed", normed)
    b_, tb = model.forward(images, key, "hard-decoupled", 8, trace=True)
    assert np.array_equal(ta.assignment, tb.assignment)
    assert np.allclose(a.data, b_.data, atol=1e-12)


def test_hard_trace_assignment_is_a_partition(toy):
    cfg, model, e, images = toy
    for mode in ("hard-keys", "hard-decoupled"):
        _, tr = model.forward(images, e, mode, 8, trace=True)
        assert tr.attn_counts == [65, 57, 49, 41] and tr.mlp_counts == [57, 49, 41, 33]
        for row in tr.assignment:
            assert row.shape == (65,) and row.min() == 0 and row.max() == 32
            assert set(row.tolist()) == set(range(33))
        assert tr.n_groups() == [33] * 3
        # the class token stays in slot 0
        assert np.all(tr.assignment[:, 0] == 0)


def test_decoupled_modes_need_embedding(toy):
    cfg, model, _, images = toy
    with pytest.raises(ValueError):
        model.forward(images, None, "hard-decoupled", 8)
    with pytest.raises(ValueError):
        model.forward(images, None, "warp", 8)


# -- gradient routing --------------------------------------------------------------
def test_soft_gradients_reach_every_block_embedding(toy):
    cfg, model, e, images = toy
    logits, _ = model.forward(images, e, "soft-decoupled", 8)
    g = ad.backward(ad.cross_entropy(logits, np.array([0, 1, 2])), e.parameters())
    for l in range(cfg.depth):
        w, _ = e.layers[l][0]
        assert np.abs(g[w]).max() > 0, l


def test_similarity_branch_does_not_reach_backbone(toy, monkeypatch):
    cfg, model, e, images = toy
    captured = []
    real = emb.embed

    def spy(x, params, block=0):
        z = real(x, params, block)
        captured.append(z)
        return z

    monkeypatch.setattr(vit.emb, "embed", spy)
    model.forward(images, e, "soft-decoupled", 8)
    loss = ad.sum_(captured[2] * captured[2])
    g = ad.backward(loss, model.parameters() + e.parameters(), allow_unused=True)
    assert all(np.all(g[p] == 0.0) for p in model.parameters())
    assert np.abs(g[e.layers[2][0][0]]).max() > 0


# -- persistence ----------------------------------------------------------------
def test_checkpoint_round_trip(toy, tmp_path):
    cfg, model, e, images = toy
    path = tmp_path / "model.ckpt"
    model.save(path, e, seed=7)
    loaded, le = ToyViT.load(path)
    assert loaded.config == cfg
    for k, v in model.params.items():
        assert np.array_equal(loaded.params[k].data, v.data)
    for a, b in zip(le.parameters(), e.parameters()):
        assert np.array_equal(a.data, b.data)
    x, _ = model.forward(images, e, "hard-decoupled", 8)
    y, _ = loaded.forward(images, le, "hard-decoupled", 8)
    assert np.array_equal(x.data, y.data)


def test_embedding_checkpoint_round_trip(tmp_path):
    e = emb.init(5, 12, 4, depth=1, hidden=6, n_blocks=3)
    vit.save_embedding(tmp_path / "e.ckpt", e)
    back = vit.load_embedding(tmp_path / "e.ckpt")
    assert (back.d, back.d_out, back.depth, back.hidden, back.seed) == (12, 4, 1, 6, 5)
    for a, b in zip(back.parameters(), e.parameters()):
        assert np.array_equal(a.data, b.data)


def test_load_rejects_wrong_kind(tmp_path):
    vit.save_embedding(tmp_path / "e.ckpt", emb.init(0, 4, 2))
    with pytest.raises(ValueError):
        ToyViT.load(tmp_path / "e.ckpt")


def test_float32_forward(toy):
    cfg, _, e, images = toy
    m32 = ToyViT.init(cfg, seed=0, dtype=np.float32)
    logits, _ = m32.forward(images.astype(np.float32), emb.init(1, cfg.dim, cfg.embed_dim, n_blocks=4,
                                                                dtype=np.float32), "soft-decoupled", 8)
    assert logits.dtype == np.float32
