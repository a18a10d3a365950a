"""Architecture contracts: shapes, determinism, weight sharing, gradients."""

import numpy as np
import pytest

from _helpers import numeric_grad_at, promote_params_float64, sample_coords
from sarslide.errors import ConfigError, DataError
from sarslide.layers import Conv2d, ReLU, named_param_slots, param_arrays, zero_grads
from sarslide.nets import (
    ArchConfig,
    build_classifier,
    build_segmenter,
    count_params,
)

# Small enough to gradcheck, deep enough to cover every code path
# (stride-2 residual stages, skip concatenation, projection shortcuts).
TINY = ArchConfig(
    width_scale=1.0,
    embedding_channels=4,
    encoder_depth=3,
    input_channels=2,
    chip_size=16,
    base_channels=4,
    blocks_per_stage=(1, 1, 1),
    head_hidden=5,
    seg_channels=(4, 5, 6),
    seg_fusion_channels=7,
)


def _rand_images(seed, batch=2, arch=TINY, dtype=np.float64):
    rng = np.random.default_rng(seed)
    shape = (batch, arch.input_channels, arch.chip_size, arch.chip_size)
    return rng.standard_normal(shape).astype(dtype)


# ---------------------------------------------------------------------------
# Config and initialization


def test_arch_config_validation():
    with pytest.raises(ConfigError, match="width_scale"):
        ArchConfig(width_scale=0.0).validate()
    with pytest.raises(ConfigError, match="width_scale"):
        ArchConfig(width_scale=1.5).validate()
    with pytest.raises(ConfigError, match="chip_size"):
        ArchConfig(chip_size=100).validate()
    with pytest.raises(ConfigError, match="blocks_per_stage"):
        ArchConfig(encoder_depth=3, blocks_per_stage=(1, 1)).validate()
    with pytest.raises(ConfigError, match="seg_channels"):
        ArchConfig(seg_channels=(8, 8)).validate()
    ArchConfig().validate()


def test_init_deterministic_in_seed():
    a = build_classifier(TINY, seed=5)
    b = build_classifier(TINY, seed=5)
    c = build_classifier(TINY, seed=6)
    for pa, pb in zip(param_arrays(a), param_arrays(b)):
        assert pa.tobytes() == pb.tobytes()
    assert any(pa.tobytes() != pc.tobytes()
               for pa, pc in zip(param_arrays(a), param_arrays(c)))


def test_full_size_parameter_bands():
    arch = ArchConfig()
    clf = build_classifier(arch, seed=0)
    assert 15_750_000 <= count_params(clf) <= 26_250_000
    seg = build_segmenter(arch, True, seed=0)
    assert 750_000 <= count_params(seg) <= 1_250_000


def test_count_params_arithmetic():
    assert count_params(ReLU()) == 0
    conv = Conv2d(2, 4, 3, rng=np.random.default_rng(0))
    assert count_params(conv) == 2 * 4 * 9 + 4


# ---------------------------------------------------------------------------
# Classifier contracts


def test_embedding_shape_and_finiteness():
    clf = build_classifier(TINY, seed=1)
    x = _rand_images(0, batch=3)
    emb = clf.embed(x)
    assert emb.shape == (3, clf.emb_channels, TINY.chip_size, TINY.chip_size)
    assert np.isfinite(emb).all()
    single = clf.embed(x[0])
    assert single.shape == (clf.emb_channels, TINY.chip_size, TINY.chip_size)
    assert np.allclose(single, emb[0], atol=1e-6)


def test_full_size_embedding_channels():
    arch = ArchConfig()
    clf = build_classifier(arch, seed=0)
    assert clf.emb_channels == 64
    # Shape contract checked without a full-size forward pass.
    assert arch.chip_size == 128


def test_embeddings_distinguish_inputs():
    clf = build_classifier(TINY, seed=2)
    a = clf.embed(_rand_images(1))
    b = clf.embed(_rand_images(2))
    assert not np.allclose(a, b)


def test_embed_rejects_nan_and_bad_shape():
    clf = build_classifier(TINY, seed=3)
    x = _rand_images(3)
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(DataError, match="non-finite"):
        clf.embed(x)
    with pytest.raises(DataError, match="shape"):
        clf.embed(np.zeros((2, 8, 8)))


def test_forward_composes_embed_and_head():
    clf = build_classifier(TINY, seed=4)
    pre, post = _rand_images(4), _rand_images(5)
    fused = clf.forward(pre, post)
    emb_pre, emb_post = clf.embed(pre), clf.embed(post)
    staged = clf.classify_from_embeddings(emb_pre, emb_post)
    assert fused.shape == (2,)
    assert np.isfinite(fused).all()
    assert fused.tobytes() == staged.tobytes()


def test_forward_batch_matches_single_pairs():
    clf = build_classifier(TINY, seed=6)
    pre, post = _rand_images(6, batch=4), _rand_images(7, batch=4)
    batched = clf.forward(pre, post)
    for i in range(4):
        one = clf.forward(pre[i], post[i])
        assert one == pytest.approx(batched[i], rel=1e-5, abs=1e-6)


def test_forward_deterministic():
    clf = build_classifier(TINY, seed=7)
    pre, post = _rand_images(8), _rand_images(9)
    assert clf.forward(pre, post).tobytes() == clf.forward(pre, post).tobytes()


def test_weight_sharing_across_branches():
    clf = build_classifier(TINY, seed=8)
    x = _rand_images(10)
    # Same parameters process both branches: same input, same embedding.
    assert clf.embed(x).tobytes() == clf.embed(x).tobytes()
    before = clf.embed(x)
    clf.stem.conv.w = clf.stem.conv.w + 0.05
    after = clf.embed(x)
    assert not np.allclose(before, after)


# ---------------------------------------------------------------------------
# Segmenter contracts


def test_segmenter_baseline_shape():
    seg = build_segmenter(TINY, uses_pretrained=False, seed=9)
    out = seg.forward(_rand_images(11), _rand_images(12))
    assert out.shape == (2, TINY.chip_size, TINY.chip_size)
    assert np.isfinite(out).all()
    single = seg.forward(_rand_images(11)[0], _rand_images(12)[0])
    assert single.shape == (TINY.chip_size, TINY.chip_size)


def test_segmenter_fusion_is_live():
    clf = build_classifier(TINY, seed=10)
    seg = build_segmenter(TINY, uses_pretrained=True, seed=11)
    pre, post = _rand_images(13), _rand_images(14)
    frozen = (clf.embed(pre), clf.embed(post))
    out = seg.forward(pre, post, frozen)
    assert out.shape == (2, TINY.chip_size, TINY.chip_size)
    nudged = (frozen[0] + 0.5, frozen[1])
    assert not np.allclose(out, seg.forward(pre, post, nudged))


def test_segmenter_frozen_embedding_preconditions():
    seg_pre = build_segmenter(TINY, uses_pretrained=True, seed=12)
    seg_raw = build_segmenter(TINY, uses_pretrained=False, seed=12)
    pre, post = _rand_images(15), _rand_images(16)
    emb = np.zeros((2, seg_pre.emb_channels, TINY.chip_size, TINY.chip_size))
    with pytest.raises(DataError, match="required"):
        seg_pre.forward(pre, post)
    with pytest.raises(DataError, match="unexpected"):
        seg_raw.forward(pre, post, (emb, emb))
    bad = emb[:, :-1]
    with pytest.raises(DataError, match="embedding"):
        seg_pre.forward(pre, post, (bad, bad))


# ---------------------------------------------------------------------------
# Whole-network gradient checks (float64)


def test_classifier_end_to_end_gradients():
    clf = build_classifier(TINY, seed=20)
    promote_params_float64(clf)
    pre, post = _rand_images(20, batch=1), _rand_images(21, batch=1)
    r = np.array([0.7])

    def loss():
        return float((clf.forward(pre, post) * r).sum())

    emb_pre, ctx_pre = clf.embed_with_ctx(pre)
    emb_post, ctx_post = clf.embed_with_ctx(post)
    logits, hctx = clf.head_with_ctx(emb_pre, emb_post)
    zero_grads(clf)
    g_pre, g_post = clf.head_backward(hctx, r)
    clf.embed_backward(ctx_post, g_post)
    gx = clf.embed_backward(ctx_pre, g_pre)

    rng = np.random.default_rng(0)
    # Every parameter slot gets at least one checked coordinate.
    for name, layer, attr in named_param_slots(clf):
        arr = getattr(layer, attr)
        grad = getattr(layer, "g" + attr)
        for idx in sample_coords(rng, arr.shape, 2):
            want = numeric_grad_at(loss, arr, idx)
            assert grad[idx] == pytest.approx(want, rel=2e-4, abs=1e-7), name
    # Input gradient through the stem.
    for idx in sample_coords(rng, pre.shape, 3):
        want = numeric_grad_at(loss, pre, idx)
        assert gx[idx] == pytest.approx(want, rel=2e-4, abs=1e-7)


@pytest.mark.parametrize("uses_pretrained", [False, True])
def test_segmenter_end_to_end_gradients(uses_pretrained):
    seg = build_segmenter(TINY, uses_pretrained, seed=21)
    promote_params_float64(seg)
    pre, post = _rand_images(22, batch=1), _rand_images(23, batch=1)
    if uses_pretrained:
        erng = np.random.default_rng(24)
        frozen = tuple(
            erng.standard_normal((1, seg.emb_channels, TINY.chip_size, TINY.chip_size))
            for _ in range(2))
    else:
        frozen = None
    r = np.random.default_rng(25).standard_normal(
        (1, TINY.chip_size, TINY.chip_size))

    def loss():
        return float((seg.forward(pre, post, frozen) * r).sum())

    _, ctx = seg.forward_with_ctx(pre, post, frozen)
    zero_grads(seg)
    seg.backward(ctx, r)

    rng = np.random.default_rng(1)
    for name, layer, attr in named_param_slots(seg):
        arr = getattr(layer, attr)
        grad = getattr(layer, "g" + attr)
        for idx in sample_coords(rng, arr.shape, 2):
            want = numeric_grad_at(loss, arr, idx)
            assert grad[idx] == pytest.approx(want, rel=2e-4, abs=1e-7), name
