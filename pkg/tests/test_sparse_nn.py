import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import small_config
from sparsemt.backbone import decode, encode
from sparsemt.config import BackboneSpec
from sparsemt.model import scale_shapes
from sparsemt.sparse_core import (
    KeyIndexCache,
    SparseTensor,
    build_inverse_rulebook,
    build_strided_rulebook,
    build_submanifold_rulebook,
)
from sparsemt.sparse_nn import (
    ConvWeights,
    NormParams,
    dense_conv3d_oracle,
    dense_conv_transpose3d_oracle,
    inverse_sparse_conv3d,
    linear,
    norm_relu,
    resblock,
    sparse_conv3d,
    submanifold_conv3d,
)
from sparsemt.weights import WeightStore, init_weights
from test_sparse_core import random_tensor


def rand_w(rng, cin, cout, k=3, bias=True):
    return ConvWeights(rng.normal(size=(k ** 3, cin, cout)), rng.normal(size=cout) if bias else None)


def close(a, b, rel=1e-5):
    assert np.all(np.abs(a - b) <= rel * (1 + np.abs(b))), np.max(np.abs(a - b))


def test_conv_weights_validation():
    with pytest.raises(ValueError):
        ConvWeights(np.zeros((8, 1, 1)))
    with pytest.raises(ValueError):
        ConvWeights(np.zeros((27, 1)))
    w = ConvWeights(np.zeros((125, 2, 3)))
    assert (w.kernel_size, w.c_in, w.c_out) == (5, 2, 3)


# -- submanifold


def test_isolated_voxel(rng):
    t = SparseTensor([[2, 2, 2]], rng.normal(size=(1, 3)), (5, 5, 5))
    w = rand_w(rng, 3, 2)
    out = submanifold_conv3d(t, build_submanifold_rulebook(t), w)
    np.testing.assert_allclose(out.features, w.bias + t.features @ w.weight[13])


def test_identity_center(rng):
    t = random_tensor(rng, (6, 6, 6), 40, 3)
    wt = np.zeros((27, 3, 3))
    wt[13] = np.eye(3)
    out = submanifold_conv3d(t, build_submanifold_rulebook(t), ConvWeights(wt))
    np.testing.assert_array_equal(out.features, t.features)


@given(st.integers(0, 2**31 - 1), st.sampled_from([(8, 8, 8), (5, 9, 7), (16, 16, 16)]))
def test_submanifold_matches_dense(seed, shape):
    rng = np.random.default_rng(seed)
    t = random_tensor(rng, shape, int(rng.integers(1, 80)), 3)
    w = rand_w(rng, 3, 4)
    out = submanifold_conv3d(t, build_submanifold_rulebook(t), w)
    dense = dense_conv3d_oracle(t.dense(), w)
    assert np.array_equal(out.coords, t.coords)
    close(out.features, dense[tuple(t.coords.T)])


def test_submanifold_rejects_mismatch(rng):
    t = random_tensor(rng, (4, 4, 4), 5, 2)
    rb = build_submanifold_rulebook(t)
    with pytest.raises(ValueError):
        submanifold_conv3d(t, rb, rand_w(rng, 3, 2))
    with pytest.raises(ValueError):
        submanifold_conv3d(t, rb, rand_w(rng, 2, 2, k=5))
    with pytest.raises(ValueError):
        submanifold_conv3d(t, build_strided_rulebook(t), rand_w(rng, 2, 2))


@given(st.integers(0, 2**31 - 1))
def test_linearity(seed):
    rng = np.random.default_rng(seed)
    t = random_tensor(rng, (6, 6, 6), 30, 2)
    y = t.replace_features(rng.normal(size=t.features.shape))
    a = float(rng.normal())
    w = rand_w(rng, 2, 3, bias=False)
    rb = build_submanifold_rulebook(t)
    lhs = submanifold_conv3d(t.replace_features(a * t.features + y.features), rb, w).features
    rhs = a * submanifold_conv3d(t, rb, w).features + submanifold_conv3d(y, rb, w).features
    close(lhs, rhs)


def test_determinism(rng):
    t = random_tensor(rng, (8, 8, 8), 100, 4)
    w = rand_w(rng, 4, 4)
    a = submanifold_conv3d(t, build_submanifold_rulebook(t), w)
    b = submanifold_conv3d(t, build_submanifold_rulebook(t), w)
    assert a.features.tobytes() == b.features.tobytes()


# -- strided and inverse


def test_strided_single_voxel_one_hot():
    t = SparseTensor([[1, 1, 1]], [[1.0]], (4, 4, 4))
    wt = np.arange(27, dtype=float).reshape(27, 1, 1)
    out = sparse_conv3d(t, build_strided_rulebook(t), ConvWeights(wt))
    dense = dense_conv3d_oracle(t.dense(), ConvWeights(wt), stride=2)
    assert out.num_active == 8 and out.stride == 2
    np.testing.assert_array_equal(out.features, dense[tuple(out.coords.T)])
    # output (o) reads input (1,1,1) at offset 1 - 2*o + 1 per axis
    for c, f in zip(out.coords, out.features[:, 0]):
        dz, dy, dx = 2 - 2 * c
        assert f == dz * 9 + dy * 3 + dx


def test_strided_zero_weights_and_empty(rng):
    t = random_tensor(rng, (6, 6, 6), 10, 2)
    w = ConvWeights(np.zeros((27, 2, 3)), np.array([1.0, -2.0, 0.5]))
    out = sparse_conv3d(t, build_strided_rulebook(t), w)
    assert (out.features == w.bias).all()
    e = SparseTensor(np.zeros((0, 3)), np.zeros((0, 2)), (6, 6, 6))
    assert sparse_conv3d(e, build_strided_rulebook(e), w).num_active == 0


@given(st.integers(0, 2**31 - 1))
def test_strided_matches_dense(seed):
    rng = np.random.default_rng(seed)
    t = random_tensor(rng, (7, 8, 9), int(rng.integers(1, 60)), 2)
    w = rand_w(rng, 2, 3)
    out = sparse_conv3d(t, build_strided_rulebook(t), w)
    dense = dense_conv3d_oracle(t.dense(), w, stride=2)
    close(out.features, dense[tuple(out.coords.T)])
    assert out.spatial_shape == dense.shape[:3]


def _inverse_setup(rng, shape=(8, 8, 8), n=40):
    t = random_tensor(rng, shape, n, 2)
    cache = KeyIndexCache()
    cache.record(t)
    fwd = cache.strided_rulebook(t)
    low = SparseTensor(fwd.out_coords, rng.normal(size=(fwd.num_outputs, 3)), fwd.out_shape, 2)
    return t, cache, low


@given(st.integers(0, 2**31 - 1))
def test_inverse_matches_dense_transpose(seed):
    rng = np.random.default_rng(seed)
    t, cache, low = _inverse_setup(rng, (7, 6, 9), int(rng.integers(1, 50)))
    w = rand_w(rng, 3, 2)
    out = inverse_sparse_conv3d(low, build_inverse_rulebook(low, cache), w)
    assert np.array_equal(out.coords, t.coords) and out.stride == 1
    dense = dense_conv_transpose3d_oracle(low.dense(), w, t.spatial_shape)
    close(out.features, dense[tuple(t.coords.T)])


def test_transpose_oracle_is_adjoint(rng):
    # <conv(x), y> == <x, conv^T(y)> with bias off
    x = rng.normal(size=(5, 6, 7, 2))
    w = rand_w(rng, 2, 3, bias=False)
    fx = dense_conv3d_oracle(x, w, stride=2)
    y = rng.normal(size=fx.shape)
    wt = ConvWeights(np.transpose(w.weight, (0, 2, 1)))
    np.testing.assert_allclose(np.sum(fx * y), np.sum(x * dense_conv_transpose3d_oracle(y, wt, x.shape[:3])))


def test_inverse_zero_weights(rng):
    t, cache, low = _inverse_setup(rng)
    out = inverse_sparse_conv3d(low, build_inverse_rulebook(low, cache), ConvWeights(np.zeros((27, 3, 2))))
    assert out.num_active == t.num_active and not out.features.any()


def test_inverse_requires_inverse_rulebook(rng):
    t, cache, low = _inverse_setup(rng)
    with pytest.raises(ValueError):
        inverse_sparse_conv3d(low, build_strided_rulebook(low), rand_w(rng, 3, 2))


# -- norm, resblock, linear


def test_norm_relu_examples(rng):
    t = SparseTensor([[0, 0, 0], [0, 0, 1]], [[-1.0, 2.0], [3.0, -0.5]], (1, 1, 2))
    p = NormParams.identity(2)
    p.eps = 0.0
    np.testing.assert_array_equal(norm_relu(t, p).features, [[0, 2], [3, 0]])


def test_norm_relu_elementwise(rng):
    t = random_tensor(rng, (4, 4, 4), 20, 3)
    p = NormParams(rng.normal(size=3), rng.normal(size=3), rng.normal(size=3), rng.uniform(0.1, 2, 3))
    out = norm_relu(t, p).features
    for r in range(t.num_active):
        for c in range(3):
            v = (t.features[r, c] - p.running_mean[c]) / np.sqrt(p.running_var[c] + p.eps)
            assert abs(out[r, c] - max(0.0, v * p.scale[c] + p.shift[c])) <= 1e-6


def _identity_parts(c):
    zero = ConvWeights(np.zeros((27, c, c)))
    center = np.zeros((27, c, c))
    center[13] = np.eye(c)
    return zero, ConvWeights(center), NormParams.identity(c)


def test_resblock_identity_doubles(rng):
    t = random_tensor(rng, (5, 5, 5), 25, 3)
    t = t.replace_features(np.abs(t.features))
    _, ident, norm = _identity_parts(3)
    norm.eps = 0.0
    out = resblock(t, build_submanifold_rulebook(t), ident, norm, ident, norm)
    np.testing.assert_allclose(out.features, 2 * t.features)
    assert np.array_equal(out.coords, t.coords)


def test_resblock_zero_weights(rng):
    t = random_tensor(rng, (5, 5, 5), 25, 3)
    zero, _, _ = _identity_parts(3)
    n2 = NormParams(np.ones(3), np.array([0.5, -1.0, 0.0]), np.zeros(3), np.ones(3), eps=0.0)
    out = resblock(t, build_submanifold_rulebook(t), zero, NormParams.identity(3), zero, n2)
    np.testing.assert_allclose(out.features, np.maximum(n2.shift + t.features, 0))


def test_linear(rng):
    x = rng.normal(size=(7, 4))
    np.testing.assert_array_equal(linear(x, np.eye(4)), x)
    b = rng.normal(size=3)
    np.testing.assert_array_equal(linear(x, np.zeros((4, 3)), b), np.tile(b, (7, 1)))
    w = rng.normal(size=(4, 3))
    oracle = np.array([[sum(x[i, k] * w[k, j] for k in range(4)) + b[j] for j in range(3)] for i in range(7)])
    np.testing.assert_allclose(linear(x, w, b), oracle, rtol=1e-6)


def test_dense_oracle_examples(rng):
    vol = np.zeros((3, 3, 3, 1))
    vol[1, 1, 1, 0] = 1.0
    w = ConvWeights(rng.normal(size=(27, 1, 1)))
    out = dense_conv3d_oracle(vol, w)
    # a delta at the centre reproduces the kernel, flipped
    np.testing.assert_allclose(out[..., 0], w.weight[::-1, 0, 0].reshape(3, 3, 3))
    out = dense_conv3d_oracle(np.zeros((2, 2, 2, 1)), ConvWeights(w.weight, np.array([0.7])))
    assert (out == 0.7).all()


# -- backbone


def _voxels(cfg, rng, n=60):
    return random_tensor(rng, cfg.voxel.spatial_shape, n, cfg.backbone.vfe_widths[-1])


def test_encoder_stage_shapes(tiny_cfg, rng):
    ws = init_weights(tiny_cfg, 0)
    state = encode(_voxels(tiny_cfg, rng), tiny_cfg.backbone, ws)
    assert [o.stride for o in state.outputs] == [1, 2, 4, 8]
    assert [o.spatial_shape for o in state.outputs] == scale_shapes(tiny_cfg)
    assert [o.channels for o in state.outputs] == list(tiny_cfg.backbone.encoder_widths)
    assert sorted(state.cache.scales) == [1, 2, 4, 8]


def test_full_scale_shapes():
    from sparsemt.config import PipelineConfig

    assert scale_shapes(PipelineConfig())[-1] == (5, 188, 188)
    assert BackboneSpec().encoder_widths == (32, 64, 128, 256)
    assert BackboneSpec().decoder_widths == (128, 64, 32, 32)


def test_single_voxel_reaches_bottom(tiny_cfg):
    ws = init_weights(tiny_cfg, 0)
    t = SparseTensor([[20, 64, 64]], np.ones((1, 4)), tiny_cfg.voxel.spatial_shape)
    state = encode(t, tiny_cfg.backbone, ws)
    assert all(o.num_active >= 1 for o in state.outputs)
    assert all(len(e.coords) for e in state.cache.scales.values())


def test_decoder_restores_coords(tiny_cfg, rng):
    ws = init_weights(tiny_cfg, 3)
    t = _voxels(tiny_cfg, rng, 200)
    state = encode(t, tiny_cfg.backbone, ws)
    out = decode(state.outputs[-1], state, tiny_cfg.backbone, ws)
    assert np.array_equal(out.coords, t.coords)
    assert out.channels == tiny_cfg.backbone.decoder_widths[-1]
    assert np.isfinite(out.features).all()
    again = decode(state.outputs[-1], encode(t, tiny_cfg.backbone, ws), tiny_cfg.backbone, ws)
    assert again.features.tobytes() == out.features.tobytes()


def test_decoder_zero_weights(tiny_cfg, rng):
    ws = init_weights(tiny_cfg, 0)
    zero = WeightStore({k: np.zeros_like(ws.raw(k)) if not k.endswith((".scale", ".var")) else ws.raw(k)
                        for k in ws})
    t = _voxels(tiny_cfg, rng)
    state = encode(t, tiny_cfg.backbone, zero)
    out = decode(state.outputs[-1], state, tiny_cfg.backbone, zero)
    assert np.array_equal(out.coords, t.coords) and not out.features.any()


def test_decoder_rejects_foreign_bottleneck(tiny_cfg, rng):
    ws = init_weights(tiny_cfg, 0)
    state = encode(_voxels(tiny_cfg, rng), tiny_cfg.backbone, ws)
    deep = state.outputs[-1]
    foreign = SparseTensor(deep.coords[:1], deep.features[:1], deep.spatial_shape, 8)
    with pytest.raises(ValueError):
        decode(foreign, state, tiny_cfg.backbone, ws)


def test_homogeneity_without_norm_or_bias(rng):
    cfg = small_config()
    from dataclasses import replace

    cfg = replace(cfg, backbone=replace(cfg.backbone, use_norm=False))
    ws = init_weights(cfg, 5)
    t = _voxels(cfg, rng, 80)
    t = t.replace_features(np.abs(t.features))
    a = encode(t, cfg.backbone, ws)
    b = encode(t.replace_features(2 * t.features), cfg.backbone, ws)
    for x, y in zip(a.outputs, b.outputs):
        close(y.features, 2 * x.features)
    da = decode(a.outputs[-1], a, cfg.backbone, ws)
    db = decode(b.outputs[-1], b, cfg.backbone, ws)
    close(db.features, 2 * da.features)
