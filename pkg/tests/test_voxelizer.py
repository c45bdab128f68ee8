import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sparsemt.pointcloud import IGNORE, PointCloud
from sparsemt.voxelizer import (
    SENTINEL,
    VfeParams,
    VoxelizationConfig,
    compute_voxel_indices,
    devoxelize_features,
    devoxelize_labels,
    majority_vote_labels,
    vfe_encode,
)

FULL = VoxelizationConfig()
SMALL = VoxelizationConfig(range_min=(-1.0, -1.0, -0.3), range_max=(1.0, 1.0, 0.3))


def _pc(xyz, labels=None, feats=None, mask=None):
    xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
    feats = np.zeros((len(xyz), 0)) if feats is None else feats
    return PointCloud(xyz, feats, labels=labels, current_mask=mask)


def test_config_validation():
    assert FULL.grid_size == (1504, 1504, 40)
    assert FULL.spatial_shape == (40, 1504, 1504)
    with pytest.raises(ValueError):
        VoxelizationConfig(voxel_size=(0.1, 0.1, 0))
    with pytest.raises(ValueError):
        VoxelizationConfig(range_min=(0, 0, 0), range_max=(0, 1, 1))
    with pytest.raises(ValueError):
        VoxelizationConfig(range_max=(75.25, 75.2, 4.0))
    with pytest.raises(ValueError):
        VoxelizationConfig(oob_policy="wrap")


def test_index_example():
    vm = compute_voxel_indices(_pc([0.25, -0.13, 0.31]), FULL)
    assert vm.unique_coords.tolist() == [[754, 750, 15]]


def test_two_points_share_xy_cell():
    # (0.01 + 2) / 0.15 = 13.4 but (0.14 + 2) / 0.15 = 14.27, so this pair splits along z
    vm = compute_voxel_indices(_pc([[0.01, 0.01, 0.01], [0.09, 0.05, 0.14]]), FULL)
    assert vm.unique_coords.tolist() == [[752, 752, 13], [752, 752, 14]]


def test_two_points_one_voxel():
    vm = compute_voxel_indices(_pc([[0.01, 0.01, 0.01], [0.09, 0.05, 0.04]]), FULL)
    assert vm.num_voxels == 1
    assert vm.point_to_voxel.tolist() == [0, 0]
    assert vm.points_per_voxel.tolist() == [2]


def test_out_of_range_drop_and_clamp():
    pts = _pc([[80.0, 0, 0], [0, 0, 0]])
    vm = compute_voxel_indices(pts, FULL)
    assert vm.point_to_voxel[0] == SENTINEL
    assert vm.num_voxels == 1
    clamp = VoxelizationConfig(oob_policy="clamp")
    vm = compute_voxel_indices(pts, clamp)
    assert vm.num_voxels == 2
    assert 1503 in vm.unique_coords[:, 0]


def test_all_dropped_gives_empty_map():
    vm = compute_voxel_indices(_pc([[100.0, 0, 0], [0, 0, -50.0]]), FULL)
    assert vm.is_empty
    assert (vm.point_to_voxel == SENTINEL).all()


@given(st.integers(0, 2**31 - 1), st.integers(1, 200))
def test_voxel_map_invariants(seed, n):
    g = np.random.default_rng(seed)
    pc = _pc(g.uniform(-1.2, 1.2, (n, 3)))
    vm = compute_voxel_indices(pc, SMALL)
    c = vm.unique_coords
    # sorted by (iz, iy, ix) and distinct
    keys = [tuple(r[::-1]) for r in c.tolist()]
    assert keys == sorted(set(keys))
    kept = vm.point_to_voxel[vm.point_to_voxel != SENTINEL]
    assert (kept < vm.num_voxels).all()
    assert vm.points_per_voxel.sum() == len(kept)
    # each kept point's voxel is the floor of its shifted coordinates
    for i in np.flatnonzero(vm.point_to_voxel != SENTINEL):
        want = np.floor((pc.xyz[i] - SMALL.range_min) / SMALL.voxel_size).astype(int)
        assert c[vm.point_to_voxel[i]].tolist() == want.tolist()


@given(st.integers(0, 2**31 - 1), st.integers(0, 2))
def test_translation_consistency(seed, axis):
    g = np.random.default_rng(seed)
    size = np.array(FULL.voxel_size)
    # keep away from cell boundaries so the shift is exact under float rounding
    cells = g.integers(0, 39, (20, 3))
    xyz = (cells + g.uniform(0.2, 0.8, (20, 3))) * size + FULL.range_min
    shift = np.zeros(3)
    shift[axis] = size[axis]
    a = compute_voxel_indices(_pc(xyz), FULL)
    b = compute_voxel_indices(_pc(xyz + shift), FULL)
    pa = a.unique_coords[a.point_to_voxel]
    pb = b.unique_coords[b.point_to_voxel]
    want = pa.copy()
    want[:, axis] += 1
    np.testing.assert_array_equal(pb, want)


# -- VFE


def _identity_vfe(width):
    return VfeParams([(np.eye(width), np.zeros(width))])


def test_vfe_identity_max():
    pc = _pc([[0.01, 0.01, 0.01], [0.02, 0.02, 0.02]], feats=np.array([[1.0, 2.0], [3.0, 0.0]]))
    vm = compute_voxel_indices(pc, FULL)
    out = vfe_encode(pc, vm, _identity_vfe(5))
    np.testing.assert_allclose(out[0, 3:], [3.0, 2.0])


def test_vfe_single_point_equals_mlp(rng):
    pc = _pc([[0.05, 0.05, 0.05]], feats=rng.normal(size=(1, 3)))
    params = VfeParams([(rng.normal(size=(6, 4)), rng.normal(size=4)), (rng.normal(size=(4, 2)), rng.normal(size=2))])
    vm = compute_voxel_indices(pc, FULL)
    h = np.maximum(pc.points @ params.layers[0][0] + params.layers[0][1], 0)
    h = np.maximum(h @ params.layers[1][0] + params.layers[1][1], 0)
    np.testing.assert_allclose(vfe_encode(pc, vm, params), h)


def _brute_vfe(pc, vm, params):
    out = np.zeros((vm.num_voxels, params.out_features))
    for j in range(vm.num_voxels):
        rows = [i for i in range(len(pc)) if vm.point_to_voxel[i] == j]
        best = None
        for i in rows:
            h = pc.points[i]
            for w, b in params.layers:
                h = np.maximum(h @ w + b, 0)
            best = h if best is None else np.maximum(best, h)
        out[j] = best
    return out


@pytest.mark.parametrize("seed", range(5))
def test_vfe_matches_bruteforce(seed):
    g = np.random.default_rng(seed)
    # 20 points spread over 5 voxels
    centers = (g.integers(0, 10, (5, 3)) + 0.5) * FULL.voxel_size
    xyz = centers[g.integers(0, 5, 20)] + g.uniform(-0.04, 0.04, (20, 3)) * [1, 1, 1.4]
    pc = _pc(xyz, feats=g.normal(size=(20, 3)))
    params = VfeParams([(g.normal(size=(6, 8)), g.normal(size=8)), (g.normal(size=(8, 4)), g.normal(size=4))])
    vm = compute_voxel_indices(pc, FULL)
    np.testing.assert_allclose(vfe_encode(pc, vm, params), _brute_vfe(pc, vm, params), rtol=1e-6, atol=1e-12)


def test_vfe_width_mismatch(rng):
    pc = _pc([[0, 0, 0]], feats=np.zeros((1, 2)))
    vm = compute_voxel_indices(pc, FULL)
    with pytest.raises(ValueError):
        vfe_encode(pc, vm, _identity_vfe(6))


@given(st.integers(0, 2**31 - 1))
def test_vfe_point_order_invariant(seed):
    g = np.random.default_rng(seed)
    xyz = g.uniform(-0.3, 0.3, (30, 3))
    feats = g.normal(size=(30, 2))
    params = VfeParams([(g.normal(size=(5, 6)), g.normal(size=6))])
    perm = g.permutation(30)
    a = compute_voxel_indices(_pc(xyz, feats=feats), SMALL)
    b = compute_voxel_indices(_pc(xyz[perm], feats=feats[perm]), SMALL)
    np.testing.assert_array_equal(vfe_encode(_pc(xyz, feats=feats), a, params),
                                  vfe_encode(_pc(xyz[perm], feats=feats[perm]), b, params))


# -- majority voting


def _one_voxel(labels, mask=None):
    n = len(labels)
    pc = _pc(np.full((n, 3), 0.05), labels=np.array(labels), mask=mask)
    return pc, compute_voxel_indices(pc, FULL)


def test_vote_examples():
    pc, vm = _one_voxel([1, 1, 2])
    assert majority_vote_labels(pc, vm).tolist() == [1]
    pc, vm = _one_voxel([2, 1])
    assert majority_vote_labels(pc, vm).tolist() == [1]
    pc, vm = _one_voxel([3, 3], mask=np.array([False, False]))
    assert majority_vote_labels(pc, vm).tolist() == [IGNORE]


def test_vote_ignores_undefined():
    pc, vm = _one_voxel([IGNORE, IGNORE, 5])
    assert majority_vote_labels(pc, vm).tolist() == [5]


def test_vote_needs_labels():
    pc = _pc([[0, 0, 0]])
    with pytest.raises(ValueError):
        majority_vote_labels(pc, compute_voxel_indices(pc, FULL))


@given(st.integers(0, 2**31 - 1))
def test_vote_attains_max_count(seed):
    g = np.random.default_rng(seed)
    n = 60
    pc = _pc(g.uniform(-0.3, 0.3, (n, 3)), labels=g.integers(0, 5, n), mask=g.random(n) < 0.8)
    vm = compute_voxel_indices(pc, SMALL)
    out = majority_vote_labels(pc, vm, 4)
    for j in range(vm.num_voxels):
        m = (vm.point_to_voxel == j) & pc.current_mask & (pc.labels != IGNORE)
        counts = np.bincount(pc.labels[m], minlength=5)
        if counts.sum() == 0:
            assert out[j] == IGNORE
        else:
            assert counts[out[j]] == counts.max()
            assert out[j] == np.flatnonzero(counts == counts.max())[0]


# -- de-voxelization


def test_devoxelize_examples():
    pc, vm = _one_voxel([1, 1, 1])
    assert devoxelize_labels(vm, np.array([7])).tolist() == [7, 7, 7]
    np.testing.assert_array_equal(devoxelize_features(vm, np.array([[1.0, 2, 3]]))[:2], [[1, 2, 3]] * 2)


def test_dropped_point_uses_clamped_active_voxel():
    # voxel (0,0,0) is active; the dropped point clamps into it
    pc = _pc([[-75.15, -75.15, -1.95], [-80.0, -75.15, -1.95], [0.05, 0.05, 0.05]])
    vm = compute_voxel_indices(pc, FULL)
    assert vm.point_to_voxel[1] == SENTINEL
    labels = devoxelize_labels(vm, np.array([4, 9]))
    assert labels.tolist() == [4, 4, 9]
    feats = devoxelize_features(vm, np.array([[1.0], [2.0]]))
    assert feats[:, 0].tolist() == [1.0, 0.0, 2.0]


def test_dropped_point_global_fallback():
    pc = _pc([[0.05, 0.05, 0.05], [0.15, 0.05, 0.05], [0.25, 0.05, 0.05], [80.0, 0, 0]])
    vm = compute_voxel_indices(pc, FULL)
    assert devoxelize_labels(vm, np.array([6, 2, 6]))[3] == 6


def test_devoxelize_all_same(rng):
    pc = _pc(rng.uniform(-1, 1, (40, 3)))
    vm = compute_voxel_indices(pc, FULL)
    assert (devoxelize_labels(vm, np.full(vm.num_voxels, 11)) == 11).all()


@given(st.integers(0, 2**31 - 1))
def test_devoxelize_features_permutes_with_points(seed):
    g = np.random.default_rng(seed)
    xyz = g.uniform(-1.5, 1.5, (25, 3))
    perm = g.permutation(25)
    a = compute_voxel_indices(_pc(xyz), SMALL)
    b = compute_voxel_indices(_pc(xyz[perm]), SMALL)
    fa = devoxelize_features(a, g.normal(size=(a.num_voxels, 3)) if a.num_voxels else np.zeros((0, 3)))
    # same voxel features keyed by coordinate
    feat_by_coord = {tuple(c): fa[i] for i, c in enumerate(a.point_coords) if a.point_to_voxel[i] != SENTINEL}
    fb_vox = np.array([feat_by_coord[tuple(c)] for c in b.unique_coords]).reshape(-1, 3)
    fb = devoxelize_features(b, fb_vox)
    np.testing.assert_array_equal(fb, fa[perm])


@given(st.integers(0, 2**31 - 1))
def test_vote_then_devoxelize_reproduces_pure_labels(seed):
    g = np.random.default_rng(seed)
    cells = g.choice(400, size=15, replace=False)
    centers = (np.stack(np.unravel_index(cells, (20, 20, 1)), axis=1) + 0.5) * FULL.voxel_size
    which = g.integers(0, 15, 60)
    xyz = centers[which] + g.uniform(-0.03, 0.03, (60, 3))
    labels = g.integers(1, 23, 15)[which]
    pc = _pc(xyz, labels=labels)
    vm = compute_voxel_indices(pc, FULL)
    np.testing.assert_array_equal(devoxelize_labels(vm, majority_vote_labels(pc, vm)), labels)
