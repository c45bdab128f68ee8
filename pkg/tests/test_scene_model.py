import numpy as np
import pytest

from conftest import small_config
from sparsemt.config import THING_CLASSES, PipelineConfig
from sparsemt.model import forward_stage1, observed_shapes, point_probabilities, trace_shapes
from sparsemt.pipeline import infer
from sparsemt.pointcloud import PointCloud, TtaConfig
from sparsemt.scene import BUILDING, OBJECT_SIZES, POLE, ROAD, SIDEWALK, SceneSpec, generate_scene
from sparsemt.weights import init_weights

SMALL_SCENE = SceneSpec(points_per_object=300, ground_points=3000, points_per_pole=60, points_per_wall=300)


# -- synthetic scenes


def test_default_scene():
    s = generate_scene()
    assert len(s.boxes) == 4
    assert 19000 <= len(s.cloud) <= 21000
    assert sorted(b.label for b in s.boxes) == [1, 1, 6, 7]


def test_no_objects_only_stuff():
    s = generate_scene(SceneSpec(objects={}, seed=3))
    assert s.boxes == []
    assert set(np.unique(s.cloud.labels)) <= {ROAD, SIDEWALK, POLE, BUILDING}
    assert not s.instances.any()


@pytest.mark.parametrize("seed", range(5))
def test_box_points_inside_boxes(seed):
    s = generate_scene(SceneSpec(objects={1: 2, 2: 1}, extent=12.0, seed=seed))
    assert len(s.boxes) == 3
    for b, box in enumerate(s.boxes):
        m = s.instances == b + 1
        assert m.sum() >= 1000
        assert box.contains(s.cloud.xyz[m], margin=1e-6).all()
        assert (s.cloud.labels[m] == box.label).all()
        assert (box.w, box.l, box.h) == OBJECT_SIZES[box.label]


def test_scene_determinism_and_validation():
    a, b = generate_scene(SceneSpec(seed=5)), generate_scene(SceneSpec(seed=5))
    assert np.array_equal(a.cloud.xyz, b.cloud.xyz) and np.array_equal(a.cloud.labels, b.cloud.labels)
    assert not np.array_equal(a.cloud.xyz, generate_scene(SceneSpec(seed=6)).cloud.xyz)
    for seed in range(40):  # crowded layouts restart instead of failing
        generate_scene(SceneSpec(seed=seed, ground_points=10, points_per_object=10))
    with pytest.raises(ValueError):
        SceneSpec(poles=-1)
    with pytest.raises(ValueError):
        SceneSpec(objects={18: 1})
    with pytest.raises(ValueError):
        generate_scene(SceneSpec(objects={3: 1}, extent=3.0))


def test_scene_labels_are_things_only_in_boxes():
    s = generate_scene()
    thing = np.isin(s.cloud.labels, THING_CLASSES)
    assert np.array_equal(thing, s.instances > 0)
    sem, inst = s.panoptic
    assert sem is s.cloud.labels and inst is s.instances


# -- model


def test_trace_matches_observed(tiny_cfg):
    ws = init_weights(tiny_cfg, 0)
    out = forward_stage1(generate_scene(SMALL_SCENE).cloud, tiny_cfg, ws)
    want = trace_shapes(tiny_cfg)
    got = observed_shapes(out)
    for k, v in got.items():
        if v is not None:
            assert v == want[k], k
    assert out.decoder_out.channels == want["decoder_channels"][-1]


def test_full_scale_trace():
    t = trace_shapes(PipelineConfig())
    assert t["stage_shapes"][-1] == (5, 188, 188)
    assert t["bev_in"] == (1280, 188, 188)
    assert t["gcp_out"] == (384, 188, 188)
    assert t["stage_channels"] == (32, 64, 128, 256)
    assert t["decoder_channels"] == (128, 64, 32, 32)
    assert t["heatmap"] == (9, 188, 188)


def test_forward_outputs(tiny_cfg):
    ws = init_weights(tiny_cfg, 0)
    pc = generate_scene(SMALL_SCENE).cloud
    out = forward_stage1(pc, tiny_cfg, ws)
    assert np.array_equal(out.decoder_out.coords, out.voxels.coords)
    assert out.seg_logits.shape == (out.voxel_map.num_voxels, 22)
    p = point_probabilities(out)
    assert p.shape == (len(pc), 22)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    assert set(out.timings) == {"voxelize", "vfe", "encoder", "gcp", "decoder", "heads"}


def test_empty_cloud(tiny_cfg):
    ws = init_weights(tiny_cfg, 0)
    pc = PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
    res = infer(pc, tiny_cfg, ws, stage2=True, panoptic=True)
    assert res.labels.shape == (0,) and res.panoptic[1].shape == (0,)
    assert res.boxes == []


def test_dropped_points_get_one_hot(tiny_cfg):
    ws = init_weights(tiny_cfg, 0)
    pc = generate_scene(SMALL_SCENE).cloud
    far = PointCloud(np.vstack([pc.xyz, [[50.0, 0, 0]]]), np.vstack([pc.features, [[0.5, 0.1, 0.0]]]))
    p = point_probabilities(forward_stage1(far, tiny_cfg, ws))
    assert sorted(p[-1].tolist())[-1] == 1.0 and p[-1].sum() == 1.0


# -- pipeline


def test_tta_identity_only_matches_plain(tiny_cfg):
    ws = init_weights(tiny_cfg, 1)
    pc = generate_scene(SMALL_SCENE).cloud
    a = infer(pc, tiny_cfg, ws)
    b = infer(pc, tiny_cfg, ws, tta=True, tta_config=TtaConfig.none())
    assert np.array_equal(a.labels, b.labels)
    # the one-variant average is renormalised, so only the last ulp may move
    np.testing.assert_allclose(a.probs, b.probs, rtol=1e-12)
    c = infer(pc, tiny_cfg, ws, tta=True, tta_config=TtaConfig.flips_only())
    assert c.timings["tta_variants"] == 3
    np.testing.assert_allclose(c.probs.sum(axis=1), 1.0)


def test_pipeline_stage2_and_panoptic(tiny_cfg):
    ws = init_weights(tiny_cfg, 0)
    pc = generate_scene(SMALL_SCENE).cloud
    res = infer(pc, tiny_cfg, ws, stage2=True, panoptic=True)
    assert res.scores is not None and len(res.scores.s_box) == len(res.boxes)
    sem, inst = res.panoptic
    assert np.array_equal(sem, res.labels)
    assert inst.max() <= len(res.boxes)
    again = infer(pc, tiny_cfg, ws, stage2=True, panoptic=True)
    assert np.array_equal(again.labels, res.labels) and np.array_equal(again.panoptic[1], inst)
    plain = infer(pc, tiny_cfg, ws, panoptic=True)
    assert plain.scores is None and np.array_equal(plain.labels, plain.stage1_labels)


def test_stage2_disabled_config():
    from dataclasses import replace

    cfg = small_config()
    cfg = replace(cfg, stage2=replace(cfg.stage2, enabled=False))
    ws = init_weights(cfg, 0)
    assert not any(n.startswith("s2.") for n in ws)
    infer(generate_scene(SMALL_SCENE).cloud, cfg, ws, panoptic=True)
