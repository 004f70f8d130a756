import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from twohand import synthdata as sd
from twohand.losses import uniform_patch_regressor


def test_generation_is_deterministic(small_template, small_hierarchy):
    a = sd.generate_sample(5, small_template, small_hierarchy)
    b = sd.generate_sample(5, small_template, small_hierarchy)
    for h in sd.HANDS:
        np.testing.assert_array_equal(a.vertices[h], b.vertices[h])
    for ma, mb in zip(a.pyramid.maps, b.pyramid.maps):
        np.testing.assert_array_equal(ma, mb)
    c = sd.generate_sample(6, small_template, small_hierarchy)
    assert not np.array_equal(a.vertices["left"], c.vertices["left"])


def test_zero_pose_returns_rest_template(small_template):
    rig = sd.HandRig.from_template(small_template)
    # pivots are subtracted and added back, which can cost one ulp
    np.testing.assert_allclose(sd.pose_hand(rig, np.zeros(sd.POSE_DIM)), small_template.vertices, atol=1e-16)
    with pytest.raises(ValueError):
        sd.pose_hand(rig, np.zeros(4))


def test_zero_pose_scene_places_translated_templates(small_template):
    rig = sd.HandRig.from_template(small_template)
    scene = sd.SceneParams({h: np.zeros(sd.POSE_DIM) for h in sd.HANDS}, 0.1, np.zeros(3), 0.0, sd.Camera())
    v = sd.place_hands(rig, scene)
    shift = np.array([0.05, -0.5 * rig.length, 0.0])
    np.testing.assert_allclose(v["right"], small_template.vertices + shift, atol=1e-15)
    np.testing.assert_allclose(v["left"], sd.mirror(small_template.vertices) + shift * [-1, 1, 1], atol=1e-15)


@settings(max_examples=25)
@given(st.integers(0, 2**31 - 1))
def test_posing_preserves_finiteness_and_rough_size(seed):
    rig = sd.HandRig.from_template(sd.build_template(14, 14))
    pose = np.random.default_rng(seed).uniform(-1, 1, sd.POSE_DIM)
    v = sd.pose_hand(rig, pose)
    assert np.isfinite(v).all()
    # rotations about pivots cannot push a vertex further than the hand length from the wrist
    assert np.linalg.norm(v, axis=1).max() <= 1.01 * np.linalg.norm(rig.rest, axis=1).max() + rig.length


def test_template_bone_length_and_root(small_template):
    j = uniform_patch_regressor(small_template.vertices)(small_template.vertices)
    np.testing.assert_allclose(j[0], 0.0, atol=1e-15)
    # the bundled file stores coordinates to 9 significant digits
    assert np.linalg.norm(j[9] - j[0]) == pytest.approx(sd.REFERENCE_LENGTH, rel=1e-8)
    exact = sd.build_template(14, 14)
    je = uniform_patch_regressor(exact.vertices)(exact.vertices)
    assert np.linalg.norm(je[9] - je[0]) == pytest.approx(sd.REFERENCE_LENGTH, rel=1e-14)


@given(st.floats(3.0, 13.0), st.floats(3.0, 13.0), st.floats(1.2, 2.0))
def test_interior_splat_mass(cx, cy, sigma):
    # points sit at least 19 px from every border of the 48 px image
    m = sd.splat(np.array([[cx + 16, cy + 16], [24.0, 24.0]]), np.ones(2), 48, 48, sigma)
    assert abs(m.sum() - 2 * sd.kernel_mass(sigma)) < 1e-6


def test_splat_peaks_at_point():
    m = sd.splat(np.array([[3.5, 6.5]]), np.ones(1), 10, 10, 1.0)
    assert np.unravel_index(m.argmax(), m.shape) == (6, 3)
    assert m.max() == pytest.approx(1.0)


def test_map_channels_follow_hands(small_template, small_hierarchy):
    cfg = sd.SynthConfig(noise_std=0.0)
    s = sd.generate_sample(3, small_template, small_hierarchy, cfg)
    for m, res in zip(s.pyramid.maps, cfg.resolutions):
        assert m.shape == (6, res, res)
        np.testing.assert_allclose(m[2], m[0] + m[1], atol=1e-12)
        assert not np.allclose(m[0], m[1])
    # the left hand sits at negative x, so its density mass is left of the image centre
    finest = s.pyramid.maps[-1]
    cols = np.arange(finest.shape[2]) + 0.5
    c_left = (finest[0].sum(0) * cols).sum() / finest[0].sum()
    c_right = (finest[1].sum(0) * cols).sum() / finest[1].sum()
    assert c_left < c_right


def test_swapping_hand_poses_changes_the_sample(small_template, small_hierarchy):
    rig = sd.HandRig.from_template(small_template)
    scene = sd.sample_scene(4, sd.SynthConfig())
    swapped = sd.SceneParams({"left": scene.pose["right"], "right": scene.pose["left"]}, scene.separation,
                             scene.offset, scene.depth_gap, scene.camera)
    a, b = sd.place_hands(rig, scene), sd.place_hands(rig, swapped)
    assert not np.allclose(a["left"], b["left"])
    # the swapped left hand is the mirrored right-hand pose, up to translation
    shape = sd.mirror(sd.pose_hand(rig, scene.pose["right"]))
    np.testing.assert_allclose(b["left"] - b["left"].mean(0), shape - shape.mean(0), atol=1e-14)


def test_split_counts_and_disjoint_seeds():
    train, test = sd.split_seeds(10, 0, 0.8)
    assert len(train) == 8 and len(test) == 2 and not set(train) & set(test)
    with pytest.raises(ValueError):
        sd.split_seeds(1, 0, 0.8)


def test_pose_marginals_are_uniform():
    poses = np.array([sd.sample_scene(i, sd.SynthConfig()).pose["right"] for i in range(1000)])
    for k in range(sd.POSE_DIM):
        assert stats.kstest(poses[:, k], "uniform", args=(-1, 2)).statistic < 0.1


def test_level_targets_are_pooled_meshes(sample, small_hierarchy):
    for h in sd.HANDS:
        for t in range(3):
            np.testing.assert_allclose(sample.level_vertices[h][t], small_hierarchy.pool(sample.vertices[h], t))


def test_dataset_cache_round_trip(tmp_path, small_template, small_hierarchy):
    train, test = sd.make_dataset(4, 2, 0.5, small_template, small_hierarchy)
    sd.save_dataset(tmp_path, train, test)
    tr2, te2 = sd.load_dataset(tmp_path)
    assert len(tr2) == 2 and len(te2) == 2
    for a, b in zip(list(train) + list(test), list(tr2) + list(te2)):
        assert a.seed == b.seed and a.camera == b.camera
        np.testing.assert_array_equal(a.vertices["right"], b.vertices["right"])
        np.testing.assert_array_equal(a.pyramid.maps[1], b.pyramid.maps[1])
        np.testing.assert_array_equal(a.pyramid.global_feature, b.pyramid.global_feature)
