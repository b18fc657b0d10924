import numpy as np
import pytest
from hypothesis import given, strategies as st

from topicsg.core import Box, box_iou
from topicsg.features import (
    ConfigError, ModelConfig, geometry_feature, load_precomputed, project_features, project_visual,
    save_precomputed, synth_features, union_feature,
)
from topicsg.synth import GenConfig, generate_scene


def naive_matvec(W, x):
    out = np.zeros(W.shape[0])
    for i in range(W.shape[0]):
        acc = 0.0
        for j in range(W.shape[1]):
            acc += W[i, j] * x[j]
        out[i] = acc
    return out


def test_model_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_tr=10, heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(d_l=0)
    with pytest.raises(ConfigError):
        ModelConfig(lam=-1)


def test_project_zero_weights_gives_bias():
    V = np.random.default_rng(0).normal(size=(5, 3))
    c = np.arange(4.0)
    out = project_visual(V, np.zeros((4, 5)), c)
    assert np.all(out == c[:, None])


def test_project_identity():
    V = np.random.default_rng(1).normal(size=(4, 6))
    assert np.array_equal(project_visual(V, np.eye(4), np.zeros(4)), V)


def test_project_matches_naive_oracle():
    rng = np.random.default_rng(2)
    W, b, v = rng.normal(size=(7, 9)), rng.normal(size=7), rng.normal(size=9)
    out = project_visual(v[:, None], W, b)[:, 0]
    np.testing.assert_allclose(out, naive_matvec(W, v) + b, atol=1e-9)


def test_project_dimension_mismatch():
    with pytest.raises(ConfigError):
        project_visual(np.zeros((5, 2)), np.zeros((3, 4)), np.zeros(3))


def test_project_linear_part_is_additive():
    rng = np.random.default_rng(3)
    W = rng.normal(size=(4, 6))
    V1, V2 = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    a = 0.3
    lhs = project_visual(a * V1 + (1 - a) * V2, W, np.zeros(4))
    rhs = a * project_visual(V1, W, np.zeros(4)) + (1 - a) * project_visual(V2, W, np.zeros(4))
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_geometry_identical_boxes():
    b = Box(10, 10, 4, 2)
    np.testing.assert_allclose(geometry_feature(b, b), [0, 0, 1, 2, 2, 1])


def test_geometry_adjacent_boxes():
    bi, bj = Box.from_corners(0, 0, 4, 4), Box.from_corners(4, 0, 8, 4)
    np.testing.assert_allclose(geometry_feature(bi, bj), [1, 0, 1, 1, 1, 0], atol=1e-12)


def test_geometry_nested_boxes():
    bi, bj = Box(5, 5, 4, 2), Box(5, 5, 2, 1)
    np.testing.assert_allclose(geometry_feature(bi, bj), [0, 0, 0.5, 2, 2, 0.25], atol=1e-12)


box_st = st.builds(Box, st.floats(-50, 50), st.floats(-50, 50), st.floats(0.5, 30), st.floats(0.5, 30))


@given(box_st, box_st, st.floats(0.1, 10), st.floats(-100, 100), st.floats(-100, 100))
def test_geometry_scale_translation_invariant(bi, bj, s, dx, dy):
    move = lambda b: Box(s * b.cx + dx, s * b.cy + dy, s * b.w, s * b.h)
    np.testing.assert_allclose(geometry_feature(move(bi), move(bj)), geometry_feature(bi, bj), atol=1e-9, rtol=1e-9)


@given(box_st, box_st)
def test_geometry_last_entry_is_iou(bi, bj):
    assert geometry_feature(bi, bj)[5] == box_iou(bi, bj)


def test_union_all_zero():
    out = union_feature(np.ones(5), np.ones(6), np.zeros((3, 69)), np.zeros(3), np.zeros((64, 6)), np.zeros(64))
    assert np.all(out == 0)


def test_union_ignores_geometry_when_branch_zero():
    rng = np.random.default_rng(4)
    d_u = 5
    W_u = np.zeros((d_u, d_u + 64))
    W_u[:, :d_u] = np.eye(d_u)
    v = rng.normal(size=d_u)
    outs = [union_feature(v, rng.normal(size=6), W_u, np.zeros(d_u), np.zeros((64, 6)), np.zeros(64)) for _ in range(3)]
    for o in outs:
        np.testing.assert_array_equal(o, v)


def test_union_matches_naive_oracle():
    rng = np.random.default_rng(5)
    d_u, d_l = 7, 4
    v, g = rng.normal(size=d_u), rng.normal(size=6)
    W_u, b_u = rng.normal(size=(d_l, d_u + 64)), rng.normal(size=d_l)
    W_g, b_g = rng.normal(size=(64, 6)), rng.normal(size=64)
    expect = naive_matvec(W_u, np.concatenate([v, naive_matvec(W_g, g) + b_g])) + b_u
    np.testing.assert_allclose(union_feature(v, g, W_u, b_u, W_g, b_g), expect, atol=1e-9)
    # column-matrix form agrees with the vector form
    np.testing.assert_allclose(union_feature(v[:, None], g[:, None], W_u, b_u, W_g, b_g)[:, 0], expect, atol=1e-9)


def test_union_dimension_mismatch():
    with pytest.raises(ConfigError):
        union_feature(np.ones(5), np.ones(6), np.zeros((3, 10)), np.zeros(3), np.zeros((64, 6)), np.zeros(64))


@pytest.fixture(scope="module")
def scene():
    return generate_scene(GenConfig(), 3)


def test_synth_features_deterministic(scene):
    cfg = ModelConfig()
    a, b = synth_features(scene, cfg), synth_features(scene, cfg)
    assert a.visual.tobytes() == b.visual.tobytes()
    assert a.union_raw.tobytes() == b.union_raw.tobytes()
    assert a.geometry.tobytes() == b.geometry.tobytes()
    assert a.pairs == b.pairs


def test_same_category_features_correlate():
    cfg = GenConfig()
    s1, s2 = generate_scene(cfg, 0), generate_scene(cfg, 1)
    common = {o.category for o in s1.objects} & {o.category for o in s2.objects}
    cat = sorted(common)[0]
    o1 = next(o for o in s1.objects if o.category == cat)
    o2 = next(o for o in s2.objects if o.category == cat)
    f1 = synth_features(s1, ModelConfig()).visual[:, s1.object_ids.index(o1.id)]
    f2 = synth_features(s2, ModelConfig()).visual[:, s2.object_ids.index(o2.id)]
    assert not np.array_equal(f1, f2)
    assert np.corrcoef(f1, f2)[0, 1] > 0.5


def test_global_feature_is_mean(scene):
    cfg = ModelConfig()
    rng = np.random.default_rng(6)
    params = {
        "visual.weight": rng.normal(size=(cfg.d_l, cfg.d_v)), "visual.bias": rng.normal(size=cfg.d_l),
        "union.weight": rng.normal(size=(cfg.d_l, cfg.d_u + 64)), "union.bias": rng.normal(size=cfg.d_l),
        "geometry.weight": rng.normal(size=(64, 6)), "geometry.bias": rng.normal(size=64),
    }
    fs = project_features(synth_features(scene, cfg), params)
    np.testing.assert_allclose(fs.global_feature, fs.visual_proj.mean(axis=1), atol=1e-9)
    assert np.all((fs.geometry[5] >= 0) & (fs.geometry[5] <= 1))


def test_precomputed_roundtrip(tmp_path, scene):
    cfg = ModelConfig()
    V = synth_features(scene, cfg).visual.astype(np.float32).astype(np.float64)
    save_precomputed({scene.image_id: V}, tmp_path / "feats.json")
    loaded = load_precomputed(tmp_path / "feats.json")
    assert np.array_equal(loaded[scene.image_id], V)
    fs = synth_features(scene, cfg, visual=loaded[scene.image_id])
    assert np.array_equal(fs.visual, V)


def test_precomputed_shape_checked(scene):
    with pytest.raises(ConfigError):
        synth_features(scene, ModelConfig(), visual=np.zeros((3, 2)))
