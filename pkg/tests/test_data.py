import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from afforddex import data as D

WORDS = st.text(alphabet="abcdefghijklmnopqrstuvwxyz", min_size=1, max_size=8)


@pytest.fixture(scope="session")
def small_ds(hand):
    cfg = D.DataConfig(categories=("ball", "hammer"), unseen=("hammer",), scenes_per_category=2, grasps_per_group=1, points_per_scene=256)
    return D.generate_dataset(cfg, hand)


@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10))
def test_direction_discretization_picks_the_dominant_axis(x, y, z):
    v = np.array([x, y, z])
    if not np.any(v != 0):
        return
    tok, onehot = D.discretize_direction(v)
    assert onehot.sum() == 1 and D.DIRECTIONS[int(np.argmax(onehot))] == tok
    axis = D.direction_vector(tok)
    assert axis @ v == np.max(np.abs(v))


def test_direction_ties_go_to_the_earlier_axis():
    assert D.discretize_direction([1.0, 1.0, 0.0])[0] == "front"
    assert D.discretize_direction([0.0, -2.0, 2.0])[0] == "right"
    with pytest.raises(D.InvalidInputError):
        D.discretize_direction([0, 0, 0])


@given(WORDS, WORDS, WORDS, st.sampled_from(D.DIRECTIONS))
def test_guidance_sentence_round_trip(cat, intention, part, direction):
    rec = D.GuidanceRecord(cat, intention, part, direction)
    assert D.parse_guidance(D.format_guidance(rec)) == rec


def test_guidance_validation():
    with pytest.raises(D.InvalidInputError):
        D.GuidanceRecord("mug", "use", "handle", "sideways")
    with pytest.raises(D.InvalidInputError):
        D.parse_guidance("grab it")


@pytest.mark.parametrize("kind,size", [("sphere", (0.5,)), ("box", (0.5, 0.5, 0.5)), ("cylinder", (0.5, 0.5))])
def test_primitive_sdf_at_known_points(kind, size):
    p = D.Primitive(kind, "body", np.zeros(3), np.eye(3), size)
    assert p.sdf(np.array([[0, 0, 0.0]]))[0] == pytest.approx(-0.5)
    assert p.sdf(np.array([[1.0, 0, 0]]))[0] == pytest.approx(0.5)


def test_torus_sdf():
    p = D.Primitive("torus", "handle", np.zeros(3), np.eye(3), (1.0, 0.2))
    assert p.sdf(np.array([[1.0, 0, 0]]))[0] == pytest.approx(-0.2)
    assert p.sdf(np.array([[0.0, 0, 0]]))[0] == pytest.approx(0.8)


@pytest.mark.parametrize("template", sorted(D.TEMPLATES))
def test_scene_generation_is_deterministic_and_serializable(template):
    a, b = D.generate_scene(7, template), D.generate_scene(7, template)
    assert a.to_dict() == b.to_dict()
    back = D.SceneSpec.from_dict(json.loads(json.dumps(a.to_dict())))
    p = np.random.default_rng(0).normal(size=(20, 3)) * 0.1
    assert np.allclose(back.sdf(p), a.sdf(p))
    assert {part for _, part, _ in a.tasks} <= set(a.parts)


def test_rendered_cloud_lies_on_the_surface():
    spec = D.generate_scene(3, "mug")
    cloud = D.build_scene_cloud(spec, 256)
    assert cloud.points.shape == (256, 3)
    assert np.max(np.abs(spec.sdf(cloud.points))) < 1e-4
    assert np.allclose(np.linalg.norm(cloud.normals, axis=1), 1.0, atol=1e-5)
    assert set(np.unique(cloud.labels)) <= set(range(len(spec.parts)))


def test_voxel_and_farthest_point_sampling(rng):
    pts = rng.random((500, 3))
    keep = D.voxel_downsample(pts, 0.25)
    keys = np.floor(pts[keep] / 0.25)
    assert len(np.unique(keys, axis=0)) == len(keep) == len(np.unique(np.floor(pts / 0.25), axis=0))
    sel = D.farthest_point_sample(pts, 50)
    assert len(np.unique(sel)) == 50
    assert np.array_equal(sel, D.farthest_point_sample(pts, 50))


def test_dataset_split_has_no_unseen_leakage(small_ds):
    assert "hammer" not in small_ds.train_categories()
    assert all(r.split == "test_unseen" for r in small_ds.scenes.values() if r.cloud.spec.category == "hammer")
    assert small_ds.groups


def test_stored_grasps_pass_the_filters_again(small_ds, hand):
    assert D.recheck_filters(small_ds, hand) == []


def test_dataset_round_trip_is_byte_exact(small_ds, tmp_path):
    D.save_dataset(small_ds, tmp_path / "a")
    back = D.load_dataset(tmp_path / "a")
    D.save_dataset(back, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_single_bit_corruption_is_detected(small_ds, tmp_path):
    D.save_dataset(small_ds, tmp_path)
    blob = sorted((tmp_path / "blobs").iterdir())[0]
    raw = bytearray(blob.read_bytes())
    raw[len(raw) // 2] ^= 0x01
    blob.write_bytes(bytes(raw))
    with pytest.raises(D.DatasetCorruptionError):
        D.load_dataset(tmp_path)


def test_missing_blob_or_manifest(small_ds, tmp_path):
    with pytest.raises(D.DatasetIntegrityError):
        D.load_dataset(tmp_path)
    D.save_dataset(small_ds, tmp_path)
    sorted((tmp_path / "blobs").iterdir())[0].unlink()
    with pytest.raises(D.DatasetIntegrityError):
        D.load_dataset(tmp_path)


def test_penetrating_grasp_helper(hand):
    from afforddex.optimize import max_penetration_depth

    cloud = D.build_scene_cloud(D.generate_scene(11, "ball"), 256)
    vec, aff = D.penetrating_grasp(cloud, hand, np.random.default_rng(0))
    assert max_penetration_depth(cloud.points, vec, hand) > 0.005
    assert aff.values.max() == 1.0


def test_config_validation():
    with pytest.raises(D.InvalidInputError):
        D.DataConfig(categories=("teapot",))
    with pytest.raises(D.InvalidInputError):
        D.DataConfig(unseen=("teapot",))
