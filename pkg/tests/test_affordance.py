import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from afforddex import affordance as A
from afforddex import geometry
from afforddex.hand import GraspPose, forward_kinematics, matrix_to_rot6d


def sphere(n, r, rng):
    v = rng.normal(size=(n, 3))
    return r * v / np.linalg.norm(v, axis=1, keepdims=True)


def top_grasp(hand, z=0.07):
    R = np.diag([1.0, -1.0, -1.0])  # palm facing down
    return GraspPose(matrix_to_rot6d(R), np.array([0.0, 0.0, z]), np.zeros(hand.dof))


def test_contact_map_is_exhaustive_min_distance(hand, rng):
    pts = sphere(200, 0.04, rng)
    posed = forward_kinematics(hand, top_grasp(hand))
    d = A.contact_map(pts, posed)
    ref = np.array([np.min(np.linalg.norm(posed.surface - p, axis=1)) for p in pts])
    assert np.allclose(d, ref, atol=1e-15)


@given(st.integers(1, 6), st.integers(1, 30), st.integers(0, 1000))
def test_union_min_matches_elementwise_min(k, n, seed):
    maps = np.random.default_rng(seed).random((k, n))
    assert np.array_equal(A.union_min(list(maps)), maps.min(axis=0))
    assert np.array_equal(A.union_min(list(maps[::-1])), A.union_min(list(maps)))


def test_union_min_rejects_ragged_or_empty():
    with pytest.raises(A.InvalidInputError):
        A.union_min([])
    with pytest.raises(A.InvalidInputError):
        A.union_min([np.zeros(3), np.zeros(4)])


def test_normalize_distance_endpoints():
    out = A.normalize_distance(np.array([0.0, 0.01, 0.02, 0.5]), 0.02)
    assert np.allclose(out, [1.0, 0.5, 0.0, 0.0])


def test_ground_truth_map_is_high_near_the_hand(hand, rng):
    pts = sphere(600, 0.04, rng)
    grp = A.GraspGroup("s", {"category": "ball"}, [top_grasp(hand, 0.06)])
    amap = A.build_affordance_gt(pts, grp, hand)
    assert amap.values.min() >= 0 and amap.values.max() <= 1
    assert amap.values[pts[:, 2] > 0.035].mean() > amap.values[pts[:, 2] < -0.035].mean()
    # smoothing is a convex combination over the 16 nearest neighbours, so a point whose
    # whole neighbourhood lies beyond d_max stays at zero
    raw = A.contact_map(pts, forward_kinematics(hand, grp.grasps[0]))
    d2 = ((pts[:, None] - pts[None]) ** 2).sum(-1)
    far = np.array([np.all(raw[np.argsort(row, kind="stable")[:16]] > A.DEFAULT_D_MAX) for row in d2])
    assert far.sum() > 50
    assert np.all(amap.values[far] == 0.0)


def test_smoothing_off_is_plain_inversion(hand, rng):
    pts = sphere(100, 0.04, rng)
    g = top_grasp(hand)
    amap = A.build_affordance_gt(pts, A.GraspGroup("s", {}, [g]), hand, smooth=False)
    expect = A.normalize_distance(A.contact_map(pts, forward_kinematics(hand, g)))
    assert np.array_equal(amap.values, expect)


def test_more_grasps_never_lower_raw_affordance(hand, rng):
    pts = sphere(100, 0.04, rng)
    g1, g2 = top_grasp(hand, 0.06), top_grasp(hand, 0.07)
    one = A.build_affordance_gt(pts, A.GraspGroup("s", {}, [g1]), hand, smooth=False).values
    two = A.build_affordance_gt(pts, A.GraspGroup("s", {}, [g1, g2]), hand, smooth=False).values
    assert np.all(two >= one)


def test_part_affordance_and_validation():
    amap = A.part_affordance(np.array([0, 1, 1, 2]), 1)
    assert amap.values.tolist() == [0, 1, 1, 0]
    with pytest.raises(A.InvalidInputError):
        A.AffordanceMap(np.array([1.5]))


def test_save_load_round_trip(tmp_path):
    amap = A.AffordanceMap(np.array([0.0, 0.25, 1.0]), "ground-truth", {"sigma": 0.01})
    A.save_affordance(amap, tmp_path / "m")
    back = A.load_affordance(tmp_path / "m")
    assert np.array_equal(back.values, amap.values)
    assert back.provenance == "ground-truth" and back.meta == {"sigma": 0.01}


def test_empty_group_is_rejected():
    with pytest.raises(A.InvalidInputError):
        A.GraspGroup("s", {}, [])


def test_default_sigma_is_average_spacing(hand, rng):
    pts = sphere(150, 0.04, rng)
    amap = A.build_affordance_gt(pts, A.GraspGroup("s", {}, [top_grasp(hand)]), hand)
    assert amap.meta["sigma"] == pytest.approx(geometry.avg_nn_distance(pts))
