import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from afforddex import geometry as G


def brute_nearest(q, t):
    out = np.empty(len(q))
    for i, a in enumerate(q):
        best = math.inf
        for b in t:
            dx, dy, dz = a[0] - b[0], a[1] - b[1], a[2] - b[2]
            best = min(best, math.sqrt(dx * dx + dy * dy + dz * dz))
        out[i] = best
    return out


coords = st.floats(-1.0, 1.0, allow_nan=False, width=32)
clouds = st.integers(1, 25).flatmap(lambda n: arrays(np.float64, (n, 3), elements=coords))


@given(clouds, clouds)
def test_nearest_distances_match_double_loop(q, t):
    assert np.array_equal(G.nearest_distances(q, t), brute_nearest(q, t))


@given(clouds, clouds)
def test_chamfer_is_symmetric_and_nonnegative(a, b):
    assert G.chamfer_distance(a, b) == G.chamfer_distance(b, a)
    assert G.chamfer_distance(a, b) >= 0.0
    assert G.chamfer_distance(a, a) == 0.0


def test_nearest_breaks_ties_to_lowest_index():
    t = np.array([[1.0, 0, 0], [-1.0, 0, 0], [1.0, 0, 0]])
    d, i = G.nearest(np.zeros((1, 3)), t)
    assert i[0] == 0 and d[0] == 1.0


def test_normalized_chamfer_divides_by_counts():
    a = np.zeros((2, 3))
    b = np.array([[0.0, 0, 1.0]])
    assert G.chamfer_distance(a, b) == pytest.approx(3.0)
    assert G.chamfer_distance(a, b, normalized=True) == pytest.approx(2.0)


def test_chamfer_with_grad_matches_finite_differences(rng):
    a = rng.normal(size=(2, 7, 3))
    b = rng.normal(size=(2, 5, 3))
    loss, ga, gb = G.chamfer_with_grad(a, b)
    for i in range(2):
        assert loss[i] == pytest.approx(G.chamfer_distance(a[i], b[i]), rel=1e-12)
    h = 1e-6
    for arr, g in ((a, ga), (b, gb)):
        for idx in [(0, 1, 2), (1, 3, 0), (1, 0, 1)]:
            old = arr[idx]
            arr[idx] = old + h
            lp = G.chamfer_with_grad(a, b)[0].sum()
            arr[idx] = old - h
            lm = G.chamfer_with_grad(a, b)[0].sum()
            arr[idx] = old
            assert (lp - lm) / (2 * h) == pytest.approx(g[idx], rel=1e-5, abs=1e-8)


@pytest.mark.parametrize("bad", [np.zeros((0, 3)), np.zeros((4, 2)), np.array([[0.0, np.nan, 0.0]])])
def test_invalid_clouds_are_rejected(bad):
    with pytest.raises(G.InvalidInputError):
        G.nearest_distances(bad, np.zeros((1, 3)))


def test_knn_matches_exhaustive_ranking_with_ties():
    # a grid has many exact ties in distance
    g = np.stack(np.meshgrid(*[np.arange(4.0)] * 3, indexing="ij"), -1).reshape(-1, 3)
    idx, d2 = G.NeighborIndex(g).knn(g, 7)
    for i, p in enumerate(g):
        full = G.sq_dist_matrix(p[None], g)[0]
        order = np.lexsort((np.arange(len(g)), full))[:7]
        assert np.array_equal(idx[i], order)
        assert np.array_equal(d2[i], full[order])


@given(st.integers(2, 40), st.integers(0, 10_000), st.floats(1e-3, 2.0), st.integers(1, 16))
def test_gaussian_weights_sum_to_one(n, seed, sigma, k):
    pts = np.random.default_rng(seed).normal(size=(n, 3))
    for nbr, w in G.gaussian_weights(pts, sigma, k=k):
        assert abs(w.sum() - 1.0) <= 1e-12
        assert np.all(w >= 0)


@given(st.integers(2, 40), st.integers(0, 10_000), st.floats(-5.0, 5.0))
def test_constant_field_is_a_fixed_point(n, seed, c):
    pts = np.random.default_rng(seed).normal(size=(n, 3))
    out = G.gaussian_smooth(pts, np.full(n, c), 0.3, k=8)
    assert np.allclose(out, c, rtol=0, atol=1e-12 * max(1.0, abs(c)))


def test_smoothing_neighbourhood_contains_self_and_radius_mode(rng):
    pts = rng.normal(size=(30, 3))
    for i, (nbr, w) in enumerate(G.gaussian_weights(pts, 0.5, radius=0.8)):
        assert i in nbr
        assert abs(w.sum() - 1) < 1e-12


def test_tiny_sigma_approaches_identity(rng):
    pts = rng.normal(size=(20, 3))
    v = rng.random(20)
    assert np.allclose(G.gaussian_smooth(pts, v, 1e-6, k=5), v)


def test_avg_nn_distance_of_a_line():
    pts = np.c_[np.arange(5.0), np.zeros(5), np.zeros(5)]
    assert G.avg_nn_distance(pts) == 1.0


def test_shape_descriptors_separate_lines_from_planes(rng):
    line = np.c_[np.linspace(0, 1, 60), 1e-4 * rng.normal(size=(60, 2))]
    plane = np.c_[rng.random((200, 2)), 1e-4 * rng.normal(size=200)]
    dl = G.local_shape_descriptors(line, 10)
    dp = G.local_shape_descriptors(plane, 10)
    assert np.median(dl[:, 0]) > 0.9
    assert np.median(dp[:, 1]) > np.median(dl[:, 1])
