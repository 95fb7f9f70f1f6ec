import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import SMALL_B, small_detector
from roict.geometry import (
    Ball,
    Detector,
    Ray,
    SourceGeometry,
    active_ray_volume,
    cap_area,
    cap_cos,
    ray_hits_ball,
    rays_hit_ball,
    sample_sources,
    truncated_ray_volume,
    tuy_check,
)

finite = st.floats(-5, 5, allow_nan=False)
vec3 = st.tuples(finite, finite, finite)


def _unit(v):
    v = np.asarray(v, float)
    n = np.linalg.norm(v)
    return v / n if n > 1e-6 else np.array([1.0, 0.0, 0.0])


# -- rays and balls ------------------------------------------------------------


def test_ray_through_center_hits():
    assert ray_hits_ball(Ray((2, 0, 0), (-1, 0, 0)), Ball((0, 0, 0), 1.0))


def test_ray_passing_at_distance_two_misses():
    assert not ray_hits_ball(Ray((2, 0, 0), (0, 1, 0)), Ball((0, 0, 0), 1.0))


def test_half_ray_pointing_away_misses():
    assert not ray_hits_ball(Ray((2, 0, 0), (1, 0, 0)), Ball((0, 0, 0), 1.0))


def test_tangent_ray_counts_as_hit():
    assert ray_hits_ball(Ray((-3, 1, 0), (1, 0, 0)), Ball((0, 0, 0), 1.0))


def test_ray_direction_must_be_unit():
    with pytest.raises(ValueError):
        Ray((0, 0, 0), (1, 1, 0))


@given(vec3, vec3, vec3, st.floats(0.1, 3))
def test_hit_test_matches_closest_point(a, d, c, r):
    d = _unit(d)
    a, c = np.asarray(a), np.asarray(c)
    # brute force: dense samples along the half ray, step well below the tolerance
    t = np.linspace(0.0, 20.0, 40001)
    dist = np.min(np.linalg.norm(a + t[:, None] * d - c, axis=1))
    hit = bool(rays_hit_ball(a, d, c, r))
    if abs(dist - r) > 1e-3:
        assert hit == (dist < r)


@given(vec3, vec3, st.floats(0.5, 3), st.floats(0.05, 1.0))
def test_hitting_inner_ball_implies_hitting_outer(a, d, rb, frac):
    d = _unit(d)
    a = np.asarray(a) + np.array([10.0, 0.0, 0.0])
    B = Ball((0, 0, 0), rb)
    C = B.concentric(frac * rb)
    if ray_hits_ball(Ray(a, d), C):
        assert ray_hits_ball(Ray(a, d), B)


def test_ball_containment():
    B = Ball((0, 0, 0), 2.0)
    assert B.contains(Ball((0.5, 0, 0), 1.5))
    assert not B.contains(Ball((0.6, 0, 0), 1.5))


# -- cap formulas ----------------------------------------------------------------


def test_cap_cos_zero_aperture():
    assert cap_cos(0.0, 3.0) == 1.0


def test_cap_cos_u_equals_v():
    assert cap_cos(2.0, 2.0) == pytest.approx(1 / math.sqrt(2), abs=1e-15)


def test_cap_cos_thirty_degrees():
    assert cap_cos(1.0, math.sqrt(3.0)) == pytest.approx(math.sqrt(3.0) / 2, abs=1e-15)


def test_cap_cos_rejects_source_inside():
    with pytest.raises(ValueError):
        cap_cos(2.0, 1.0)


def test_cap_cos_exact_is_tangent_cone():
    # tangent cone from distance 2 to a unit ball has half-angle 30 degrees
    assert cap_cos(1.0, 2.0, exact=True) == pytest.approx(math.cos(math.pi / 6), abs=1e-15)


@pytest.mark.parametrize("c,area", [(1.0, 0.0), (0.0, 2 * math.pi), (0.5, math.pi)])
def test_cap_area_values(c, area):
    assert cap_area(c) == pytest.approx(area, abs=1e-15)


def test_cap_area_domain():
    with pytest.raises(ValueError):
        cap_area(1.5)


@given(st.floats(0.0, 10.0), st.floats(0.0, 10.0), st.floats(10.5, 100.0))
def test_cap_area_monotone_in_radius(u1, u2, v):
    lo, hi = sorted((u1, u2))
    assert cap_area(cap_cos(lo, v)) <= cap_area(cap_cos(hi, v)) + 1e-15


@given(st.floats(0.0, 10.0), st.floats(10.5, 100.0), st.floats(10.5, 100.0))
def test_cap_area_monotone_in_distance(u, v1, v2):
    lo, hi = sorted((v1, v2))
    assert cap_area(cap_cos(u, hi)) <= cap_area(cap_cos(u, lo)) + 1e-15


def test_exact_cap_matches_monte_carlo():
    rng = np.random.default_rng(0)
    d = rng.normal(size=(400000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    hit = rays_hit_ball(np.array([5.0, 0, 0]), d, np.zeros(3), 2.0)
    frac = hit.mean()
    assert frac == pytest.approx(cap_area(cap_cos(2.0, 5.0, exact=True)) / (4 * math.pi), rel=0.01)


# -- sources ---------------------------------------------------------------------


def test_circle_sources_are_one_degree_apart():
    B = Ball((0, 0, 0), 128.0)
    g = SourceGeometry.circle(1472.0, Detector(68, 68, 4.0, 1472.0), B, n_views=360)
    s = sample_sources(g)
    assert len(s) == 360
    ang = np.degrees(np.unwrap(np.arctan2(s.positions[:, 1], s.positions[:, 0])))
    np.testing.assert_allclose(np.diff(ang), 1.0, atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(s.positions, axis=1), 1472.0)


def test_helix_counts_views_per_turn():
    B = Ball((0, 0, 0), 64.0)
    g = SourceGeometry.helix(384.0, 35.0, 8.0, small_detector(16, 768.0, 384.0, 64.0), B, n_views=128)
    s = g.samples
    assert len(s) == 1024
    assert np.all(np.diff(s.t) > 0)


def test_sphere_with_coarsest_steps_has_two_poles():
    g = SourceGeometry.sphere(120.0, small_detector(), SMALL_B, polar_step=180.0, azimuth_step=360.0)
    np.testing.assert_allclose(g.samples.positions, [[0, 0, 120.0], [0, 0, -120.0]], atol=1e-12)
    assert g.samples.weight.sum() == pytest.approx(4 * math.pi * 120.0**2)


def test_detector_frame_is_orthonormal_and_faces_ball(small_sphere):
    s = small_sphere.samples
    for a, b in ((s.w, s.e_u), (s.w, s.e_v), (s.e_u, s.e_v)):
        np.testing.assert_allclose(np.sum(a * b, axis=1), 0.0, atol=1e-12)
    to_center = -s.positions / np.linalg.norm(s.positions, axis=1, keepdims=True)
    np.testing.assert_allclose(s.w, to_center, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(s.det_center - s.positions, axis=1), small_sphere.detector.sdd)


def test_detector_too_small_is_rejected():
    with pytest.raises(ValueError, match="detector"):
        SourceGeometry.circle(120.0, Detector(8, 8, 1.0, 240.0), SMALL_B, n_views=10)


def test_sources_must_enclose_ball():
    with pytest.raises(ValueError):
        SourceGeometry.circle(30.0, small_detector(), SMALL_B, n_views=10)


def test_geometry_json_round_trip(small_twin):
    g2 = SourceGeometry.from_dict(small_twin.to_dict())
    assert g2.fingerprint() == small_twin.fingerprint()
    np.testing.assert_array_equal(g2.samples.positions, small_twin.samples.positions)


# -- ray-set volumes ----------------------------------------------------------------


def test_truncated_volume_vanishes_for_c_equal_b(small_circle):
    assert truncated_ray_volume(small_circle, SMALL_B, SMALL_B) == 0.0


def test_truncated_volume_rejects_roi_outside_ball(small_circle):
    with pytest.raises(ValueError):
        truncated_ray_volume(small_circle, SMALL_B, Ball((10, 0, 0), 30.0))


@pytest.mark.parametrize("exact", [True, False])
def test_truncated_volume_circle_closed_form(small_circle, exact):
    R = small_circle.radius
    C = SMALL_B.concentric(12.0)
    expect = 2 * math.pi * R * 2 * math.pi * (cap_cos(12.0, R, exact) - cap_cos(32.0, R, exact))
    assert truncated_ray_volume(small_circle, SMALL_B, C, exact) == pytest.approx(expect, rel=1e-12)


def test_truncated_volume_is_monotone_and_lipschitz(small_sphere):
    radii = np.linspace(2.0, 30.0, 9)
    vols = np.array([truncated_ray_volume(small_sphere, SMALL_B, SMALL_B.concentric(r)) for r in radii])
    assert np.all(np.diff(vols) < 0)
    ratio = vols / (SMALL_B.radius - radii)
    med = np.median(ratio)
    assert np.all(ratio <= 3 * med) and np.all(ratio >= med / 3)


def test_active_volume_is_truncated_volume_of_a_point(small_sphere):
    tiny = SMALL_B.concentric(1e-9)
    assert truncated_ray_volume(small_sphere, SMALL_B, tiny) == pytest.approx(active_ray_volume(small_sphere, SMALL_B))


# -- Tuy condition ----------------------------------------------------------------


def test_tuy_twin_circles_pass(small_twin):
    rep = tuy_check(small_twin, SMALL_B, n_point_samples=32, n_dir_samples=128)
    assert rep.passed and not rep.failures and rep.worst_margin > 1e-3


def test_tuy_single_circle_records_parallel_plane(small_circle):
    rep = tuy_check(small_circle, SMALL_B, n_point_samples=32, n_dir_samples=128)
    assert not rep.passed and rep.n_failures > 0
    # the circle-plane normal through an off-plane point is a failing sample
    normals = [th for x, th in rep.failures if abs(x[2]) > 1e-6]
    assert any(abs(abs(th[2]) - 1.0) < 1e-12 for th in normals)


def test_tuy_helix_small_ball_passes():
    B = Ball((0, 0, 0), 24.0)
    g = SourceGeometry.helix(100.0, 60.0, 4.0, small_detector(16, 200.0, 100.0, 24.0), B, n_views=64)
    assert tuy_check(g, B, n_point_samples=32, n_dir_samples=128).passed


@pytest.mark.parametrize("shrink", [0.3, 0.6, 0.95])
def test_tuy_twin_circles_for_inner_balls(small_twin, shrink):
    inner = Ball((1.0, -2.0, 0.5), shrink * 30.0)
    assert tuy_check(small_twin, inner, n_point_samples=16, n_dir_samples=64).passed


def test_tuy_sphere_passes_trivially(small_sphere):
    rep = tuy_check(small_sphere, SMALL_B)
    assert rep.passed and "sphere" in rep.note
