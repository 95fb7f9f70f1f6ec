import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import SMALL_B, rel_l2
from roict.geometry import Ball, active_ray_volume, truncated_ray_volume
from roict.phantom import VoxelVolume, ball_phantom, shepp_logan_3d, voxelize
from roict.projector import (
    ParallelGrid,
    ProjectionSet,
    complement,
    forward,
    forward_cone,
    forward_parallel,
    ray_mask,
    ray_weights,
    truncate,
)


@pytest.fixture(scope="module")
def small_parallel(small_grid):
    return ParallelGrid.hemisphere(60, small_grid.n, small_grid.voxel_size, small_grid.ball())


@pytest.fixture(scope="module")
def sl_small():
    return shepp_logan_3d(31.9)


def test_zero_volume_projects_to_zero(small_circle, small_grid, small_parallel):
    z = small_grid.zeros()
    assert not forward_cone(z, small_circle).values.any()
    assert not forward_parallel(z, small_parallel).values.any()


def test_central_pixel_is_the_diameter(small_circle):
    p = forward_cone(ball_phantom(20.0), small_circle)
    det = small_circle.detector
    # with an even detector the central pixel ray passes near, not through, the centre
    i, j = det.rows // 2, det.cols // 2
    d = small_circle.pixel_directions(0)[i, j]
    a = small_circle.samples.positions[0]
    miss = np.linalg.norm(np.cross(-a, d))  # distance of the ray from the centre
    assert p.values[0, i, j] == pytest.approx(2 * math.sqrt(20.0**2 - miss**2), rel=1e-12)


def test_parallel_centre_line_is_the_diameter(small_grid):
    g = ParallelGrid.hemisphere(10, 17, 2.0, Ball((0, 0, 0), 16.0))
    p = forward_parallel(ball_phantom(10.0), g)
    np.testing.assert_allclose(p.values[:, 8, 8], 20.0, rtol=1e-12)


def test_full_lines_do_not_depend_on_orientation(sl_small, small_parallel):
    i = 7
    pts = small_parallel.line_points(i)
    th = small_parallel.directions[i]
    a = sl_small.line_integrals(pts, th, full_line=True)
    b = sl_small.line_integrals(pts, -th, full_line=True)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_phantom_path_equals_the_oracle(sl_small, small_sphere):
    p = forward_cone(sl_small, small_sphere)
    for i in (0, 5, len(small_sphere.samples) - 1):
        oracle = sl_small.line_integrals(small_sphere.samples.positions[i], small_sphere.pixel_directions(i))
        np.testing.assert_array_equal(p.values[i], oracle)


def test_voxel_path_converges_to_the_oracle(small_circle):
    ph = ball_phantom(24.0)
    exact = forward_cone(ph, small_circle).values
    errs = [rel_l2(forward_cone(voxelize(ph, n, 64.0 / n), small_circle).values, exact) for n in (16, 32, 64)]
    assert errs[0] > errs[1] > errs[2] and errs[2] < 0.03


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_voxel_path_is_linear(alpha, beta, seed):
    from conftest import small_detector
    from roict.geometry import SourceGeometry

    geom = SourceGeometry.circle(120.0, small_detector(12), SMALL_B, n_views=6)
    rng = np.random.default_rng(seed)
    f = VoxelVolume(rng.normal(size=(16,) * 3), 4.0)
    g = VoxelVolume(rng.normal(size=(16,) * 3), 4.0)
    lhs = forward(f * alpha + g * beta, geom).values
    rhs = alpha * forward(f, geom).values + beta * forward(g, geom).values
    scale = max(np.abs(lhs).max(), 1e-300)
    assert np.abs(lhs - rhs).max() <= 1e-9 * scale


def test_support_outside_ball_is_rejected(small_circle):
    with pytest.raises(ValueError):
        forward_cone(shepp_logan_3d(40.0), small_circle)


# -- truncation -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def sl_data(sl_small, small_sphere):
    return forward_cone(sl_small, small_sphere)


def test_truncate_to_b_is_identity(sl_data):
    t = truncate(sl_data, SMALL_B)
    assert t.mask.all()
    np.testing.assert_array_equal(t.values, sl_data.values)


def test_truncate_zeroes_unmasked_rays_and_is_idempotent(sl_data):
    C = SMALL_B.concentric(12.0)
    t = truncate(sl_data, C)
    assert not t.values[~t.mask].any()
    np.testing.assert_array_equal(t.mask, ray_mask(sl_data.geometry, C))
    t2 = truncate(t, C)
    np.testing.assert_array_equal(t2.values, t.values)
    np.testing.assert_array_equal(t2.mask, t.mask)


def test_tiny_roi_keeps_only_near_central_rays(sl_data):
    t = truncate(sl_data, SMALL_B.concentric(1e-6))
    # even detectors have no ray through the centre
    assert t.mask.sum() == 0


def test_truncate_rejects_roi_outside_ball(sl_data):
    with pytest.raises(ValueError):
        truncate(sl_data, Ball((5, 0, 0), 30.0))


@given(st.floats(1.0, 32.0), st.floats(-4, 4), st.floats(-4, 4))
def test_mask_partition_is_exact(sl_data, r, cx, cy):
    r = min(r, SMALL_B.radius - math.hypot(cx, cy))
    C = Ball((cx, cy, 0.0), max(r, 0.5))
    t = truncate(sl_data, C)
    c = complement(sl_data, C)
    np.testing.assert_array_equal(t.values + c.values, sl_data.values)
    np.testing.assert_array_equal(t.mask ^ c.mask, np.ones_like(t.mask))


def test_complement_of_b_is_zero(sl_data):
    assert not complement(sl_data, SMALL_B).values.any()


def test_complement_needs_full_data(sl_data):
    with pytest.raises(ValueError):
        complement(truncate(sl_data, SMALL_B.concentric(10.0)), SMALL_B.concentric(5.0))


def test_complement_norm_decreases_with_radius(sl_data):
    norms = [complement(sl_data, SMALL_B.concentric(r)).l2_norm() for r in (8.0, 14.0, 20.0, 26.0)]
    assert all(a > b for a, b in zip(norms, norms[1:]))


def test_masked_fraction_matches_ray_volume():
    from roict.config import desk_geometry

    geom = desk_geometry("sphere", n_det=48, polar_step=12.0, azimuth_step=12.0)
    B = geom.ball
    w = ray_weights(geom)
    hit_b = ray_mask(geom, B)
    for frac in (0.3, 0.6):
        C = B.concentric(frac * B.radius)
        kept = ray_mask(geom, C)
        measured = float((w * (hit_b & ~kept)).sum() / (w * hit_b).sum())
        predicted = truncated_ray_volume(geom, B, C) / active_ray_volume(geom, B)
        assert measured == pytest.approx(predicted, abs=0.02)


def test_ray_weights_sum_to_the_active_volume_when_detector_is_fine(small_circle):
    # every ray on the detector is weighted by its solid angle; rays meeting B sum to the cap
    w = ray_weights(small_circle)
    hit = ray_mask(small_circle, SMALL_B)
    assert (w * hit).sum() == pytest.approx(active_ray_volume(small_circle, SMALL_B), rel=0.05)


# -- files ------------------------------------------------------------------------------


def test_projection_file_round_trip(tmp_path, sl_data):
    t = truncate(sl_data, SMALL_B.concentric(10.0))
    t.save(tmp_path / "p.bin")
    back = ProjectionSet.load(tmp_path / "p.bin")
    np.testing.assert_array_equal(back.mask, t.mask)
    np.testing.assert_array_equal(back.values, t.values.astype(np.float32))
    assert back.roi == t.roi and back.region == "roi"


def test_projection_file_detects_geometry_edits(tmp_path, sl_data):
    import json

    sl_data.save(tmp_path / "p.bin")
    meta = json.loads((tmp_path / "p.bin.json").read_text())
    meta["geometry"]["radius"] = 121.0
    (tmp_path / "p.bin.json").write_text(json.dumps(meta))
    with pytest.raises(ValueError, match="hash"):
        ProjectionSet.load(tmp_path / "p.bin")
