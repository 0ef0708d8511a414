import math

import numpy as np
import pytest
import torch

from mmfield import (
    CameraIntrinsics,
    LidarPattern,
    RayBatch,
    SamplingConfig,
    camera_rays,
    composite,
    importance_resample,
    lidar_rays,
    render_frame,
    stratified_samples,
)
from mmfield.errors import ConfigError, TrainingDiverged
from mmfield.rendering import (
    EVAL_SAMPLING,
    blend_background,
    drop_total,
    ray_box_span,
)

BOUNDS = ((-2.0, -2.0, -2.0), (2.0, 2.0, 2.0))
INTR = CameraIntrinsics(width=5, height=5, fx=2.0, fy=2.0, cx=2.0, cy=2.0)


def _t(x):
    return torch.as_tensor(x, dtype=torch.float64)


# ------------------------------------------------------------- camera rays

def test_camera_principal_point_is_optical_axis():
    batch = camera_rays(np.eye(4), INTR, BOUNDS, pixels=[(2, 2)])
    np.testing.assert_allclose(batch.dirs[0], [0.0, 0.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(batch.origins[0], [0.0, 0.0, 0.0], atol=1e-12)


def test_camera_one_focal_length_off_axis():
    # Column cx + fx lands one focal length to the right: direction (1,0,1).
    batch = camera_rays(np.eye(4), INTR, BOUNDS, pixels=[(2, 4)])
    expected = np.array([1.0, 0.0, 1.0]) / math.sqrt(2.0)
    np.testing.assert_allclose(batch.dirs[0], expected, atol=1e-12)


def test_camera_yaw_rotation_maps_axis():
    # 90 degree yaw about +y sends the optical axis (0,0,1) to (1,0,0).
    pose = np.eye(4)
    pose[:3, :3] = [[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]]
    batch = camera_rays(pose, INTR, BOUNDS, pixels=[(2, 2)])
    np.testing.assert_allclose(batch.dirs[0], [1.0, 0.0, 0.0], atol=1e-12)


def test_camera_full_frame_layout():
    batch = camera_rays(np.eye(4), INTR, BOUNDS)
    assert len(batch) == 25
    assert batch.modality == "camera"
    np.testing.assert_array_equal(batch.ids[:6, 0], [0, 0, 0, 0, 0, 1])  # row-major
    np.testing.assert_allclose(np.linalg.norm(batch.dirs, axis=1), 1.0, atol=1e-12)
    assert np.all(batch.t_near >= 0.0)
    assert np.all(batch.t_far > batch.t_near)


# -------------------------------------------------------------- lidar rays

def test_lidar_axis_conventions():
    pattern = LidarPattern(
        n_beams=1, n_azimuth=4, elevation_min_deg=0.0, elevation_max_deg=0.0,
        max_range=10.0,
    )
    d = pattern.directions()
    np.testing.assert_allclose(d[0, 0], [1.0, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(d[0, 1], [0.0, 1.0, 0.0], atol=1e-12)  # azimuth pi/2


def test_lidar_full_sweep_count_and_order():
    pattern = LidarPattern(
        n_beams=32, n_azimuth=256, elevation_min_deg=-15.0, elevation_max_deg=5.0,
        max_range=2.5,
    )
    pose = np.eye(4)
    batch = lidar_rays(pose, pattern, BOUNDS)
    assert len(batch) == 32 * 256
    assert batch.modality == "lidar"
    np.testing.assert_allclose(np.linalg.norm(batch.dirs, axis=1), 1.0, atol=1e-12)
    # Top beam first: beam 0 has the highest elevation (largest z).
    assert pattern.elevations()[0] == pytest.approx(math.radians(5.0))
    z_beam0 = batch.dirs[0, 2]
    z_last = batch.dirs[-1, 2]
    assert z_beam0 > z_last
    np.testing.assert_array_equal(batch.ids[0], [0, 0])
    np.testing.assert_array_equal(batch.ids[1], [0, 1])
    # max_range clips the far plane.
    assert np.all(batch.t_far <= 2.5 + 1e-12)


# -------------------------------------------------------------- ray bounds

def test_ray_box_span_inside_and_outside():
    origins = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -5.0], [0.0, 5.0, 0.0]])
    dirs = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
    t_enter, t_exit, valid = ray_box_span(origins, dirs, BOUNDS)
    assert t_enter[0] == 0.0 and t_exit[0] == pytest.approx(2.0)
    assert t_enter[1] == pytest.approx(3.0) and t_exit[1] == pytest.approx(7.0)
    assert not valid[2]  # parallel ray outside the box never enters


def test_ray_batch_validation():
    o = np.zeros((1, 3))
    with pytest.raises(ConfigError):
        RayBatch(o, np.array([[0.0, 0.0, 2.0]]), np.zeros(1), np.ones(1), "camera")
    with pytest.raises(ConfigError):
        RayBatch(o, np.array([[0.0, 0.0, 1.0]]), np.ones(1), np.ones(1), "camera")


def test_ray_batch_take_carries_targets():
    o = np.zeros((3, 3))
    d = np.tile([0.0, 0.0, 1.0], (3, 1))
    batch = RayBatch(o, d, np.zeros(3), np.ones(3), "camera",
                     ids=np.arange(3)[:, None],
                     targets={"rgb": np.arange(9.0).reshape(3, 3)})
    sub = batch.take(np.array([2, 0]))
    np.testing.assert_array_equal(sub.ids[:, 0], [2, 0])
    np.testing.assert_array_equal(sub.targets["rgb"][0], [6.0, 7.0, 8.0])


# --------------------------------------------------------------- sampling

def test_stratified_midpoint_mode():
    t = stratified_samples(np.array([0.0]), np.array([2.0]), 4, rng=None)
    np.testing.assert_allclose(t[0], [0.25, 0.75, 1.25, 1.75], atol=1e-12)


def test_stratified_bin_membership():
    rng = np.random.default_rng(0)
    t = stratified_samples(np.zeros(1000), np.full(1000, 2.0), 2, rng=rng)
    assert np.all((t[:, 0] >= 0.0) & (t[:, 0] < 1.0))
    assert np.all((t[:, 1] >= 1.0) & (t[:, 1] < 2.0))
    assert np.all(np.diff(t, axis=1) > 0)


def test_stratified_within_range():
    rng = np.random.default_rng(1)
    near = rng.uniform(0, 1, size=50)
    far = near + rng.uniform(0.5, 2, size=50)
    t = stratified_samples(near, far, 17, rng=rng)
    assert np.all(t >= near[:, None])
    assert np.all(t <= far[:, None])


def test_importance_single_hot_bin():
    t_c = np.linspace(0.0, 3.0, 7)[None, :-1]  # bins of width 0.5 up to t_far=3
    w = np.zeros((1, 6))
    w[0, 2] = 5.0  # own interval [1.0, 1.5)
    for rng in (None, np.random.default_rng(2)):
        merged = importance_resample(t_c, w, np.zeros(1), np.array([3.0]), 8, rng)
        fine = np.setdiff1d(merged[0], t_c[0])
        assert len(fine) == 8
        assert np.all((fine >= 1.0) & (fine <= 1.5))


def test_importance_uniform_weights_linear_cdf():
    t_c = np.linspace(0.0, 1.0, 5)[None, :-1]  # edges 0,.25,.5,.75 then t_far=1
    w = np.ones((1, 4))
    merged = importance_resample(t_c, w, np.zeros(1), np.ones(1), 4, rng=None)
    fine = np.setdiff1d(merged[0], t_c[0])
    # Midpoint draws through a linear CDF land at the 1/8, 3/8, ... quantiles.
    np.testing.assert_allclose(fine, [0.125, 0.375, 0.625, 0.875], atol=1e-12)


def test_importance_zero_weights_fall_back_to_uniform():
    t_c = np.linspace(0.0, 2.0, 9)[None, :-1]
    w = np.zeros((1, 8))
    merged = importance_resample(t_c, w, np.zeros(1), np.array([2.0]), 16,
                                 rng=np.random.default_rng(3))
    fine = np.setdiff1d(merged[0], t_c[0])
    assert fine.min() < 0.5 and fine.max() > 1.5  # spread over the whole span


def test_importance_merged_strictly_sorted():
    rng = np.random.default_rng(4)
    t_c = np.sort(rng.uniform(0, 2, size=(32, 16)), axis=1)
    w = rng.uniform(0, 1, size=(32, 16))
    merged = importance_resample(t_c, w, np.zeros(32), np.full(32, 2.1), 16, rng)
    assert merged.shape == (32, 32)
    assert np.all(np.diff(merged, axis=1) > 0)


def test_sampling_config_defaults():
    assert SamplingConfig() == SamplingConfig(n_coarse=128, n_fine=32)
    assert (EVAL_SAMPLING.n_coarse, EVAL_SAMPLING.n_fine) == (64, 32)


# -------------------------------------------------------------- composite

def test_composite_transparent_ray():
    out = composite(
        _t([[1.0, 2.0, 3.0]]), _t([[0.0, 0.0, 0.0]]),
        {"color": _t([[[1, 0, 0], [0, 1, 0], [0, 0, 1]]])}, _t([4.0]),
    )
    np.testing.assert_array_equal(out.outputs["color"].numpy(), [[0.0, 0.0, 0.0]])
    assert float(out.depth[0]) == 0.0
    assert float(out.trans_residual[0]) == 1.0


def test_composite_opaque_single_surface():
    # One sample at t=5 with sigma*delta = 50 absorbs everything there.
    out = composite(
        _t([[5.0]]), _t([[100.0]]), {"color": _t([[[1.0, 0.0, 0.0]]])}, _t([5.5]),
    )
    assert float(out.depth[0]) == pytest.approx(5.0, abs=1e-6)
    np.testing.assert_allclose(out.outputs["color"][0].numpy(), [1, 0, 0], atol=1e-6)
    assert float(out.trans_residual[0]) < 1e-6


def test_composite_two_sample_hand_quadrature():
    # t = {2, 4}, sigma1*delta1 = ln 2, sigma2*delta2 = 50
    # -> w = {0.5, 0.5}, depth = 3.
    sigma = _t([[math.log(2.0) / 2.0, 50.0]])
    out = composite(_t([[2.0, 4.0]]), sigma, {}, _t([5.0]))
    np.testing.assert_allclose(out.weights[0].numpy(), [0.5, 0.5], atol=1e-6)
    assert float(out.depth[0]) == pytest.approx(3.0, abs=1e-6)


def test_composite_conservation_random():
    rng = np.random.default_rng(5)
    n, s = 10_000, 24
    t = np.sort(rng.uniform(0.0, 4.0, size=(n, s)), axis=1)
    t = np.maximum.accumulate(t + 1e-9 * np.arange(s), axis=1)
    sigma = rng.uniform(0.0, 30.0, size=(n, s))
    out = composite(_t(t), _t(sigma), {}, _t(np.full(n, 4.5)))
    total = out.weights.sum(dim=1) + out.trans_residual
    err = float((total - 1.0).abs().max())
    assert err < 1e-6
    assert float(out.weights.min()) >= 0.0


def test_composite_monotone_transmittance():
    rng = np.random.default_rng(6)
    t = np.sort(rng.uniform(0, 2, size=(64, 16)), axis=1)
    sigma = rng.uniform(0, 10, size=(64, 16))
    out = composite(_t(t), _t(sigma), {}, _t(np.full(64, 2.2)))
    w = out.weights.numpy()
    # T_i (exclusive transmittance) reconstructed from the weight prefix sums.
    trans = 1.0 - np.cumsum(w, axis=1)
    assert np.all(np.diff(trans, axis=1) <= 1e-12)


def test_composite_color_bounded_by_max_sample():
    rng = np.random.default_rng(7)
    t = np.sort(rng.uniform(0, 2, size=(32, 8)), axis=1)
    sigma = rng.uniform(0, 20, size=(32, 8))
    color = rng.uniform(0, 1, size=(32, 8, 3))
    out = composite(_t(t), _t(sigma), {"color": _t(color)}, _t(np.full(32, 2.1)))
    assert np.all(out.outputs["color"].numpy() <= color.max(axis=1) + 1e-9)


def test_composite_normalized_depth_in_range():
    rng = np.random.default_rng(8)
    near, far = 0.3, 2.4
    t = np.sort(rng.uniform(near, far, size=(128, 12)), axis=1)
    sigma = rng.uniform(0, 8, size=(128, 12))
    out = composite(_t(t), _t(sigma), {}, _t(np.full(128, far)))
    opacity = out.opacity.numpy()
    mask = opacity > 1e-6
    d_norm = out.depth.numpy()[mask] / opacity[mask]
    assert np.all(d_norm >= near - 1e-9)
    assert np.all(d_norm <= far + 1e-9)


def test_composite_rejects_nonfinite_density_with_ray_id():
    t = _t([[1.0, 2.0], [1.0, 2.0]])
    sigma = _t([[0.1, 0.2], [0.1, float("nan")]])
    with pytest.raises(TrainingDiverged, match="ray 7"):
        composite(t, sigma, {}, _t([3.0, 3.0]), ray_ids=np.array([3, 7]))
    with pytest.raises(TrainingDiverged, match=r"ray \(0, 5\)"):
        composite(t, sigma, {}, _t([3.0, 3.0]),
                  ray_ids=np.array([[4, 4], [0, 5]]))
    with pytest.raises(TrainingDiverged, match="ray 1"):
        composite(t, sigma, {}, _t([3.0, 3.0]))


def test_composite_opaque_wall_depth_within_spacing():
    wall, n = 1.3, 256
    t = stratified_samples(np.zeros(1), np.array([2.0]), n, rng=None)
    sigma = np.where(t >= wall, 1e4, 0.0)
    out = composite(_t(t), _t(sigma), {}, _t([2.0]))
    spacing = 2.0 / n
    assert abs(float(out.depth[0]) - wall) <= spacing


def test_drop_total_and_background_blend():
    t = _t([[1.0]])
    sigma = _t([[math.log(2.0)]])  # delta = 1 -> alpha = 0.5
    out = composite(t, sigma, {"drop": _t([[0.4]]), "color": _t([[[1.0, 0.0, 0.5]]])},
                    _t([2.0]))
    assert float(out.trans_residual[0]) == pytest.approx(0.5, abs=1e-12)
    assert float(drop_total(out)[0]) == pytest.approx(0.5 * 0.4 + 0.5, abs=1e-12)
    blended = blend_background(out, (0.0, 1.0, 1.0))
    np.testing.assert_allclose(
        blended[0].numpy(), [0.5, 0.5, 0.25 + 0.5], atol=1e-12
    )


# ------------------------------------------------------------ frame render

class _BlobField:
    """Analytic field: a soft density bump at the origin, position-coded color."""

    def query_density(self, pos, modality):
        r2 = torch.from_numpy((np.asarray(pos) ** 2).sum(axis=1))
        return 5.0 * torch.exp(-4.0 * r2)

    def query(self, pos, dirs, modality):
        sigma = self.query_density(pos, modality)
        p = torch.from_numpy(np.asarray(pos))
        color = torch.sigmoid(p)
        return {"sigma": sigma, "color": color}


def test_render_frame_thread_invariance():
    batch = camera_rays(np.eye(4), INTR, BOUNDS)
    sampling = SamplingConfig(n_coarse=16, n_fine=8)
    a = render_frame(_BlobField(), batch, sampling, chunk=7, threads=1)
    b = render_frame(_BlobField(), batch, sampling, chunk=7, threads=3)
    c = render_frame(_BlobField(), batch, sampling, chunk=25, threads=1)
    assert sorted(a) == sorted(b) == sorted(c)
    for key in a:
        np.testing.assert_array_equal(a[key], b[key])
        np.testing.assert_array_equal(a[key], c[key])
    assert a["color"].shape == (25, 3)
    assert np.all(a["opacity"] > 0.1)  # the blob is actually visible
