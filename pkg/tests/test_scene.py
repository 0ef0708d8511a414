import math

import numpy as np
import pytest

from mmfield import (
    Dataset,
    MisalignmentSpec,
    SceneSpec,
    generate_dataset,
    preset,
)
from mmfield.errors import ConfigError
from mmfield.rendering import CameraIntrinsics, LidarPattern
from mmfield.scene import (
    MISALIGNED_KNOBS,
    BoxPrim,
    Cylinder,
    Ground,
    Material,
    Sphere,
    cast_ray,
    cast_rays,
    declared_camera_pose,
    lidar_returns,
    rig_pose_at,
    shade,
    true_camera_pose,
    true_lidar_pose,
)

MAT = Material(albedo=(0.5, 0.5, 0.5), reflectivity=0.5)


def _mini_scene(primitives, mis=None, max_range=20.0):
    return SceneSpec(
        name="mini",
        primitives=primitives,
        background=(0.0, 0.0, 0.0),
        light_dir=(0.0, 0.0, 1.0),
        ambient=0.2,
        bounds=((-10.0, -10.0, -10.0), (10.0, 10.0, 10.0)),
        trajectory=[{"time": 0.0, "position": [0.0, 0.0, 0.0], "yaw_deg": 0.0}],
        camera=CameraIntrinsics(width=8, height=8, fx=4.0, fy=4.0, cx=3.5, cy=3.5),
        camera_mount=np.eye(4),
        lidar=LidarPattern(1, 8, 0.0, 0.0, max_range),
        lidar_mount=np.eye(4),
        misalignment=mis or MisalignmentSpec(),
    )


# ---------------------------------------------------------------- cast_ray

def test_sphere_axis_hit():
    scene = _mini_scene([Sphere((0.0, 0.0, 5.0), 1.0, MAT)])
    hit = cast_ray(scene, (0.0, 0.0, 0.0), (0.0, 0.0, 1.0))
    assert hit["hit"]
    assert hit["t"] == pytest.approx(4.0, abs=1e-12)
    np.testing.assert_allclose(hit["normal"], [0.0, 0.0, -1.0], atol=1e-12)


def test_ray_parallel_to_ground_misses():
    scene = _mini_scene([Ground(0.0, ((-5.0, -5.0), (5.0, 5.0)), MAT)])
    hit = cast_ray(scene, (0.0, 0.0, 0.5), (1.0, 0.0, 0.0))
    assert not hit["hit"]
    assert hit["t"] == np.inf


def test_lidar_dilation_grazing_ray():
    cyl = Cylinder((0.0, 0.0), 0.10, -1.0, 1.0, MAT)
    scene = _mini_scene([cyl], mis=MisalignmentSpec(lidar_dilation=0.05))
    origin, direction = (-1.0, 0.12, 0.0), (1.0, 0.0, 0.0)
    cam = cast_ray(scene, origin, direction, "camera")
    lid = cast_ray(scene, origin, direction, "lidar")
    assert not cam["hit"]  # lateral offset 0.12 > true radius 0.10
    assert lid["hit"]      # but < dilated radius 0.15
    # Entry of the r=0.15 circle along y=0.12: x = -sqrt(0.15^2 - 0.12^2).
    assert lid["t"] == pytest.approx(1.0 - 0.09, abs=1e-12)


def test_cast_ray_closest_primitive_wins():
    scene = _mini_scene([
        Sphere((0.0, 0.0, 5.0), 1.0, Material((1.0, 0.0, 0.0), 0.9)),
        Sphere((0.0, 0.0, 3.0), 0.5, Material((0.0, 1.0, 0.0), 0.1)),
    ])
    hit = cast_ray(scene, (0.0, 0.0, 0.0), (0.0, 0.0, 1.0))
    assert hit["t"] == pytest.approx(2.5, abs=1e-12)
    np.testing.assert_array_equal(hit["albedo"], [0.0, 1.0, 0.0])
    assert hit["reflectivity"] == 0.1


def _closed_form_sphere(o, d, c, r):
    oc = o - c
    b = oc @ d
    disc = b * b - (oc @ oc - r * r)
    if disc < 0:
        return np.inf
    for t in (-b - math.sqrt(disc), -b + math.sqrt(disc)):
        if t > 1e-9:
            return t
    return np.inf


def test_oracle_exactness_random_rays():
    """cast_rays distances match per-primitive closed forms within 1e-9."""
    rng = np.random.default_rng(11)
    sphere = Sphere((0.2, -0.3, 0.5), 0.7, MAT)
    box = BoxPrim((-0.8, -0.9, -0.2), (-0.1, -0.2, 0.6), MAT)
    ground = Ground(-1.0, ((-5.0, -5.0), (5.0, 5.0)), MAT)
    scene = _mini_scene([sphere, box, ground])

    o = rng.uniform(-3, 3, size=(500, 3))
    o[:, 2] = np.abs(o[:, 2]) + 1.5  # stay above the ground plane
    d = rng.standard_normal((500, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    got = cast_rays(scene, o, d)["t"]

    for i in range(500):
        ts = [_closed_form_sphere(o[i], d[i], np.array(sphere.center), sphere.radius)]
        # Box via the slab method.
        with np.errstate(divide="ignore"):
            inv = 1.0 / d[i]
        t0 = (np.array(box.lo) - o[i]) * inv
        t1 = (np.array(box.hi) - o[i]) * inv
        t_enter = np.minimum(t0, t1).max()
        t_exit = np.maximum(t0, t1).min()
        ts.append(t_enter if (t_enter > 1e-9 and t_enter <= t_exit) else np.inf)
        # Ground plane with rectangular clip.
        if abs(d[i][2]) > 1e-18:
            tg = (ground.z - o[i][2]) / d[i][2]
            p = o[i] + tg * d[i]
            ok = tg > 1e-9 and -5 <= p[0] <= 5 and -5 <= p[1] <= 5
            ts.append(tg if ok else np.inf)
        expected = min(ts)
        if np.isinf(expected):
            assert np.isinf(got[i])
        else:
            assert got[i] == pytest.approx(expected, abs=1e-9)


def test_monotone_dilation_hit_count():
    """Growing lidar_dilation never loses scanner hits on a pole."""
    cyl = Cylinder((2.0, 0.0), 0.08, -1.0, 1.0, MAT)
    rng = np.random.default_rng(12)
    o = np.zeros((400, 3))
    ang = rng.uniform(-0.25, 0.25, size=400)
    d = np.stack([np.cos(ang), np.sin(ang), np.zeros(400)], axis=1)
    counts = []
    for dil in (0.0, 0.01, 0.03, 0.06, 0.10):
        scene = _mini_scene([cyl], mis=MisalignmentSpec(lidar_dilation=dil))
        counts.append(int(cast_rays(scene, o, d, "lidar")["hit"].sum()))
    assert counts == sorted(counts)
    assert counts[-1] > counts[0]  # the fattened pole catches extra rays
    # Camera hits ignore the dilation knob entirely.
    cam_counts = {
        int(cast_rays(_mini_scene([cyl], mis=MisalignmentSpec(lidar_dilation=dil)),
                      o, d, "camera")["hit"].sum())
        for dil in (0.0, 0.10)
    }
    assert len(cam_counts) == 1


def test_zero_knob_modality_consistency():
    """With no misalignment, lidar and camera queries agree along any ray."""
    scene = preset("aligned-street")
    rng = np.random.default_rng(13)
    o = np.tile([[-0.7, 0.0, 0.25]], (200, 1))
    d = rng.standard_normal((200, 3))
    d[:, 0] = np.abs(d[:, 0]) + 0.5
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    t_cam = cast_rays(scene, o, d, "camera")["t"]
    t_lid = cast_rays(scene, o, d, "lidar")["t"]
    finite = np.isfinite(t_cam)
    np.testing.assert_allclose(t_lid[finite], t_cam[finite], atol=1e-9)
    assert np.array_equal(np.isfinite(t_lid), finite)


# ----------------------------------------------------------------- shading

def test_shading_head_on_clamps_to_one():
    scene = _mini_scene([])
    hit = {
        "normal": np.array([[0.0, 0.0, 1.0]]),  # facing the (0,0,1) light
        "albedo": np.array([[1.0, 1.0, 1.0]]),
        "hit": np.array([True]),
    }
    np.testing.assert_array_equal(shade(scene, hit)[0], [1.0, 1.0, 1.0])


def test_shading_miss_shows_background():
    scene = _mini_scene([])
    hit = {
        "normal": np.zeros((1, 3)),
        "albedo": np.zeros((1, 3)),
        "hit": np.array([False]),
    }
    np.testing.assert_array_equal(shade(scene, hit)[0], scene.background)


def test_shading_includes_ambient_floor():
    scene = _mini_scene([])
    hit = {
        "normal": np.array([[0.0, 0.0, -1.0]]),  # facing away from the light
        "albedo": np.array([[1.0, 0.5, 0.25]]),
        "hit": np.array([True]),
    }
    np.testing.assert_allclose(shade(scene, hit)[0], [0.2, 0.1, 0.05], atol=1e-12)


def test_lidar_intensity_formula():
    scene = _mini_scene([])
    hit = {
        "t": np.array([1.0, 1.0, 2.0]),
        "normal": np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]),
        "reflectivity": np.array([0.5, 0.8, 1.0]),
        "hit": np.array([True, True, True]),
    }
    dirs = np.array([[1.0, 0.0, 0.0]] * 3)
    rng_plane, intensity, drop = lidar_returns(scene, hit, dirs)
    # reflectivity 0.5, t=1, aligned normal -> 0.5 * 1 / (1 + 1) = 0.25.
    assert intensity[0] == pytest.approx(0.25, abs=1e-12)
    # Normal perpendicular to the beam -> zero intensity.
    assert intensity[1] == 0.0
    assert intensity[2] == pytest.approx(1.0 / 5.0, abs=1e-12)
    np.testing.assert_array_equal(drop, [0.0, 0.0, 0.0])
    np.testing.assert_array_equal(rng_plane, [1.0, 1.0, 2.0])


def test_lidar_miss_is_drop_with_zero_range():
    scene = _mini_scene([], max_range=3.0)
    hit = {
        "t": np.array([np.inf, 5.0]),  # miss; return beyond max_range
        "normal": np.zeros((2, 3)),
        "reflectivity": np.array([0.5, 0.5]),
        "hit": np.array([False, True]),
    }
    dirs = np.tile([[1.0, 0.0, 0.0]], (2, 1))
    rng_plane, intensity, drop = lidar_returns(scene, hit, dirs)
    np.testing.assert_array_equal(drop, [1.0, 1.0])
    np.testing.assert_array_equal(rng_plane, [0.0, 0.0])
    np.testing.assert_array_equal(intensity, [0.0, 0.0])


# ------------------------------------------------------------ misalignment

def test_misalignment_spec_json_round_trip():
    spec = MisalignmentSpec(rotation=(0.01, 0.0, -0.02), translation=(0.0, 0.03, 0.0),
                            lidar_dilation=0.04, temporal_offset=-0.1)
    back = MisalignmentSpec.from_json(spec.to_json())
    assert back == spec
    assert MisalignmentSpec.from_json({}) == MisalignmentSpec()
    assert MisalignmentSpec().is_zero
    assert not spec.is_zero
    with pytest.raises(ConfigError):
        MisalignmentSpec(rotation=(float("nan"), 0.0, 0.0))


def test_true_vs_declared_camera_pose():
    scene = preset("misaligned-street")
    t0 = scene.trajectory[0]["time"]
    declared = declared_camera_pose(scene, t0)
    true = true_camera_pose(scene, t0)
    # The yaw knob rotates the true pose about the rig's vertical axis.
    angle = math.acos(np.clip((np.trace(true[:3, :3].T @ declared[:3, :3]) - 1) / 2, -1, 1))
    assert angle == pytest.approx(math.radians(0.4), abs=1e-9)
    # Hand-derived true position: the rig sits at (-0.7, 0, 0.25) with
    # identity yaw, the delta swings the 0.03 m camera lever arm by 0.4
    # degrees and then shifts 0.02 m along rig +y.
    c, s = math.cos(math.radians(0.4)), math.sin(math.radians(0.4))
    expected_pos = np.array([-0.7 + 0.03 * c, 0.03 * s + 0.02, 0.25 + 0.05])
    np.testing.assert_allclose(true[:3, 3], expected_pos, atol=1e-12)
    # Aligned preset: true == declared exactly.
    ali = preset("aligned-street")
    np.testing.assert_allclose(
        true_camera_pose(ali, t0), declared_camera_pose(ali, t0), atol=1e-15
    )


def test_temporal_offset_shifts_lidar_along_trajectory():
    scene = preset("misaligned-street")
    t0 = scene.trajectory[0]["time"]
    true = true_lidar_pose(scene, t0)
    declared = rig_pose_at(scene.trajectory, t0) @ scene.lidar_mount
    # Rig moves +x at 0.4 m/s; a 0.05 s lag puts the scanner 0.02 m ahead.
    np.testing.assert_allclose(true[:3, 3] - declared[:3, 3], [0.02, 0.0, 0.0],
                               atol=1e-12)
    np.testing.assert_allclose(true[:3, :3], declared[:3, :3], atol=1e-15)


def test_rig_pose_interpolation_and_extrapolation():
    traj = [
        {"time": 0.0, "position": [0.0, 0.0, 0.0], "yaw_deg": 0.0},
        {"time": 1.0, "position": [1.0, 0.0, 0.0], "yaw_deg": 10.0},
    ]
    mid = rig_pose_at(traj, 0.5)
    np.testing.assert_allclose(mid[:3, 3], [0.5, 0.0, 0.0], atol=1e-12)
    beyond = rig_pose_at(traj, 1.5)
    np.testing.assert_allclose(beyond[:3, 3], [1.5, 0.0, 0.0], atol=1e-12)


# ----------------------------------------------------------------- presets

def test_preset_composition():
    scene = preset("misaligned-street")
    kinds = sorted(type(p).__name__ for p in scene.primitives)
    assert kinds == ["BoxPrim", "BoxPrim", "Cylinder", "Cylinder", "Cylinder",
                     "Ground", "Sphere"]
    assert scene.misalignment == MISALIGNED_KNOBS
    assert scene.misalignment.rotation[2] == pytest.approx(math.radians(0.4))
    assert preset("aligned-street").misalignment.is_zero
    assert len(scene.trajectory) == 24
    assert scene.camera.width == 128 and scene.camera.height == 96
    assert scene.lidar.n_beams == 32 and scene.lidar.n_azimuth == 256
    with pytest.raises(ConfigError):
        preset("downtown")


def test_preset_primitives_inside_bounds():
    scene = preset("aligned-street")
    (xl, yl, zl), (xh, yh, zh) = scene.bounds
    for p in scene.primitives:
        if isinstance(p, Sphere):
            c = np.array(p.center)
            assert np.all(c - p.radius >= [xl, yl, zl])
            assert np.all(c + p.radius <= [xh, yh, zh])
        elif isinstance(p, Cylinder):
            cx, cy = p.center_xy
            assert xl <= cx - p.radius and cx + p.radius <= xh
            assert yl <= cy - p.radius and cy + p.radius <= yh
            assert zl <= p.z0 < p.z1 <= zh
        elif isinstance(p, BoxPrim):
            assert np.all(np.array(p.lo) >= [xl, yl, zl])
            assert np.all(np.array(p.hi) <= [xh, yh, zh])


def test_scene_spec_json_round_trip():
    scene = preset("misaligned-street")
    back = SceneSpec.from_json(scene.to_json())
    assert back.name == scene.name
    assert back.misalignment == scene.misalignment
    assert back.camera == scene.camera
    assert back.lidar == scene.lidar
    np.testing.assert_array_equal(back.camera_mount, scene.camera_mount)
    assert len(back.primitives) == len(scene.primitives)
    assert back.primitives[0] == scene.primitives[0]


# ----------------------------------------------------------------- dataset

def test_dataset_layout_and_split(aligned_ds):
    assert aligned_ds.manifest["format"] == "mmfield-dataset-v1"
    frames = aligned_ds.frames()
    assert len(frames) == 24
    test_idx = [f["index"] for f in aligned_ds.frames("test")]
    assert test_idx == [3, 9, 15, 21]  # every 6th frame, offset 3
    assert all(f["split"] == "train" for f in aligned_ds.frames("train"))
    assert len(aligned_ds.frames("train")) == 20


def test_dataset_embeds_scene(aligned_ds, misaligned_ds):
    assert aligned_ds.scene.misalignment.is_zero
    assert misaligned_ds.scene.misalignment == MISALIGNED_KNOBS
    assert aligned_ds.scene.name == "aligned-street"


def test_dataset_declared_poses_ignore_misalignment(aligned_ds, misaligned_ds):
    """Manifests always declare the nominal calibration; only pixels differ."""
    for fa, fm in zip(aligned_ds.frames(), misaligned_ds.frames()):
        np.testing.assert_array_equal(fa["camera_pose"], fm["camera_pose"])
        np.testing.assert_array_equal(fa["lidar_pose"], fm["lidar_pose"])


def test_dataset_batches_carry_targets(aligned_ds):
    cam = aligned_ds.camera_batch(0)
    assert len(cam) == 128 * 96
    assert cam.targets["rgb"].shape == (128 * 96, 3)
    assert cam.targets["rgb"].min() >= 0.0 and cam.targets["rgb"].max() <= 1.0
    lid = aligned_ds.lidar_batch(0)
    assert len(lid) == 32 * 256
    drops = lid.targets["drop"]
    rngs = lid.targets["range"]
    assert set(np.unique(drops)) <= {0.0, 1.0}
    np.testing.assert_array_equal(rngs[drops == 1.0], 0.0)
    assert np.all(rngs[drops == 0.0] > 0.0)
    assert np.all(rngs <= aligned_ds.lidar.max_range + 1e-6)


def test_dataset_generation_deterministic(tmp_path, aligned_ds):
    manifest = generate_dataset(preset("aligned-street"), tmp_path / "again", seed=0)
    assert manifest == aligned_ds.manifest
    a = (tmp_path / "again" / "images" / "frame_000.f32").read_bytes()
    b = open(f"{aligned_ds.root}/images/frame_000.f32", "rb").read()
    assert a == b


def test_gt_lidar_points_in_bounds(aligned_ds):
    pts = aligned_ds.gt_lidar_points(3)
    assert len(pts) > 1000
    lo, hi = np.array(aligned_ds.bounds[0]), np.array(aligned_ds.bounds[1])
    assert np.all(pts >= lo - 1e-6) and np.all(pts <= hi + 1e-6)


# ------------------------------------------------------------ reprojection

def _reprojection_errors(ds, frame_idx):
    """Pixel error between projected scanner points and what the camera sees.

    Project each world-frame scanner return into the frame's declared
    camera, cast the camera ray through that exact (sub-pixel) location,
    and convert the 3D disagreement back to pixels at the point's depth.
    """
    scene = ds.scene
    fr = ds.frames()[frame_idx]
    batch = ds.lidar_batch(fr)
    keep = batch.targets["drop"] < 0.5
    pts = (batch.origins + batch.targets["range"][:, None] * batch.dirs)[keep]
    cam = np.asarray(fr["camera_pose"], dtype=np.float64).reshape(4, 4)
    rot, trans = cam[:3, :3], cam[:3, 3]
    x_cam = (pts - trans) @ rot
    intr = ds.camera
    vis = x_cam[:, 2] > 0.05
    pts, x_cam = pts[vis], x_cam[vis]
    u = intr.fx * x_cam[:, 0] / x_cam[:, 2] + intr.cx
    v = intr.fy * x_cam[:, 1] / x_cam[:, 2] + intr.cy
    inb = (u >= 0) & (u <= intr.width - 1) & (v >= 0) & (v <= intr.height - 1)
    pts, x_cam, u, v = pts[inb], x_cam[inb], u[inb], v[inb]
    d_cam = np.stack(
        [(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=1
    )
    d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
    d_world = d_cam @ rot.T
    origins = np.broadcast_to(trans, d_world.shape)
    hit = cast_rays(scene, origins, d_world, "camera")
    seen = origins + hit["t"][:, None] * d_world
    ok = hit["hit"]
    return intr.fx * np.linalg.norm(pts[ok] - seen[ok], axis=1) / x_cam[ok, 2]


def test_reprojection_zero_knobs_consistent(aligned_ds):
    err = _reprojection_errors(aligned_ds, 3)
    assert len(err) > 500
    assert np.median(err) < 0.5


def test_reprojection_misaligned_exceeds_pixel(misaligned_ds):
    err = _reprojection_errors(misaligned_ds, 3)
    assert len(err) > 500
    assert np.median(err) > 1.0
