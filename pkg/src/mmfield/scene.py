"""Analytic desk-scale scenes, sensor simulation, and dataset generation.

The world is a small axis-aligned box (z up) containing a handful of
closed-form primitives on a ground plane. A rig slides along a straight
trajectory carrying a pinhole camera and a spinning range scanner.
Camera pixels are Lambertian-shaded albedo; scanner returns carry range,
a reflectivity-times-incidence intensity with 1/(1+t^2) falloff, and a
drop flag for rays that never return.

Misalignment is injected at generation time: the camera's *true* pose
can differ from the *declared* (manifest) calibration by a small
rotation + translation, the scanner's capture time can lag the frame
stamp, and scanner beams can see dilated primitives (objects appear
fatter than they are). Every knob is a constant offset and the rig moves
at constant velocity, so each modality alone remains self-consistent
while the pair disagrees -- which is the phenomenon this laboratory
exists to study.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import fileio
from .errors import ConfigError
from .rendering import CameraIntrinsics, LidarPattern, RayBatch, camera_rays, lidar_rays

_EPS = 1e-9


@dataclass(frozen=True)
class Material:
    albedo: tuple
    reflectivity: float


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    material: Material

    def intersect(self, origins, dirs, grow=0.0):
        c = np.asarray(self.center, dtype=np.float64)
        r = self.radius + grow
        oc = origins - c
        b = np.einsum("ij,ij->i", oc, dirs)
        disc = b * b - (np.einsum("ij,ij->i", oc, oc) - r * r)
        t = np.full(len(origins), np.inf)
        ok = disc >= 0
        if ok.any():
            sq = np.sqrt(disc[ok])
            t0 = -b[ok] - sq
            t1 = -b[ok] + sq
            tt = np.where(t0 > _EPS, t0, np.where(t1 > _EPS, t1, np.inf))
            t[ok] = tt
        with np.errstate(invalid="ignore"):  # inf * 0 on misses; normals unused there
            p = origins + t[:, None] * dirs
            n = (p - c) / r
        return t, n


@dataclass(frozen=True)
class Cylinder:
    """Vertical cylinder from z0 to z1 (open ends; poles stand on ground)."""

    center_xy: tuple
    radius: float
    z0: float
    z1: float
    material: Material

    def intersect(self, origins, dirs, grow=0.0):
        cx, cy = self.center_xy
        r = self.radius + grow
        ox = origins[:, 0] - cx
        oy = origins[:, 1] - cy
        dx = dirs[:, 0]
        dy = dirs[:, 1]
        a = dx * dx + dy * dy
        b = ox * dx + oy * dy
        c = ox * ox + oy * oy - r * r
        t = np.full(len(origins), np.inf)
        with np.errstate(divide="ignore", invalid="ignore"):
            disc = b * b - a * c
            ok = (disc >= 0) & (a > 1e-18)
            sq = np.sqrt(np.where(ok, disc, 0.0))
            t0 = (-b - sq) / np.where(ok, a, 1.0)
            t1 = (-b + sq) / np.where(ok, a, 1.0)
        z_lo, z_hi = self.z0 - grow, self.z1 + grow
        for cand in (t0, t1):
            z = origins[:, 2] + cand * dirs[:, 2]
            good = ok & (cand > _EPS) & (cand < t) & (z >= z_lo) & (z <= z_hi)
            t = np.where(good, cand, t)
        with np.errstate(invalid="ignore"):  # inf * 0 on misses; normals unused there
            p = origins + t[:, None] * dirs
            n = np.stack([(p[:, 0] - cx) / r, (p[:, 1] - cy) / r, np.zeros(len(t))], axis=1)
        return t, n


@dataclass(frozen=True)
class BoxPrim:
    lo: tuple
    hi: tuple
    material: Material

    def intersect(self, origins, dirs, grow=0.0):
        lo = np.asarray(self.lo, dtype=np.float64) - grow
        hi = np.asarray(self.hi, dtype=np.float64) + grow
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            ta = (lo[None, :] - origins) * inv
            tb = (hi[None, :] - origins) * inv
        tmin = np.nanmin(np.stack([ta, tb]), axis=0)
        tmax = np.nanmax(np.stack([ta, tb]), axis=0)
        t_enter = tmin.max(axis=1)
        t_exit = tmax.min(axis=1)
        hit = (t_enter > _EPS) & (t_enter <= t_exit)
        t = np.where(hit, t_enter, np.inf)
        # Normal is along the axis whose slab provides the entry time.
        axis = np.argmax(tmin, axis=1)
        n = np.zeros((len(t), 3))
        n[np.arange(len(t)), axis] = -np.sign(dirs[np.arange(len(t)), axis])
        return t, n


@dataclass(frozen=True)
class Ground:
    """Horizontal plane clipped to a rectangle in x, y."""

    z: float
    extent: tuple  # ((x_lo, y_lo), (x_hi, y_hi))
    material: Material

    def intersect(self, origins, dirs, grow=0.0):
        dz = dirs[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.z - origins[:, 2]) / dz
        t = np.where((np.abs(dz) > 1e-18) & (t > _EPS), t, np.inf)
        with np.errstate(invalid="ignore"):  # inf * 0 on misses
            p = origins + t[:, None] * dirs
        (xl, yl), (xh, yh) = self.extent
        inside = (p[:, 0] >= xl) & (p[:, 0] <= xh) & (p[:, 1] >= yl) & (p[:, 1] <= yh)
        t = np.where(inside, t, np.inf)
        n = np.zeros((len(t), 3))
        n[:, 2] = np.where(origins[:, 2] >= self.z, 1.0, -1.0)
        return t, n


_PRIM_TYPES = {"sphere": Sphere, "cylinder": Cylinder, "box": BoxPrim, "ground": Ground}


def _material_json(m):
    return {"albedo": list(m.albedo), "reflectivity": m.reflectivity}


def _material_from(d):
    return Material(albedo=tuple(d["albedo"]), reflectivity=d["reflectivity"])


def primitive_to_json(p):
    if isinstance(p, Sphere):
        return {"type": "sphere", "center": list(p.center), "radius": p.radius,
                "material": _material_json(p.material)}
    if isinstance(p, Cylinder):
        return {"type": "cylinder", "center_xy": list(p.center_xy), "radius": p.radius,
                "z0": p.z0, "z1": p.z1, "material": _material_json(p.material)}
    if isinstance(p, BoxPrim):
        return {"type": "box", "lo": list(p.lo), "hi": list(p.hi),
                "material": _material_json(p.material)}
    if isinstance(p, Ground):
        return {"type": "ground", "z": p.z, "extent": [list(p.extent[0]), list(p.extent[1])],
                "material": _material_json(p.material)}
    raise ConfigError(f"unknown primitive {type(p).__name__}")


def primitive_from_json(d):
    kind = d["type"]
    m = _material_from(d["material"])
    if kind == "sphere":
        return Sphere(center=tuple(d["center"]), radius=d["radius"], material=m)
    if kind == "cylinder":
        return Cylinder(center_xy=tuple(d["center_xy"]), radius=d["radius"],
                        z0=d["z0"], z1=d["z1"], material=m)
    if kind == "box":
        return BoxPrim(lo=tuple(d["lo"]), hi=tuple(d["hi"]), material=m)
    if kind == "ground":
        return Ground(z=d["z"], extent=(tuple(d["extent"][0]), tuple(d["extent"][1])),
                      material=m)
    raise ConfigError(f"unknown primitive type {kind!r}")


@dataclass(frozen=True)
class MisalignmentSpec:
    """How the sensors' reality departs from the declared calibration.

    rotation/translation perturb the camera's TRUE pose (the manifest
    keeps the nominal mount); temporal_offset shifts the scanner's
    sampling time along the trajectory; lidar_dilation grows primitive
    radii for scanner intersections only. All zero = consistent rig.
    """

    rotation: tuple = (0.0, 0.0, 0.0)  # radians about rig x, y, z
    translation: tuple = (0.0, 0.0, 0.0)  # meters, rig frame
    lidar_dilation: float = 0.0
    temporal_offset: float = 0.0

    def __post_init__(self):
        knobs = (*self.rotation, *self.translation, self.lidar_dilation, self.temporal_offset)
        if not all(math.isfinite(k) for k in knobs):
            raise ConfigError("misalignment knobs must be finite")

    @property
    def is_zero(self):
        return all(
            v == 0.0
            for v in (*self.rotation, *self.translation, self.lidar_dilation, self.temporal_offset)
        )

    def to_json(self):
        return {
            "extrinsic_perturbation": {
                "rotation": list(self.rotation),
                "translation": list(self.translation),
            },
            "lidar_dilation": self.lidar_dilation,
            "temporal_offset": self.temporal_offset,
        }

    @staticmethod
    def from_json(d):
        ext = d.get("extrinsic_perturbation", {})
        return MisalignmentSpec(
            rotation=tuple(ext.get("rotation", (0.0, 0.0, 0.0))),
            translation=tuple(ext.get("translation", (0.0, 0.0, 0.0))),
            lidar_dilation=d.get("lidar_dilation", 0.0),
            temporal_offset=d.get("temporal_offset", 0.0),
        )


def yaw_matrix(deg):
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_xyz(angles):
    """R = Rz @ Ry @ Rx for per-axis angles in radians."""
    rx, ry, rz = angles
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    mx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    my = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    mz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    return mz @ my @ mx


def make_pose(rotation, translation):
    p = np.eye(4)
    p[:3, :3] = rotation
    p[:3, 3] = translation
    return p


@dataclass
class SceneSpec:
    name: str
    primitives: list
    background: tuple
    light_dir: tuple
    ambient: float
    bounds: tuple
    trajectory: list  # [{"time", "position", "yaw_deg"}]
    camera: CameraIntrinsics
    camera_mount: np.ndarray
    lidar: LidarPattern
    lidar_mount: np.ndarray
    misalignment: MisalignmentSpec

    def to_json(self):
        return {
            "name": self.name,
            "primitives": [primitive_to_json(p) for p in self.primitives],
            "background": list(self.background),
            "light_dir": list(self.light_dir),
            "ambient": self.ambient,
            "bounds": [list(self.bounds[0]), list(self.bounds[1])],
            "trajectory": self.trajectory,
            "camera": self.camera.to_json(),
            "camera_mount": np.asarray(self.camera_mount).reshape(-1).tolist(),
            "lidar": self.lidar.to_json(),
            "lidar_mount": np.asarray(self.lidar_mount).reshape(-1).tolist(),
            "misalignment": self.misalignment.to_json(),
        }

    @staticmethod
    def from_json(d):
        return SceneSpec(
            name=d["name"],
            primitives=[primitive_from_json(p) for p in d["primitives"]],
            background=tuple(d["background"]),
            light_dir=tuple(d["light_dir"]),
            ambient=d["ambient"],
            bounds=(tuple(d["bounds"][0]), tuple(d["bounds"][1])),
            trajectory=d["trajectory"],
            camera=CameraIntrinsics.from_json(d["camera"]),
            camera_mount=np.asarray(d["camera_mount"], dtype=np.float64).reshape(4, 4),
            lidar=LidarPattern.from_json(d["lidar"]),
            lidar_mount=np.asarray(d["lidar_mount"], dtype=np.float64).reshape(4, 4),
            misalignment=MisalignmentSpec.from_json(d["misalignment"]),
        )


def rig_pose_at(trajectory, time):
    """Rig-to-world pose at an arbitrary time.

    Piecewise-linear in position and yaw between waypoints, linearly
    extrapolated beyond either end (a scanner lagging the last frame
    still needs a well-defined pose).
    """
    times = np.array([w["time"] for w in trajectory], dtype=np.float64)
    pos = np.array([w["position"] for w in trajectory], dtype=np.float64)
    yaw = np.array([w.get("yaw_deg", 0.0) for w in trajectory], dtype=np.float64)
    if len(times) == 1:
        return make_pose(yaw_matrix(yaw[0]), pos[0])
    k = int(np.clip(np.searchsorted(times, time, side="right") - 1, 0, len(times) - 2))
    span = times[k + 1] - times[k]
    a = (time - times[k]) / span
    p = pos[k] + a * (pos[k + 1] - pos[k])
    y = yaw[k] + a * (yaw[k + 1] - yaw[k])
    return make_pose(yaw_matrix(y), p)


def declared_camera_pose(scene, frame_time):
    return rig_pose_at(scene.trajectory, frame_time) @ scene.camera_mount


def declared_lidar_pose(scene, frame_time):
    return rig_pose_at(scene.trajectory, frame_time) @ scene.lidar_mount


def true_camera_pose(scene, frame_time):
    """Where the camera actually was: rig pose with a perturbed mount.

    The extrinsic delta acts in the rig frame (z up), so rotation[2] is
    a yaw of the camera about the rig's vertical axis.
    """
    mis = scene.misalignment
    rig = rig_pose_at(scene.trajectory, frame_time)
    delta = make_pose(rotation_xyz(mis.rotation), np.asarray(mis.translation))
    return rig @ delta @ scene.camera_mount


def true_lidar_pose(scene, frame_time):
    """Where the scanner actually was: the rig pose at a lagged time."""
    mis = scene.misalignment
    rig = rig_pose_at(scene.trajectory, frame_time + mis.temporal_offset)
    return rig @ scene.lidar_mount


def cast_rays(scene, origins, dirs, modality="camera"):
    """Closest-hit query against all primitives.

    Lidar queries grow footprint-dilated primitives. Returns a dict of
    t (inf on miss), normal, albedo, reflectivity, hit.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    grow = scene.misalignment.lidar_dilation if modality == "lidar" else 0.0
    n_rays = len(origins)
    best_t = np.full(n_rays, np.inf)
    best_n = np.zeros((n_rays, 3))
    best_albedo = np.zeros((n_rays, 3))
    best_refl = np.zeros(n_rays)
    for prim in scene.primitives:
        t, nrm = prim.intersect(origins, dirs, grow=grow)
        closer = t < best_t
        if closer.any():
            best_t = np.where(closer, t, best_t)
            best_n[closer] = nrm[closer]
            best_albedo[closer] = np.asarray(prim.material.albedo)
            best_refl[closer] = prim.material.reflectivity
    return {
        "t": best_t,
        "normal": best_n,
        "albedo": best_albedo,
        "reflectivity": best_refl,
        "hit": np.isfinite(best_t),
    }


def cast_ray(scene, origin, direction, modality="camera"):
    """Single-ray convenience wrapper around cast_rays."""
    res = cast_rays(scene, np.asarray(origin)[None], np.asarray(direction)[None], modality)
    return {k: v[0] for k, v in res.items()}


def shade(scene, hit):
    """Lambertian albedo shading; missed rays show the background."""
    light = np.asarray(scene.light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    lam = np.maximum(hit["normal"] @ light, 0.0)
    color = hit["albedo"] * (scene.ambient + lam)[:, None]
    color = np.clip(color, 0.0, 1.0)
    color[~hit["hit"]] = np.asarray(scene.background)
    return color


def lidar_returns(scene, hit, dirs):
    """(range, intensity, drop) planes for scanner rays.

    Intensity = reflectivity * |cos incidence| / (1 + t^2); rays that
    miss everything or return beyond max_range are drops with zeroed
    range/intensity.
    """
    t = hit["t"]
    keep = hit["hit"] & (t <= scene.lidar.max_range)
    cosi = np.abs(np.einsum("ij,ij->i", hit["normal"], dirs))
    intensity = hit["reflectivity"] * cosi / (1.0 + t * t)
    rng = np.where(keep, t, 0.0)
    intensity = np.where(keep, intensity, 0.0)
    drop = (~keep).astype(np.float64)
    return rng, intensity, drop


def render_gt_camera(scene, cam_pose):
    """Ground-truth image (H, W, 3) float32 via the shared ray builder."""
    batch = camera_rays(cam_pose, scene.camera, scene.bounds)
    hit = cast_rays(scene, batch.origins, batch.dirs, "camera")
    color = shade(scene, hit)
    return color.reshape(scene.camera.height, scene.camera.width, 3).astype(np.float32)


def render_gt_lidar(scene, lidar_pose):
    """Ground-truth (range, intensity, drop) planes, each (beams, azimuth)."""
    batch = lidar_rays(lidar_pose, scene.lidar, scene.bounds)
    hit = cast_rays(scene, batch.origins, batch.dirs, "lidar")
    rng, intensity, drop = lidar_returns(scene, hit, batch.dirs)
    shape = (scene.lidar.n_beams, scene.lidar.n_azimuth)
    return (
        rng.reshape(shape).astype(np.float32),
        intensity.reshape(shape).astype(np.float32),
        drop.reshape(shape).astype(np.float32),
    )


def _street_primitives():
    ground = Ground(
        z=0.0, extent=((-1.0, -1.0), (1.0, 1.0)),
        material=Material((0.42, 0.40, 0.38), 0.35),
    )
    return [
        ground,
        Cylinder((0.15, -0.35), 0.045, 0.0, 0.80, Material((0.75, 0.22, 0.18), 0.55)),
        Cylinder((-0.20, 0.40), 0.050, 0.0, 0.70, Material((0.20, 0.45, 0.80), 0.50)),
        Cylinder((0.62, 0.38), 0.040, 0.0, 0.85, Material((0.85, 0.70, 0.25), 0.60)),
        BoxPrim((0.05, -0.75, 0.0), (0.45, -0.50, 0.28), Material((0.60, 0.55, 0.52), 0.45)),
        BoxPrim((-0.60, 0.45, 0.0), (-0.25, 0.75, 0.22), Material((0.33, 0.50, 0.38), 0.40)),
        Sphere((0.70, -0.15, 0.12), 0.12, Material((0.80, 0.80, 0.85), 0.70)),
    ]


MISALIGNED_KNOBS = MisalignmentSpec(
    rotation=(0.0, 0.0, math.radians(0.4)),
    translation=(0.0, 0.02, 0.0),
    lidar_dilation=0.03,
    temporal_offset=0.05,
)


def preset(name):
    """Built-in scenes: 'aligned-street' and 'misaligned-street'."""
    if name not in ("aligned-street", "misaligned-street"):
        raise ConfigError(f"unknown preset {name!r}")
    n_frames = 24
    trajectory = [
        {"time": round(i * 0.1, 6), "position": [-0.70 + 0.04 * i, 0.0, 0.25], "yaw_deg": 0.0}
        for i in range(n_frames)
    ]
    cam_rot = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    mis = MISALIGNED_KNOBS if name == "misaligned-street" else MisalignmentSpec()
    return SceneSpec(
        name=name,
        primitives=_street_primitives(),
        background=(0.45, 0.62, 0.90),
        light_dir=tuple(np.array([0.30, 0.20, 0.92]) / np.linalg.norm([0.30, 0.20, 0.92])),
        ambient=0.2,
        bounds=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)),
        trajectory=trajectory,
        camera=CameraIntrinsics.from_fov(width=128, height=96, fov_x_deg=90.0),
        camera_mount=make_pose(cam_rot, (0.03, 0.0, 0.05)),
        lidar=LidarPattern(
            n_beams=32, n_azimuth=256,
            elevation_min_deg=-15.0, elevation_max_deg=5.0, max_range=2.5,
        ),
        lidar_mount=make_pose(np.eye(3), (0.0, 0.0, 0.08)),
        misalignment=mis,
    )


def _test_frame(i):
    """Every sixth frame is held out, offset so both ends stay in train."""
    return i % 6 == 3


def generate_dataset(scene, out_dir, seed=0):
    """Simulate every frame and write the on-disk dataset.

    Images/planes are rendered from TRUE sensor poses; the manifest
    declares the NOMINAL calibration. For a clean scene these coincide.
    Returns the manifest dict.
    """
    fileio.ensure_dir(out_dir)
    fileio.ensure_dir(os.path.join(out_dir, "images"))
    fileio.ensure_dir(os.path.join(out_dir, "lidar"))

    frames = []
    for i, wp in enumerate(scene.trajectory):
        t = wp["time"]
        cam_declared = declared_camera_pose(scene, t)
        lid_declared = declared_lidar_pose(scene, t)

        image = render_gt_camera(scene, true_camera_pose(scene, t))
        rng_plane, int_plane, drop_plane = render_gt_lidar(scene, true_lidar_pose(scene, t))

        img_f32 = f"images/frame_{i:03d}.f32"
        img_ppm = f"images/frame_{i:03d}.ppm"
        lid_f32 = f"lidar/frame_{i:03d}.f32"
        lid_json = f"lidar/frame_{i:03d}.json"
        fileio.write_f32(os.path.join(out_dir, img_f32), image)
        fileio.write_ppm(os.path.join(out_dir, img_ppm), image)
        fileio.write_f32(
            os.path.join(out_dir, lid_f32),
            np.stack([rng_plane, int_plane, drop_plane], axis=0),
        )
        fileio.dump_json(
            os.path.join(out_dir, lid_json),
            {
                "n_beams": scene.lidar.n_beams,
                "n_azimuth": scene.lidar.n_azimuth,
                "elevation_range": [scene.lidar.elevation_min_deg, scene.lidar.elevation_max_deg],
            },
        )
        frames.append(
            {
                "index": i,
                "time": t,
                "split": "test" if _test_frame(i) else "train",
                "image": img_f32,
                "preview": img_ppm,
                "lidar": lid_f32,
                "camera_pose": cam_declared.reshape(-1).tolist(),
                "lidar_pose": lid_declared.reshape(-1).tolist(),
            }
        )

    manifest = {
        "format": "mmfield-dataset-v1",
        "name": scene.name,
        "seed": seed,
        "scene": scene.to_json(),
        "bounds": [list(scene.bounds[0]), list(scene.bounds[1])],
        "background": list(scene.background),
        "camera": {"intrinsics": scene.camera.to_json()},
        "lidar": {"pattern": scene.lidar.to_json()},
        "frames": frames,
    }
    fileio.dump_json(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


class Dataset:
    """Loader for a generated dataset directory.

    Builds supervision-carrying RayBatches from the DECLARED poses in
    the manifest; the stored planes came from the true sensors, so any
    injected miscalibration shows up as a data/geometry disagreement
    exactly like it would on a real rig.
    """

    def __init__(self, root):
        self.root = root
        manifest_path = os.path.join(root, "manifest.json")
        if not os.path.exists(manifest_path):
            raise ConfigError(f"no manifest.json under {root!r}")
        self.manifest = fileio.load_json(manifest_path)
        if self.manifest.get("format") != "mmfield-dataset-v1":
            raise ConfigError("unrecognized dataset format")
        self.bounds = (
            tuple(self.manifest["bounds"][0]),
            tuple(self.manifest["bounds"][1]),
        )
        self.background = tuple(self.manifest["background"])
        self.camera = CameraIntrinsics.from_json(self.manifest["camera"]["intrinsics"])
        self.lidar = LidarPattern.from_json(self.manifest["lidar"]["pattern"])
        self._pools = {}

    @property
    def scene(self):
        """The generating SceneSpec, embedded in the manifest."""
        return SceneSpec.from_json(self.manifest["scene"])

    def frames(self, split=None):
        fr = self.manifest["frames"]
        if split is None:
            return list(fr)
        return [f for f in fr if f["split"] == split]

    def _pose(self, frame, key):
        return np.asarray(frame[key], dtype=np.float64).reshape(4, 4)

    def camera_batch(self, frame):
        """All camera rays of one frame with rgb targets."""
        if isinstance(frame, int):
            frame = self.manifest["frames"][frame]
        batch = camera_rays(self._pose(frame, "camera_pose"), self.camera, self.bounds)
        image = fileio.read_f32(
            os.path.join(self.root, frame["image"]),
            (self.camera.height, self.camera.width, 3),
        )
        batch.targets["rgb"] = image.reshape(-1, 3)
        return batch

    def lidar_batch(self, frame):
        """All scanner rays of one frame with range/intensity/drop targets."""
        if isinstance(frame, int):
            frame = self.manifest["frames"][frame]
        batch = lidar_rays(self._pose(frame, "lidar_pose"), self.lidar, self.bounds)
        planes = fileio.read_f32(
            os.path.join(self.root, frame["lidar"]),
            (3, self.lidar.n_beams, self.lidar.n_azimuth),
        )
        batch.targets["range"] = planes[0].reshape(-1)
        batch.targets["intensity"] = planes[1].reshape(-1)
        batch.targets["drop"] = planes[2].reshape(-1)
        return batch

    def train_pool(self, modality):
        """All training rays of one modality concatenated (cached)."""
        if modality in self._pools:
            return self._pools[modality]
        builder = self.camera_batch if modality == "camera" else self.lidar_batch
        batches = [builder(f) for f in self.frames("train")]
        pool = RayBatch(
            origins=np.concatenate([b.origins for b in batches]),
            dirs=np.concatenate([b.dirs for b in batches]),
            t_near=np.concatenate([b.t_near for b in batches]),
            t_far=np.concatenate([b.t_far for b in batches]),
            modality=modality,
            ids=np.concatenate([b.ids for b in batches]),
            targets={
                k: np.concatenate([b.targets[k] for b in batches])
                for k in batches[0].targets
            },
        )
        self._pools[modality] = pool
        return pool

    def gt_lidar_points(self, frame):
        """World-frame point cloud of one frame's returns (declared pose)."""
        batch = self.lidar_batch(frame)
        keep = batch.targets["drop"] < 0.5
        rng = batch.targets["range"]
        return (batch.origins + rng[:, None] * batch.dirs)[keep]
