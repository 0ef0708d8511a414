"""Shared fixtures: tiny configs and cached datasets/checkpoints.

Expensive artifacts (datasets, short trainings) are built once per
session under a tmp root and reused by every test that needs them.
"""

import os

import numpy as np
import pytest
import torch

from mmfield import Dataset, GridConfig, generate_dataset, preset
from mmfield.rendering import CameraIntrinsics, LidarPattern
from mmfield.scene import (
    BoxPrim,
    Ground,
    Material,
    MisalignmentSpec,
    SceneSpec,
    Sphere,
)

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def cache_root(tmp_path_factory):
    return tmp_path_factory.mktemp("cache")


@pytest.fixture(scope="session")
def tiny_grid():
    """4 levels, small table; levels 1-2 dense, 3-4 hashed."""
    return GridConfig(levels=4, feature_dim=2, table_size_log2=12,
                      base_resolution=4, growth_factor=2.0)


@pytest.fixture(scope="session")
def aligned_ds(cache_root):
    path = os.path.join(cache_root, "aligned")
    generate_dataset(preset("aligned-street"), path, seed=0)
    return Dataset(path)


@pytest.fixture(scope="session")
def misaligned_ds(cache_root):
    path = os.path.join(cache_root, "misaligned")
    generate_dataset(preset("misaligned-street"), path, seed=0)
    return Dataset(path)


@pytest.fixture(scope="session")
def mini_ds(cache_root):
    """Very small two-object scene for fast end-to-end training tests."""
    light = np.array([0.3, 0.2, 0.92])
    spec = SceneSpec(
        name="mini-street",
        primitives=[
            Ground(-0.30, ((-1.0, -1.0), (1.0, 1.0)),
                   Material((0.42, 0.40, 0.38), 0.35)),
            Sphere((0.55, -0.15, 0.00), 0.18, Material((0.8, 0.3, 0.2), 0.7)),
            BoxPrim((0.30, 0.25, -0.30), (0.60, 0.55, 0.20),
                    Material((0.2, 0.5, 0.8), 0.5)),
        ],
        background=(0.45, 0.62, 0.90),
        light_dir=tuple(light / np.linalg.norm(light)),
        ambient=0.2,
        bounds=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)),
        trajectory=[
            {"time": 0.1 * i, "position": [-0.5 + 0.08 * i, 0.0, 0.1], "yaw_deg": 0.0}
            for i in range(6)
        ],
        camera=CameraIntrinsics.from_fov(24, 18, 90.0),
        camera_mount=np.eye(4),
        lidar=LidarPattern(8, 32, -15.0, 5.0, 2.5),
        lidar_mount=np.eye(4),
        misalignment=MisalignmentSpec(),
    )
    path = os.path.join(cache_root, "mini")
    generate_dataset(spec, path, seed=0)
    return Dataset(path)


@pytest.fixture(scope="session")
def slab_ds(cache_root):
    """Thin floating slab observed from both sides.

    The trajectory passes around the slab so both faces receive lidar
    returns; occluded space is then bounded on every side, which pins the
    learned density to the slab itself (a one-sided wall leaves the space
    behind it unconstrained).
    """
    spec = SceneSpec(
        name="slab",
        primitives=[
            BoxPrim((0.55, -0.45, -0.45), (0.59, 0.45, 0.45),
                    Material((0.6, 0.6, 0.6), 0.8)),
        ],
        background=(0.0, 0.0, 0.0),
        light_dir=(0.0, 0.0, 1.0),
        ambient=0.3,
        bounds=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)),
        trajectory=[
            {"time": 0.1 * i, "position": [-0.3 + 0.23 * i, 0.0, 0.0], "yaw_deg": 0.0}
            for i in range(6)
        ],
        camera=CameraIntrinsics.from_fov(16, 12, 90.0),
        camera_mount=np.eye(4),
        lidar=LidarPattern(8, 32, -10.0, 10.0, 2.5),
        lidar_mount=np.eye(4),
        misalignment=MisalignmentSpec(),
    )
    path = os.path.join(cache_root, "slab")
    generate_dataset(spec, path, seed=0)
    return Dataset(path)


@pytest.fixture(scope="session")
def small_mlp():
    from mmfield.models import MlpConfig

    return MlpConfig(geo_hidden=16, geo_layers=2, geo_feature_dim=7,
                     head_hidden=12, head_layers=2, dir_octaves=2)


@pytest.fixture(scope="session")
def slab_lidar_run(cache_root, tiny_grid, small_mlp, slab_ds):
    """single_lidar trained on the slab scene; returns (model, ckpt path)."""
    from mmfield import ModelSpec, build_model
    from mmfield.training import TrainConfig, train_model

    model = build_model(ModelSpec("single_lidar"), tiny_grid, small_mlp)
    cfg = TrainConfig(iterations=500, lambda_c=0.0, rays_per_step=128,
                      n_coarse=32, n_fine=8, log_interval=100)
    out = os.path.join(cache_root, "slab_lidar")
    ckpt = train_model(model, slab_ds, cfg, out)
    return model, ckpt


def rng(seed=0):
    return np.random.default_rng(seed)
