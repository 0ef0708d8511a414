"""mmfield: a desk-scale laboratory for multimodal neural fields.

One implicit scene representation is trained from simulated camera and
LiDAR rays over analytic scenes with controllable sensor misalignment.
The package provides the full loop: scene simulation, multi-resolution
hash encodings, a family of fusion architectures (shared, decomposed,
cross-modality-aligned), volumetric rendering for both sensors,
deterministic training, evaluation metrics, and introspection dumps.
"""

from .errors import (
    CheckpointError,
    ConfigError,
    MMFieldError,
    ModalityError,
    TrainingDiverged,
)
from .grids import GridConfig, HashGrid, hash_index, init_tables, level_mask
from .nets import (
    FiniteDiffReport,
    MlpSpec,
    ParamStore,
    finite_diff_check,
    mlp_forward,
    register_mlp,
    stream_rng,
)
from .rendering import (
    CameraIntrinsics,
    LidarPattern,
    RayBatch,
    RenderOutput,
    SamplingConfig,
    blend_background,
    camera_rays,
    composite,
    drop_total,
    importance_resample,
    lidar_rays,
    render_frame,
    render_rays,
    stratified_samples,
)
from .scene import (
    Dataset,
    MisalignmentSpec,
    SceneSpec,
    cast_ray,
    cast_rays,
    generate_dataset,
    preset,
    render_gt_camera,
    render_gt_lidar,
)
from .models import (
    ARCHITECTURES,
    MlpConfig,
    Model,
    ModelSpec,
    build_model,
    gaa_fuse,
    sgi_encode,
)
from . import metrics
from .evaluation import evaluate_model, write_eval_outputs
from .training import (
    TrainConfig,
    load_checkpoint,
    make_batch,
    run_training,
    save_checkpoint,
    step_losses,
    train_model,
    wlambda_sweep,
)
from .diagnostics import dump_bev_features, dump_ray_density

__version__ = "0.1.0"

__all__ = [
    "ARCHITECTURES",
    "CameraIntrinsics",
    "CheckpointError",
    "ConfigError",
    "Dataset",
    "FiniteDiffReport",
    "GridConfig",
    "HashGrid",
    "LidarPattern",
    "MMFieldError",
    "MisalignmentSpec",
    "MlpConfig",
    "MlpSpec",
    "ModalityError",
    "Model",
    "ModelSpec",
    "ParamStore",
    "RayBatch",
    "RenderOutput",
    "SamplingConfig",
    "SceneSpec",
    "TrainConfig",
    "TrainingDiverged",
    "blend_background",
    "build_model",
    "camera_rays",
    "cast_ray",
    "cast_rays",
    "composite",
    "drop_total",
    "dump_bev_features",
    "dump_ray_density",
    "evaluate_model",
    "finite_diff_check",
    "gaa_fuse",
    "generate_dataset",
    "hash_index",
    "importance_resample",
    "init_tables",
    "level_mask",
    "lidar_rays",
    "load_checkpoint",
    "make_batch",
    "metrics",
    "mlp_forward",
    "preset",
    "register_mlp",
    "render_frame",
    "render_gt_camera",
    "render_gt_lidar",
    "render_rays",
    "run_training",
    "save_checkpoint",
    "sgi_encode",
    "step_losses",
    "stratified_samples",
    "stream_rng",
    "train_model",
    "wlambda_sweep",
    "write_eval_outputs",
    "__version__",
]
