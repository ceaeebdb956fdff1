"""Neural SDF surface reconstruction from multi-view images with hybrid
geometric priors, few-shot segmentation prompting, and mesh evaluation."""

from . import (
    assets,
    cli,
    errors,
    field,
    geometry,
    losses,
    meshing,
    metrics,
    renderer,
    segmentation,
    synth,
    training,
)
from .assets import (
    CameraRecord,
    ImageBuffer,
    PipelineConfig,
    TriangleMesh,
    load_config,
    read_image,
    read_mesh_obj,
    read_pose_file,
    read_tensor,
    save_config,
    write_image,
    write_mesh_obj,
    write_pose_file,
    write_tensor,
)
from .field import (
    AnalyticField,
    BoxField,
    LambertianAppearance,
    ReconstructionModel,
    SphereField,
    TorusField,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from .meshing import marching_cubes, sample_mesh_points
from .metrics import acc_comp, evaluate_meshes, nearest_distance
from .renderer import composite, density_from_sdf, render_ray, render_rays, sample_ray
from .synth import SynthSceneSpec, generate_dataset
from .training import Dataset, load_dataset, train

__version__ = "0.1.0"

__all__ = [
    "AnalyticField",
    "BoxField",
    "CameraRecord",
    "Dataset",
    "ImageBuffer",
    "LambertianAppearance",
    "PipelineConfig",
    "ReconstructionModel",
    "SphereField",
    "SynthSceneSpec",
    "TorusField",
    "TriangleMesh",
    "acc_comp",
    "assets",
    "build_model",
    "cli",
    "composite",
    "density_from_sdf",
    "errors",
    "evaluate_meshes",
    "field",
    "generate_dataset",
    "geometry",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "losses",
    "marching_cubes",
    "meshing",
    "metrics",
    "nearest_distance",
    "read_image",
    "read_mesh_obj",
    "read_pose_file",
    "read_tensor",
    "render_ray",
    "render_rays",
    "renderer",
    "sample_mesh_points",
    "sample_ray",
    "save_checkpoint",
    "save_config",
    "segmentation",
    "synth",
    "train",
    "training",
    "write_image",
    "write_mesh_obj",
    "write_pose_file",
    "write_tensor",
]
