"""Multi-view indoor 3D reconstruction at desk scale.

Submodules load on first use, so ``import ipdrecon`` stays cheap and the
command-line entry point can cap numeric threads before numpy starts.
"""
from importlib import import_module

__version__ = "0.1.0"

_SUBMODULES = ("tensor", "ssm", "layers", "pce", "acm", "geometry", "ipsd", "pipeline", "metrics", "scenes", "cli")

_EXPORTS = {
    "Tensor": "tensor", "Tape": "tensor", "grad_check": "tensor",
    "CameraModel": "geometry", "GridSpec": "geometry", "VoxelVolume": "geometry", "TriangleMesh": "geometry",
    "marching_cubes": "geometry",
    "PipelineConfig": "pipeline", "init_model": "pipeline", "train_toy": "pipeline", "reconstruct": "pipeline",
    "reconstruct_volume": "pipeline", "load_checkpoint": "pipeline", "save_checkpoint": "pipeline",
    "TrainScene": "pipeline",
    "depth_metrics": "metrics", "mesh_metrics": "metrics", "stability_report": "metrics",
    "SceneSpec": "scenes", "build_bundle": "scenes", "load_bundle": "scenes", "write_bundle": "scenes",
    "heldout_views": "scenes",
}

__all__ = sorted(_EXPORTS) + list(_SUBMODULES)


def __getattr__(name):
    if name in _SUBMODULES:
        return import_module(f".{name}", __name__)
    if name in _EXPORTS:
        return getattr(import_module(f".{_EXPORTS[name]}", __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
