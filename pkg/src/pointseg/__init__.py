"""Training-free 3D instance segmentation driven by 3D prompts and a promptable 2D segmenter."""

from . import synthbench  # noqa: F401  registers the oracle backends
from .evaluation import EvalResult, evaluate
from .pipeline import PipelineConfig, run_ablation, run_pipeline
from .scene import (Box2D, Box3D, CameraExtrinsics, CameraIntrinsics, InstanceLabeling3D, Mask2D,
                    PosedFrame, ScenePointCloud)

__all__ = [
    "Box2D", "Box3D", "CameraExtrinsics", "CameraIntrinsics", "EvalResult", "InstanceLabeling3D",
    "Mask2D", "PipelineConfig", "PosedFrame", "ScenePointCloud", "evaluate", "run_ablation", "run_pipeline",
]
