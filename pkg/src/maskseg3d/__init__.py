"""Query-based 3D instance segmentation with masked-attention decoding, in plain numpy."""
from .errors import ConfigError, DataError, FormatError, GenerationError, MaskSegError, NumericError, UsageError
from .estimator import Mask3DSegmenter
from .evaluation import EvalReport, InstancePrediction, map_suite, postprocess
from .geometry import PointCloud, VoxelGrid, dbscan, farthest_point_sampling, voxelize
from .scenegen import SceneSpec, generate_scene, load_scene, save_scene
from .supervision import LossWeights, hungarian

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "EvalReport", "FormatError", "GenerationError", "InstancePrediction", "LossWeights",
    "Mask3DSegmenter", "MaskSegError", "NumericError", "PointCloud", "SceneSpec", "UsageError", "VoxelGrid",
    "dbscan", "farthest_point_sampling", "generate_scene", "hungarian", "load_scene", "map_suite", "postprocess",
    "save_scene", "voxelize",
]
