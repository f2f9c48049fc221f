"""LiDAR semantic segmentation on range images with pillar point features."""
from .augment import AugmentConfig, augment_pipeline, frame_rng
from .evaluation import ConfusionMatrix, format_report, iou_per_class, miou
from .exceptions import (
    ConfigError,
    ContractError,
    DivergenceError,
    EmptyMaskWarning,
    FormatError,
    MappingError,
    TornadoError,
)
from .estimator import KNNRefiner, SphericalProjector, TornadoSegmenter
from .losses import ClassStats, LossWeights, TVConfig, class_frequencies, lovasz_softmax, total_loss, tv_loss, wce_loss
from .model import ModelConfig, forward_frames, init_params, load_model, prepare_frame, save_model, tornado_forward
from .pointcloud import (
    IGNORE_ID,
    CropBounds,
    LabelArray,
    PointCloud,
    read_kitti_bin,
    read_label_file,
    remap_labels,
    truncate_cloud,
    write_kitti_bin,
    write_label_file,
)
from .postprocess import KnnConfig, knn_refine
from .projection import PillarGridConfig, SphericalConfig, pillar_assign, spherical_project
from .trainer import TrainConfig, adam_step, one_cycle_lr, train

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "augment_pipeline", "frame_rng",
    "ConfusionMatrix", "format_report", "iou_per_class", "miou",
    "ConfigError", "ContractError", "DivergenceError", "EmptyMaskWarning", "FormatError",
    "MappingError", "TornadoError",
    "KNNRefiner", "SphericalProjector", "TornadoSegmenter",
    "ClassStats", "LossWeights", "TVConfig", "class_frequencies", "lovasz_softmax", "total_loss",
    "tv_loss", "wce_loss",
    "ModelConfig", "forward_frames", "init_params", "load_model", "prepare_frame", "save_model",
    "tornado_forward",
    "IGNORE_ID", "CropBounds", "LabelArray", "PointCloud", "read_kitti_bin", "read_label_file",
    "remap_labels", "truncate_cloud", "write_kitti_bin", "write_label_file",
    "KnnConfig", "knn_refine",
    "PillarGridConfig", "SphericalConfig", "pillar_assign", "spherical_project",
    "TrainConfig", "adam_step", "one_cycle_lr", "train",
    "__version__",
]
