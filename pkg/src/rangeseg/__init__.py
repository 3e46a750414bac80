"""Semantic segmentation of LiDAR scans on spherical range images.

Scans are projected to multi-modality range images (coordinates, depth,
intensity), segmented by a small fully convolutional network written on a
numpy autodiff engine, and mapped back to points with a KNN vote.
"""

from .errors import RangeSegError
from .metrics import ConfusionMatrix
from .network import NetworkConfig, build_network, forward, preset_config
from .postprocess import KnnConfig, knn_backproject
from .projection import ProjectionConfig, project_scan
from .scanio import ClassMap, PointCloudScan, read_scan

__version__ = "0.1.0"

__all__ = [
    "ClassMap",
    "ConfusionMatrix",
    "KnnConfig",
    "NetworkConfig",
    "PointCloudScan",
    "ProjectionConfig",
    "RangeSegError",
    "build_network",
    "forward",
    "knn_backproject",
    "preset_config",
    "project_scan",
    "read_scan",
]
