"""Joint depth, pose, and local-radiance-field optimization on synthetic
oracle scenes.

Modules:
  geometry        SO(3)/SE(3), intrinsics, warping, trajectories, TUM I/O
  raster          float32 image planes, bilinear sampling with gradients
  synthscene      voxel-DDA oracle scenes, reference renders, datasets
  depth_objective optimizable log-depth fields and the depth loss terms
  feature_ba      coarse-to-fine feature-metric bundle adjustment (LM)
  radiance        hash-grid local radiance fields, manual backprop, lifecycle
  scheduler       windowed bootstrap/FBA/radiance pipeline
  metrics         ATE/RPE trajectory metrics, PSNR/SSIM view metrics
  cli             `lorf` command-line entry point
"""

from .geometry import (Intrinsics, Pose, Rotation, Trajectory,  # noqa: F401
                       se3_exp, se3_log, warp_points)
from .raster import Raster  # noqa: F401

__all__ = ["Intrinsics", "Pose", "Rotation", "Trajectory", "Raster",
           "se3_exp", "se3_log", "warp_points"]

__version__ = "0.1.0"
