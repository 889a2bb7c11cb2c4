"""Panorama fusion world-building toolkit.

Equirectangular RGB-D panoramas along a straight path are lifted to point
spheres, opened towards each other, and joined by inpainted fill blocks whose
estimated depth is harmonically blended onto the rendered geometry.
"""
from .blend import (BlendParams, SolverError, harmonic_blend_depth, naive_blend,
                    offset_interpolation_blend)
from .evalkit import (EvalParams, TrajectorySpec, coverage, depth_metrics, evaluate_world,
                      sample_trajectories, transition_region_mae, transition_score)
from .fusion import FillBlock, FillParams, OpenedSphere, build_fill_block, open_sphere
from .geom import PointCloud, Pose, backproject_spherical
from .ldp import LayeredDepthPanorama, LdpParams, StageError, build_ldp
from .render import PerspectiveIntrinsics, SplatParams, render_eqr, render_perspective
from .world import ConfigError, WorldBundle, WorldConfig, build_world, load_world, save_world

__version__ = "0.1.0"

__all__ = [
    "BlendParams", "SolverError", "harmonic_blend_depth", "naive_blend", "offset_interpolation_blend",
    "EvalParams", "TrajectorySpec", "coverage", "depth_metrics", "evaluate_world",
    "sample_trajectories", "transition_region_mae", "transition_score",
    "FillBlock", "FillParams", "OpenedSphere", "build_fill_block", "open_sphere",
    "PointCloud", "Pose", "backproject_spherical",
    "LayeredDepthPanorama", "LdpParams", "StageError", "build_ldp",
    "PerspectiveIntrinsics", "SplatParams", "render_eqr", "render_perspective",
    "ConfigError", "WorldBundle", "WorldConfig", "build_world", "load_world", "save_world",
]
