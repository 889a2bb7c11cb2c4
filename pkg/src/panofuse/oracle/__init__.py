from .base import (DepthEstimator, Inpainter, OracleError, OracleSet, PanoramaGen,
                   Segmenter, composite)
from .http import HttpClient, http_oracles
from .synthetic import (SceneObject, SceneSpec, SyntheticDepthEstimator, SyntheticInpainter,
                        SyntheticPanoramaGen, SyntheticScene, SyntheticSegmenter, make_scene,
                        synthetic_oracles)

__all__ = [
    "DepthEstimator", "Inpainter", "OracleError", "OracleSet", "PanoramaGen", "Segmenter",
    "composite", "HttpClient", "http_oracles", "SceneObject", "SceneSpec",
    "SyntheticDepthEstimator", "SyntheticInpainter", "SyntheticPanoramaGen", "SyntheticScene",
    "SyntheticSegmenter", "make_scene", "synthetic_oracles",
]
