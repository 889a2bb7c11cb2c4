"""Interfaces for the generative components: panorama generation, inpainting,
depth estimation and segmentation.

Every method takes an optional camera ``pose``.  Synthetic oracles use it to
ray-trace ground truth; remote model servers may ignore it.
"""
from __future__ import annotations

from typing import Protocol, runtime_checkable

import numpy as np

from ..geom import Pose


class OracleError(RuntimeError):
    """Failure inside an oracle call, tagged with the request kind and id."""

    def __init__(self, kind: str, message: str, request_id: str | None = None):
        tag = f"{kind}" + (f" [{request_id}]" if request_id else "")
        super().__init__(f"{tag}: {message}")
        self.kind = kind
        self.request_id = request_id


@runtime_checkable
class PanoramaGen(Protocol):
    def generate(self, prompt: str, pose: Pose, W: int, H: int
                 ) -> tuple[np.ndarray, np.ndarray | None]: ...


@runtime_checkable
class Inpainter(Protocol):
    def inpaint(self, image: np.ndarray, mask: np.ndarray, prompt: str,
                pose: Pose | None = None, background: bool = False) -> np.ndarray: ...


@runtime_checkable
class DepthEstimator(Protocol):
    def estimate(self, image: np.ndarray, pose: Pose | None = None) -> np.ndarray: ...


@runtime_checkable
class Segmenter(Protocol):
    def segment(self, image: np.ndarray, pose: Pose | None = None) -> list[np.ndarray]: ...


class OracleSet:
    """The four oracles a pipeline run needs, with a call log for provenance."""

    def __init__(self, panorama: PanoramaGen, inpainter: Inpainter,
                 depth: DepthEstimator, segmenter: Segmenter):
        self.panorama = panorama
        self.inpainter = inpainter
        self.depth = depth
        self.segmenter = segmenter
        self.log: list[dict] = []

    def record(self, kind: str, **info) -> None:
        self.log.append({"call": len(self.log), "kind": kind, **info})


def composite(original, filled, mask) -> np.ndarray:
    """Take ``filled`` inside ``mask`` and ``original`` everywhere else."""
    mask = np.asarray(mask, bool)
    return np.where(mask[..., None], filled, original)


def check_depth(depth, shape, kind: str = "depth") -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != tuple(shape):
        raise OracleError(kind, f"depth shape {depth.shape} != {tuple(shape)}")
    if not (np.isfinite(depth).all() and (depth > 0).all()):
        raise OracleError(kind, "depth has nonpositive or non-finite values")
    return depth
