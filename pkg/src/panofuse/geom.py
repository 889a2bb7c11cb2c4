"""Equirectangular camera model, rigid poses and spherical (back-)projection.

Conventions used throughout the package:

* rasters are numpy arrays indexed ``[row, col]``; images are ``(H, W, 3)``
  floats in ``[0, 1]``, depth maps ``(H, W)`` floats holding *radial*
  distance with ``NaN`` where undefined, masks ``(H, W)`` bools;
* row 0 is the zenith, column 0 is azimuth ``-pi``;
* camera frame is right-handed with +X right, +Y up and +Z forward.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform: ``p_world = rotation @ p_cam + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or np.linalg.det(R) < 0:
            raise ValueError("rotation must be orthonormal with det +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=np.float64).reshape(4, 4)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def to_camera(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return (points - self.translation) @ self.rotation


def rotation_yaw_pitch(yaw: float, pitch: float) -> np.ndarray:
    """Rotation turning the camera by ``yaw`` about +Y, then ``pitch`` about its own +X.

    Positive pitch looks up.
    """
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    Ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    Rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, sp], [0.0, -sp, cp]])
    return Ry @ Rx


def translate_pose(T: Pose, v) -> Pose:
    return Pose(T.rotation, T.translation + np.asarray(v, dtype=np.float64))


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.positions) != len(self.colors):
            raise ValueError("positions and colors differ in length")
        if not np.isfinite(self.positions).all():
            raise ValueError("non-finite point coordinates")
        if len(self.colors) and (self.colors.min() < 0.0 or self.colors.max() > 1.0):
            raise ValueError("colors must lie in [0, 1]")

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)))

    def __len__(self) -> int:
        return len(self.positions)

    def transformed(self, T: Pose) -> "PointCloud":
        return PointCloud(T.apply(self.positions), self.colors.copy())

    def subset(self, keep) -> "PointCloud":
        return PointCloud(self.positions[keep], self.colors[keep])


def merge_clouds(*clouds: PointCloud) -> PointCloud:
    if not clouds:
        return PointCloud.empty()
    return PointCloud(np.concatenate([c.positions for c in clouds]),
                      np.concatenate([c.colors for c in clouds]))


def check_eqr_shape(H: int, W: int) -> None:
    if W != 2 * H:
        raise ValueError(f"equirectangular rasters need W == 2H, got {W}x{H}")


def pixel_angles(x, y, W: int, H: int):
    """Azimuth and elevation of pixel centres (broadcasting over ``x``, ``y``)."""
    theta = (np.asarray(x, dtype=np.float64) + 0.5) / W * 2.0 * np.pi - np.pi
    phi = np.pi / 2.0 - (np.asarray(y, dtype=np.float64) + 0.5) / H * np.pi
    return theta, phi


def angles_to_direction(theta, phi) -> np.ndarray:
    cphi = np.cos(phi)
    return np.stack([cphi * np.sin(theta), np.sin(phi), cphi * np.cos(theta)], axis=-1)


def pixel_to_direction(x, y, W: int, H: int) -> np.ndarray:
    """Unit camera-frame ray through the centre of pixel ``(x, y)``."""
    x = np.asarray(x)
    y = np.asarray(y)
    if np.any(x < 0) or np.any(x >= W) or np.any(y < 0) or np.any(y >= H):
        raise ValueError("pixel index out of range")
    return angles_to_direction(*pixel_angles(x, y, W, H))


def direction_grid(W: int, H: int) -> np.ndarray:
    """``(H, W, 3)`` array of unit rays for every pixel centre."""
    xs, ys = np.meshgrid(np.arange(W), np.arange(H))
    return angles_to_direction(*pixel_angles(xs, ys, W, H))


def direction_to_pixel(d, W: int, H: int):
    """Continuous ``(x, y)`` pixel coordinates of camera-frame directions.

    ``d`` need not be normalised but must be non-zero.  Integer results
    correspond to pixel centres; azimuth wraps into ``[-pi, pi)``.
    """
    d = np.asarray(d, dtype=np.float64)
    norm = np.linalg.norm(d, axis=-1)
    if np.any(norm == 0.0):
        raise ValueError("zero direction vector")
    theta = np.arctan2(d[..., 0], d[..., 2])
    theta = np.where(theta >= np.pi, theta - 2.0 * np.pi, theta)
    phi = np.arcsin(np.clip(d[..., 1] / norm, -1.0, 1.0))
    x = (theta + np.pi) / (2.0 * np.pi) * W - 0.5
    y = (np.pi / 2.0 - phi) / np.pi * H - 0.5
    return x, y


def backproject_spherical(image, depth, T: Pose, mask=None, return_pixels: bool = False):
    """Lift an RGB-D panorama to a world-frame point cloud.

    One point per selected pixel, at ``T · (depth · ray)``, ordered row-major.
    Without ``mask`` every pixel with finite depth is selected; with a mask
    the depth must be defined and positive on every selected pixel.
    With ``return_pixels`` the ``(K, 2)`` array of source ``(row, col)`` is
    returned as well.
    """
    depth = np.asarray(depth, dtype=np.float64)
    H, W = depth.shape
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (H, W, 3):
        raise ValueError(f"image shape {image.shape} does not match depth {depth.shape}")
    if mask is None:
        sel = np.isfinite(depth)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (H, W):
            raise ValueError(f"mask shape {mask.shape} does not match depth {depth.shape}")
        sel = mask
        d = depth[sel]
        if not (np.isfinite(d).all() and (d > 0).all()):
            raise ValueError("depth undefined or nonpositive under mask")
    rows, cols = np.nonzero(sel)
    dirs = angles_to_direction(*pixel_angles(cols, rows, W, H))
    pts = T.apply(dirs * depth[rows, cols][:, None])
    cloud = PointCloud(pts, np.clip(image[rows, cols], 0.0, 1.0))
    if return_pixels:
        return cloud, np.stack([rows, cols], axis=1)
    return cloud
