"""Point-splatting z-buffer renderer for equirectangular and pinhole cameras."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geom import PointCloud, Pose, check_eqr_shape, direction_to_pixel

MIN_DISTANCE = 1e-9


@dataclass(frozen=True)
class SplatParams:
    """Splat size control.

    A point at distance ``d`` covers a disk of ``r_px = clamp(c_splat * ppr / d,
    r_min, r_max)`` pixels, ``ppr`` being the camera's pixels per radian.
    ``c_splat=None`` means ``2 * median point distance / ppr``, so points at the
    median distance get a 2 px splat.  ``footprints`` (world units, one per
    point) replaces ``c_splat`` with a per-point size.  ``r_px = 1`` covers
    exactly one pixel.
    """

    c_splat: float | None = None
    r_max: float = 5.0
    r_min: float = 1.0
    footprints: np.ndarray | None = None


@dataclass(frozen=True)
class PerspectiveIntrinsics:
    width: int
    height: int
    fov_x: float

    def __post_init__(self):
        if not 0.0 < self.fov_x < np.pi:
            raise ValueError("fov_x must lie in (0, pi)")

    @property
    def focal(self) -> float:
        return 0.5 * self.width / np.tan(0.5 * self.fov_x)


@dataclass
class RenderOutput:
    image: np.ndarray
    depth: np.ndarray
    visibility: np.ndarray
    skipped: int = 0
    hits: np.ndarray | None = None

    @property
    def coverage(self) -> float:
        return float(self.visibility.mean())


def estimate_footprints(cloud: PointCloud, k: int = 6, scale: float = 1.2) -> np.ndarray:
    """Per-point splat size from the distance to the ``k``-th nearest neighbour."""
    n = len(cloud)
    if n < 2:
        return np.zeros(n)
    k = min(k, n - 1)
    dist, _ = cKDTree(cloud.positions).query(cloud.positions, k=k + 1)
    return scale * dist[:, -1]


def _splat_radii(dist, ppr, splat: SplatParams, keep) -> np.ndarray:
    if splat.footprints is not None:
        fp = np.asarray(splat.footprints, dtype=np.float64)[keep]
        r = fp * ppr / dist
    else:
        c = splat.c_splat * ppr if splat.c_splat is not None else 2.0 * np.median(dist)
        r = c / dist
    return np.clip(r, splat.r_min, splat.r_max)


def _expand(rows, cols, rad, stretch, H, W, wrap):
    """Enumerate pixels covered by every splat.

    A pixel at offset ``(dx, dy)`` from the splat centre is covered when
    ``(dx * stretch[row])**2 + dy**2 <= (r - 0.5)**2``; splats with
    ``r <= 1`` cover their own pixel only, whatever the stretch.
    Returns (point index, flat pixel index) arrays.
    """
    rho = rad - 0.5
    rmax = int(np.floor(rho.max())) if len(rho) else 0
    idx_parts, pix_parts = [], []
    for dy in range(-rmax, rmax + 1):
        sel = np.nonzero(rho >= abs(dy))[0]
        if not len(sel):
            continue
        r_row = rows[sel] + dy
        ok = (r_row >= 0) & (r_row < H)
        sel, r_row = sel[ok], r_row[ok]
        half = np.sqrt(np.maximum(rho[sel] ** 2 - dy * dy, 0.0)) / stretch[r_row]
        half = np.where(rho[sel] <= 0.5, 0.0, half)
        hw = np.minimum(np.floor(half).astype(np.int64), W // 2)
        counts = 2 * hw + 1
        total = int(counts.sum())
        owner = np.repeat(np.arange(len(sel)), counts)
        starts = np.cumsum(counts) - counts
        dx = np.arange(total) - np.repeat(starts, counts) - np.repeat(hw, counts)
        c = cols[sel][owner] + dx
        if wrap:
            c %= W
            keep = slice(None)
        else:
            keep = (c >= 0) & (c < W)
        idx_parts.append(sel[owner][keep])
        pix_parts.append((r_row[owner] * W + c)[keep])
    if not idx_parts:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    return np.concatenate(idx_parts), np.concatenate(pix_parts)


def _zbuffer(rows, cols, dist, zval, colors, rad, stretch, H, W, wrap) -> RenderOutput:
    image = np.zeros((H, W, 3))
    depth = np.full((H, W), np.nan)
    vis = np.zeros((H, W), bool)
    hits = np.zeros(H * W, np.int64)
    if len(dist):
        rank_of = np.empty(len(dist), np.int64)
        order = np.argsort(dist, kind="stable")
        rank_of[order] = np.arange(len(dist))
        owner, pix = _expand(rows, cols, rad, stretch, H, W, wrap)
        best = np.full(H * W, np.iinfo(np.int64).max)
        np.minimum.at(best, pix, rank_of[owner])
        hits = np.bincount(pix, minlength=H * W)
        hit = best < np.iinfo(np.int64).max
        win = order[best[hit]]
        flat = np.nonzero(hit)[0]
        vis.flat[flat] = True
        depth.flat[flat] = zval[win]
        image.reshape(-1, 3)[flat] = colors[win]
    return RenderOutput(image, depth, vis, hits=hits.reshape(H, W))


def render_eqr(cloud: PointCloud, T: Pose, W: int, H: int,
               splat: SplatParams | None = None) -> RenderOutput:
    """Equirectangular RGB-D render of ``cloud`` from camera pose ``T``.

    Depth is radial distance; unhit pixels are black with ``NaN`` depth.
    Splats are widened horizontally by ``1 / cos(elevation)`` so they keep
    their angular size towards the poles.
    """
    check_eqr_shape(H, W)
    splat = splat or SplatParams()
    pc = T.to_camera(cloud.positions)
    dist = np.linalg.norm(pc, axis=1)
    keep = dist >= MIN_DISTANCE
    skipped = int((~keep).sum())
    pc, dist = pc[keep], dist[keep]
    colors = cloud.colors[keep]
    if len(dist):
        x, y = direction_to_pixel(pc, W, H)
        cols = np.rint(x).astype(np.int64) % W
        rows = np.clip(np.rint(y).astype(np.int64), 0, H - 1)
        rad = _splat_radii(dist, W / (2.0 * np.pi), splat, keep)
    else:
        rows = cols = np.zeros(0, np.int64)
        rad = np.zeros(0)
    phi = np.pi / 2.0 - (np.arange(H) + 0.5) / H * np.pi
    stretch = np.cos(phi)
    out = _zbuffer(rows, cols, dist, dist, colors, rad, stretch, H, W, wrap=True)
    out.skipped = skipped
    return out


def render_perspective(cloud: PointCloud, T: Pose, K: PerspectiveIntrinsics,
                       splat: SplatParams | None = None) -> RenderOutput:
    """Pinhole render; depth is planar (camera +Z), points behind the camera are culled."""
    splat = splat or SplatParams()
    w, h, f = K.width, K.height, K.focal
    pc = T.to_camera(cloud.positions)
    dist = np.linalg.norm(pc, axis=1)
    skipped = int((dist < MIN_DISTANCE).sum())
    keep = (pc[:, 2] > MIN_DISTANCE) & (dist >= MIN_DISTANCE)
    u = (w / 2.0 - 0.5) + f * pc[:, 0] / np.where(keep, pc[:, 2], 1.0)
    v = (h / 2.0 - 0.5) - f * pc[:, 1] / np.where(keep, pc[:, 2], 1.0)
    m = splat.r_max
    keep &= (u > -m) & (u < w - 1 + m) & (v > -m) & (v < h - 1 + m)
    pc, dist = pc[keep], dist[keep]
    cols = np.rint(u[keep]).astype(np.int64)
    rows = np.rint(v[keep]).astype(np.int64)
    if len(dist):
        rad = _splat_radii(dist, f, splat, keep)
    else:
        rad = np.zeros(0)
    # splat centres may sit just off-image; the expander clips covered pixels
    out = _zbuffer(rows, cols, dist, pc[:, 2], cloud.colors[keep], rad,
                   np.ones(h), h, w, wrap=False)
    out.skipped = skipped
    return out
