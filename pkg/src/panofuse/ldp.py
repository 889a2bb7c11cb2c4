"""Layered depth panoramas: foreground-mask scoring, background inpainting and
the row-constant background depth surface.

A candidate segmentation mask is foreground when the depth just outside its
depth-edge boundary is clearly larger than the depth just inside.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .blend import erode4
from .geom import Pose
from .oracle.base import OracleError, composite

log = logging.getLogger(__name__)

_WRAP = ("nearest", "wrap")  # rows clamp at the poles, columns wrap in azimuth


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class LdpParams:
    eps: float = 3.0
    sigma: float = 1.5
    canny_low: float = 0.10
    canny_high: float = 0.20
    canny_sigma: float = 1.0
    t_rel: float = 0.05
    min_samples: int = 8
    log_depth: bool = False


@dataclass(frozen=True)
class MaskScore:
    mask_index: int
    score: float
    boundary_sample_count: int


@dataclass
class LayeredDepthPanorama:
    fg_image: np.ndarray
    fg_depth: np.ndarray
    fg_mask: np.ndarray
    bg_image: np.ndarray
    bg_depth: np.ndarray
    scores: list = field(default_factory=list)
    threshold: float = float("nan")


def _hysteresis(strong, weak) -> np.ndarray:
    """Keep 8-connected components of ``weak`` (wrapping in azimuth) that touch ``strong``."""
    lab, n = ndimage.label(weak, structure=np.ones((3, 3), bool))
    if n == 0:
        return np.zeros_like(weak)
    # join labels that meet across the azimuth seam
    a, b = lab[:, -1], lab[:, 0]
    pairs = []
    for dy in (-1, 0, 1):
        bb = np.roll(b, dy)
        if dy == -1:
            bb[-1] = 0
        elif dy == 1:
            bb[0] = 0
        ok = (a > 0) & (bb > 0)
        pairs.append(np.stack([a[ok], bb[ok]], 1))
    pairs = np.concatenate(pairs)
    adj = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n + 1, n + 1))
    _, comp = connected_components(adj, directed=False)
    keep_comp = np.zeros(comp.max() + 1, bool)
    keep_comp[comp[lab[strong & (lab > 0)]]] = True
    return weak & keep_comp[comp[lab]]


def depth_edges(D, low: float = 0.10, high: float = 0.20, sigma: float = 1.0,
                log_depth: bool = False) -> np.ndarray:
    """Canny edges of per-image normalised depth, wrapping horizontally.

    ``low`` and ``high`` are hysteresis thresholds as fractions of the maximum
    gradient magnitude.
    """
    if not 0 < low < high <= 1:
        raise ValueError("need 0 < low < high <= 1")
    D = np.asarray(D, dtype=np.float64)
    if not np.isfinite(D).all():
        raise ValueError("depth must be defined everywhere")
    if log_depth:
        D = np.log(D)
    lo, hi = D.min(), D.max()
    if hi - lo <= 0:
        return np.zeros(D.shape, bool)
    Dn = ndimage.gaussian_filter((D - lo) / (hi - lo), sigma, mode=_WRAP)
    gx = ndimage.sobel(Dn, axis=1, mode=_WRAP)
    gy = ndimage.sobel(Dn, axis=0, mode=_WRAP)
    mag = np.hypot(gx, gy)
    top = mag.max()
    if top <= 0:
        return np.zeros(D.shape, bool)
    # non-maximum suppression against magnitudes interpolated one pixel along the gradient
    H, W = D.shape
    yy, xx = np.mgrid[:H, :W]
    nz = mag > 0
    ux = np.where(nz, gx / np.where(nz, mag, 1.0), 0.0)
    uy = np.where(nz, gy / np.where(nz, mag, 1.0), 0.0)
    fwd, _ = sample_bilinear(mag, xx + ux, np.clip(yy + uy, 0, H - 1))
    bwd, _ = sample_bilinear(mag, xx - ux, np.clip(yy - uy, 0, H - 1))
    nms = np.where((mag >= fwd) & (mag > bwd), mag, 0.0)
    strong = nms >= high * top
    weak = nms >= low * top
    return _hysteresis(strong, weak)


def mask_boundary(S) -> np.ndarray:
    """Pixels of ``S`` with a 4-neighbour outside it (azimuth wraps, poles do not)."""
    S = np.asarray(S, bool)
    return S & ~erode4(S)


def boundary_normals(S, sigma: float = 1.5):
    """Boundary pixels of ``S`` and outward unit normals.

    Returns ``(xy, n)``: ``xy`` is ``(K, 2)`` integer ``(col, row)`` and ``n``
    ``(K, 2)`` unit vectors in the same ``(x right, y down)`` pixel axes,
    taken as the negated gradient of the smoothed mask.  Normals where that
    gradient vanishes are zero.
    """
    S = np.asarray(S, bool)
    B = mask_boundary(S)
    rows, cols = np.nonzero(B)
    if not len(rows):
        return np.zeros((0, 2), np.int64), np.zeros((0, 2))
    sm = ndimage.gaussian_filter(S.astype(np.float64), sigma, mode=_WRAP)
    gx = 0.5 * (np.roll(sm, -1, axis=1) - np.roll(sm, 1, axis=1))
    gy = np.gradient(sm, axis=0)
    n = -np.stack([gx[rows, cols], gy[rows, cols]], 1)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    n = np.where(norm > 1e-12, n / np.where(norm > 1e-12, norm, 1.0), 0.0)
    return np.stack([cols, rows], 1), n


def sample_bilinear(D, x, y):
    """Bilinear lookup at continuous ``(x, y)``; columns wrap, rows must lie in ``[0, H-1]``.

    Returns ``(values, valid)``.
    """
    D = np.asarray(D, dtype=np.float64)
    H, W = D.shape
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    valid = (y >= 0) & (y <= H - 1)
    yc = np.clip(y, 0, H - 1)
    y0 = np.minimum(np.floor(yc).astype(np.int64), H - 2) if H > 1 else np.zeros_like(yc, np.int64)
    fy = yc - y0
    x0f = np.floor(x)
    fx = x - x0f
    x0 = x0f.astype(np.int64) % W
    x1 = (x0 + 1) % W
    y1 = np.minimum(y0 + 1, H - 1)
    v = ((1 - fy) * ((1 - fx) * D[y0, x0] + fx * D[y0, x1])
         + fy * ((1 - fx) * D[y1, x0] + fx * D[y1, x1]))
    valid &= np.isfinite(v)
    return v, valid


def foreground_score(S, D, C, eps: float = 3.0, sigma: float = 1.5, mask_index: int = 0) -> MaskScore:
    """Mean of ``d(x + eps n) - d(x - eps n)`` over boundary pixels of ``S`` on depth edges ``C``."""
    S = np.asarray(S, bool)
    C = np.asarray(C, bool)
    if eps <= 0:
        raise ValueError("eps must be positive")
    xy, n = boundary_normals(S, sigma)
    if len(xy):
        on_edge = C[xy[:, 1], xy[:, 0]] & (np.abs(n).sum(1) > 0)
        xy, n = xy[on_edge], n[on_edge]
    if not len(xy):
        return MaskScore(mask_index, float("-inf"), 0)
    out, ok_o = sample_bilinear(D, xy[:, 0] + eps * n[:, 0], xy[:, 1] + eps * n[:, 1])
    inn, ok_i = sample_bilinear(D, xy[:, 0] - eps * n[:, 0], xy[:, 1] - eps * n[:, 1])
    ok = ok_o & ok_i
    if not ok.any():
        return MaskScore(mask_index, float("-inf"), 0)
    return MaskScore(mask_index, float(np.mean(out[ok] - inn[ok])), int(ok.sum()))


def select_foreground(masks, scores, t: float, min_samples: int = 8, shape=None) -> np.ndarray:
    """Union of the masks scoring above ``t`` with at least ``min_samples`` boundary samples."""
    if len(masks) != len(scores):
        raise ValueError("masks and scores are not aligned")
    if shape is None:
        if not masks:
            raise ValueError("shape needed when there are no masks")
        shape = np.asarray(masks[0]).shape
    out = np.zeros(shape, bool)
    for m, s in zip(masks, scores):
        if s.boundary_sample_count >= min_samples and s.score > t:
            out |= np.asarray(m, bool)
    return out


def panoramic_hull(D) -> np.ndarray:
    """Row-constant surface at the farthest defined depth of each row."""
    D = np.asarray(D, dtype=np.float64)
    defined = np.isfinite(D)
    if not defined.any(axis=1).all():
        bad = np.nonzero(~defined.any(axis=1))[0]
        raise ValueError(f"rows without defined depth: {bad[:5].tolist()}")
    h = np.max(np.where(defined, D, -np.inf), axis=1)
    return np.repeat(h[:, None], D.shape[1], axis=1)


def build_ldp(I, D, segmenter, inpainter, params: LdpParams | None = None, prompt: str = "",
              pose: Pose | None = None) -> LayeredDepthPanorama:
    """Split an RGB-D panorama into foreground and inpainted background layers."""
    params = params or LdpParams()
    I = np.asarray(I, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    C = depth_edges(D, params.canny_low, params.canny_high, params.canny_sigma, params.log_depth)
    try:
        masks = segmenter.segment(I, pose=pose)
    except Exception as exc:
        raise StageError("ldp/segment", exc) from exc
    scores = [foreground_score(m, D, C, params.eps, params.sigma, k) for k, m in enumerate(masks)]
    t = params.t_rel * float(np.median(D))
    fg = select_foreground(masks, scores, t, params.min_samples, shape=D.shape)
    bg_image = I.copy()
    if fg.any():
        try:
            filled = inpainter.inpaint(I, fg, prompt, pose=pose, background=True)
        except Exception as exc:
            raise StageError("ldp/inpaint", exc) from exc
        if np.asarray(filled).shape != I.shape:
            raise StageError("ldp/inpaint", OracleError("inpaint", "wrong output shape"))
        bg_image = composite(I, filled, fg)
    log.debug("ldp: %d masks, %d selected, t=%.4g", len(masks),
              sum(s.score > t and s.boundary_sample_count >= params.min_samples for s in scores), t)
    return LayeredDepthPanorama(I, D, fg, bg_image, panoramic_hull(D), scores, t)
