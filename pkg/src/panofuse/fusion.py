"""Sphere opening, capsule rendering and fill-block construction."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .blend import BlendParams, harmonic_blend_depth, naive_blend, offset_interpolation_blend
from .evalkit import transition_score
from .geom import PointCloud, Pose, backproject_spherical, merge_clouds, translate_pose
from .ldp import LdpParams, StageError, build_ldp
from .oracle.base import OracleSet, check_depth, composite
from .render import SplatParams, estimate_footprints, render_eqr

log = logging.getLogger(__name__)

SIDES = ("left", "right", "both")
BLEND_METHODS = ("harmonic", "naive", "interpolation")


@dataclass
class OpenedSphere:
    cloud: PointCloud
    opening: str
    axis_dir: np.ndarray
    wedge_half_angle: float
    cylinder_radius: dict = field(default_factory=dict)  # opened axis sign -> R used (None: no push)
    center: Pose = field(default_factory=Pose)


def smoothstep_ramp(gamma, alpha: float) -> np.ndarray:
    """1 at ``gamma = alpha``, 0 at ``gamma = pi/2``, C1 smooth in between."""
    u = np.clip((np.pi / 2 - np.asarray(gamma)) / (np.pi / 2 - alpha), 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _axis_signs(side: str):
    if side not in SIDES:
        raise ValueError(f"side must be one of {SIDES}")
    return {"right": (1,), "left": (-1,), "both": (-1, 1)}[side]


def open_sphere(S: PointCloud, center: Pose, side: str, alpha: float = np.deg2rad(60.0),
                R="auto", axis=(1.0, 0.0, 0.0), percentile: float = 95.0,
                push_only: bool = True) -> OpenedSphere:
    """Cut a cone of half-angle ``alpha`` around the opened axis and widen the facing band.

    Points left in the band ``alpha <= gamma <= pi/2`` (``gamma`` being the
    angle to the opened axis) move outward along their ray towards the
    cylinder of radius ``R`` about that axis, weighted by a smoothstep that is
    1 at the cut and 0 at ``pi/2``.  ``R`` is a length, ``"auto"`` (the
    ``percentile`` of perpendicular distances over the facing hemisphere) or
    ``"none"`` (cut only).  With ``push_only=False`` band points are pulled
    onto the cylinder as well as pushed.

    Args:
        S: cloud in world coordinates.
        center: sphere camera pose; ``axis`` is given in its frame.
        side: ``"right"`` opens towards ``+axis``, ``"left"`` towards ``-axis``.

    Returns:
        OpenedSphere with the surviving, deformed points.
    """
    if not 0.0 < alpha < np.pi / 2:
        raise ValueError("alpha must lie in (0, pi/2)")
    if not (R in ("auto", "none") or R is None) and float(R) <= 0:
        raise ValueError("cylinder radius must be positive")
    a_world = center.rotation @ (np.asarray(axis, dtype=np.float64) / np.linalg.norm(axis))
    c = center.translation
    v = S.positions - c
    r = np.linalg.norm(v, axis=1)
    safe = np.where(r > 0, r, 1.0)
    keep = np.ones(len(v), bool)
    scale = np.ones(len(v))
    used = {}
    for sgn in _axis_signs(side):
        cosg = np.clip(sgn * (v @ a_world) / safe, -1.0, 1.0)
        gamma = np.where(r > 0, np.arccos(cosg), np.pi / 2)
        keep &= gamma >= alpha
        if R is None or R == "none":
            used[sgn] = None
            continue
        facing = (gamma < np.pi / 2) & (r > 0)
        if R == "auto":
            perp = r[facing] * np.sin(gamma[facing])
            Rs = float(np.percentile(perp, percentile)) if len(perp) else 0.0
        else:
            Rs = float(R)
        used[sgn] = Rs
        band = (gamma >= alpha) & (gamma <= np.pi / 2) & (r > 0)
        if Rs <= 0 or not band.any():
            continue
        g = gamma[band]
        target = Rs / np.sin(g)
        gap = target - r[band]
        if push_only:
            gap = np.maximum(gap, 0.0)
        r_new = r[band] + smoothstep_ramp(g, alpha) * gap
        scale[band] = r_new / r[band]
    moved = c + v * scale[:, None]
    cloud = PointCloud(moved[keep], S.colors[keep])
    return OpenedSphere(cloud, side, a_world, alpha, used, center)


def intermediate_pose(T_i: Pose, lam: float, d=(1.0, 0.0, 0.0)) -> Pose:
    if lam <= 0:
        raise ValueError("spacing must be positive")
    return translate_pose(T_i, 0.5 * lam * np.asarray(d, dtype=np.float64))


@dataclass
class FillBlock:
    cloud: PointCloud
    source_pose: Pose
    fill_mask: np.ndarray
    debug: dict = field(default_factory=dict)


@dataclass(frozen=True)
class FillParams:
    width: int = 256
    height: int = 128
    prompt: str = "scene"
    splat: str = "footprint"       # "auto" or "footprint"
    footprint_k: int = 4
    footprint_scale: float = 0.8
    align_estimate: bool = True    # median-ratio scale match of estimated to rendered depth
    second_ldp: bool = True
    blend_method: str = "harmonic"
    blend: BlendParams = BlendParams()
    ldp: LdpParams = LdpParams()
    fill_warn: tuple = (0.02, 0.9)


def splat_params_for(cloud: PointCloud, mode: str, k: int = 4, scale: float = 0.8) -> SplatParams:
    """Distance-scaled splats (``"auto"``) or per-point k-NN footprints (``"footprint"``)."""
    if mode == "footprint":
        return SplatParams(footprints=estimate_footprints(cloud, k, scale))
    if mode != "auto":
        raise ValueError(f"unknown splat mode {mode!r}")
    return SplatParams()


def layer_cloud(image, depth, bg_image, bg_depth, T: Pose, region=None) -> PointCloud:
    """Foreground points over ``region`` plus background points wherever the layers differ."""
    H, W = depth.shape
    region = np.ones((H, W), bool) if region is None else np.asarray(region, bool)
    fg = backproject_spherical(image, depth, T, region)
    differs = region & ((bg_depth != depth) | (bg_image != image).any(-1))
    bg = backproject_spherical(bg_image, bg_depth, T, differs)
    return merge_clouds(fg, bg)


def build_fill_block(S_right: OpenedSphere, S_left: OpenedSphere, T_mid: Pose, oracles: OracleSet,
                     params: FillParams | None = None, oracle_scale: float = 1.0):
    """Render the capsule from its middle, inpaint and lift what is missing.

    ``oracle_scale`` is world units per oracle (scene) unit: oracle poses are
    divided by it and oracle depth multiplied by it.

    Returns:
        (FillBlock, diagnostics dict)
    """
    params = params or FillParams()
    if params.blend_method not in BLEND_METHODS:
        raise ValueError(f"blend_method must be one of {BLEND_METHODS}")
    if S_right.opening not in ("right", "both") or S_left.opening not in ("left", "both"):
        raise ValueError("capsule spheres must open towards each other")
    W, H = params.width, params.height
    capsule = merge_clouds(S_right.cloud, S_left.cloud)
    ren = render_eqr(capsule, T_mid, W, H, splat_params_for(
        capsule, params.splat, params.footprint_k, params.footprint_scale))
    M_r = ren.visibility
    fill = ~M_r
    frac = float(fill.mean())
    diag = {"fill_fraction": frac, "capsule_points": len(capsule)}
    lo, hi = params.fill_warn
    if frac and not lo <= frac <= hi:
        log.warning("fill fraction %.4f outside [%g, %g]; capsule geometry suspect", frac, lo, hi)
    if frac == 0:
        return FillBlock(PointCloud.empty(), T_mid, fill), diag
    oracle_pose = Pose(T_mid.rotation, T_mid.translation / oracle_scale)
    try:
        I_ip = oracles.inpainter.inpaint(ren.image, fill, params.prompt, pose=oracle_pose)
        oracles.record("inpaint", pose=oracle_pose.translation.tolist(), masked=int(fill.sum()))
    except Exception as exc:
        raise StageError("fill/inpaint", exc) from exc
    I_ip = composite(ren.image, I_ip, fill)
    try:
        D_est = oracles.depth.estimate(I_ip, pose=oracle_pose)
        oracles.record("depth", pose=oracle_pose.translation.tolist())
    except Exception as exc:
        raise StageError("fill/depth", exc) from exc
    D_est = check_depth(D_est, (H, W)) * oracle_scale
    if params.align_estimate and M_r.any():
        ratio = float(np.median(ren.depth[M_r] / D_est[M_r]))
        D_est = D_est * ratio
        diag["estimate_scale"] = ratio
    try:
        if params.blend_method == "harmonic":
            D_blend, info = harmonic_blend_depth(ren.depth, D_est, M_r, T_mid, params.blend, return_info=True)
            diag.update({f"blend_{k}": v for k, v in info.items()})
        elif params.blend_method == "interpolation":
            D_blend = offset_interpolation_blend(ren.depth, D_est, M_r)
        else:
            D_blend = naive_blend(ren.depth, D_est, M_r)
    except Exception as exc:
        raise StageError("fill/blend", exc) from exc
    if M_r.any():
        diag["transition_score"] = transition_score(D_blend, M_r)
        diag["transition_score_naive"] = transition_score(naive_blend(ren.depth, D_est, M_r), M_r)
    if params.second_ldp:
        try:
            ldp = build_ldp(I_ip, D_blend, oracles.segmenter, oracles.inpainter, params.ldp,
                            params.prompt, pose=oracle_pose)
        except StageError as exc:
            raise StageError("fill/" + exc.stage, exc.cause) from exc
        oracles.record("fill_ldp", selected=int(ldp.fg_mask.sum()))
        cloud = layer_cloud(I_ip, D_blend, ldp.bg_image, ldp.bg_depth, T_mid, fill)
    else:
        cloud = backproject_spherical(I_ip, D_blend, T_mid, fill)
    diag["fill_points"] = len(cloud)
    debug = {"render_image": ren.image, "render_depth": ren.depth, "visibility": M_r,
             "inpainted": I_ip, "estimated_depth": D_est, "blended_depth": D_blend}
    return FillBlock(cloud, T_mid, fill, debug), diag
