"""Coverage, depth accuracy and seam metrics, plus the evaluation trajectory sampler."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .geom import Pose, rotation_yaw_pitch

MODES = ("rotation", "translation", "combined")


def coverage(vis) -> float:
    vis = np.asarray(vis, bool)
    return float(vis.sum() / vis.size) if vis.size else 0.0


@dataclass(frozen=True)
class DepthMetricsReport:
    abs_rel: float
    rmse: float
    si_rmse: float
    delta1: float
    delta2: float
    delta3: float
    n_valid: int = 0
    n_excluded: int = 0


def depth_metrics(pred, gt, valid=None) -> DepthMetricsReport:
    """AbsRel, RMSE, scale-invariant log RMSE and delta accuracies over ``valid``.

    Pixels where ``pred`` is nonpositive or undefined are dropped and counted
    in ``n_excluded``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.ones(gt.shape, bool) if valid is None else np.asarray(valid, bool)
    if not valid.any():
        raise ValueError("no valid pixels")
    if not (np.isfinite(gt[valid]).all() and (gt[valid] > 0).all()):
        raise ValueError("ground truth must be positive on valid pixels")
    usable = valid & np.isfinite(pred) & (pred > 0)
    excluded = int(valid.sum() - usable.sum())
    if not usable.any():
        raise ValueError("every valid pixel has a nonpositive prediction")
    p, g = pred[usable], gt[usable]
    e = np.log(p) - np.log(g)
    ratio = np.maximum(p / g, g / p)
    si = np.sqrt(max(float(np.mean(e * e) - np.mean(e) ** 2), 0.0))
    return DepthMetricsReport(
        abs_rel=float(np.mean(np.abs(p - g) / g)),
        rmse=float(np.sqrt(np.mean((p - g) ** 2))),
        si_rmse=si,
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
        n_valid=int(usable.sum()),
        n_excluded=excluded,
    )


def _cross_pairs(M, wrap: bool):
    """Index pairs (flat a in M, flat b not in M) over 4-adjacent pixels."""
    M = np.asarray(M, bool)
    H, W = M.shape
    idx = np.arange(H * W).reshape(H, W)
    pairs = [(idx[:-1], idx[1:]), (idx[:, :-1], idx[:, 1:])]
    if wrap:
        pairs.append((idx[:, -1:], idx[:, :1]))
    a = np.concatenate([p[0].ravel() for p in pairs])
    b = np.concatenate([p[1].ravel() for p in pairs])
    m = M.ravel()
    cross = m[a] != m[b]
    a, b = a[cross], b[cross]
    inside = np.where(m[a], a, b)
    outside = np.where(m[a], b, a)
    return inside, outside


def transition_score(D, M, wrap: bool = True) -> float:
    """Mean ``|D(a) - D(b)|`` over 4-adjacent pairs straddling the edge of ``M``.

    ``wrap`` joins the first and last columns (equirectangular rasters).
    """
    D = np.asarray(D, dtype=np.float64)
    a, b = _cross_pairs(M, wrap)
    d = D.ravel()
    ok = np.isfinite(d[a]) & np.isfinite(d[b])
    if not ok.any():
        raise ValueError("no adjacent pairs across the mask edge")
    return float(np.mean(np.abs(d[a][ok] - d[b][ok])))


def transition_band(M, band: int, wrap: bool = True) -> np.ndarray:
    """Pixels outside ``M`` within ``band`` 4-neighbour steps of it."""
    if band < 1:
        raise ValueError("band must be >= 1")
    M = np.asarray(M, bool)
    if wrap:
        pad = np.concatenate([M[:, -band:], M, M[:, :band]], axis=1)
        grown = ndimage.binary_dilation(pad, iterations=band)[:, band:-band]
    else:
        grown = ndimage.binary_dilation(M, iterations=band)
    return grown & ~M


def transition_region_mae(pred, gt, M, band: int = 3, wrap: bool = True) -> float:
    region = transition_band(M, band, wrap)
    region &= np.isfinite(np.asarray(pred)) & np.isfinite(np.asarray(gt))
    if not region.any():
        raise ValueError("empty transition band")
    return float(np.mean(np.abs(np.asarray(pred)[region] - np.asarray(gt)[region])))


@dataclass(frozen=True)
class TrajectorySpec:
    mode: str = "combined"
    count: int = 20
    seed: int = 0
    yaw_range: tuple = (0.0, 2 * np.pi)
    pitch_range: tuple = (-np.pi / 4, np.pi / 4)
    translation_fraction: float = 0.8
    fov: float = np.pi / 2
    lateral_fraction: float = 0.0   # max sideways offset, as a fraction of trajectory length

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.count <= 0:
            raise ValueError("count must be positive")
        if not 0.0 <= self.translation_fraction <= 1.0:
            raise ValueError("translation_fraction must lie in [0, 1]")
        if not (-np.pi / 2 <= self.pitch_range[0] <= self.pitch_range[1] <= np.pi / 2):
            raise ValueError("pitch range must lie within [-pi/2, pi/2]")
        if self.lateral_fraction < 0:
            raise ValueError("lateral_fraction must be nonnegative")
        if not 0.0 < self.fov < np.pi:
            raise ValueError("fov must lie in (0, pi)")


def sample_trajectories(spec: TrajectorySpec, poses, seed: int | None = None) -> list:
    """Evaluation cameras relative to the world's trajectory.

    Rotation mode keeps the first pose's position and draws yaw and pitch;
    translation mode keeps its orientation and slides along the trajectory
    up to ``translation_fraction`` of its length; combined does both.  A
    nonzero ``lateral_fraction`` moves translated cameras sideways (horizontal,
    perpendicular to the trajectory) by up to that fraction of its length.
    """
    poses = list(poses)
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    ref = poses[0]
    start = ref.translation
    seg = poses[-1].translation - start
    up = ref.rotation[:, 1]
    side = np.cross(up, seg)
    nside = np.linalg.norm(side)
    side = side / nside if nside > 0 else np.zeros(3)
    out = []
    for _ in range(spec.count):
        R, t = ref.rotation, start
        if spec.mode in ("rotation", "combined"):
            yaw = rng.uniform(*spec.yaw_range)
            pitch = rng.uniform(*spec.pitch_range)
            R = ref.rotation @ rotation_yaw_pitch(yaw, pitch)
        if spec.mode in ("translation", "combined"):
            t = start + rng.uniform(0.0, spec.translation_fraction) * seg
            if spec.lateral_fraction > 0:
                t = t + rng.uniform(-1.0, 1.0) * spec.lateral_fraction * np.linalg.norm(seg) * side
        out.append(Pose(R, t))
    return out


def format_table(rows: list[dict], columns: list[str]) -> str:
    """Aligned plain-text table; floats are printed with 4 decimals, missing values as ``-``."""
    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)
    body = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


def report_json(obj) -> str:
    def default(o):
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, DepthMetricsReport):
            return asdict(o)
        raise TypeError(type(o).__name__)
    return json.dumps(obj, indent=2, default=default, sort_keys=True)


@dataclass(frozen=True)
class EvalParams:
    width: int = 128
    height: int = 128
    fov: float = np.pi / 2
    count: int = 20
    seed: int = 0
    footprint_k: int = 12
    footprint_scale: float = 1.5
    modes: tuple = MODES
    lateral_fraction: float = 0.0


def evaluate_world(cloud, poses, params: EvalParams | None = None, scene=None, scale: float = 1.0,
                   return_frames: bool = False, jobs: int = 1) -> dict:
    """Render the world along every trajectory mode and report coverage per mode.

    With ``scene`` (a ``SyntheticScene``; world units = ``scale`` x scene units)
    depth metrics against the analytic planar depth are added.  ``jobs > 1``
    renders poses on a thread pool; results do not depend on it.
    """
    from concurrent.futures import ThreadPoolExecutor

    from .render import PerspectiveIntrinsics, SplatParams, estimate_footprints, render_perspective
    params = params or EvalParams()
    K = PerspectiveIntrinsics(params.width, params.height, params.fov)
    splat = SplatParams(footprints=estimate_footprints(cloud, params.footprint_k, params.footprint_scale))

    def one(P):
        out = render_perspective(cloud, P, K, splat)
        gt = None
        if scene is not None:
            _, gt, _ = scene.trace_perspective(Pose(P.rotation, P.translation / scale),
                                               params.width, params.height, params.fov)
            gt = gt * scale
        return out, gt

    report = {}
    frames = {}
    with ThreadPoolExecutor(max(1, int(jobs))) as pool:
        for mode in params.modes:
            spec = TrajectorySpec(mode, params.count, params.seed, fov=params.fov,
                                  lateral_fraction=params.lateral_fraction)
            traj = sample_trajectories(spec, poses)
            results = list(pool.map(one, traj))
            covs = [out.coverage for out, _ in results]
            frames[mode] = [(P, out) for P, (out, _) in zip(traj, results)]
            entry = {"coverage_mean": float(np.mean(covs)), "coverage_min": float(np.min(covs)),
                     "coverage": [float(c) for c in covs], "brisque": None}
            if scene is not None:
                pred = np.stack([out.depth for out, _ in results])
                gts = np.stack([gt for _, gt in results])
                valid = np.isfinite(pred)
                if valid.any():
                    entry["depth"] = asdict(depth_metrics(pred, gts, valid))
            report[mode] = entry
    return (report, frames) if return_frames else report


DEPTHFILL_METHODS = ("harmonic", "interpolation", "naive")


def hole_mask(H: int, W: int, fraction: float, rng) -> np.ndarray:
    """Known-pixel mask with an azimuth band of unknown pixels covering ``fraction`` of the raster.

    The band spans the middle 70% of rows and wraps across the seam.
    """
    if not 0.0 < fraction < 0.7:
        raise ValueError("fraction must lie in (0, 0.7)")
    r0, r1 = int(round(0.15 * H)), int(round(0.85 * H))
    w = min(W - 1, max(1, int(round(fraction * H * W / (r1 - r0)))))
    cols = (int(rng.integers(W)) + np.arange(w)) % W
    known = np.ones((H, W), bool)
    known[r0:r1, cols] = False
    return known


def depthfill_compare(D_ref, D_est, M, T: Pose, blend_params=None, band: int = 3) -> dict:
    """Reconstruct the unknown region with each method and score its seam against ``D_ref``."""
    from .blend import harmonic_blend_depth, naive_blend, offset_interpolation_blend
    out = {"harmonic": harmonic_blend_depth(D_ref, D_est, M, T, blend_params),
           "interpolation": offset_interpolation_blend(D_ref, D_est, M),
           "naive": naive_blend(D_ref, D_est, M)}
    return {k: {"transition_score": transition_score(v, M),
                "transition_region_mae": transition_region_mae(v, D_ref, M, band)}
            for k, v in out.items()}


def depthfill_harness(n_scenes: int = 10, fraction: float = 0.3, alpha_range=(0.8, 1.25),
                      beta: float = 0.0, width: int = 256, height: int = 128, seed: int = 0,
                      blend_params=None) -> list[dict]:
    """Masked-depth reconstruction on random synthetic scenes with affine-corrupted estimates.

    Scene ``i`` uses seed ``seed + i``; the camera sits at a random point of
    the scene's trajectory and the estimate is ``alpha * D + beta`` with
    ``alpha`` drawn from ``alpha_range``.
    """
    from .oracle.synthetic import SyntheticScene, make_scene
    rows = []
    for i in range(n_scenes):
        s = seed + i
        rng = np.random.default_rng(s)
        scene = SyntheticScene(make_scene(s, 6.0))
        T = Pose(translation=np.array([rng.uniform(0.0, 6.0), 0.0, 0.0]))
        _, D, _ = scene.trace(T, width, height)
        a = float(rng.uniform(*alpha_range))
        est = np.maximum(a * D + beta, 1e-3 * float(np.median(D)))
        M = hole_mask(height, width, fraction, rng)
        res = depthfill_compare(D, est, M, T, blend_params)
        rows.append({"scene": s, "alpha": a, "median_depth": float(np.median(D)), "methods": res})
    return rows


def depthfill_ordering(row: dict) -> bool:
    """Harmonic strictly beats interpolation, which strictly beats naive, on both metrics."""
    m = row["methods"]
    return all(m["harmonic"][k] < m["interpolation"][k] < m["naive"][k]
               for k in ("transition_score", "transition_region_mae"))
