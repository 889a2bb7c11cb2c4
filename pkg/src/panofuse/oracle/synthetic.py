"""Analytic synthetic scenes and the oracles that ray-trace them.

A scene is a ground plane below the camera, a sky dome enclosing everything
and a set of spherical "rocks".  Because the geometry is analytic the oracles
return exact colour and radial depth for any camera pose, which makes every
stage of the pipeline checkable against ground truth.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..geom import Pose, direction_grid
from .base import OracleError, OracleSet, composite

GROUND_ID = -1
SKY_ID = -2


@dataclass(frozen=True)
class SceneObject:
    center: tuple
    radius: float
    albedo: tuple = (0.55, 0.45, 0.35)


@dataclass(frozen=True)
class SceneSpec:
    """Ground plane at ``y = -ground_height``, sky dome of ``sky_radius`` around ``dome_center``."""

    seed: int = 0
    ground_height: float = 1.6
    sky_radius: float = 20.0
    objects: tuple = ()
    dome_center: tuple = (0.0, 0.0, 0.0)
    ground_colors: tuple = ((0.36, 0.42, 0.22), (0.52, 0.47, 0.30))
    sky_top: tuple = (0.25, 0.45, 0.85)
    sky_horizon: tuple = (0.80, 0.86, 0.95)
    texture_scale: float = 1.3

    def __post_init__(self):
        if self.ground_height <= 0 or self.sky_radius <= 0:
            raise ValueError("ground_height and sky_radius must be positive")
        c = np.asarray(self.dome_center, dtype=np.float64)
        for ob in self.objects:
            if ob.radius <= 0:
                raise ValueError("object radius must be positive")
            if np.linalg.norm(np.asarray(ob.center) - c) + ob.radius >= self.sky_radius:
                raise ValueError("object pokes through the sky dome")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "objects"}
        d["objects"] = [{"center": list(o.center), "radius": o.radius, "albedo": list(o.albedo)}
                        for o in self.objects]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        objs = tuple(SceneObject(tuple(o["center"]), float(o["radius"]), tuple(o["albedo"]))
                     for o in d.pop("objects", []))
        for k in ("dome_center", "sky_top", "sky_horizon"):
            if k in d:
                d[k] = tuple(d[k])
        if "ground_colors" in d:
            d["ground_colors"] = tuple(tuple(c) for c in d["ground_colors"])
        return cls(objects=objs, **d)


def make_scene(seed: int, length: float, n_objects: int = 3, ground_height: float = 1.6,
               sky_margin: float = 14.0, lateral: tuple = (2.2, 4.0),
               radius: tuple = (0.6, 1.1)) -> SceneSpec:
    """Random scene around a straight trajectory from the origin to ``(length, 0, 0)``.

    Rocks rest on the ground to either side of the path, ``lateral`` world
    units away from it, and never contain a camera on the path.
    """
    rng = np.random.default_rng(seed)
    objs = []
    for k in range(n_objects):
        r = rng.uniform(*radius)
        x = rng.uniform(-0.25 * length - 1.0, 1.25 * length + 1.0)
        z = rng.uniform(*lateral) * (1 if k % 2 == 0 else -1)
        albedo = tuple(float(v) for v in rng.uniform([0.35, 0.25, 0.2], [0.75, 0.6, 0.5]))
        objs.append(SceneObject((float(x), float(-ground_height + r), float(z)), float(r), albedo))
    hue = rng.uniform(-0.05, 0.05, 3)
    g0 = tuple(float(v) for v in np.clip(np.array([0.36, 0.42, 0.22]) + hue, 0, 1))
    return SceneSpec(seed=seed, ground_height=ground_height,
                     sky_radius=0.5 * length + sky_margin, objects=tuple(objs),
                     dome_center=(0.5 * length, 0.0, 0.0),
                     ground_colors=(g0, (0.52, 0.47, 0.30)))


def _sphere_hit(o, d, c, r, inside: bool):
    oc = o - c
    b = d @ oc
    cc = oc @ oc - r * r
    disc = b * b - cc
    ok = disc >= 0
    s = np.sqrt(np.where(ok, disc, 0.0))
    t = -b + s if inside else -b - s
    return np.where(ok & (t > 0), t, np.inf)


class SyntheticScene:
    """Analytic ray tracer for a ``SceneSpec``."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec

    def trace_rays(self, origin, dirs, objects: bool = True):
        """Colour, radial distance and hit id for world-frame unit rays from one origin."""
        sp = self.spec
        o = np.asarray(origin, dtype=np.float64)
        d = dirs.reshape(-1, 3)
        n = len(d)
        dome_c = np.asarray(sp.dome_center, dtype=np.float64)
        if np.linalg.norm(o - dome_c) >= sp.sky_radius or o[1] <= -sp.ground_height:
            raise OracleError("trace", "camera outside the scene volume")
        t = _sphere_hit(o, d, dome_c, sp.sky_radius, inside=True)
        ids = np.full(n, SKY_ID)
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = (-sp.ground_height - o[1]) / d[:, 1]
        tg = np.where((d[:, 1] < 0) & (tg > 0), tg, np.inf)
        closer = tg < t
        t = np.where(closer, tg, t)
        ids[closer] = GROUND_ID
        if objects:
            for k, ob in enumerate(sp.objects):
                tk = _sphere_hit(o, d, np.asarray(ob.center, dtype=np.float64), ob.radius, inside=False)
                closer = tk < t
                t = np.where(closer, tk, t)
                ids[closer] = k
        p = o + t[:, None] * d
        rgb = np.empty((n, 3))
        sky = ids == SKY_ID
        if sky.any():
            v = p[sky] - dome_c
            el = np.clip(v[:, 1] / sp.sky_radius, -1.0, 1.0)
            az = np.arctan2(v[:, 0], v[:, 2])
            a = np.clip(el, 0.0, 1.0)[:, None] ** 0.6
            base = (1 - a) * np.asarray(sp.sky_horizon) + a * np.asarray(sp.sky_top)
            rgb[sky] = base + 0.04 * (np.sin(3 * az) * np.cos(2 * np.arcsin(el)))[:, None]
        gr = ids == GROUND_ID
        if gr.any():
            q = p[gr] / sp.texture_scale
            m = 0.5 + 0.5 * np.sin(q[:, 0]) * np.sin(q[:, 2])
            m = 0.7 * m + 0.3 * (0.5 + 0.5 * np.sin(0.37 * q[:, 0] + 0.61 * q[:, 2]))
            c0, c1 = (np.asarray(c) for c in sp.ground_colors)
            rgb[gr] = (1 - m)[:, None] * c0 + m[:, None] * c1
        light = np.array([0.3, 0.8, 0.5]) / np.linalg.norm([0.3, 0.8, 0.5])
        for k, ob in enumerate(sp.objects):
            hit = ids == k
            if hit.any():
                nrm = (p[hit] - np.asarray(ob.center)) / ob.radius
                shade = 0.45 + 0.55 * np.clip(nrm @ light, 0.0, 1.0)
                rgb[hit] = shade[:, None] * np.asarray(ob.albedo)
        return np.clip(rgb, 0.0, 1.0), t, ids

    def trace(self, pose: Pose, W: int, H: int, objects: bool = True):
        """Equirectangular colour, radial depth and hit-id rasters seen from ``pose``."""
        dirs = direction_grid(W, H) @ pose.rotation.T
        rgb, t, ids = self.trace_rays(pose.translation, dirs, objects)
        return rgb.reshape(H, W, 3), t.reshape(H, W), ids.reshape(H, W)

    def trace_perspective(self, pose: Pose, width: int, height: int, fov_x: float):
        """Pinhole colour and planar depth (camera +Z), matching ``render_perspective``."""
        f = 0.5 * width / np.tan(0.5 * fov_x)
        u, v = np.meshgrid(np.arange(width), np.arange(height))
        x = (u - (width / 2.0 - 0.5)) / f
        y = -(v - (height / 2.0 - 0.5)) / f
        ray = np.stack([x, y, np.ones_like(x)], -1)
        norm = np.linalg.norm(ray, axis=-1)
        dirs = (ray / norm[..., None]) @ pose.rotation.T
        rgb, t, ids = self.trace_rays(pose.translation, dirs)
        return rgb.reshape(height, width, 3), t.reshape(height, width) / norm, ids.reshape(height, width)


def smooth_noise(H: int, W: int, seed: int, sigma_frac: float = 1.0 / 16) -> np.ndarray:
    """Zero-mean, unit-std, horizontally periodic smooth random field."""
    rng = np.random.default_rng(seed)
    f = ndimage.gaussian_filter(rng.standard_normal((H, W)), sigma_frac * H, mode=("nearest", "wrap"))
    f -= f.mean()
    s = f.std()
    return f / s if s > 0 else f


def push_pull_fill(image, mask) -> np.ndarray:
    """Fill ``mask`` by normalised multi-scale averaging of the known pixels."""
    img = np.asarray(image, dtype=np.float64)
    known = ~np.asarray(mask, bool)
    if known.all():
        return img.copy()
    if not known.any():
        return np.full_like(img, 0.5)
    levels = [(img * known[..., None], known.astype(np.float64))]
    while levels[-1][1].shape[0] > 1 and (levels[-1][1] == 0).any():
        c, w = levels[-1]
        H, W = w.shape
        ph, pw = H % 2, W % 2
        c = np.pad(c, ((0, ph), (0, pw), (0, 0)))
        w = np.pad(w, ((0, ph), (0, pw)))
        c = c.reshape(c.shape[0] // 2, 2, c.shape[1] // 2, 2, 3).sum((1, 3))
        w = w.reshape(w.shape[0] // 2, 2, w.shape[1] // 2, 2).sum((1, 3))
        levels.append((c, w))
    c, w = levels[-1]
    fill = c / np.maximum(w, 1e-12)[..., None]
    if (w == 0).any():
        fill[w == 0] = (c.sum((0, 1)) / max(w.sum(), 1e-12))
    for c, w in reversed(levels[:-1]):
        H, W = w.shape
        up = np.repeat(np.repeat(fill, 2, 0), 2, 1)[:H, :W]
        mean = c / np.maximum(w, 1e-12)[..., None]
        a = np.clip(w, 0.0, 1.0)[..., None]
        fill = a * mean + (1 - a) * up
    return np.where(known[..., None], img, np.clip(fill, 0.0, 1.0))


@dataclass
class SyntheticPanoramaGen:
    scene: SyntheticScene

    def generate(self, prompt: str, pose: Pose, W: int, H: int):
        if not prompt:
            raise OracleError("panorama", "empty prompt")
        rgb, depth, _ = self.scene.trace(pose, W, H)
        return rgb, depth


@dataclass
class SyntheticInpainter:
    """Renders the true scene into the mask; ``background=True`` leaves the rocks out.

    Without a pose (or with ``mode="smear"``) it falls back to push-pull filling.
    """

    scene: SyntheticScene
    mode: str = "scene"

    def inpaint(self, image, mask, prompt: str, pose: Pose | None = None, background: bool = False):
        image = np.asarray(image, dtype=np.float64)
        mask = np.asarray(mask, bool)
        if mask.shape != image.shape[:2]:
            raise OracleError("inpaint", "mask and image dimensions differ")
        if not mask.any():
            return image.copy()
        if self.mode == "smear" or pose is None:
            return push_pull_fill(image, mask)
        H, W = mask.shape
        rgb, _, _ = self.scene.trace(pose, W, H, objects=not background)
        return composite(image, rgb, mask)


@dataclass
class SyntheticDepthEstimator:
    """True depth corrupted as ``alpha * D + beta + noise * median(D) * field``."""

    scene: SyntheticScene
    alpha: float = 1.0
    beta: float = 0.0
    noise: float = 0.0
    seed: int = 0

    def estimate(self, image, pose: Pose | None = None):
        if pose is None:
            raise OracleError("depth", "synthetic depth estimator needs the camera pose")
        H, W = np.asarray(image).shape[:2]
        _, depth, _ = self.scene.trace(pose, W, H)
        out = self.alpha * depth + self.beta
        if self.noise:
            out = out + self.noise * np.median(depth) * smooth_noise(H, W, self.seed)
        return np.maximum(out, 1e-3 * np.median(depth))


@dataclass
class SyntheticSegmenter:
    """Exact rock silhouettes plus ``n_distractors`` patches on the sky."""

    scene: SyntheticScene
    n_distractors: int = 1
    seed: int = 0
    min_pixels: int = 4

    def segment(self, image, pose: Pose | None = None):
        if pose is None:
            raise OracleError("segment", "synthetic segmenter needs the camera pose")
        H, W = np.asarray(image).shape[:2]
        _, _, ids = self.scene.trace(pose, W, H)
        masks = []
        for k in range(len(self.scene.spec.objects)):
            m = ids == k
            if m.sum() >= self.min_pixels:
                masks.append(m)
        rng = np.random.default_rng(self.seed)
        r0, r1 = int(0.12 * H), max(int(0.28 * H), int(0.12 * H) + 1)
        half = max(W // 32, 1)
        for _ in range(self.n_distractors):
            c = int(rng.integers(0, W))
            m = np.zeros((H, W), bool)
            m[r0:r1, (np.arange(c - half, c + half + 1) % W)] = True
            masks.append(m & (ids == SKY_ID))
        return masks


def synthetic_oracles(spec: SceneSpec, alpha: float = 1.0, beta: float = 0.0,
                      noise: float = 0.0, n_distractors: int = 1, inpaint_mode: str = "scene") -> OracleSet:
    scene = SyntheticScene(spec)
    return OracleSet(SyntheticPanoramaGen(scene), SyntheticInpainter(scene, inpaint_mode),
                     SyntheticDepthEstimator(scene, alpha, beta, noise, spec.seed),
                     SyntheticSegmenter(scene, n_distractors, spec.seed))
