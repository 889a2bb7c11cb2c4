"""Pipeline orchestration, world assembly, configuration and persistence."""
from __future__ import annotations

import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .blend import BlendParams
from .formats import FormatError
from .fusion import (BLEND_METHODS, FillParams, OpenedSphere, build_fill_block, intermediate_pose,
                     layer_cloud, open_sphere)
from .geom import PointCloud, Pose, merge_clouds, translate_pose
from .ldp import LdpParams, StageError, build_ldp
from .oracle import OracleSet, SceneSpec, http_oracles, make_scene, synthetic_oracles

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class WorldConfig:
    prompt: str = "a quiet meadow with scattered boulders under a clear sky"
    n: int = 3
    width: int = 256
    height: int = 128
    lam: float = 3.0
    lam_mode: str = "absolute"       # "absolute" (scene units) or "median" (x median depth of panorama 0)
    alpha_deg: float = 60.0
    r_mode: str = "auto"             # "auto", "none" or a radius in world units
    r_percentile: float = 95.0
    push_only: bool = True
    k: int = 8
    tol: float = 1e-8
    node_cap: int = 1_000_000
    scale_mode: str = "auto"         # "auto", "global" or "per_sphere"
    splat: str = "footprint"
    fill_ldp: bool = True
    blend_method: str = "harmonic"   # "harmonic", "naive" or "interpolation"
    align_estimate: bool = True
    ldp: bool = True
    oracle: str = "synthetic"
    endpoint: str = "http://127.0.0.1:8000"
    timeout: float = 60.0
    seed: int = 0
    n_objects: int = 3
    object_lateral: tuple = (2.2, 4.0)   # rock distance from the path, scene units
    object_radius: tuple = (0.6, 1.1)
    n_distractors: int = 1
    depth_alpha: float = 1.0
    depth_beta: float = 0.0
    depth_noise: float = 0.0
    jobs: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        self.object_lateral = tuple(float(v) for v in self.object_lateral)
        self.object_radius = tuple(float(v) for v in self.object_radius)
        for name in ("object_lateral", "object_radius"):
            lo_hi = getattr(self, name)
            if len(lo_hi) != 2 or not 0 < lo_hi[0] <= lo_hi[1]:
                raise ConfigError(f"{name} must be a positive (low, high) pair")
        if self.object_radius[1] >= self.object_lateral[0]:
            raise ConfigError("rocks would intersect the camera path")
        if int(self.n) < 2:
            raise ConfigError("n must be at least 2 panoramas")
        if self.width != 2 * self.height or self.height < 4:
            raise ConfigError("width must equal 2 * height")
        if self.lam <= 0:
            raise ConfigError("lam must be positive")
        if self.lam_mode not in ("absolute", "median"):
            raise ConfigError("lam_mode must be 'absolute' or 'median'")
        if not 0 < self.alpha_deg < 90:
            raise ConfigError("alpha_deg must lie in (0, 90)")
        if self.r_mode not in ("auto", "none"):
            try:
                if float(self.r_mode) <= 0:
                    raise ValueError
            except ValueError:
                raise ConfigError("r_mode must be 'auto', 'none' or a positive number") from None
        if self.tol <= 0 or self.k < 1 or self.node_cap < 2:
            raise ConfigError("k, tol and node_cap must be positive")
        if self.scale_mode not in ("auto", "global", "per_sphere"):
            raise ConfigError("scale_mode must be 'auto', 'global' or 'per_sphere'")
        if self.oracle not in ("synthetic", "http"):
            raise ConfigError("oracle must be 'synthetic' or 'http'")
        if self.blend_method not in BLEND_METHODS:
            raise ConfigError(f"blend_method must be one of {BLEND_METHODS}")
        if self.splat not in ("auto", "footprint"):
            raise ConfigError("splat must be 'auto' or 'footprint'")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "WorldConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(data)

    def scene(self) -> SceneSpec:
        return make_scene(self.seed, (self.n - 1) * self.lam, self.n_objects,
                          lateral=self.object_lateral, radius=self.object_radius)

    def oracles(self) -> OracleSet:
        if self.oracle == "http":
            return http_oracles(self.endpoint, timeout=self.timeout)
        return synthetic_oracles(self.scene(), self.depth_alpha, self.depth_beta,
                                 self.depth_noise, self.n_distractors)

    def r_value(self):
        return self.r_mode if self.r_mode in ("auto", "none") else float(self.r_mode)

    def fill_params(self) -> FillParams:
        return FillParams(width=self.width, height=self.height, prompt=self.prompt, splat=self.splat,
                          align_estimate=self.align_estimate, second_ldp=self.fill_ldp and self.ldp,
                          blend_method=self.blend_method,
                          blend=BlendParams(k=self.k, tol=self.tol, node_cap=self.node_cap))


@dataclass
class WorldBundle:
    cloud: PointCloud
    poses: list
    config: dict = field(default_factory=dict)
    mid_poses: list = field(default_factory=list)
    scale: float = 1.0                 # world units per scene unit
    partial_count: int = 0
    fill_counts: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    ldps: list = field(default_factory=list)
    spheres: list = field(default_factory=list)
    fills: list = field(default_factory=list)
    scene: dict | None = None
    panoramas: list = field(default_factory=list)   # (image, depth) per pose, scene units
    capsules: list = field(default_factory=list)    # (sphere i opened right, sphere i+1 opened left)


def assemble_partial(spheres: list[OpenedSphere]) -> PointCloud:
    """Concatenate opened spheres, checking the right / both ... both / left pattern."""
    n = len(spheres)
    if n < 2:
        raise ValueError("need at least two spheres")
    want = ["right"] + ["both"] * (n - 2) + ["left"]
    got = [s.opening for s in spheres]
    if got != want:
        raise ValueError(f"opening pattern {got} != {want}")
    return merge_clouds(*(s.cloud for s in spheres))


def opening_pattern(n: int) -> list[str]:
    return ["right"] + ["both"] * (n - 2) + ["left"]


def build_world(config: WorldConfig, oracles: OracleSet | None = None, keep_artifacts: bool = False
                ) -> WorldBundle:
    """Generate panoramas, lift and open spheres, fill the gaps and assemble the world."""
    config.validate()
    oracles = oracles or config.oracles()
    timings: dict = {}
    diagnostics: dict = {"spheres": [], "fills": []}
    d = np.array([1.0, 0.0, 0.0])
    W, H = config.width, config.height
    ldp_params = LdpParams()

    t0 = time.perf_counter()
    poses_scene = [Pose()]
    panos = []
    metric = True
    for i in range(config.n):
        if i == 1:
            lam_scene = config.lam
            if config.lam_mode == "median":
                lam_scene = config.lam * float(np.median(panos[0][1]))
            for _ in range(config.n - 1):
                poses_scene.append(translate_pose(poses_scene[-1], lam_scene * d))
        pose = poses_scene[i]
        try:
            I, D = oracles.panorama.generate(config.prompt, pose, W, H)
            oracles.record("panorama", index=i, pose=pose.translation.tolist())
            if D is None:
                metric = False
                D = oracles.depth.estimate(I, pose=pose)
                oracles.record("depth", index=i)
        except Exception as exc:
            raise StageError(f"I/panorama[{i}]", exc) from exc
        panos.append((np.asarray(I, dtype=np.float64), np.asarray(D, dtype=np.float64)))
    timings["panoramas"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    ldps = []
    for i, (I, D) in enumerate(panos):
        if config.ldp:
            try:
                ldp = build_ldp(I, D, oracles.segmenter, oracles.inpainter, ldp_params,
                                config.prompt, pose=poses_scene[i])
            except StageError as exc:
                raise StageError(f"I/{exc.stage}[{i}]", exc.cause) from exc
            oracles.record("ldp", index=i, selected=int(ldp.fg_mask.sum()))
        else:
            ldp = None
        ldps.append(ldp)
    timings["ldp"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    scale_mode = config.scale_mode
    if scale_mode == "auto":
        scale_mode = "global" if metric else "per_sphere"
    medians = [float(np.median(D)) for _, D in panos]
    s0 = 1.0 / medians[0]
    poses = [Pose(p.rotation, p.translation * s0) for p in poses_scene]
    alpha = np.deg2rad(config.alpha_deg)
    spheres, clouds = [], []
    for i, ((I, D), ldp, side) in enumerate(zip(panos, ldps, opening_pattern(config.n))):
        si = s0 if scale_mode == "global" else 1.0 / medians[i]
        if ldp is None:
            cloud = layer_cloud(I, D * si, I, D * si, poses[i])
        else:
            cloud = layer_cloud(ldp.fg_image, ldp.fg_depth * si, ldp.bg_image, ldp.bg_depth * si, poses[i])
        opened = open_sphere(cloud, poses[i], side, alpha, config.r_value(),
                             percentile=config.r_percentile, push_only=config.push_only)
        spheres.append(opened)
        clouds.append(cloud)
        diagnostics["spheres"].append({"index": i, "points": len(cloud), "opened_points": len(opened.cloud),
                                       "scale": si, "cylinder_radius": {str(k): v for k, v in
                                                                        opened.cylinder_radius.items()},
                                       "foreground_pixels": int(ldp.fg_mask.sum()) if ldp else 0})
    partial = assemble_partial(spheres)
    timings["spheres"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    fparams = config.fill_params()
    fills, mids, capsules = [], [], []

    def facing(i, side):
        # a capsule holds sphere i opened only towards i+1 and sphere i+1 only towards i
        if spheres[i].opening == side:
            return spheres[i]
        return open_sphere(clouds[i], poses[i], side, alpha, config.r_value(),
                           percentile=config.r_percentile, push_only=config.push_only)

    for i in range(config.n - 1):
        lam_i = float(np.linalg.norm(poses[i + 1].translation - poses[i].translation))
        T_mid = intermediate_pose(poses[i], lam_i, d)
        mids.append(T_mid)
        pair = (facing(i, "right"), facing(i + 1, "left"))
        capsules.append(pair)
        try:
            block, diag = build_fill_block(*pair, T_mid, oracles, fparams, oracle_scale=s0)
        except StageError as exc:
            raise StageError(f"II/{exc.stage}[pair {i}]", exc.cause) from exc
        fills.append(block)
        diagnostics["fills"].append({"pair": i, **diag})
    timings["fills"] = time.perf_counter() - t0

    world = merge_clouds(partial, *(f.cloud for f in fills))
    prov = {"timings": timings, "oracle_log": oracles.log, "diagnostics": diagnostics,
            "scale_mode": scale_mode, "metric_depth": metric}
    scene = None
    pano = oracles.panorama
    if hasattr(pano, "scene"):
        scene = pano.scene.spec.to_dict()
    return WorldBundle(world, poses, config.to_dict(), mids, s0, len(partial),
                       [len(f.cloud) for f in fills], prov,
                       ldps if keep_artifacts else [], spheres if keep_artifacts else [],
                       fills if keep_artifacts else [], scene, panos if keep_artifacts else [],
                       capsules if keep_artifacts else [])


# ---- persistence -------------------------------------------------------------

_PLY_PROPS = [("x", "float"), ("y", "float"), ("z", "float"),
              ("red", "uchar"), ("green", "uchar"), ("blue", "uchar")]
_VERTEX = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                    ("red", "u1"), ("green", "u1"), ("blue", "u1")])


def write_ply(path, cloud: PointCloud) -> None:
    n = len(cloud)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {t} {name}" for name, t in _PLY_PROPS]
    header.append("end_header")
    data = np.empty(n, dtype=_VERTEX)
    pos = cloud.positions.astype("<f4")
    data["x"], data["y"], data["z"] = pos[:, 0], pos[:, 1], pos[:, 2]
    rgb = np.clip(np.rint(cloud.colors * 255.0), 0, 255).astype(np.uint8)
    data["red"], data["green"], data["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def read_ply(path) -> PointCloud:
    with open(path, "rb") as fh:
        raw = fh.read()
    return parse_ply(raw)


def parse_ply(raw: bytes) -> PointCloud:
    marker = b"end_header\n"
    end = raw.find(marker)
    if not raw.startswith(b"ply\n"):
        raise FormatError("missing 'ply' magic", 0)
    if end < 0:
        raise FormatError("missing end_header", len(raw))
    offset = 0
    n = None
    props = []
    for line in raw[:end].split(b"\n"):
        words = line.decode("ascii", "replace").split()
        if not words or words[0] in ("ply", "comment", "obj_info"):
            pass
        elif words[0] == "format":
            if words[1:] != ["binary_little_endian", "1.0"]:
                raise FormatError(f"unsupported format {' '.join(words[1:])!r}", offset)
        elif words[0] == "element":
            if words[1] != "vertex" or n is not None:
                raise FormatError(f"unsupported element {words[1]!r}", offset)
            try:
                n = int(words[2])
            except (IndexError, ValueError):
                raise FormatError("bad vertex count", offset) from None
        elif words[0] == "property":
            props.append((words[-1], words[1]))
        else:
            raise FormatError(f"unexpected header line {line[:40]!r}", offset)
        offset += len(line) + 1
    if n is None:
        raise FormatError("no vertex element", end)
    if props != _PLY_PROPS:
        raise FormatError(f"unsupported vertex properties {props}", end)
    start = end + len(marker)
    need = n * _VERTEX.itemsize
    if len(raw) - start < need:
        got = (len(raw) - start) // _VERTEX.itemsize
        raise FormatError(f"vertex data truncated: {got} of {n} vertices", start + got * _VERTEX.itemsize)
    data = np.frombuffer(raw, dtype=_VERTEX, count=n, offset=start)
    pos = np.stack([data["x"], data["y"], data["z"]], 1).astype(np.float64)
    bad = ~np.isfinite(pos).all(1)
    if bad.any():
        i = int(np.nonzero(bad)[0][0])
        raise FormatError(f"non-finite coordinate in vertex {i}", start + i * _VERTEX.itemsize)
    rgb = np.stack([data["red"], data["green"], data["blue"]], 1) / 255.0
    return PointCloud(pos, rgb)


def save_world(world: WorldBundle, path) -> None:
    """Write ``world.ply`` plus ``poses.json`` and ``provenance.json`` into directory ``path``."""
    os.makedirs(path, exist_ok=True)
    write_ply(os.path.join(path, "world.ply"), world.cloud)
    poses = {"poses": [p.matrix().tolist() for p in world.poses],
             "mid_poses": [p.matrix().tolist() for p in world.mid_poses],
             "scale": world.scale, "partial_count": world.partial_count,
             "fill_counts": world.fill_counts, "config": world.config, "scene": world.scene}
    with open(os.path.join(path, "poses.json"), "w") as fh:
        json.dump(poses, fh, indent=2)
    # wall-clock timings live apart so the other files are reproducible byte for byte
    prov = {k: v for k, v in world.provenance.items() if k != "timings"}
    with open(os.path.join(path, "provenance.json"), "w") as fh:
        json.dump(prov, fh, indent=2, default=_json_default, sort_keys=True)
    with open(os.path.join(path, "timings.json"), "w") as fh:
        json.dump(world.provenance.get("timings", {}), fh, indent=2)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def load_world(path) -> WorldBundle:
    cloud = read_ply(os.path.join(path, "world.ply"))
    meta_path = os.path.join(path, "poses.json")
    raw = open(meta_path, "rb").read()
    try:
        meta = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{meta_path}: {exc.msg}", exc.pos) from None
    prov = {}
    prov_path = os.path.join(path, "provenance.json")
    if os.path.exists(prov_path):
        with open(prov_path) as fh:
            prov = json.load(fh)
    timings_path = os.path.join(path, "timings.json")
    if os.path.exists(timings_path):
        with open(timings_path) as fh:
            prov["timings"] = json.load(fh)
    return WorldBundle(cloud, [Pose.from_matrix(m) for m in meta["poses"]], meta.get("config", {}),
                       [Pose.from_matrix(m) for m in meta.get("mid_poses", [])], meta.get("scale", 1.0),
                       meta.get("partial_count", 0), meta.get("fill_counts", []), prov,
                       scene=meta.get("scene"))


def scene_of(world: WorldBundle) -> SceneSpec | None:
    return SceneSpec.from_dict(world.scene) if world.scene else None

