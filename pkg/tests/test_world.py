import json
import os

import numpy as np
import pytest

from panofuse.formats import FormatError
from panofuse.fusion import open_sphere
from panofuse.geom import PointCloud, Pose, backproject_spherical
from panofuse.ldp import StageError
from panofuse.oracle import OracleSet
from panofuse.render import SplatParams, estimate_footprints, render_eqr
from panofuse.world import (ConfigError, WorldConfig, assemble_partial, build_world, load_world,
                            opening_pattern, parse_ply, read_ply, save_world, write_ply)


def _opened(sides):
    S = backproject_spherical(np.full((8, 16, 3), 0.5), np.ones((8, 16)), Pose())
    return [open_sphere(S, Pose(translation=np.array([2.0 * i, 0, 0])), s) for i, s in enumerate(sides)]


def test_assemble_partial_patterns():
    two = _opened(["right", "left"])
    assert len(assemble_partial(two)) == sum(len(s.cloud) for s in two)
    three = _opened(opening_pattern(3))
    assert [s.opening for s in three] == ["right", "both", "left"]
    assert len(assemble_partial(three)) == sum(len(s.cloud) for s in three)
    with pytest.raises(ValueError):
        assemble_partial(_opened(["right", "right", "left"]))
    with pytest.raises(ValueError):
        assemble_partial(_opened(["right"]))


def test_world_additivity_and_spacing(small_world):
    w = small_world
    assert len(w.poses) == 3 and len(w.fills) == 2
    assert len(w.cloud) == w.partial_count + sum(w.fill_counts)
    assert w.partial_count == sum(len(s.cloud) for s in w.spheres)
    steps = np.diff([p.translation for p in w.poses], axis=0)
    lam = np.linalg.norm(steps[0])
    assert np.allclose(steps, [lam, 0, 0], atol=1e-9)
    for i, T in enumerate(w.mid_poses):
        assert np.allclose(T.translation, 0.5 * (w.poses[i].translation + w.poses[i + 1].translation))


def test_world_covers_every_pose(small_world):
    w = small_world
    splat = SplatParams(footprints=estimate_footprints(w.cloud, 12, 1.5))
    for T in w.poses + w.mid_poses:
        assert render_eqr(w.cloud, T, 128, 64, splat).coverage >= 0.999


def test_two_panoramas_make_one_fill():
    w = build_world(WorldConfig(n=2, width=64, height=32, seed=1))
    assert len(w.fill_counts) == 1 and len(w.mid_poses) == 1


def test_provenance_records_stages(small_world):
    prov = small_world.provenance
    assert set(prov["timings"]) == {"panoramas", "ldp", "spheres", "fills"}
    kinds = [e["kind"] for e in prov["oracle_log"]]
    assert kinds.count("panorama") == 3 and kinds.count("inpaint") == 2
    assert [e["call"] for e in prov["oracle_log"]] == list(range(len(kinds)))


def test_same_seed_same_world(tmp_path):
    cfg = WorldConfig(n=2, width=64, height=32, seed=5)
    a, b = build_world(cfg), build_world(WorldConfig(**cfg.to_dict()))
    assert a.cloud.positions.tobytes() == b.cloud.positions.tobytes()
    save_world(a, tmp_path / "a")
    save_world(b, tmp_path / "b")
    for name in ("world.ply", "poses.json", "provenance.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class _FailingDepth:
    def estimate(self, image, pose=None):
        raise RuntimeError("model crashed")


def test_stage_failure_names_stage_and_pair():
    cfg = WorldConfig(n=2, width=64, height=32, seed=0)
    o = cfg.oracles()
    broken = OracleSet(o.panorama, o.inpainter, _FailingDepth(), o.segmenter)
    with pytest.raises(StageError) as ei:
        build_world(cfg, broken)
    assert ei.value.stage == "II/fill/depth[pair 0]"


# ---- config -----------------------------------------------------------------------

@pytest.mark.parametrize("bad", [dict(n=1), dict(width=100, height=64), dict(lam=0.0),
                                 dict(alpha_deg=90.0), dict(r_mode="wide"), dict(r_mode="-1"),
                                 dict(tol=0.0), dict(oracle="magic"), dict(blend_method="poisson"),
                                 dict(object_radius=(0.5, 3.0)), dict(object_lateral=(1.0,)),
                                 dict(lam_mode="relative"), dict(splat="disc")])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        WorldConfig(**bad)


def test_config_dict_round_trip(tmp_path):
    cfg = WorldConfig(n=4, r_mode="1.5", object_lateral=[2.0, 3.0])
    assert cfg.object_lateral == (2.0, 3.0) and cfg.r_value() == 1.5
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert WorldConfig.load(p) == cfg
    with pytest.raises(ConfigError):
        WorldConfig.from_dict({"n": 3, "colour": "red"})
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        WorldConfig.load(p)


# ---- persistence ------------------------------------------------------------------

def test_ply_random_round_trip(tmp_path, rng):
    pos = rng.normal(size=(10_000, 3)).astype(np.float32).astype(np.float64)
    col = rng.uniform(0, 1, (10_000, 3))
    write_ply(tmp_path / "c.ply", PointCloud(pos, col))
    back = read_ply(tmp_path / "c.ply")
    assert np.abs(back.positions - pos).max() == 0
    assert np.abs(back.colors - col).max() <= 1 / 255


def test_ply_float32_precision(tmp_path, rng):
    pos = rng.normal(size=(100, 3)) * 10
    write_ply(tmp_path / "c.ply", PointCloud(pos, np.zeros((100, 3))))
    back = read_ply(tmp_path / "c.ply")
    assert np.array_equal(back.positions, pos.astype(np.float32).astype(np.float64))


def test_ply_edge_sizes(tmp_path):
    write_ply(tmp_path / "e.ply", PointCloud.empty())
    assert len(read_ply(tmp_path / "e.ply")) == 0
    one = PointCloud(np.array([[1.5, -2.0, 0.25]]), np.array([[1.0, 0.0, 0.2]]))
    write_ply(tmp_path / "o.ply", one)
    back = read_ply(tmp_path / "o.ply")
    assert np.array_equal(back.positions, one.positions)
    assert np.array_equal(back.colors, np.round(one.colors * 255) / 255)


def _ply_bytes(n=3):
    import tempfile
    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "x.ply")
        write_ply(p, PointCloud(np.arange(3 * n, dtype=float).reshape(n, 3), np.zeros((n, 3))))
        return open(p, "rb").read()


def test_ply_errors_carry_offsets():
    raw = _ply_bytes()
    start = raw.find(b"end_header\n") + len(b"end_header\n")
    with pytest.raises(FormatError) as ei:
        parse_ply(raw[:-1])
    assert ei.value.offset == start + 2 * 15
    with pytest.raises(FormatError) as ei:
        parse_ply(b"plx\n" + raw[4:])
    assert ei.value.offset == 0
    with pytest.raises(FormatError):
        parse_ply(raw.replace(b"binary_little_endian", b"ascii"))
    with pytest.raises(FormatError):
        parse_ply(raw[:start - 11])
    bad = bytearray(raw)
    bad[start + 15:start + 19] = np.array([np.nan], "<f4").tobytes()
    with pytest.raises(FormatError, match="vertex 1") as ei:
        parse_ply(bytes(bad))
    assert ei.value.offset == start + 15
    with pytest.raises(FormatError):
        parse_ply(raw.replace(b"property uchar red", b"property uchar alpha"))


def test_save_load_round_trip(small_world, tmp_path):
    save_world(small_world, tmp_path / "w")
    assert sorted(os.listdir(tmp_path / "w")) == ["poses.json", "provenance.json", "timings.json",
                                                  "world.ply"]
    back = load_world(tmp_path / "w")
    assert np.array_equal(back.cloud.positions,
                          small_world.cloud.positions.astype(np.float32).astype(np.float64))
    assert np.abs(back.cloud.colors - small_world.cloud.colors).max() <= 0.5 / 255 + 1e-12
    for a, b in zip(back.poses + back.mid_poses, small_world.poses + small_world.mid_poses):
        assert np.allclose(a.matrix(), b.matrix())
    assert back.scale == small_world.scale and back.fill_counts == small_world.fill_counts
    assert back.config == json.loads(json.dumps(small_world.config))
    assert set(back.provenance["timings"]) == set(small_world.provenance["timings"])
    assert back.scene == json.loads(json.dumps(small_world.scene))


def test_load_rejects_corrupt_sidecar(small_world, tmp_path):
    save_world(small_world, tmp_path / "w")
    (tmp_path / "w" / "poses.json").write_text('{"poses": [')
    with pytest.raises(FormatError):
        load_world(tmp_path / "w")
