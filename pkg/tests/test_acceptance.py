"""The ten acceptance criteria, each at its stated tolerance.

Every test prints one ``CRITERION n: PASS|FAIL`` line.  Criterion 3 audits
every harmonic blend run in the session and is moved to the end of the run
by ``conftest.py``.
"""
import time

import numpy as np
import pytest

from conftest import BLEND_AUDIT
from panofuse.blend import build_knn_graph, harmonic_displacements
from panofuse.evalkit import (EvalParams, depth_metrics, depthfill_harness, depthfill_ordering,
                              evaluate_world)
from panofuse.geom import Pose, backproject_spherical, direction_to_pixel, rotation_yaw_pitch
from panofuse.ldp import depth_edges, foreground_score, select_foreground
from panofuse.oracle import SyntheticScene
from panofuse.render import SplatParams, render_eqr
from panofuse.world import WorldConfig, build_world, save_world, scene_of

pytestmark = pytest.mark.slow


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, detail
    return emit


def test_criterion_1_projection_round_trip(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst, exact_all = 1.0, []
    for _ in range(50):
        H = int(rng.integers(32, 257))
        W = 2 * H
        D = rng.uniform(0.5, 20.0, (H, W))
        T = Pose(rotation_yaw_pitch(*rng.uniform(-np.pi, np.pi, 2) * [1, 0.5]), rng.normal(size=3))
        cloud = backproject_spherical(rng.uniform(0, 1, (H, W, 3)), D, T)
        out = render_eqr(cloud, T, W, H, SplatParams(r_max=1.0))
        x, y = direction_to_pixel(T.to_camera(cloud.positions), W, H)
        hits = np.bincount(np.clip(np.rint(y), 0, H - 1).astype(int) * W + np.rint(x).astype(int) % W,
                           minlength=H * W).reshape(H, W)
        single = hits == 1
        # a pixel passes when its depth is the source depth of itself or a pixel one step away
        ok = np.zeros((H, W), bool)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                src = np.roll(np.roll(D, dy, 0), dx, 1)
                ok |= np.isclose(out.depth, src, rtol=1e-9, atol=0)
        worst = min(worst, ok[single].mean())
        exact_all.append(np.isclose(out.depth, D, rtol=1e-9)[single].mean())
    dt = time.perf_counter() - t0
    report(1, worst >= 0.99 and dt < 30,
           f"worst raster {worst:.4f} of single-hit pixels within one pixel "
           f"(exact same pixel: mean {np.mean(exact_all):.4f}); {dt:.1f}s")


def test_criterion_2_harmonic_solver(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst_rel, principle, worst_over = 0.0, True, 0.0
    tol = 1e-8   # the solver's default relative residual
    for _ in range(100):
        n = int(rng.integers(10, 201))
        pts = rng.normal(size=(n, 3)) * rng.uniform(0.1, 10)
        nf = int(rng.integers(2, max(3, n // 3)))
        g = build_knn_graph(pts, int(rng.integers(2, 10)), rng.choice(n, nf, replace=False))
        ub = rng.normal(size=(len(g.fixed), 3))
        U = harmonic_displacements(g, ub, tol=tol)
        L = g.laplacian().toarray()
        free = np.nonzero(~np.isin(np.arange(n), g.fixed) & ~g.isolated)[0]
        U_ref = np.zeros((n, 3))
        U_ref[g.fixed] = ub
        if len(free):
            U_ref[free] = np.linalg.solve(L[np.ix_(free, free)], -L[np.ix_(free, g.fixed)] @ ub)
        e, e_ref = np.einsum("ij,ij->", U, L @ U), np.einsum("ij,ij->", U_ref, L @ U_ref)
        worst_rel = max(worst_rel, abs(e - e_ref) / e_ref)
        # exact solution: round-off only; CG solution: within the solver tolerance of the range
        lo, hi = ub.min(0), ub.max(0)
        span = hi - lo
        over = np.maximum(lo - U[free], U[free] - hi).max(initial=0.0) / span.max()
        over_ref = np.maximum(lo - U_ref[free], U_ref[free] - hi).max(initial=0.0) / span.max()
        worst_over = max(worst_over, over)
        principle &= bool(over <= 10 * tol and over_ref <= 1e-12)
    from panofuse.blend import KnnGraph
    m = 9
    i = np.arange(m - 1)
    path = KnnGraph(np.stack([np.arange(m, dtype=float), np.zeros(m), np.zeros(m)], 1),
                    np.concatenate([i, i + 1]), np.concatenate([i + 1, i]), np.ones(2 * (m - 1)),
                    np.array([0, m - 1]), 0.0, np.zeros(m, bool))
    Up = harmonic_displacements(path, np.array([[0.0, 0, 0], [8.0, -4.0, 2.0]]))
    linear = np.allclose(Up, np.outer(np.arange(m) / 8.0, [8.0, -4.0, 2.0]), rtol=0, atol=1e-8)
    dt = time.perf_counter() - t0
    report(2, worst_rel <= 1e-6 and principle and linear and dt < 60,
           f"max relative energy gap {worst_rel:.2e} over 100 graphs, maximum principle {principle} "
           f"(worst overshoot {worst_over:.1e} of the boundary range), "
           f"path graph linear {linear}; {dt:.1f}s")


def test_criterion_4_transition_ordering(report):
    t0 = time.perf_counter()
    rows = depthfill_harness(n_scenes=10, fraction=0.3, alpha_range=(0.8, 1.25))
    wins = sum(depthfill_ordering(r) for r in rows)
    dt = time.perf_counter() - t0
    mean = {m: np.mean([r["methods"][m]["transition_score"] for r in rows])
            for m in ("harmonic", "interpolation", "naive")}
    report(4, wins >= 9 and dt < 300,
           f"harmonic < interpolation < naive on both metrics in {wins}/10 scenes; mean transition "
           f"score {mean['harmonic']:.4f} / {mean['interpolation']:.4f} / {mean['naive']:.4f}; {dt:.1f}s")


def test_criterion_5_coverage(report):
    t0 = time.perf_counter()
    w = build_world(WorldConfig(n=3))
    rep = evaluate_world(w.cloud, w.poses, EvalParams(count=20))
    cov = {m: e["coverage_mean"] for m, e in rep.items()}
    dt = time.perf_counter() - t0
    report(5, min(cov.values()) >= 0.995 and dt < 600,
           "mean coverage " + ", ".join(f"{m} {c:.4f}" for m, c in cov.items()) + f"; {dt:.1f}s")


def test_criterion_6_ldp_ablation(report):
    base = dict(n=3, n_objects=12, object_lateral=(1.8, 2.6), object_radius=(1.0, 1.5))
    params = EvalParams(count=20, modes=("combined",), lateral_fraction=0.3)
    drops = []
    for seed in range(6):
        cov = {}
        for ldp in (True, False):
            w = build_world(WorldConfig(seed=seed, ldp=ldp, **base))
            cov[ldp] = evaluate_world(w.cloud, w.poses, params)["combined"]["coverage_mean"]
        drops.append(100 * (cov[True] - cov[False]))
    mean = float(np.mean(drops))
    report(6, min(drops) > 0 and mean >= 0.5,
           f"coverage drop without LDP {mean:.3f} pp on average, per scene "
           + " ".join(f"{d:.3f}" for d in drops))


def test_criterion_7_foreground_scoring(report):
    H, W = 128, 256
    yy, xx = np.mgrid[:H, :W]
    disk = (yy - H / 2) ** 2 + (xx - W / 2) ** 2 <= 12 ** 2
    D = np.where(disk, 1.0, 5.0)
    Dinv = np.where(disk, 5.0, 1.0)
    s = foreground_score(disk, D, depth_edges(D), eps=3.0)
    si = foreground_score(disk, Dinv, depth_edges(Dinv), eps=3.0)
    picked = select_foreground([disk], [s], 0.05 * np.median(D)).any()
    rejected = not select_foreground([disk], [si], 0.05 * np.median(Dinv)).any()
    anti = abs(si.score + s.score) <= 0.1 * abs(s.score)
    report(7, abs(s.score - 4) <= 0.5 and picked and si.score < 0 and rejected and anti,
           f"disk score {s.score:.3f} selected {picked}; inverted {si.score:.3f} rejected {rejected}")


def test_criterion_8_depth_metrics(report):
    rng = np.random.default_rng(8)
    gt = rng.uniform(0.5, 30, (64, 128))
    r = depth_metrics(2 * gt, gt)
    unit = (abs(r.abs_rel - 1) <= 1e-9 and abs(r.si_rmse) <= 1e-9
            and r.delta1 == r.delta2 == r.delta3 == 0.0)
    mono = True
    for _ in range(1000):
        n = int(rng.integers(1, 100))
        g = rng.uniform(0.1, 10, n)
        p = g * np.exp(rng.normal(0, rng.uniform(0.01, 2), n))
        m = depth_metrics(p, g)
        mono &= m.delta1 <= m.delta2 <= m.delta3
    report(8, unit and mono, f"pred = 2 gt: AbsRel {r.abs_rel:.12f}, SI-RMSE {r.si_rmse:.1e}, "
           f"deltas {r.delta1}/{r.delta2}/{r.delta3}; delta monotone on 1000 inputs {mono}")


def _closure(world, W=256, H=128):
    scene = SyntheticScene(scene_of(world))
    start, end = world.poses[0].translation, world.poses[-1].translation
    errs = []
    for f in np.linspace(0, 1, 4 * (len(world.poses) - 1) + 1):
        T = Pose(world.poses[0].rotation, start + f * (end - start))
        out = render_eqr(world.cloud, T, W, H, SplatParams(r_max=1.0))
        _, gt, _ = scene.trace(Pose(T.rotation, T.translation / world.scale), W, H)
        gt = gt * world.scale
        v = out.visibility
        errs.append(float(np.mean(np.abs(out.depth[v] - gt[v])) / np.median(gt)))
    return errs


def test_criterion_9_ground_truth_closure(report, tmp_path):
    cfg = WorldConfig(n=3, r_mode="none")
    a = build_world(cfg)
    errs = _closure(a)
    save_world(a, tmp_path / "a")
    save_world(build_world(WorldConfig(**cfg.to_dict())), tmp_path / "b")
    same = (tmp_path / "a" / "world.ply").read_bytes() == (tmp_path / "b" / "world.ply").read_bytes()
    pushed = max(_closure(build_world(WorldConfig(n=3))))
    report(9, max(errs) < 0.02 and same,
           f"depth MAE / median along the trajectory (cut-only opening) max {max(errs):.4f} over "
           f"{len(errs)} positions; world.ply byte-identical {same}; "
           f"with the cylinder push the max is {pushed:.4f} (informational)")


def test_criterion_10_world_size(report):
    sizes = range(3, 8)
    build_world(WorldConfig(n=3))   # warm-up: imports, caches
    runs = {n: [] for n in sizes}
    worlds = {}
    # interleaved repeats so background load hits every size alike; min is the least noisy estimate
    for _ in range(5):
        for n in sizes:
            t0 = time.perf_counter()
            worlds[n] = build_world(WorldConfig(n=n))
            runs[n].append(time.perf_counter() - t0)
    times = {n: min(r) for n, r in runs.items()}
    covs = {}
    for n, w in worlds.items():
        rep = evaluate_world(w.cloud, w.poses, EvalParams(count=20))
        covs[n] = min(e["coverage_mean"] for e in rep.values())
    ratio = {n: times[n] / times[3] / (n / 3) for n in times}
    report(10, min(covs.values()) >= 0.995 and max(ratio.values()) <= 1.5,
           "min mode coverage " + " ".join(f"N={n}:{c:.4f}" for n, c in covs.items())
           + "; time / linear " + " ".join(f"N={n}:{r:.2f}" for n, r in ratio.items()))


def test_criterion_3_boundary_exactness(report):
    runs = BLEND_AUDIT["runs"]
    ok = runs > 0 and not BLEND_AUDIT["failures"]
    report(3, ok, f"{runs} harmonic blends audited, max boundary mismatch "
                  f"{BLEND_AUDIT['max_rel_mismatch']:.2e} x scene scale, "
                  f"{len(BLEND_AUDIT['failures'])} failures")
