import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from panofuse.blend import (BlendParams, KnnGraph, SolverError, boundary_mask, build_blend_problem,
                            build_knn_graph, dilate4, dirichlet_energy, erode4,
                            harmonic_blend_depth, harmonic_displacements, idw_interpolate,
                            naive_blend, offset_interpolation_blend, pcg)
from panofuse.evalkit import transition_score
from panofuse.geom import Pose


def dense_harmonic(graph, ub):
    """Reference solve: dense Laplacian, direct solve of the free block."""
    n = graph.n
    L = np.zeros((n, n))
    np.add.at(L, (graph.rows, graph.cols), -graph.weights)
    L[np.diag_indices(n)] = -L.sum(axis=1)
    fixed = np.zeros(n, bool)
    fixed[graph.fixed] = True
    free = np.nonzero(~fixed & ~graph.isolated)[0]
    U = np.zeros((n, 3))
    U[graph.fixed] = ub
    if len(free):
        U[free] = np.linalg.solve(L[np.ix_(free, free)], -L[np.ix_(free, graph.fixed)] @ ub)
    return U, L


def path_graph(n, w=1.0):
    i = np.arange(n - 1)
    rows = np.concatenate([i, i + 1])
    cols = np.concatenate([i + 1, i])
    pos = np.stack([np.arange(n, dtype=float), np.zeros(n), np.zeros(n)], 1)
    return KnnGraph(pos, rows, cols, np.full(len(rows), w), np.array([0, n - 1]), 0.0,
                    np.zeros(n, bool))


# ---- masks -------------------------------------------------------------------

def test_boundary_of_half_plane_wraps():
    M = np.zeros((6, 12), bool)
    M[:, :6] = True
    B = boundary_mask(M)
    assert set(np.nonzero(B.any(0))[0]) == {0, 5}


def test_boundary_of_solid_block():
    M = np.zeros((7, 14), bool)
    M[2:5, 4:7] = True
    B = boundary_mask(M)
    assert B.sum() == 8 and not B[3, 5]


def test_boundary_full_and_empty(caplog):
    with caplog.at_level(logging.WARNING):
        assert not boundary_mask(np.ones((4, 8), bool)).any()
        assert not boundary_mask(np.zeros((4, 8), bool)).any()
    assert caplog.records


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_boundary_pixels_touch_the_outside(seed):
    rng = np.random.default_rng(seed)
    M = rng.uniform(size=(8, 16)) < 0.6
    B = boundary_mask(M)
    assert not (B & ~M).any()
    assert (B <= dilate4(~M)).all()
    assert np.array_equal(erode4(M) | B, M)


# ---- graph -------------------------------------------------------------------

def test_three_collinear_points_k1():
    g = build_knn_graph(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0.0]]), 1, [0])
    edges = {(int(a), int(b)) for a, b in zip(g.rows, g.cols)}
    assert edges == {(0, 1), (1, 0), (1, 2), (2, 1)}
    assert np.allclose(g.weights, 1.0 / (1.0 + g.eps_w))


def test_coincident_points_do_not_blow_up():
    g = build_knn_graph(np.zeros((5, 3)), 4, [0])
    assert np.isfinite(g.weights).all() and len(g.rows) == 20
    assert np.allclose(g.weights, 1.0 / g.eps_w)


def test_random_graph_symmetric_with_min_degree():
    pts = np.random.default_rng(0).normal(size=(500, 3))
    g = build_knn_graph(pts, 8, [0, 1])
    assert (g.degrees() >= 8).all()
    L = g.laplacian()
    assert abs(L - L.T).max() < 1e-12
    assert np.allclose(np.asarray(L.sum(axis=1)).ravel(), 0.0)
    assert (L.tocoo().data[L.tocoo().row != L.tocoo().col] <= 0).all()
    assert (g.rows != g.cols).all() and (g.weights > 0).all()


def test_isolated_component_flagged():
    pts = np.concatenate([np.random.default_rng(1).normal(size=(20, 3)),
                          100 + np.random.default_rng(2).normal(size=(20, 3))])
    g = build_knn_graph(pts, 4, [0])
    assert g.isolated[20:].all() and not g.isolated[:20].any()
    U = harmonic_displacements(g, np.ones((1, 3)))
    assert (U[20:] == 0).all()


# ---- solver ------------------------------------------------------------------

def test_path_graph_is_linear():
    U = harmonic_displacements(path_graph(5), np.array([[0, 0, 0], [4, 0, 0.0]]))
    assert np.allclose(U[1:4], [[1, 0, 0], [2, 0, 0], [3, 0, 0]], atol=1e-8)


def test_zero_boundary_gives_zero_field():
    g = build_knn_graph(np.random.default_rng(3).normal(size=(50, 3)), 5, [0, 1, 2])
    assert (harmonic_displacements(g, np.zeros((3, 3))) == 0).all()


def test_fixed_rows_assigned_exactly():
    g = build_knn_graph(np.random.default_rng(4).normal(size=(60, 3)), 6, [5, 9, 40])
    ub = np.random.default_rng(5).normal(size=(3, 3)) / 3.0
    U = harmonic_displacements(g, ub)
    assert U[g.fixed].tobytes() == ub.tobytes()


def random_instance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(10, 201))
    pts = rng.normal(size=(n, 3)) * rng.uniform(0.1, 10)
    k = int(rng.integers(2, 10))
    nf = int(rng.integers(1, max(2, n // 3)))
    fixed = rng.choice(n, nf, replace=False)
    g = build_knn_graph(pts, k, fixed)
    return g, rng.normal(size=(len(g.fixed), 3))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_matches_dense_solve_and_maximum_principle(seed):
    g, ub = random_instance(seed)
    U = harmonic_displacements(g, ub, tol=1e-12)
    U_ref, L = dense_harmonic(g, ub)
    e, e_ref = np.einsum("ij,ij->", U, L @ U), np.einsum("ij,ij->", U_ref, L @ U_ref)
    # a single fixed node gives zero optimal energy; compare against the energy scale then
    floor = 1e-12 * np.abs(L).max() * (ub ** 2).sum()
    assert abs(e - e_ref) <= 1e-6 * abs(e_ref) + floor
    free = ~np.isin(np.arange(g.n), g.fixed) & ~g.isolated
    lo, hi = ub.min(0) - 1e-9, ub.max(0) + 1e-9
    assert ((U[free] >= lo) & (U[free] <= hi)).all()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1.0))
def test_perturbing_free_node_raises_energy(seed, delta):
    g, ub = random_instance(seed)
    U = harmonic_displacements(g, ub, tol=1e-12)
    free = np.nonzero(~np.isin(np.arange(g.n), g.fixed) & ~g.isolated)[0]
    if not len(free):
        return
    V = U.copy()
    V[free[seed % len(free)]] += delta
    assert dirichlet_energy(g, V) > dirichlet_energy(g, U)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rotation_equivariance(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(80, 3))
    fixed = rng.choice(80, 10, replace=False)
    ub = rng.normal(size=(10, 3))
    Q = Rotation.random(random_state=seed % 2**32).as_matrix()
    g1 = build_knn_graph(pts, 6, fixed)
    g2 = build_knn_graph(pts @ Q.T, 6, fixed)
    U1 = harmonic_displacements(g1, ub[np.argsort(np.argsort(fixed))], tol=1e-13)
    U2 = harmonic_displacements(g2, (ub @ Q.T)[np.argsort(np.argsort(fixed))], tol=1e-13)
    assert np.allclose(U1 @ Q.T, U2, atol=1e-8)


def test_pcg_reports_non_convergence():
    g, ub = random_instance(7)
    with pytest.raises(SolverError) as exc:
        harmonic_displacements(g, ub, tol=1e-14, max_iter=1)
    assert exc.value.residual > 0


def test_pcg_block_solve():
    rng = np.random.default_rng(8)
    A = rng.normal(size=(30, 30))
    A = A @ A.T + 30 * np.eye(30)
    B = rng.normal(size=(30, 4))
    B[:, 2] = 0
    from scipy import sparse
    X, it, res = pcg(sparse.csr_matrix(A), B, tol=1e-12)
    assert np.allclose(A @ X, B, atol=1e-9) and (X[:, 2] == 0).all() and res < 1e-12


# ---- depth blending ----------------------------------------------------------

def sphere_case(alpha=1.2, W=128, H=64, r=4.0):
    D = np.full((H, W), r)
    M = np.zeros((H, W), bool)
    M[:, : W // 2] = True
    D_r = np.where(M, D, np.nan)
    return D_r, alpha * D, M, Pose()


def test_consistent_estimate_is_untouched():
    D_r, _, M, T = sphere_case()
    D_est = np.full(M.shape, 4.0)
    out = harmonic_blend_depth(np.where(M, 4.0, np.nan), D_est, M, T)
    assert np.allclose(out, 4.0)


def test_scaled_estimate_seam_is_small():
    D_r, D_est, M, T = sphere_case(1.2)
    med = 4.0
    hb = harmonic_blend_depth(D_r, D_est, M, T)
    naive = naive_blend(D_r, D_est, M)
    assert transition_score(hb, M) < 0.01 * med
    assert transition_score(naive, M) == pytest.approx(0.2 * med, rel=0.05)
    assert np.isfinite(hb).all()


def test_mask_region_bit_identical_and_info():
    rng = np.random.default_rng(9)
    H, W = 32, 64
    D = rng.uniform(2, 6, (H, W))
    M = rng.uniform(size=(H, W)) < 0.5
    out, info = harmonic_blend_depth(np.where(M, D, np.nan), D * 1.1, M, Pose(), return_info=True)
    assert out[M].tobytes() == D[M].tobytes()
    assert info["boundary_mismatch"] < 1e-6 * 4 and info["n_boundary"] > 0


def test_full_mask_returns_rendered():
    D = np.full((8, 16), 2.0)
    out = harmonic_blend_depth(D, D * 3, np.ones((8, 16), bool), Pose())
    assert np.array_equal(out, D)


def test_node_cap_subsamples():
    D_r, D_est, M, T = sphere_case(1.1)
    out, info = harmonic_blend_depth(D_r, D_est, M, T, BlendParams(node_cap=200), return_info=True)
    assert info["subsampled"] and np.isfinite(out).all()
    assert transition_score(out, M) < transition_score(naive_blend(D_r, D_est, M), M)


def test_blend_problem_correspondence():
    D_r, D_est, M, T = sphere_case()
    prob = build_blend_problem(D_r, D_est, M, T)
    assert len(prob.P_boundary) == len(prob.P_target) == boundary_mask(M).sum()
    assert len(prob.P) == (~M).sum()
    assert len({tuple(p) for p in prob.pixels}) == len(prob.pixels)
    assert not M[prob.pixels[:, 0], prob.pixels[:, 1]].any()


def test_naive_blend_extremes():
    a, b = np.full((4, 8), 1.0), np.full((4, 8), 2.0)
    assert np.array_equal(naive_blend(a, b, np.ones((4, 8), bool)), a)
    assert np.array_equal(naive_blend(a, b, np.zeros((4, 8), bool)), b)


def test_offset_interpolation_constant_offset():
    D_r, D_est, M, T = sphere_case(1.0)
    out = offset_interpolation_blend(np.where(M, 4.5, np.nan), D_est, M)
    assert np.allclose(out[~M], D_est[~M] + 0.5)


def test_offset_interpolation_zero_offset_is_naive():
    D_r, _, M, _ = sphere_case()
    D_est = np.full(M.shape, 4.0)
    assert np.allclose(offset_interpolation_blend(D_r, D_est, M), naive_blend(D_r, D_est, M))


def test_idw_midpoint():
    v = idw_interpolate(np.array([[0.0, 0.0], [2.0, 0.0]]), np.array([0.0, 2.0]),
                        np.array([[1.0, 0.0]]))
    assert v[0] == pytest.approx(1.0)
    # across the seam the wrapped distance is used
    v = idw_interpolate(np.array([[0.0, 0.0], [5.0, 0.0]]), np.array([0.0, 2.0]),
                        np.array([[9.0, 0.0]]), W=10)
    assert v[0] < 1.0
