"""Harmonic depth blending on a k-NN graph, plus the naive and offset-interpolation baselines.

Estimated depth on the unknown region is lifted to 3D and deformed so that it
meets the trusted rendered geometry exactly on the one-pixel boundary of the
trusted mask.  The deformation minimises the graph Dirichlet energy
``sum_ij w_ij |U_i - U_j|^2`` with the boundary displacements held fixed.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .geom import Pose, backproject_spherical

log = logging.getLogger(__name__)

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], bool)


class SolverError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class BlendParams:
    k: int = 8
    tol: float = 1e-8
    max_iter: int | None = None  # None -> 10 * number of unknowns
    node_cap: int = 1_000_000
    eps_w_rel: float = 1e-6


@dataclass
class KnnGraph:
    positions: np.ndarray
    rows: np.ndarray        # directed edge list holding both (i, j) and (j, i)
    cols: np.ndarray
    weights: np.ndarray
    fixed: np.ndarray       # sorted node indices with prescribed displacement
    eps_w: float
    isolated: np.ndarray = field(default=None)  # bool per node: free and cut off from `fixed`

    @property
    def n(self) -> int:
        return len(self.positions)

    def laplacian(self) -> sparse.csr_matrix:
        W = sparse.csr_matrix((self.weights, (self.rows, self.cols)), shape=(self.n, self.n))
        deg = np.asarray(W.sum(axis=1)).ravel()
        return (sparse.diags(deg) - W).tocsr()

    def degrees(self) -> np.ndarray:
        return np.bincount(self.rows, minlength=self.n)


@dataclass
class BlendProblem:
    P: np.ndarray               # deformable points (estimated depth, unknown region)
    P_boundary: np.ndarray      # estimated depth on the boundary
    P_target: np.ndarray        # rendered depth on the boundary
    pixels: np.ndarray          # (row, col) of each P point
    boundary_pixels: np.ndarray


def _wrap_pad(mask, value):
    """Pad one column each side by wrapping, one row top/bottom with ``value``."""
    m = np.concatenate([mask[:, -1:], mask, mask[:, :1]], axis=1)
    return np.pad(m, ((1, 1), (0, 0)), constant_values=value)


def erode4(mask) -> np.ndarray:
    """4-neighbour erosion, wrapping in azimuth; rows beyond the poles count as inside."""
    mask = np.asarray(mask, bool)
    return ndimage.binary_erosion(_wrap_pad(mask, True), _CROSS)[1:-1, 1:-1]


def dilate4(mask) -> np.ndarray:
    mask = np.asarray(mask, bool)
    return ndimage.binary_dilation(_wrap_pad(mask, False), _CROSS)[1:-1, 1:-1]


def boundary_mask(M_r) -> np.ndarray:
    """Pixels of ``M_r`` with at least one 4-neighbour outside it."""
    M_r = np.asarray(M_r, bool)
    if not M_r.any() or M_r.all():
        log.warning("boundary_mask: mask is %s, boundary is empty", "empty" if not M_r.any() else "full")
        return np.zeros_like(M_r)
    return M_r & ~erode4(M_r)


def build_knn_graph(points, k: int, fixed, eps_w_rel: float = 1e-6) -> KnnGraph:
    """Weighted k-NN graph, symmetrised by union, ``w_ij = 1 / (|p_i - p_j| + eps_w)``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if k < 1 or n < 2:
        raise ValueError("need k >= 1 and at least two points")
    kk = min(k, n - 1)
    _, nbr = cKDTree(pts).query(pts, k=kk + 1)
    nbr = nbr.reshape(n, kk + 1)
    own = np.arange(n)[:, None]
    # drop the self entry; with coincident points self may not come first
    not_self = nbr != own
    no_self_found = not_self.all(axis=1)
    not_self[no_self_found, -1] = False
    j = nbr[not_self].reshape(n, kk)
    i = np.repeat(np.arange(n), kk)
    j = j.ravel()
    a, b = np.minimum(i, j), np.maximum(i, j)
    pairs = np.unique(a * n + b)
    a, b = pairs // n, pairs % n
    length = np.linalg.norm(pts[a] - pts[b], axis=1)
    med = float(np.median(length))
    eps_w = eps_w_rel * med if med > 0 else eps_w_rel
    w = 1.0 / (length + eps_w)
    fixed = np.unique(np.asarray(fixed, dtype=np.int64))
    graph = KnnGraph(pts, np.concatenate([a, b]), np.concatenate([b, a]),
                     np.concatenate([w, w]), fixed, eps_w)
    adj = sparse.csr_matrix((np.ones(len(graph.rows)), (graph.rows, graph.cols)), shape=(n, n))
    ncomp, labels = connected_components(adj, directed=False)
    anchored = np.zeros(ncomp, bool)
    anchored[labels[fixed]] = True
    graph.isolated = ~anchored[labels]
    return graph


def pcg(A, B, tol: float = 1e-8, max_iter: int | None = None):
    """Jacobi-preconditioned conjugate gradient for SPD ``A`` and a block of right-hand sides.

    Columns of ``B`` are solved independently (vectorised).  Returns
    ``(X, iterations, relative residual)``; raises ``SolverError`` when
    ``tol`` is not reached within ``max_iter`` iterations.
    """
    B = np.asarray(B, dtype=np.float64)
    squeeze = B.ndim == 1
    if squeeze:
        B = B[:, None]
    n, m = B.shape
    max_iter = 10 * n if max_iter is None else max_iter
    dinv = 1.0 / A.diagonal()
    bnorm = np.linalg.norm(B, axis=0)
    active = bnorm > 0
    bnorm = np.where(active, bnorm, 1.0)
    X = np.zeros_like(B)
    R = B.copy()
    Z = dinv[:, None] * R
    P = Z.copy()
    rz = np.einsum("ij,ij->j", R, Z)
    res = np.linalg.norm(R, axis=0) / bnorm
    it = 0
    while np.any(res[active] >= tol):
        if it >= max_iter:
            raise SolverError("conjugate gradient did not converge", float(res.max()))
        AP = A @ P
        pap = np.einsum("ij,ij->j", P, AP)
        alpha = np.where(pap > 0, rz / np.where(pap > 0, pap, 1.0), 0.0)
        X += alpha * P
        R -= alpha * AP
        Z = dinv[:, None] * R
        rz_new = np.einsum("ij,ij->j", R, Z)
        beta = np.where(rz > 0, rz_new / np.where(rz > 0, rz, 1.0), 0.0)
        P = Z + beta * P
        rz = rz_new
        res = np.linalg.norm(R, axis=0) / bnorm
        it += 1
    res = np.where(active, res, 0.0)
    X = X[:, 0] if squeeze else X
    return X, it, float(res.max())


def harmonic_displacements(graph: KnnGraph, boundary_disp, tol: float = 1e-8,
                           max_iter: int | None = None, return_info: bool = False):
    """Dirichlet-energy minimising displacement field with fixed boundary values.

    ``boundary_disp`` holds one 3-vector per entry of ``graph.fixed`` (in that
    order).  Fixed rows of the result are assigned, not solved; free nodes
    with no path to a fixed node get zero displacement.
    """
    n = graph.n
    ub = np.asarray(boundary_disp, dtype=np.float64).reshape(len(graph.fixed), 3)
    U = np.zeros((n, 3))
    U[graph.fixed] = ub
    is_fixed = np.zeros(n, bool)
    is_fixed[graph.fixed] = True
    free = np.nonzero(~is_fixed & ~graph.isolated)[0]
    info = {"iterations": 0, "residual": 0.0, "n_free": int(len(free)),
            "n_isolated": int(graph.isolated.sum())}
    if len(free):
        L = graph.laplacian()
        L_ff = L[free][:, free].tocsr()
        L_fb = L[free][:, graph.fixed]
        rhs = -(L_fb @ ub)
        X, it, res = pcg(L_ff, rhs, tol=tol, max_iter=max_iter)
        U[free] = X
        info.update(iterations=it, residual=res)
    if info["n_isolated"]:
        log.info("harmonic_displacements: %d free nodes cut off from the boundary keep U=0",
                 info["n_isolated"])
    return (U, info) if return_info else U


def dirichlet_energy(graph: KnnGraph, U) -> float:
    """``tr(U^T L U)``, i.e. the sum over undirected edges of ``w_ij |U_i - U_j|^2``."""
    U = np.asarray(U, dtype=np.float64)
    return float(np.einsum("ij,ij->", U, graph.laplacian() @ U))


def build_blend_problem(D_r, D_est, M_r, T: Pose) -> BlendProblem:
    D_r = np.asarray(D_r, dtype=np.float64)
    D_est = np.asarray(D_est, dtype=np.float64)
    M_r = np.asarray(M_r, bool)
    if not (D_r.shape == D_est.shape == M_r.shape):
        raise ValueError("D_r, D_est and M_r must share dimensions")
    if not (np.isfinite(D_est).all() and (D_est > 0).all()):
        raise ValueError("D_est must be defined and positive everywhere")
    blank = np.zeros(D_r.shape + (3,))
    edge = boundary_mask(M_r)
    P, px = backproject_spherical(blank, D_est, T, ~M_r, return_pixels=True)
    Pb, bpx = backproject_spherical(blank, D_est, T, edge, return_pixels=True)
    Pt = backproject_spherical(blank, D_r, T, edge)
    return BlendProblem(P.positions, Pb.positions, Pt.positions, px, bpx)


def idw_interpolate(src_xy, src_val, query_xy, W: int | None = None,
                    power: float = 2.0, chunk: int = 2048) -> np.ndarray:
    """Inverse-distance weighting in pixel space using every source sample.

    ``W`` turns on horizontal wrap-around for the column coordinate (first column of
    the xy arrays).  Values may be vectors (trailing dimension).
    """
    src_xy = np.asarray(src_xy, dtype=np.float64)
    query_xy = np.asarray(query_xy, dtype=np.float64)
    src_val = np.asarray(src_val, dtype=np.float64)
    vec = src_val.ndim > 1
    vals = src_val.reshape(len(src_xy), -1)
    out = np.empty((len(query_xy), vals.shape[1]))
    for s in range(0, len(query_xy), chunk):
        q = query_xy[s:s + chunk]
        dx = np.abs(q[:, None, 0] - src_xy[None, :, 0])
        if W is not None:
            dx = np.minimum(dx, W - dx)
        dy = q[:, None, 1] - src_xy[None, :, 1]
        d2 = dx * dx + dy * dy
        exact = d2 == 0
        w = 1.0 / np.maximum(d2, 1e-300) ** (power / 2.0)
        hit = exact.any(axis=1)
        if hit.any():
            w[hit] = exact[hit].astype(np.float64)
        out[s:s + chunk] = (w @ vals) / w.sum(axis=1, keepdims=True)
    return out if vec else out[:, 0]


def _knn_idw(src_pts, src_val, query_pts, k: int = 8, power: float = 2.0) -> np.ndarray:
    k = min(k, len(src_pts))
    d, j = cKDTree(src_pts).query(query_pts, k=k)
    d, j = d.reshape(len(query_pts), k), j.reshape(len(query_pts), k)
    w = 1.0 / np.maximum(d, 1e-12) ** power
    return np.einsum("qk,qkc->qc", w, src_val[j]) / w.sum(axis=1, keepdims=True)


def harmonic_blend_depth(D_r, D_est, M_r, T: Pose, params: BlendParams | None = None,
                         return_info: bool = False):
    """Blend estimated depth into trusted rendered depth.

    Output equals ``D_r`` (bit for bit) on ``M_r`` and holds the radial
    distance of each deformed estimated point on the complement.
    """
    params = params or BlendParams()
    D_r = np.asarray(D_r, dtype=np.float64)
    M_r = np.asarray(M_r, bool)
    out = np.where(M_r, D_r, np.nan)
    info = {"n_nodes": 0, "n_boundary": 0, "iterations": 0, "residual": 0.0,
            "n_isolated": 0, "boundary_mismatch": 0.0, "subsampled": False}
    if M_r.all():
        return (out, info) if return_info else out
    prob = build_blend_problem(D_r, D_est, M_r, T)
    nb = len(prob.P_boundary)
    if nb == 0:
        log.warning("harmonic_blend_depth: no trusted boundary, keeping estimated depth")
        out[~M_r] = np.asarray(D_est)[~M_r]
        return (out, info) if return_info else out
    nf = len(prob.P)
    solve_idx = np.arange(nf)
    if nf > params.node_cap:
        solve_idx = np.unique(np.linspace(0, nf - 1, params.node_cap).astype(np.int64))
        info["subsampled"] = True
    nodes = np.concatenate([prob.P[solve_idx], prob.P_boundary])
    fixed = np.arange(len(solve_idx), len(nodes))
    graph = build_knn_graph(nodes, params.k, fixed, params.eps_w_rel)
    U_b = prob.P_target - prob.P_boundary
    U, sinfo = harmonic_displacements(graph, U_b, tol=params.tol,
                                      max_iter=params.max_iter, return_info=True)
    if info["subsampled"]:
        U_free = _knn_idw(nodes, U, prob.P)
    else:
        U_free = U[: len(solve_idx)]
    deformed = prob.P + U_free
    r, c = prob.pixels[:, 0], prob.pixels[:, 1]
    out[r, c] = np.linalg.norm(deformed - T.translation, axis=1)
    moved_boundary = prob.P_boundary + U[fixed]
    info.update(n_nodes=len(nodes), n_boundary=nb, iterations=sinfo["iterations"],
                residual=sinfo["residual"], n_isolated=sinfo["n_isolated"],
                boundary_mismatch=float(np.linalg.norm(moved_boundary - prob.P_target, axis=1).max()))
    return (out, info) if return_info else out


def naive_blend(D_r, D_est, M_r) -> np.ndarray:
    return np.where(np.asarray(M_r, bool), D_r, D_est)


def offset_interpolation_blend(D_r, D_est, M_r, power: float = 2.0) -> np.ndarray:
    """Shift estimated depth by the boundary offset ``D_r - D_est``, spread by IDW."""
    D_r = np.asarray(D_r, dtype=np.float64)
    D_est = np.asarray(D_est, dtype=np.float64)
    M_r = np.asarray(M_r, bool)
    edge = boundary_mask(M_r)
    if not edge.any():
        return naive_blend(D_r, D_est, M_r)
    by, bx = np.nonzero(edge)
    offset = D_r[by, bx] - D_est[by, bx]
    qy, qx = np.nonzero(~M_r)
    O = idw_interpolate(np.stack([bx, by], 1), offset, np.stack([qx, qy], 1),
                        W=M_r.shape[1], power=power)
    out = np.where(M_r, D_r, np.nan)
    out[qy, qx] = D_est[qy, qx] + O
    return out
