"""Laplacian-driven applications: diffusion, geodesics, smoothing, filtering, ARAP.

All five consume a LaplacianPair and work the same whether the pair came
from the cotangent ground truth, a graph baseline, or the network.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import Mesh, PointCloud
from .knn import KnnGraph
from .laplacian import LaplacianPair
from .sparse import cg_solve, eig_smallest, lambda_max_estimate


def heat_diffuse(pair: LaplacianPair, u0: np.ndarray, dt: float = 1e-3,
                 steps: int = 1000, check_stability: bool = True) -> np.ndarray:
    """Explicit Euler heat flow u <- u - dt * M^-1 L u."""
    u = np.asarray(u0, dtype=np.float64).copy()
    if u.shape[0] != pair.n:
        raise ValueError("field length must match the operator")
    if check_stability:
        lam = lambda_max_estimate(pair.stiffness, pair.mass)
        if dt * lam >= 2.0:
            warnings.warn(
                f"explicit Euler unstable: dt * lambda_max = {dt * lam:.3g} >= 2",
                RuntimeWarning, stacklevel=2)
    for step in range(steps):
        u -= dt * pair.apply(u)
        if not np.all(np.isfinite(u)):
            raise FloatingPointError(f"heat diffusion diverged at step {step}")
    return u


def _mean_edge_length(mesh: Mesh) -> float:
    e = mesh.undirected_edges()
    return float(np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1).mean())


def geodesic_heat(mesh: Mesh, pair: LaplacianPair, source: int) -> np.ndarray:
    """Heat-method geodesic distance from `source`.

    The diffusion and Poisson solves use the supplied pair; gradient and
    divergence stay on the companion mesh. Since pair masses are normalized
    to mean one, the short diffusion time t = (mean edge length)^2 is
    expressed in those units by dividing by the mean vertex area.
    """
    n = mesh.num_vertices
    if pair.n != n:
        raise ValueError("mesh and operator are not index-aligned")
    if not 0 <= source < n:
        raise ValueError("source index out of range")
    v, t = mesh.vertices, mesh.triangles
    areas = mesh.triangle_areas()
    mean_vertex_area = float(areas.sum()) / n
    h = _mean_edge_length(mesh)
    t_heat = h * h / mean_vertex_area

    system = pair.stiffness.scaled(t_heat).add_diagonal(pair.mass)
    delta = np.zeros(n)
    delta[source] = 1.0
    u = cg_solve(system, delta)

    # per-face gradient of u
    p0, p1, p2 = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    normal = np.cross(p1 - p0, p2 - p0)
    two_area = np.linalg.norm(normal, axis=1, keepdims=True)
    nrm = normal / two_area
    e0, e1, e2 = p2 - p1, p0 - p2, p1 - p0  # edge opposite each corner
    grad = (u[t[:, 0], None] * np.cross(nrm, e0)
            + u[t[:, 1], None] * np.cross(nrm, e1)
            + u[t[:, 2], None] * np.cross(nrm, e2)) / two_area
    norms = np.linalg.norm(grad, axis=1, keepdims=True)
    x_field = -grad / np.where(norms > 0, norms, 1.0)

    # integrated divergence per vertex
    div = np.zeros(n)
    cots = []
    for a, b in ((p1 - p0, p2 - p0), (p2 - p1, p0 - p1), (p0 - p2, p1 - p2)):
        cots.append(np.einsum("ij,ij->i", a, b) / np.linalg.norm(np.cross(a, b), axis=1))
    cot0, cot1, cot2 = cots  # cot of angle at corners 0, 1, 2
    opp_cot = {(0, 1): cot2, (1, 0): cot2, (1, 2): cot0, (2, 1): cot0, (0, 2): cot1, (2, 0): cot1}
    pts = (p0, p1, p2)
    for ci in range(3):
        idx = t[:, ci]
        for cj in range(3):
            if cj == ci:
                continue
            e = pts[cj] - pts[ci]
            contrib = 0.5 * opp_cot[(ci, cj)] * np.einsum("ij,ij->i", e, x_field)
            np.add.at(div, idx, contrib)

    phi = cg_solve(pair.stiffness, -div, deflate_constant=True)
    phi -= phi[source]
    if np.median(phi) < 0:  # sign is fixed by the divergence convention; guard anyway
        phi = -phi
    return np.maximum(phi, 0.0)


def laplacian_smooth(points, pair: LaplacianPair, step: float = 0.5,
                     iters: int = 10) -> PointCloud:
    """Explicit per-axis diffusion of positions with an adaptive step."""
    if not 0.0 < step <= 1.0:
        raise ValueError("step must lie in (0, 1]")
    pts = np.asarray(getattr(points, "points", points), dtype=np.float64).copy()
    lam = lambda_max_estimate(pair.stiffness, pair.mass)
    dt = step / max(lam, 1e-300)
    for _ in range(iters):
        pts -= dt * pair.apply(pts)
    return PointCloud(pts)


def spectral_filter(pair: LaplacianPair, signal: np.ndarray, gains,
                    n_modes: int, residual: str = "keep") -> np.ndarray:
    """Rescale the first `n_modes` eigen-coefficients of a signal.

    `gains` is a scalar, a length-n_modes array, or a callable index -> gain.
    The part of the signal above the retained modes is kept verbatim
    (residual="keep") or dropped (residual="drop").
    """
    if residual not in ("keep", "drop"):
        raise ValueError("residual policy must be 'keep' or 'drop'")
    if not 1 <= n_modes < pair.n:
        raise ValueError("n_modes must be in [1, n)")
    sig = np.asarray(signal, dtype=np.float64)
    flat = sig.reshape(pair.n, -1)
    pairs = eig_smallest(pair.stiffness, pair.mass, n_modes)
    basis = pairs.vectors
    if callable(gains):
        g = np.array([float(gains(i)) for i in range(n_modes)])
    else:
        g = np.broadcast_to(np.asarray(gains, dtype=np.float64), (n_modes,)).copy()
    coeff = basis.T @ (pair.mass[:, None] * flat)
    out = basis @ (g[:, None] * coeff)
    if residual == "keep":
        out += flat - basis @ coeff
    return out.reshape(sig.shape)


@dataclass
class DeformationConstraints:
    fixed_indices: np.ndarray
    fixed_positions: np.ndarray
    handle_indices: np.ndarray
    handle_positions: np.ndarray

    def __post_init__(self):
        self.fixed_indices = np.asarray(self.fixed_indices, dtype=np.int64).reshape(-1)
        self.handle_indices = np.asarray(self.handle_indices, dtype=np.int64).reshape(-1)
        self.fixed_positions = np.asarray(self.fixed_positions, dtype=np.float64).reshape(-1, 3)
        self.handle_positions = np.asarray(self.handle_positions, dtype=np.float64).reshape(-1, 3)
        if self.fixed_indices.size == 0:
            raise ValueError("at least one fixed vertex is required")
        if len(self.fixed_indices) != len(self.fixed_positions):
            raise ValueError("fixed index/position count mismatch")
        if len(self.handle_indices) != len(self.handle_positions):
            raise ValueError("handle index/position count mismatch")
        if np.intersect1d(self.fixed_indices, self.handle_indices).size:
            raise ValueError("fixed and handle sets must be disjoint")

    @property
    def indices(self) -> np.ndarray:
        return np.r_[self.fixed_indices, self.handle_indices]

    @property
    def positions(self) -> np.ndarray:
        return np.r_[self.fixed_positions, self.handle_positions]


def _fit_rotations(src, dst, w, rest, current, n):
    """Per-vertex Kabsch fit of current 1-ring edges to rest edges."""
    e_rest = rest[src] - rest[dst]
    e_cur = current[src] - current[dst]
    s = np.zeros((n, 3, 3))
    for a in range(3):
        for b in range(3):
            s[:, a, b] = np.bincount(src, weights=w * e_rest[:, a] * e_cur[:, b], minlength=n)
    try:
        u, _, vt = np.linalg.svd(s)
    except np.linalg.LinAlgError:
        rot = np.tile(np.eye(3), (n, 1, 1))
        for i in range(n):
            try:
                ui, _, vti = np.linalg.svd(s[i])
            except np.linalg.LinAlgError:
                continue
            d = np.sign(np.linalg.det(vti.T @ ui.T))
            rot[i] = (vti.T * np.array([1.0, 1.0, d])) @ ui.T
        return rot
    det = np.sign(np.linalg.det(np.transpose(vt, (0, 2, 1)) @ np.transpose(u, (0, 2, 1))))
    vt = vt.copy()
    vt[:, 2, :] *= det[:, None]
    return np.transpose(vt, (0, 2, 1)) @ np.transpose(u, (0, 2, 1))


def arap_energy(src, dst, w, rest, current, rot) -> float:
    d = (current[src] - current[dst]) - np.einsum("eab,eb->ea", rot[src], rest[src] - rest[dst])
    return float(np.sum(w * np.sum(d * d, axis=1)))


def arap_deform(points, graph: KnnGraph, pair: LaplacianPair,
                constraints: DeformationConstraints, iters: int = 10,
                return_energy: bool = False):
    """Local/global as-rigid-as-possible deformation on the KNN 1-rings.

    Edge weights come from the pair's stiffness matrix. Starts from the
    naive Laplacian solve (identity rotations), then alternates rotation
    fitting with the constrained global solve. The energy after each
    iteration is asserted non-increasing (up to solver tolerance).
    """
    rest = np.asarray(getattr(points, "points", points), dtype=np.float64)
    n = len(rest)
    ui, uj = graph.undirected_pairs()
    rows, cols, vals = pair.stiffness.to_coo()
    off = rows < cols
    wmap = {}
    for r, c, v in zip(rows[off], cols[off], vals[off]):
        wmap[(int(r), int(c))] = -float(v)
    w_und = np.array([wmap.get((int(a), int(b)), 0.0) for a, b in zip(ui, uj)])
    src = np.r_[ui, uj]
    dst = np.r_[uj, ui]
    w_dir = np.r_[w_und, w_und]

    cidx = constraints.indices
    if cidx.size and (cidx.min() < 0 or cidx.max() >= n):
        raise ValueError("constraint index out of range")
    free = np.ones(n, dtype=bool)
    free[cidx] = False
    fidx = np.flatnonzero(free)
    pos_in_free = np.full(n, -1, dtype=np.int64)
    pos_in_free[fidx] = np.arange(fidx.size)
    mask_ff = free[rows] & free[cols]
    from .sparse import SparseMatrix
    l_ff = SparseMatrix.from_coo(fidx.size, pos_in_free[rows[mask_ff]],
                                 pos_in_free[cols[mask_ff]], vals[mask_ff])
    mask_fc = free[rows] & ~free[cols]
    fc_rows = pos_in_free[rows[mask_fc]]
    fc_cols = cols[mask_fc]
    fc_vals = vals[mask_fc]

    current = rest.copy()
    current[cidx] = constraints.positions

    def global_step(rot):
        # b_i = sum_j w_ij/2 (R_i + R_j)(p_i - p_j)
        r_sum = rot[src] + rot[dst]
        contrib = 0.5 * w_dir[:, None] * np.einsum("eab,eb->ea", r_sum, rest[src] - rest[dst])
        b = np.zeros((n, 3))
        for a in range(3):
            b[:, a] = np.bincount(src, weights=contrib[:, a], minlength=n)
        new = current.copy()
        for a in range(3):
            rhs = b[fidx, a] - np.bincount(fc_rows, weights=fc_vals * new[fc_cols, a],
                                           minlength=fidx.size)
            new[fidx, a] = cg_solve(l_ff, rhs, tol=1e-12)
        return new

    identity = np.tile(np.eye(3), (n, 1, 1))
    current = global_step(identity)
    energies = []
    prev = None
    for _ in range(iters):
        rot = _fit_rotations(src, dst, w_dir, rest, current, n)
        current = global_step(rot)
        energy = arap_energy(src, dst, w_dir, rest, current, rot)
        if prev is not None and energy > prev + 1e-8 * max(1.0, prev):
            raise AssertionError(f"ARAP energy increased: {prev:.6e} -> {energy:.6e}")
        energies.append(energy)
        prev = energy
    cloud = PointCloud(current)
    return (cloud, energies) if return_energy else cloud
