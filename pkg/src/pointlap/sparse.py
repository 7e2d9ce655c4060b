"""Sparse symmetric matrices in CSR form, CG, and a Lanczos eigensolver.

The generalized problem L x = lambda M x with diagonal positive M is reduced
to an ordinary symmetric problem through the exact similarity transform
M^{-1/2} L M^{-1/2}; eigenvectors are mapped back and M-normalized.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SolveError(RuntimeError):
    """An iterative solver failed to reach the requested tolerance."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class SparseMatrix:
    """Square CSR matrix: sorted column indices per row, duplicates merged."""

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    @staticmethod
    def from_coo(n, rows, cols, vals) -> "SparseMatrix":
        """Build CSR from triplets; duplicate (i, j) entries are summed."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        if not (rows.shape == cols.shape == vals.shape):
            raise ValueError("rows/cols/vals length mismatch")
        if rows.size and (rows.min() < 0 or rows.max() >= n or cols.min() < 0 or cols.max() >= n):
            raise ValueError("index out of range for %d x %d matrix" % (n, n))
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if rows.size:
            first = np.r_[True, (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])]
            starts = np.flatnonzero(first)
            vals = np.add.reduceat(vals, starts)
            rows, cols = rows[starts], cols[starts]
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        np.cumsum(indptr, out=indptr)
        return SparseMatrix(n, indptr, cols, vals)

    @staticmethod
    def identity(n) -> "SparseMatrix":
        idx = np.arange(n, dtype=np.int64)
        return SparseMatrix(n, np.arange(n + 1, dtype=np.int64), idx, np.ones(n))

    @property
    def nnz(self) -> int:
        return int(self.data.size)

    def nnz_per_row(self) -> np.ndarray:
        return np.diff(self.indptr)

    def diagonal(self) -> np.ndarray:
        d = np.zeros(self.n)
        for i in range(self.n):
            lo, hi = self.indptr[i], self.indptr[i + 1]
            pos = np.searchsorted(self.indices[lo:hi], i)
            if pos < hi - lo and self.indices[lo + pos] == i:
                d[i] = self.data[lo + pos]
        return d

    def to_coo(self):
        rows = np.repeat(np.arange(self.n, dtype=np.int64), np.diff(self.indptr))
        return rows, self.indices.copy(), self.data.copy()

    def to_dense(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        rows, cols, vals = self.to_coo()
        a[rows, cols] = vals
        return a

    def transpose(self) -> "SparseMatrix":
        rows, cols, vals = self.to_coo()
        return SparseMatrix.from_coo(self.n, cols, rows, vals)

    def scaled(self, s: float) -> "SparseMatrix":
        return SparseMatrix(self.n, self.indptr, self.indices, self.data * float(s))

    def add_diagonal(self, d) -> "SparseMatrix":
        """Return self + diag(d) as a new matrix."""
        d = np.broadcast_to(np.asarray(d, dtype=np.float64), (self.n,))
        rows, cols, vals = self.to_coo()
        idx = np.arange(self.n, dtype=np.int64)
        return SparseMatrix.from_coo(
            self.n, np.r_[rows, idx], np.r_[cols, idx], np.r_[vals, d]
        )

    def max_asymmetry(self) -> float:
        """max |A - A^T|, computed on the canonicalized triplet form."""
        t = self.transpose()
        if not np.array_equal(t.indptr, self.indptr) or not np.array_equal(t.indices, self.indices):
            # sparsity patterns differ: compare densified difference
            rows, cols, vals = self.to_coo()
            rt, ct, vt = t.to_coo()
            diff = SparseMatrix.from_coo(
                self.n, np.r_[rows, rt], np.r_[cols, ct], np.r_[vals, -vt]
            )
            return float(np.abs(diff.data).max()) if diff.nnz else 0.0
        return float(np.abs(self.data - t.data).max()) if self.nnz else 0.0

    def __matmul__(self, x):
        return spmv(self, x)


def spmv(a: SparseMatrix, x: np.ndarray) -> np.ndarray:
    """CSR product A @ x for a vector (n,) or a column block (n, p)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != a.n:
        raise ValueError(f"dimension mismatch: matrix is {a.n}, operand has {x.shape[0]} rows")
    prod = a.data[:, None] * x[a.indices] if x.ndim == 2 else a.data * x[a.indices]
    out = np.zeros((a.n,) + x.shape[1:])
    counts = np.diff(a.indptr)
    nonempty = counts > 0
    if prod.shape[0]:
        out[nonempty] = np.add.reduceat(prod, a.indptr[:-1][nonempty], axis=0)
    return out


def cg_solve(a: SparseMatrix, b: np.ndarray, tol: float = 1e-10,
             max_iter: int | None = None, deflate_constant: bool = False) -> np.ndarray:
    """Jacobi-preconditioned conjugate gradients for SPD (or deflated PSD) A.

    With ``deflate_constant`` the constant vector is projected out of b and
    of every residual, which makes zero-row-sum Laplacian systems solvable
    when b is (numerically) orthogonal to the kernel.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (a.n,):
        raise ValueError("right-hand side has wrong shape")
    if max_iter is None:
        max_iter = 10 * a.n
    d = a.diagonal()
    inv_d = np.where(np.abs(d) > 1e-300, 1.0 / np.where(d == 0, 1.0, d), 1.0)

    def project(v):
        return v - v.mean() if deflate_constant else v

    b = project(b)
    nb = np.linalg.norm(b)
    if nb == 0.0:
        return np.zeros(a.n)
    x = np.zeros(a.n)
    r = b.copy()
    z = inv_d * r
    p = z.copy()
    rz = r @ z
    for _ in range(max_iter):
        ap = project(spmv(a, p))
        denom = p @ ap
        if denom <= 0:
            break
        alpha = rz / denom
        x += alpha * p
        r -= alpha * ap
        res = np.linalg.norm(r)
        if res <= tol * nb:
            return x
        z = inv_d * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    res = np.linalg.norm(project(b - spmv(a, x)))
    if res <= tol * nb:
        return x
    raise SolveError("conjugate gradients did not converge", res / nb)


@dataclass(frozen=True)
class EigenPairs:
    """Smallest eigenpairs of L x = lambda M x, ascending, M-orthonormal."""

    values: np.ndarray
    vectors: np.ndarray  # column i pairs with values[i]

    def __len__(self) -> int:
        return int(self.values.size)


def lambda_max_estimate(l: SparseMatrix, m: np.ndarray, iters: int = 60, seed: int = 0) -> float:
    """Power-iteration estimate of the largest eigenvalue of M^{-1/2} L M^{-1/2}."""
    s = 1.0 / np.sqrt(np.asarray(m, dtype=np.float64))
    rng = np.random.default_rng(seed)
    y = rng.standard_normal(l.n)
    y /= np.linalg.norm(y)
    lam = 0.0
    for _ in range(iters):
        z = s * spmv(l, s * y)
        nz = np.linalg.norm(z)
        if nz == 0.0:
            return 0.0
        lam = y @ z
        y = z / nz
    return float(abs(lam))


def _ritz(alphas, betas, dim, want):
    t = np.diag(alphas[:dim])
    if dim > 1:
        off = betas[: dim - 1]
        t += np.diag(off, 1) + np.diag(off, -1)
    theta, s = np.linalg.eigh(t)
    k = min(want, dim)
    resid = np.abs(betas[dim - 1]) * np.abs(s[dim - 1, :k])
    return theta, s, resid


def eig_smallest(l: SparseMatrix, m: np.ndarray, count: int, seed: int = 0,
                 tol: float = 1e-10, max_dim: int | None = None) -> EigenPairs:
    """Lanczos with full reorthogonalization for the `count` smallest pairs.

    Breakdown (an exhausted invariant subspace) restarts with a fresh random
    vector orthogonal to the current basis, which is what recovers repeated
    eigenvalues. With the default max_dim = n the iteration is exact in the
    worst case. The start vector is drawn from `seed`, so results are
    reproducible; each eigenvector's largest-magnitude entry is made positive.
    """
    n = l.n
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (n,) or np.any(m <= 0):
        raise ValueError("mass vector must be positive with length n")
    if not 0 < count < n:
        raise ValueError(f"count must be in (0, {n})")
    s = 1.0 / np.sqrt(m)

    def matvec(y):
        return s * spmv(l, s * y)

    rng = np.random.default_rng(seed)
    limit = n if max_dim is None else min(max_dim, n)
    cap = min(limit, max(4 * count, 64))
    q_basis = np.empty((n, cap))
    alphas = np.empty(limit)
    betas = np.empty(limit)
    q = rng.standard_normal(n)
    q /= np.linalg.norm(q)
    q_basis[:, 0] = q
    dim = 1
    scale = 0.0
    next_check = min(limit, max(2 * count, 32))
    converged = False
    # a single Krylov space holds one copy of each repeated eigenvalue, so a
    # converged bottom spectrum is only accepted after a fresh random block
    # fails to change it (exact multiplicities, e.g. symmetric graphs)
    verified_theta = None
    while True:
        if dim == cap and dim < limit:
            cap = min(limit, 2 * cap)
            grown = np.empty((n, cap))
            grown[:, :dim] = q_basis[:, :dim]
            q_basis = grown
        w = matvec(q_basis[:, dim - 1])
        scale = max(scale, float(np.linalg.norm(w)), 1e-300)
        alphas[dim - 1] = q_basis[:, dim - 1] @ w
        basis = q_basis[:, :dim]
        w -= basis @ (basis.T @ w)
        w -= basis @ (basis.T @ w)
        beta = float(np.linalg.norm(w))
        betas[dim - 1] = beta
        breakdown = beta <= 1e-13 * scale
        restart = breakdown
        if dim >= next_check or dim == limit or breakdown:
            theta, _, resid = _ritz(alphas, betas, dim, count)
            if dim >= count:
                floor = np.maximum(np.abs(theta[:count]), 1e-3 * max(theta[-1], 1e-300))
                if np.all(resid <= tol * floor):
                    bottom = theta[:count]
                    if verified_theta is not None and np.all(
                            np.abs(bottom - verified_theta)
                            <= 1e-9 * np.maximum(np.abs(bottom), 1e-6 * scale)):
                        converged = True
                        break
                    verified_theta = bottom.copy()
                    restart = True
            if dim == limit:
                break
            next_check = min(limit, max(dim + 16, (3 * dim) // 2))
        if dim == limit:
            break
        if restart:
            w = rng.standard_normal(n)
            basis = q_basis[:, :dim]
            w -= basis @ (basis.T @ w)
            w -= basis @ (basis.T @ w)
            nw = float(np.linalg.norm(w))
            if nw <= 1e-8:
                break
            betas[dim - 1] = 0.0
            q_basis[:, dim] = w / nw
        else:
            q_basis[:, dim] = w / beta
        dim += 1

    theta, svecs, resid = _ritz(alphas, betas, dim, count)
    if not converged and dim < n:
        floor = np.maximum(np.abs(theta[:count]), 1e-3 * max(theta[-1], 1e-300))
        if not np.all(resid <= tol * floor):
            raise SolveError("Lanczos did not converge within max_dim", float(resid.max()))
    take = min(count, dim)
    y = q_basis[:, :dim] @ svecs[:, :take]
    vectors = s[:, None] * y
    # fix signs: largest-magnitude entry positive (first index wins ties)
    for j in range(take):
        i = int(np.argmax(np.abs(vectors[:, j])))
        if vectors[i, j] < 0:
            vectors[:, j] = -vectors[:, j]
    return EigenPairs(values=theta[:take].copy(), vectors=vectors)


def zero_eigenvalue_cutoff(l: SparseMatrix, m: np.ndarray) -> float:
    """Threshold below which an eigenvalue counts as the zero mode."""
    return 1e-8 * max(lambda_max_estimate(l, m), 1e-300)


# -- MatrixMarket and plain-text vector IO -----------------------------------

def save_matrix_market(path, a: SparseMatrix, symmetric: bool = True) -> None:
    rows, cols, vals = a.to_coo()
    if symmetric:
        keep = rows >= cols
        rows, cols, vals = rows[keep], cols[keep], vals[keep]
    with open(path, "w", encoding="ascii") as f:
        kind = "symmetric" if symmetric else "general"
        f.write(f"%%MatrixMarket matrix coordinate real {kind}\n")
        f.write(f"{a.n} {a.n} {vals.size}\n")
        for i, j, v in zip(rows, cols, vals):
            f.write(f"{i + 1} {j + 1} {float(v)!r}\n")


def load_matrix_market(path) -> SparseMatrix:
    with open(path, "r", encoding="ascii") as f:
        header = f.readline().strip().lower().split()
        if len(header) < 5 or header[0] != "%%matrixmarket" or header[2] != "coordinate":
            raise ValueError(f"{path}: not a coordinate MatrixMarket file")
        symmetric = header[4] == "symmetric"
        line = f.readline()
        while line.startswith("%"):
            line = f.readline()
        nr, nc, nnz = (int(tok) for tok in line.split())
        if nr != nc:
            raise ValueError(f"{path}: expected a square matrix, got {nr} x {nc}")
        rows = np.empty(nnz, dtype=np.int64)
        cols = np.empty(nnz, dtype=np.int64)
        vals = np.empty(nnz)
        for e in range(nnz):
            i, j, v = f.readline().split()
            rows[e], cols[e], vals[e] = int(i) - 1, int(j) - 1, float(v)
    if symmetric:
        off = rows != cols
        rows, cols, vals = (
            np.r_[rows, cols[off]],
            np.r_[cols, rows[off]],
            np.r_[vals, vals[off]],
        )
    return SparseMatrix.from_coo(nr, rows, cols, vals)


def save_vector(path, v: np.ndarray) -> None:
    with open(path, "w", encoding="ascii") as f:
        for x in np.asarray(v, dtype=np.float64):
            f.write(f"{float(x)!r}\n")


def load_vector(path) -> np.ndarray:
    with open(path, "r", encoding="ascii") as f:
        return np.array([float(line) for line in f if line.strip()], dtype=np.float64)
