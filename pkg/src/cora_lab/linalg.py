"""Dense double-precision linear algebra used throughout the package.

Matrices are plain ``numpy.ndarray`` objects of dtype float64; ``as_matrix``
is the single gate that validates shape and finiteness.  The SVD is a
one-sided (Hestenes) Jacobi method and the symmetric eigensolver a two-sided
cyclic Jacobi method.  Both visit column pairs in round-robin order so that
every round rotates disjoint pairs at once, which keeps the numpy loops short.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_SWEEPS = 100
OFF_TOL = 1e-12
_EPS = np.finfo(np.float64).eps


class LinalgError(ValueError):
    """Raised for invalid matrix input."""


class ShapeMismatchError(LinalgError):
    def __init__(self, op, a_shape, b_shape):
        super().__init__(f"{op}: incompatible shapes {tuple(a_shape)} and {tuple(b_shape)}")
        self.a_shape = tuple(a_shape)
        self.b_shape = tuple(b_shape)


class NotSymmetricError(LinalgError):
    def __init__(self, max_asym):
        super().__init__(f"matrix is not symmetric: max |m_ij - m_ji| = {max_asym:.3e}")
        self.max_asym = max_asym


class ConvergenceError(RuntimeError):
    def __init__(self, what, cap, residual):
        super().__init__(
            f"{what} did not converge within {cap} sweeps (residual off-diagonal mass {residual:.3e})"
        )
        self.cap = cap
        self.residual = residual


def as_matrix(x) -> np.ndarray:
    """Return ``x`` as a finite 2-D float64 array, or raise LinalgError."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise LinalgError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise LinalgError(f"matrix must be at least 1x1, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise LinalgError("matrix contains NaN or Inf entries")
    return m


@dataclass(frozen=True)
class SvdFactors:
    u: np.ndarray  # (m, k)
    singular_values: np.ndarray  # (k,)
    vt: np.ndarray  # (k, n)

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.singular_values) @ self.vt


@dataclass(frozen=True)
class EigenFactors:
    eigenvalues: np.ndarray  # (n,), non-increasing
    eigenvectors: np.ndarray  # (n, n), column i pairs with eigenvalues[i]


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    return a @ b


def transpose(m) -> np.ndarray:
    return as_matrix(m).T.copy()


def _same_shape(op, a, b):
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(op, a.shape, b.shape)
    return a, b


def add(a, b) -> np.ndarray:
    a, b = _same_shape("add", a, b)
    return a + b


def sub(a, b) -> np.ndarray:
    a, b = _same_shape("sub", a, b)
    return a - b


def scale(m, s: float) -> np.ndarray:
    return as_matrix(m) * float(s)


def frobenius_norm(m) -> float:
    m = as_matrix(m)
    return float(np.sqrt(np.sum(m * m)))


def round_robin_pairs(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Disjoint index pairs for each round of one cyclic sweep over ``n`` indices.

    Uses the circle method: n-1 rounds (n padded to even), every unordered
    pair appears exactly once per sweep.
    """
    if n < 2:
        return []
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        p, q = [], []
        for i in range(size // 2):
            x, y = players[i], players[size - 1 - i]
            if x >= 0 and y >= 0:
                p.append(min(x, y))
                q.append(max(x, y))
        rounds.append((np.array(p, dtype=np.intp), np.array(q, dtype=np.intp)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _orient_rows(rows: np.ndarray) -> np.ndarray:
    """Per-row sign (+1/-1) making the first clearly nonzero entry positive."""
    signs = np.ones(rows.shape[0])
    for i, row in enumerate(rows):
        scale_ = np.max(np.abs(row))
        if scale_ == 0.0:
            continue
        idx = np.flatnonzero(np.abs(row) > 1e-8 * scale_)[0]
        if row[idx] < 0:
            signs[i] = -1.0
    return signs


def _complete_columns(u: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Replace invalid columns of ``u`` with an orthonormal completion."""
    m = u.shape[0]
    basis = [u[:, j] for j in np.flatnonzero(valid)]
    out = u.copy()
    candidate = 0
    for j in np.flatnonzero(~valid):
        while True:
            e = np.zeros(m)
            e[candidate % m] = 1.0
            candidate += 1
            # two Gram-Schmidt passes for numerical orthogonality
            for _ in range(2):
                for b in basis:
                    e -= (b @ e) * b
            norm = np.linalg.norm(e)
            if norm > 1e-6:
                e /= norm
                break
            if candidate > 2 * m:
                raise RuntimeError("failed to complete orthonormal basis")
        basis.append(e)
        out[:, j] = e
    return out


def _jacobi_svd_tall(a: np.ndarray) -> SvdFactors:
    m, n = a.shape
    work = a.copy()
    v = np.eye(n)
    rounds = round_robin_pairs(n)
    fro2 = float(np.sum(a * a))
    negligible = (_EPS * _EPS) * fro2
    residual = 0.0
    for _ in range(MAX_SWEEPS):
        residual = 0.0
        for p, q in rounds:
            ap, aq = work[:, p], work[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            denom = np.sqrt(alpha * beta)
            with np.errstate(divide="ignore", invalid="ignore"):
                rel = np.where(denom > 0, np.abs(gamma) / denom, 0.0)
            active = (np.abs(gamma) > negligible) & (rel > _EPS)
            if not np.any(active):
                continue
            residual = max(residual, float(np.max(rel[active])))
            g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t = np.where(zeta == 0.0, 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(active, c, 1.0)
            s = np.where(active, s, 0.0)
            work[:, p], work[:, q] = c * ap - s * aq, s * ap + c * aq
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if residual <= OFF_TOL:
            break
    else:
        raise ConvergenceError("jacobi svd", MAX_SWEEPS, residual)

    sigma = np.sqrt(np.einsum("ij,ij->j", work, work))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[:, order]
    v = v[:, order]
    tiny = max(m, n) * _EPS * (sigma[0] if sigma.size else 0.0)
    valid = sigma > tiny
    u = np.zeros((m, n))
    u[:, valid] = work[:, valid] / sigma[valid]
    if not np.all(valid):
        u = _complete_columns(u, valid)
    return SvdFactors(u=u, singular_values=sigma, vt=v.T.copy())


def svd(m) -> SvdFactors:
    """Thin SVD ``m = u @ diag(s) @ vt`` with k = min(rows, cols).

    Signs are fixed so that the first clearly nonzero entry of each row of
    ``vt`` is positive; ``u`` follows.
    """
    m = as_matrix(m)
    rows, cols = m.shape
    if rows >= cols:
        f = _jacobi_svd_tall(m)
        u, s, vt = f.u, f.singular_values, f.vt
    else:
        f = _jacobi_svd_tall(m.T)
        u, s, vt = f.vt.T.copy(), f.singular_values, f.u.T.copy()
    signs = _orient_rows(vt)
    vt = vt * signs[:, None]
    u = u * signs[None, :]
    return SvdFactors(u=u, singular_values=s, vt=vt)


def sym_eigen(m, sym_tol: float = 1e-10) -> EigenFactors:
    """Eigendecomposition of a real symmetric matrix by cyclic Jacobi rotations."""
    m = as_matrix(m)
    n, n2 = m.shape
    if n != n2:
        raise ShapeMismatchError("sym_eigen", m.shape, m.shape[::-1])
    asym = float(np.max(np.abs(m - m.T)))
    if asym > sym_tol:
        raise NotSymmetricError(asym)
    a = 0.5 * (m + m.T)
    v = np.eye(n)
    rounds = round_robin_pairs(n)
    fro = float(np.sqrt(np.sum(a * a)))
    off = 0.0
    for _ in range(MAX_SWEEPS):
        offdiag = a - np.diag(np.diag(a))
        off = float(np.sqrt(np.sum(offdiag * offdiag)))
        if fro == 0.0 or off <= OFF_TOL * fro:
            break
        for p, q in rounds:
            apq = a[p, q]
            active = np.abs(apq) > (_EPS * _EPS) * fro
            if not np.any(active):
                continue
            g = np.where(active, apq, 1.0)
            tau = (a[q, q] - a[p, p]) / (2.0 * g)
            t = np.sign(tau) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
            t = np.where(tau == 0.0, 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(active, c, 1.0)
            s = np.where(active, s, 0.0)
            # a <- J^T a J, columns then rows
            cp, cq = a[:, p], a[:, q]
            a[:, p], a[:, q] = c * cp - s * cq, s * cp + c * cq
            rp, rq = a[p, :], a[q, :]
            a[p, :], a[q, :] = c[:, None] * rp - s[:, None] * rq, s[:, None] * rp + c[:, None] * rq
            a = 0.5 * (a + a.T)
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
    else:
        raise ConvergenceError("jacobi eigensolver", MAX_SWEEPS, off)

    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    w = w[order]
    v = v[:, order]
    signs = _orient_rows(v.T)
    return EigenFactors(eigenvalues=w, eigenvectors=v * signs[None, :])


def explained_variance_counts(values, threshold: float) -> int:
    """Smallest k whose leading ``values`` reach ``threshold`` of the total.

    Pass squared singular values for SVD energy, or covariance eigenvalues
    for PCA.
    """
    vals = np.asarray(values, dtype=np.float64).ravel()
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    if vals.size == 0 or np.any(vals < 0) or not np.all(np.isfinite(vals)):
        raise ValueError("values must be a non-empty, finite, non-negative vector")
    if np.any(np.diff(vals) > 0):
        raise ValueError("values must be sorted non-increasing")
    curve = explained_variance_curve(vals)
    return int(np.argmax(curve >= threshold)) + 1


def explained_variance_curve(values) -> np.ndarray:
    """Cumulative explained fraction after 1, 2, ... components; ends at exactly 1."""
    vals = np.asarray(values, dtype=np.float64).ravel()
    cum = np.cumsum(vals)
    if cum[-1] <= 0.0:
        raise ValueError("explained variance is undefined for an all-zero spectrum")
    return cum / cum[-1]
