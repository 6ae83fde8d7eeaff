"""Common-basis extraction from an ensemble of fine-tuned attention blocks."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .linalg import as_matrix

DEFAULT_THRESHOLDS = (0.9, 0.95, 0.99, 0.999, 1.0)
VARIANCE_HEADER = ("method", "threshold", "count")
CURVE_HEADER = ("method", "components", "explained")


class ExtractionError(ValueError):
    pass


@dataclass(frozen=True)
class StackedAttentionWeights:
    """Q, K and V projections of one attention block, stacked as [W_Q; W_K; W_V]."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    def __post_init__(self):
        shapes = {as_matrix(w).shape for w in (self.w_q, self.w_k, self.w_v)}
        if len(shapes) != 1:
            raise ExtractionError(f"Q/K/V blocks must share a shape, got {sorted(shapes)}")

    @property
    def stacked(self) -> np.ndarray:
        return np.vstack([self.w_q, self.w_k, self.w_v])

    @property
    def shape(self) -> tuple[int, int]:
        return self.w_q.shape

    @classmethod
    def from_stacked(cls, w) -> "StackedAttentionWeights":
        w = as_matrix(w)
        if w.shape[0] % 3:
            raise ExtractionError(f"stacked matrix rows ({w.shape[0]}) not divisible by 3")
        d = w.shape[0] // 3
        return cls(w[:d].copy(), w[d : 2 * d].copy(), w[2 * d :].copy())


@dataclass
class Ensemble:
    members: list[StackedAttentionWeights]
    source_labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            raise ExtractionError("ensemble must have at least one member")
        if not self.source_labels:
            self.source_labels = [f"member{i}" for i in range(len(self.members))]
        if len(self.source_labels) != len(self.members):
            raise ExtractionError("one source label per member is required")
        if len(set(self.source_labels)) != len(self.source_labels):
            raise ExtractionError("source labels must be unique")

    def __len__(self):
        return len(self.members)


@dataclass(frozen=True)
class CommonBasis:
    b: np.ndarray  # (rank, d_k)
    rank: int
    method: str
    variance_captured: float


def merge_ensemble(e: Ensemble) -> np.ndarray:
    """Entrywise mean of the members' stacked weights.

    Members are summed in sorted-label order so the result does not depend on
    how the ensemble was assembled.
    """
    ref_label = e.source_labels[0]
    ref_shape = e.members[0].stacked.shape
    for label, member in zip(e.source_labels, e.members):
        if member.stacked.shape != ref_shape:
            raise ExtractionError(
                f"member {label!r} has stacked shape {member.stacked.shape}, "
                f"expected {ref_shape} (from {ref_label!r})"
            )
    order = sorted(range(len(e)), key=lambda i: e.source_labels[i])
    total = np.zeros(ref_shape)
    for i in order:
        total = total + e.members[i].stacked
    return total / len(e)


def _check_rank(w0: np.ndarray, r: int) -> None:
    limit = min(w0.shape)
    if not isinstance(r, (int, np.integer)) or not 1 <= r <= limit:
        raise ExtractionError(f"rank must be an integer in [1, {limit}], got {r!r}")
    if r > limit / 2:
        warnings.warn(
            f"rank {r} exceeds half of min{w0.shape}; the adapter is no longer low-rank",
            stacklevel=3,
        )


def extract_common_basis_svd(w0, r: int) -> CommonBasis:
    """Leading ``r`` right singular vectors of ``w0``, shaped (r, d_k)."""
    w0 = as_matrix(w0)
    _check_rank(w0, r)
    f = linalg.svd(w0)
    energy = f.singular_values**2
    total = float(np.sum(energy))
    captured = float(np.sum(energy[:r]) / total) if total > 0 else 0.0
    return CommonBasis(b=f.vt[:r].copy(), rank=int(r), method="svd", variance_captured=captured)


def covariance(w0) -> np.ndarray:
    """Sample covariance of the rows of ``w0`` (rows are the data points)."""
    w0 = as_matrix(w0)
    if w0.shape[0] < 2:
        raise ExtractionError("covariance needs at least two rows")
    centered = w0 - w0.mean(axis=0, keepdims=True)
    return centered.T @ centered / (w0.shape[0] - 1)


def pca_spectrum(w0) -> linalg.EigenFactors:
    cov = covariance(w0)
    return linalg.sym_eigen(0.5 * (cov + cov.T))


def _effective_rank(eigenvalues: np.ndarray) -> int:
    if eigenvalues.size == 0 or eigenvalues[0] <= 0:
        return 0
    tol = eigenvalues.size * np.finfo(np.float64).eps * eigenvalues[0]
    return int(np.sum(eigenvalues > tol))


def extract_common_basis_pca(w0, r: int) -> CommonBasis:
    """Leading ``r`` principal axes of the rows of ``w0``, shaped (r, d_k).

    Used for the SVD-versus-PCA variance comparison; it is not offered as an
    adapter initializer.
    """
    w0 = as_matrix(w0)
    _check_rank(w0, r)
    eig = pca_spectrum(w0)
    eff = _effective_rank(eig.eigenvalues)
    if r > eff:
        raise ExtractionError(f"rank {r} exceeds the effective covariance rank {eff}")
    vals = np.clip(eig.eigenvalues, 0.0, None)
    captured = float(np.sum(vals[:r]) / np.sum(vals))
    return CommonBasis(
        b=eig.eigenvectors[:, :r].T.copy(), rank=int(r), method="pca", variance_captured=captured
    )


def spectra(w0) -> dict[str, np.ndarray]:
    """Energy spectra used for explained variance: squared singular values and
    covariance eigenvalues (negative round-off clipped to zero)."""
    w0 = as_matrix(w0)
    sv = linalg.svd(w0).singular_values
    eig = pca_spectrum(w0).eigenvalues if w0.shape[0] > 1 else np.zeros(1)
    return {"svd": sv**2, "pca": np.clip(eig, 0.0, None)}


def variance_report(w0, thresholds=DEFAULT_THRESHOLDS) -> list[dict]:
    """Component counts needed by SVD and by PCA to reach each threshold."""
    rows = []
    for method, vals in spectra(w0).items():
        if not np.any(vals > 0):
            raise ExtractionError(f"{method} spectrum is identically zero")
        for t in thresholds:
            rows.append(
                {"method": method, "threshold": float(t), "count": linalg.explained_variance_counts(vals, t)}
            )
    return rows


def variance_curves(w0) -> list[dict]:
    rows = []
    for method, vals in spectra(w0).items():
        for k, frac in enumerate(linalg.explained_variance_curve(vals), start=1):
            rows.append({"method": method, "components": k, "explained": float(frac)})
    return rows
