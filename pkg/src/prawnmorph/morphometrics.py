"""Pairwise landmark distances, trait extraction, correlations and PCA.

Landmark indices are 1-based throughout (matching the anatomical numbering of
the 12-point scheme); arrays are 0-based internally.  The 66 pairwise
distances are ordered lexicographically over (i, j) with 1 <= i < j <= 12 and
labelled ``d_i_j``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, MetricUndefinedError, ShapeError

__all__ = [
    "N_LANDMARKS",
    "PAIRS",
    "TRAIT_PAIRS",
    "TRAIT_NAMES",
    "TraitVector",
    "PcaResult",
    "pair_labels",
    "distance_matrix",
    "extract_traits",
    "correlation_matrix",
    "pca",
    "jacobi_eigh",
]

N_LANDMARKS = 12

# Lexicographic pair order (1-based), 12*11/2 = 66 entries.
PAIRS: tuple[tuple[int, int], ...] = tuple(
    (i, j) for i in range(1, N_LANDMARKS + 1) for j in range(i + 1, N_LANDMARKS + 1)
)

# The five traits and their landmark pairs: total length spans antennal-scale
# tip to tail tip, body length stops at the tail's anterior point, and the
# three ASH traits are dorsal-to-ventral heights of abdominal segments.
TRAIT_PAIRS: dict[str, tuple[int, int]] = {
    "total_length": (1, 3),
    "body_length": (1, 2),
    "first_ash": (7, 8),
    "third_ash": (9, 10),
    "last_ash": (11, 12),
}
TRAIT_NAMES: tuple[str, ...] = tuple(TRAIT_PAIRS)


def pair_labels() -> list[str]:
    """Column labels 'd_1_2' ... 'd_11_12' in distance-matrix order."""
    return [f"d_{i}_{j}" for i, j in PAIRS]


def _check_landmarks(lm) -> np.ndarray:
    lm = np.asarray(lm, dtype=np.float64)
    if lm.shape != (N_LANDMARKS, 2):
        raise ShapeError(f"expected {N_LANDMARKS} (x, y) landmarks, got shape {lm.shape}")
    return lm


def distance_matrix(lm) -> np.ndarray:
    """All 66 pairwise Euclidean distances, lexicographic pair order."""
    lm = _check_landmarks(lm)
    i = np.array([p[0] - 1 for p in PAIRS])
    j = np.array([p[1] - 1 for p in PAIRS])
    return np.sqrt(np.sum(np.square(lm[i] - lm[j]), axis=1))


@dataclass
class TraitVector:
    """The five measured traits, in millimetres."""

    total_length: float
    body_length: float
    first_ash: float
    third_ash: float
    last_ash: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in TRAIT_NAMES])


def extract_traits(lm, mm_per_px: float) -> TraitVector:
    """Named pair distances scaled from pixels to millimetres."""
    if mm_per_px <= 0:
        raise ConfigError(f"mm_per_px must be positive, got {mm_per_px}")
    lm = _check_landmarks(lm)
    values = {}
    for name, (i, j) in TRAIT_PAIRS.items():
        values[name] = float(np.linalg.norm(lm[i - 1] - lm[j - 1])) * mm_per_px
    return TraitVector(**values)


def correlation_matrix(traits) -> np.ndarray:
    """Pearson correlation between the five traits over >= 3 specimens."""
    data = np.array([t.as_array() if isinstance(t, TraitVector) else t for t in traits],
                    dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 3:
        raise ContractError(f"need at least 3 specimens, got {data.shape}")
    centered = data - data.mean(axis=0)
    norms = np.sqrt(np.sum(np.square(centered), axis=0))
    if (norms == 0).any():
        dead = [TRAIT_NAMES[i] for i in np.flatnonzero(norms == 0)]
        raise MetricUndefinedError(f"correlation undefined for constant trait(s): {dead}")
    c = (centered.T @ centered) / np.outer(norms, norms)
    c = np.clip(c, -1.0, 1.0)
    np.fill_diagonal(c, 1.0)
    return c


def jacobi_eigh(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps stop when the off-diagonal Frobenius norm drops below
    ``tol * ||A||_F`` (relative, since an absolute 1e-12 is unreachable in
    float64 once eigenvalues are large).  Returns (eigenvalues, column
    eigenvectors), unsorted.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ShapeError(f"jacobi_eigh needs a square matrix, got {a.shape}")
    v = np.eye(n)
    norm = np.linalg.norm(a)
    if norm == 0.0:
        return np.zeros(n), v
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.square(a)) - np.sum(np.square(np.diag(a))))
        if off <= tol * norm:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    return np.diag(a).copy(), v


@dataclass
class PcaResult:
    """Principal components of a specimens x features matrix.

    ``loadings`` holds one orthonormal column per retained component;
    ``sdev``, ``proportion`` and ``cumulative`` cover the full spectrum so
    proportions always sum to 1.  ``scores`` are the centered data projected
    onto the retained components.  ``mean`` is the feature mean that was
    subtracted.
    """

    loadings: np.ndarray
    sdev: np.ndarray
    proportion: np.ndarray
    cumulative: np.ndarray
    scores: np.ndarray
    mean: np.ndarray

    @property
    def n_components(self) -> int:
        return self.loadings.shape[1]

    def transform(self, data: np.ndarray) -> np.ndarray:
        """Project new rows onto the retained components."""
        return (np.asarray(data, dtype=np.float64) - self.mean) @ self.loadings


def pca(data, n_components: int | None = None) -> PcaResult:
    """Covariance PCA (mean-centered, not variance-scaled).

    Components are sorted by descending variance; each eigenvector's sign is
    fixed so its largest-magnitude loading is positive.  Raw distances are
    deliberately left unstandardized so the size component dominates.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 2:
        raise ContractError(f"pca needs >= 2 specimens, got shape {data.shape}")
    m, p = data.shape
    if n_components is None:
        n_components = min(m - 1, p)
    if not 1 <= n_components <= p:
        raise ConfigError(f"n_components must be in [1, {p}], got {n_components}")
    mean = data.mean(axis=0)
    centered = data - mean
    cov = (centered.T @ centered) / (m - 1)
    eigvals, eigvecs = jacobi_eigh(cov)
    eigvals = np.maximum(eigvals, 0.0)  # covariance is PSD up to round-off
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    for c in range(p):
        col = eigvecs[:, c]
        if col[np.argmax(np.abs(col))] < 0:
            eigvecs[:, c] = -col
    total = eigvals.sum()
    if total == 0.0:
        raise ContractError("pca undefined: all specimens are identical")
    proportion = eigvals / total
    return PcaResult(
        loadings=eigvecs[:, :n_components],
        sdev=np.sqrt(eigvals),
        proportion=proportion,
        cumulative=np.cumsum(proportion),
        scores=centered @ eigvecs[:, :n_components],
        mean=mean,
    )
