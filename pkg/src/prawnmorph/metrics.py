"""Evaluation measures: keypoint distance, KLD/JSD, OKS, AP/AR, regression.

All divergences use the natural logarithm with 0*log(0) := 0.  The keypoint
distance is the square-rooted form sqrt(sum_i |g_i - p_i|^2); the
Jensen-Shannon divergence is likewise the square-rooted form
sqrt((KLD(P||M) + KLD(Q||M)) / 2) with M the pointwise mean, so its ceiling is
sqrt(ln 2).

AP/AR use a single-instance regime: every image carries exactly one
prediction, so at a threshold t precision equals recall equals the fraction
of images whose OKS reaches t, and AP equals AR at every threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MetricUndefinedError, ShapeError

__all__ = [
    "OksConfig",
    "EvalReport",
    "OKS_THRESHOLDS",
    "euclidean_distance",
    "kld",
    "jsd",
    "oks",
    "object_scale",
    "ap_ar",
    "regression_metrics",
    "mad",
]

# OKS = .50:.05:.95, built from integers so the grid is bit-reproducible.
OKS_THRESHOLDS: tuple[float, ...] = tuple((50 + 5 * i) / 100 for i in range(10))

_DIST_TOL = 1e-6  # distributions must sum to 1 within this


def euclidean_distance(g, p) -> float:
    """sqrt(sum_i |g_i - p_i|^2) over paired points (n, 2) or vectors (n,)."""
    g = np.asarray(g, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if g.shape != p.shape:
        raise ShapeError(f"euclidean_distance: shapes differ, {g.shape} vs {p.shape}")
    return float(np.sqrt(np.sum(np.square(g - p))))


def _check_distribution(a: np.ndarray, name: str) -> None:
    if abs(a.sum() - 1.0) > _DIST_TOL:
        raise MetricUndefinedError(f"{name} must sum to 1 (got {a.sum():.9f})")
    if (a < 0).any():
        raise MetricUndefinedError(f"{name} has negative mass")


def kld(p, q) -> float:
    """Kullback-Leibler divergence sum_i p_i * log(p_i / q_i), natural log."""
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    if p.shape != q.shape:
        raise ShapeError(f"kld: supports differ, {p.shape} vs {q.shape}")
    _check_distribution(p, "P")
    _check_distribution(q, "Q")
    mask = p > 0
    if (q[mask] == 0).any():
        raise MetricUndefinedError("KLD is infinite: Q has zero mass where P > 0")
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def jsd(p, q) -> float:
    """Square-rooted Jensen-Shannon divergence; 0 iff P == Q, max sqrt(ln 2)."""
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    m = 0.5 * (p + q)
    inner = 0.5 * (kld(p, m) + kld(q, m))
    return float(np.sqrt(max(inner, 0.0)))


@dataclass
class OksConfig:
    """Falloff constants and scale rule for object keypoint similarity.

    ``k`` holds one positive falloff constant per keypoint (the prawn set has
    no published values, so all default to 0.1).  ``visibility`` flags
    keypoints into or out of the average.  The object scale defaults to the
    square root of the ground-truth landmark bounding-box area, floored at
    1 px^2 so degenerate boxes keep it positive.
    """

    k: np.ndarray = field(default_factory=lambda: np.full(12, 0.1))
    visibility: np.ndarray = field(default_factory=lambda: np.ones(12, dtype=bool))

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=np.float64)
        self.visibility = np.asarray(self.visibility, dtype=bool)
        if (self.k <= 0).any():
            raise MetricUndefinedError("OKS falloff constants must be positive")


def object_scale(gt) -> float:
    """sqrt of the landmark bounding-box area, floored at 1 px^2."""
    gt = np.asarray(gt, dtype=np.float64)
    spans = gt.max(axis=0) - gt.min(axis=0)
    return float(np.sqrt(max(spans[0] * spans[1], 1.0)))


def oks(pred, gt, cfg: OksConfig | None = None, scale: float | None = None) -> float:
    """Mean of exp(-d_i^2 / (2 s^2 k_i^2)) over visible keypoints."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"oks: shapes differ, {pred.shape} vs {gt.shape}")
    if cfg is None:
        cfg = OksConfig(k=np.full(len(gt), 0.1), visibility=np.ones(len(gt), dtype=bool))
    vis = cfg.visibility
    if not vis.any():
        raise MetricUndefinedError("OKS undefined: no visible keypoints")
    s = object_scale(gt) if scale is None else float(scale)
    if s <= 0:
        raise MetricUndefinedError(f"OKS undefined: object scale {s} <= 0")
    d2 = np.sum(np.square(pred - gt), axis=1)
    sim = np.exp(-d2[vis] / (2.0 * s * s * np.square(cfg.k[vis])))
    return float(sim.mean())


@dataclass
class EvalReport:
    """AP/AR block over the standard threshold sweep plus per-image OKS."""

    ap: float
    ap50: float
    ap75: float
    ar: float
    ar50: float
    ar75: float
    per_image_oks: list[float]


def ap_ar(oks_values, thresholds: tuple[float, ...] = OKS_THRESHOLDS) -> EvalReport:
    """Average precision/recall of one-prediction-per-image OKS values."""
    vals = np.asarray(list(oks_values), dtype=np.float64)
    if vals.size == 0:
        raise MetricUndefinedError("ap_ar needs at least one OKS value")
    fractions = [float((vals >= t).mean()) for t in thresholds]
    mean = float(np.mean(fractions))
    at = dict(zip(thresholds, fractions))
    return EvalReport(
        ap=mean, ap50=at[0.50], ap75=at[0.75],
        ar=mean, ar50=at[0.50], ar75=at[0.75],
        per_image_oks=[float(v) for v in vals],
    )


def regression_metrics(pred, true) -> tuple[float, float, float]:
    """(MAE, MSE, R^2) with R^2 = 1 - SSres/SStot."""
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape or pred.size == 0:
        raise ShapeError(f"regression_metrics: bad shapes {pred.shape} vs {true.shape}")
    err = pred - true
    mae = float(np.mean(np.abs(err)))
    mse = float(np.mean(np.square(err)))
    ss_tot = float(np.sum(np.square(true - true.mean())))
    if ss_tot == 0.0:
        raise MetricUndefinedError("R^2 undefined: true values are constant")
    r2 = 1.0 - float(np.sum(np.square(err))) / ss_tot
    return mae, mse, r2


def mad(x, y) -> float:
    """Mean absolute difference (1/n) * sum_i |x_i - y_i|."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"mad: shapes differ, {x.shape} vs {y.shape}")
    return float(np.mean(np.abs(x - y)))
