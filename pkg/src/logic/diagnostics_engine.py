"""
Conditioning and correlation diagnostics of learned embeddings.

All functions are pure in (model, data); `data` is a Dataset (its test split is used)
or a raw (N, n_x) array of states.
"""
import json
import logging
import os
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from src.errors import DiagnosticsError
from src.logic.numerics import cond_spd, eigh
from src.models.base import DiagnosticsReport

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-18
RELATIVE_RANK_TOL = 1e-12


def _test_states(data) -> np.ndarray:
    states = data.states("test") if hasattr(data, "states") else np.asarray(data, dtype=float)
    return np.atleast_2d(states)


def embed(model, data) -> np.ndarray:
    return np.atleast_2d(model.encode(_test_states(data)))


def degenerate_coordinates(Z: np.ndarray) -> List[int]:
    """Embedding coordinates whose sample variance is at most 1e-18."""
    Z = np.asarray(Z, dtype=float)
    return [int(i) for i in np.flatnonzero(Z.var(axis=0, ddof=1) <= VARIANCE_FLOOR)]


def centered_covariance(Z: np.ndarray) -> np.ndarray:
    Z = np.asarray(Z, dtype=float)
    if Z.shape[0] < 2:
        raise ValueError(f"need at least 2 samples, got {Z.shape[0]}")
    C = Z - Z.mean(axis=0)
    G = C.T @ C / (Z.shape[0] - 1)
    return 0.5 * (G + G.T)


def gram_condition_from_embeddings(Z: np.ndarray) -> Tuple[float, float]:
    """(κ, λ_min) of the centered covariance; κ = +inf for a degenerate or rank-deficient embedding."""
    G = centered_covariance(Z)
    vals, _ = eigh(G)
    lam_min, lam_max = float(vals[0]), float(vals[-1])
    flat = degenerate_coordinates(Z)
    if flat:
        logger.warning("gram_condition: zero-variance embedding coordinate(s) %s", flat)
        return float("inf"), lam_min
    if lam_max <= 0.0 or lam_min <= RELATIVE_RANK_TOL * lam_max:
        logger.warning("gram_condition: rank-deficient covariance (lambda_min=%.3e, lambda_max=%.3e)",
                       lam_min, lam_max)
        return float("inf"), lam_min
    return lam_max / lam_min, lam_min


def gram_condition(model, data) -> Tuple[float, float]:
    return gram_condition_from_embeddings(embed(model, data))


def control_condition(model) -> float:
    """κ(BᵀB), +inf when B is rank deficient."""
    B = np.asarray(model.B, dtype=float)
    if B.ndim != 2 or B.shape[1] < 1:
        raise ValueError("control_condition: model has no control input")
    M = B.T @ B
    vals, _ = eigh(M)
    if vals[-1] <= 0.0 or vals[0] <= RELATIVE_RANK_TOL * vals[-1]:
        return float("inf")
    return cond_spd(M)


def feature_correlation_from_embeddings(Z: np.ndarray) -> Tuple[np.ndarray, float, List[int]]:
    """
    Pearson correlation of the embedding coordinates. Coordinates with variance
    <= 1e-18 are excluded (their rows/columns are NaN, diagonal kept at 1).
    Returns (corr, mean |off-diagonal|, excluded).
    """
    Z = np.asarray(Z, dtype=float)
    if Z.shape[0] < 2:
        raise ValueError(f"feature_correlation: need at least 2 samples, got {Z.shape[0]}")
    n = Z.shape[1]
    excluded = degenerate_coordinates(Z)
    kept = np.array([i for i in range(n) if i not in excluded], dtype=int)
    if kept.size == 0:
        raise DiagnosticsError("feature_correlation: every embedding coordinate is constant")
    if excluded:
        logger.warning("feature_correlation: excluding constant coordinate(s) %s", excluded)

    C = Z[:, kept] - Z[:, kept].mean(axis=0)
    norms = np.sqrt(np.sum(C * C, axis=0))
    sub = (C.T @ C) / np.outer(norms, norms)
    sub = np.clip(0.5 * (sub + sub.T), -1.0, 1.0)
    np.fill_diagonal(sub, 1.0)

    corr = np.full((n, n), np.nan)
    corr[np.ix_(kept, kept)] = sub
    np.fill_diagonal(corr, 1.0)
    k = kept.size
    mean_abs = float((np.sum(np.abs(sub)) - k) / (k * (k - 1))) if k > 1 else 0.0
    return corr, mean_abs, excluded


def feature_correlation(model, data) -> Tuple[np.ndarray, float]:
    corr, mean_abs, _ = feature_correlation_from_embeddings(embed(model, data))
    return corr, mean_abs


def diagnose(model, data) -> DiagnosticsReport:
    Z = embed(model, data)
    kappa_G, lam_min = gram_condition_from_embeddings(Z)
    corr, mean_abs, excluded = feature_correlation_from_embeddings(Z)
    B = getattr(model, "B", None)
    kappa_BtB: Optional[float] = None
    if B is not None and np.ndim(B) == 2 and np.shape(B)[1] >= 1:
        kappa_BtB = control_condition(model)
    report = DiagnosticsReport(
        kappa_G=kappa_G, lambda_min_G=lam_min, kappa_BtB=kappa_BtB,
        mean_abs_offdiag_corr=mean_abs, correlation=corr.tolist(),
        excluded_coordinates=excluded, degenerate_coordinates=degenerate_coordinates(Z),
    )
    logger.info("diagnose: kappa(G)=%.3e kappa(BtB)=%s mean|corr|=%.4f",
                kappa_G, "n/a" if kappa_BtB is None else f"{kappa_BtB:.3e}", mean_abs)
    return report


def save_report(report: DiagnosticsReport, path: str, corr_csv: Optional[str] = None) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.model_dump(mode="json"), f, indent=2, sort_keys=True)
    if corr_csv:
        corr = np.asarray(report.correlation, dtype=float)
        labels = [f"z{i}" for i in range(corr.shape[0])]
        pd.DataFrame(corr, index=labels, columns=labels).to_csv(corr_csv, float_format="%.17g")
    return path
