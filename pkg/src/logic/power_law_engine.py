"""
Scaling-law fitting ε(D) = A·D^(-α) + C and the grouped fits of a results grid.

The fit minimises log-space residuals Σ (log ε_i - log(A·D_i^(-α) + C))²:
a grid over C with closed-form log-linear regression for (log A, α) at each C,
then damped Gauss-Newton on (log A, α, c) with C = min ε · sigmoid(c).
"""
import logging
import math
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
import pandas as pd

from src.errors import FitError
from src.models.base import ExperimentRecord, LossVariant, PowerLawFit

logger = logging.getLogger(__name__)

C_GRID_POINTS = 40
C_GRID_LOW = 1e-3
C_GRID_HIGH = 0.999
GN_STEPS = 200
GN_BACKTRACK = 30
SCHEDULE_FLOOR = 32
LATENT_FIT_MIN_M = 10_000


def coupled_schedule(coeff: float, n_values: Iterable[int]) -> List[Tuple[int, int]]:
    """(n, m) pairs with m = round(coeff·n·ln n), floored at 32."""
    if coeff <= 0:
        raise ValueError("coupled_schedule: coeff must be > 0")
    out = []
    for n in n_values:
        if n < 2:
            raise ValueError(f"coupled_schedule: n={n} must be >= 2")
        out.append((int(n), max(SCHEDULE_FLOOR, int(round(coeff * n * math.log(n))))))
    return out


def _log_model(theta: np.ndarray, logD: np.ndarray, c_scale: float, with_c: bool):
    """log f and its Jacobian with respect to theta = (log A, α[, c])."""
    log_a, alpha = theta[0], theta[1]
    power = np.exp(log_a - alpha * logD)
    if with_c:
        s = 1.0 / (1.0 + np.exp(-theta[2]))
        C = c_scale * s
    else:
        s, C = 0.0, 0.0
    f = power + C
    J = np.empty((logD.size, theta.size))
    J[:, 0] = power / f
    J[:, 1] = -power * logD / f
    if with_c:
        J[:, 2] = c_scale * s * (1.0 - s) / f
    return np.log(f), J


def _objective(y: np.ndarray, log_f: np.ndarray) -> float:
    r = y - log_f
    return float(r @ r) if np.all(np.isfinite(r)) else float("inf")


def _regress(logD: np.ndarray, y_shift: np.ndarray) -> Tuple[float, float]:
    """Least-squares line y = log A - α·log D."""
    X = np.column_stack([np.ones_like(logD), -logD])
    coef, *_ = np.linalg.lstsq(X, y_shift, rcond=None)
    return float(coef[0]), float(coef[1])


def _gauss_newton(theta: np.ndarray, y: np.ndarray, logD: np.ndarray, c_scale: float, with_c: bool):
    log_f, J = _log_model(theta, logD, c_scale, with_c)
    best = _objective(y, log_f)
    for _ in range(GN_STEPS):
        r = y - log_f
        JtJ = J.T @ J
        damping = 1e-12 * max(float(np.trace(JtJ)), 1e-300)
        try:
            step = np.linalg.solve(JtJ + damping * np.eye(theta.size), J.T @ r)
        except np.linalg.LinAlgError:
            break
        scale = 1.0
        improved = False
        for _ in range(GN_BACKTRACK):
            cand = theta + scale * step
            cand_log_f, cand_J = _log_model(cand, logD, c_scale, with_c)
            value = _objective(y, cand_log_f)
            if value < best:
                theta, log_f, J, best = cand, cand_log_f, cand_J, value
                improved = True
                break
            scale *= 0.5
        if not improved or np.max(np.abs(scale * step)) < 1e-15:
            break
    return theta, best


def fit_power_law(points: Sequence[Tuple[float, float]]) -> PowerLawFit:
    pts = sorted((float(d), float(e)) for d, e in points)
    if len({d for d, _ in pts}) < 3:
        raise ValueError("fit_power_law: need at least 3 distinct D values")
    D = np.array([d for d, _ in pts])
    eps = np.array([e for _, e in pts])
    if np.any(D <= 0) or np.any(eps <= 0) or not np.all(np.isfinite(eps)):
        raise ValueError("fit_power_law: D and eps must be positive and finite")

    y, logD = np.log(eps), np.log(D)
    if np.ptp(y) == 0.0:
        logger.warning("fit_power_law: constant eps=%.4e, degenerate fit", eps[0])
        return PowerLawFit(A=0.0, alpha=0.0, C=float(eps[0]), r2=0.0, points=pts, degenerate=True)

    eps_min = float(eps.min())
    grid = np.concatenate([[0.0], np.logspace(math.log10(eps_min * C_GRID_LOW),
                                              math.log10(eps_min * C_GRID_HIGH), C_GRID_POINTS)])
    best_value, best_C, best_line = float("inf"), 0.0, (0.0, 0.0)
    for C in grid:
        log_a, alpha = _regress(logD, np.log(eps - C))
        value = _objective(y, np.log(np.exp(log_a - alpha * logD) + C))
        if value < best_value:
            best_value, best_C, best_line = value, float(C), (log_a, alpha)

    log_a, alpha = best_line
    if best_C == 0.0:
        theta, value = _gauss_newton(np.array([log_a, alpha]), y, logD, eps_min, with_c=False)
        C = 0.0
    else:
        s = best_C / eps_min
        theta, value = _gauss_newton(np.array([log_a, alpha, math.log(s / (1.0 - s))]), y, logD, eps_min, True)
        C = eps_min / (1.0 + math.exp(-theta[2]))
    if value < best_value:
        log_a, alpha, best_value = float(theta[0]), float(theta[1]), value
    else:
        C = best_C
    if not math.isfinite(alpha):
        raise FitError(f"fit_power_law: non-finite exponent on {len(pts)} points")

    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - best_value / ss_tot
    return PowerLawFit(A=math.exp(log_a), alpha=alpha, C=C, r2=r2, points=pts)


# ---------------------------------------------------------------- grouped fits

def records_frame(records: Sequence[ExperimentRecord]) -> pd.DataFrame:
    df = pd.DataFrame([r.model_dump() for r in records])
    if df.empty:
        return df
    df["variant"] = df["variant"].map(lambda v: LossVariant(v).value)
    df["eps_test"] = pd.to_numeric(df["eps_test"], errors="coerce")
    df["coeff"] = pd.to_numeric(df["coeff"], errors="coerce")
    return df[(df["status"] == "ok") & np.isfinite(df["eps_test"]) & (df["eps_test"] > 0)]


def _fit_entry(fit: PowerLawFit) -> dict:
    return {"A": fit.A, "alpha": fit.alpha, "C": fit.C, "r2": fit.r2,
            "n_points": fit.n_points, "degenerate": fit.degenerate}


def _mean_entry(entries: List[dict]) -> dict:
    return {
        "A": float(np.mean([e["A"] for e in entries])),
        "alpha": float(np.mean([e["alpha"] for e in entries])),
        "C": float(np.mean([e["C"] for e in entries])),
        "r2": float(np.mean([e["r2"] for e in entries])),
        "n_points": int(sum(e["n_points"] for e in entries)),
        "n_fits": len(entries),
    }


def _fit_over(df: pd.DataFrame, outer: List[str], inner: List[str], x_col: str, tag: str) -> Dict[str, dict]:
    """Per (outer + inner) group fit eps over x_col, then the mean of the fits per outer group."""
    fits: Dict[str, dict] = {}
    if df.empty:
        return fits
    for outer_key, outer_df in df.groupby(outer, sort=True):
        outer_key = outer_key if isinstance(outer_key, tuple) else (outer_key,)
        prefix = "|".join(str(v) for v in outer_key) + f"|{tag}"
        entries = []
        for inner_key, group in outer_df.groupby(inner, sort=True):
            inner_key = inner_key if isinstance(inner_key, tuple) else (inner_key,)
            # seed-mean per resource value keeps one point per D
            points = group.groupby(x_col)["eps_test"].mean()
            label = prefix + "|" + "|".join(f"{k}={v}" for k, v in zip(inner, inner_key))
            if points.size < 3:
                logger.info("fit %s skipped: %d distinct %s values", label, points.size, x_col)
                continue
            entry = _fit_entry(fit_power_law(list(zip(points.index.astype(float), points.values))))
            fits[label] = entry
            entries.append(entry)
        if entries:
            fits[prefix + "|mean"] = _mean_entry(entries)
    return fits


def fit_sample_scaling(records: Sequence[ExperimentRecord]) -> Dict[str, dict]:
    """α_m: one fit over m per (env, variant, n_mult, seed), averaged per (env, variant)."""
    df = records_frame(records)
    if not df.empty:
        df = df[df["coeff"].isna()]
    return _fit_over(df, ["env", "variant"], ["n_mult", "seed"], "m", "m")


def fit_latent_scaling(records: Sequence[ExperimentRecord], min_m: int = LATENT_FIT_MIN_M) -> Dict[str, dict]:
    """α_n: one fit over n per (env, variant, m, seed) using only m >= min_m, averaged per (env, variant)."""
    df = records_frame(records)
    if not df.empty:
        df = df[df["coeff"].isna() & (df["m"] >= min_m)]
    return _fit_over(df, ["env", "variant"], ["m", "seed"], "n", "n")


def fit_coupled_scaling(records: Sequence[ExperimentRecord]) -> Dict[str, dict]:
    """Coupled schedule: one fit over n per (env, variant, coeff, seed), averaged per coefficient."""
    df = records_frame(records)
    if not df.empty:
        df = df[df["coeff"].notna()]
    return _fit_over(df, ["env", "variant", "coeff"], ["seed"], "n", "coupled")


def fit_groups(records: Sequence[ExperimentRecord], axis: str = "all") -> Dict[str, dict]:
    """Fits JSON content: {group_key: {A, alpha, C, r2, n_points, ...}}."""
    builders = {"m": fit_sample_scaling, "n": fit_latent_scaling, "coupled": fit_coupled_scaling}
    if axis != "all" and axis not in builders:
        raise ValueError(f"fit_groups: unknown axis '{axis}' (m, n, coupled or all)")
    fits: Dict[str, dict] = {}
    for name, builder in builders.items():
        if axis in ("all", name):
            fits.update(builder(records))
    return dict(sorted(fits.items()))


def variant_improvements(records: Sequence[ExperimentRecord]) -> Dict[str, dict]:
    """
    Per (env, m, n_mult): seed-mean test error and mean |corr| of every variant and the
    percentage change of the error relative to the baseline.
    """
    df = records_frame(records)
    out: Dict[str, dict] = {}
    if df.empty:
        return out
    df = df[df["coeff"].isna()]
    for (env, m, n_mult), cell in df.groupby(["env", "m", "n_mult"], sort=True):
        means = cell.groupby("variant")[["eps_test", "mean_offdiag_corr"]].mean()
        if LossVariant.BASELINE.value not in means.index:
            continue
        base = float(means.loc[LossVariant.BASELINE.value, "eps_test"])
        entry = {}
        for variant, row in means.iterrows():
            entry[variant] = {
                "eps_test": float(row["eps_test"]),
                "mean_offdiag_corr": float(row["mean_offdiag_corr"]),
                "change_pct": 100.0 * (float(row["eps_test"]) - base) / base,
            }
        out[f"{env}|m={m}|n_mult={n_mult}"] = entry
    return out
