"""
Dense linear algebra, Adam and gradient checking shared by every engine.
All functions are pure: inputs are never modified, results are fresh arrays.
"""
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from src.errors import NumericsError
from src.models.base import AdamState

PINV_RTOL = 1e-12
SPD_FLOOR = 1e-300
SYMMETRY_TOL = 1e-9
# LAPACK bidiagonal QR stops after this many sweeps per k² (k = min dimension)
SVD_SWEEPS = 6


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """
    PCG64 stream for (seed, *keys). numpy guarantees the PCG64 bit stream and
    SeedSequence mixing are identical across platforms, so equal keys give equal draws.
    """
    seq = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(seq))


def _as_matrix(M, op: str) -> np.ndarray:
    arr = np.array(M, dtype=float, copy=True)
    if arr.ndim != 2:
        raise ValueError(f"{op}: expected a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{op}: matrix has non-finite entries")
    return arr


def svd(M) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD, singular values descending. A gesdd failure is retried once on Mᵀ."""
    arr = _as_matrix(M, "svd")
    try:
        U, S, Vt = np.linalg.svd(arr, full_matrices=False)
    except np.linalg.LinAlgError:
        try:
            V, S, Ut = np.linalg.svd(arr.T, full_matrices=False)
        except np.linalg.LinAlgError as exc:
            cap = SVD_SWEEPS * min(arr.shape) ** 2
            raise NumericsError(
                f"svd: LAPACK gesdd did not converge on a {arr.shape} matrix within its iteration cap "
                f"of {cap} QR sweeps ({SVD_SWEEPS}·k²), 2 attempts (M and Mᵀ)") from exc
        U, Vt = Ut.T, V.T
    return U, S, Vt


def pinv(M, ridge: float = 0.0) -> np.ndarray:
    """
    (MᵀM + ridge·I)⁻¹Mᵀ for ridge > 0, otherwise the Moore-Penrose inverse with
    singular values below 1e-12·max dropped.
    """
    if ridge < 0:
        raise ValueError("pinv: ridge must be >= 0")
    arr = _as_matrix(M, "pinv")
    rows, cols = arr.shape
    if ridge > 0:
        gram = arr.T @ arr + ridge * np.eye(cols)
        return np.linalg.solve(gram, arr.T)
    if arr.size == 0:
        return np.zeros((cols, rows))
    U, S, Vt = svd(arr)
    keep = S > PINV_RTOL * S[0] if S.size else S > 0
    inv_s = np.zeros_like(S)
    inv_s[keep] = 1.0 / S[keep]
    return (Vt.T * inv_s) @ U.T


def check_symmetric(M, op: str) -> np.ndarray:
    arr = _as_matrix(M, op)
    if arr.shape[0] != arr.shape[1]:
        raise ValueError(f"{op}: matrix must be square, got {arr.shape}")
    scale = max(1.0, float(np.max(np.abs(arr), initial=0.0)))
    if np.max(np.abs(arr - arr.T), initial=0.0) > SYMMETRY_TOL * scale:
        raise ValueError(f"{op}: matrix is not symmetric")
    return 0.5 * (arr + arr.T)


def eigh(M) -> Tuple[np.ndarray, np.ndarray]:
    """Symmetric eigendecomposition, eigenvalues ascending."""
    arr = check_symmetric(M, "eigh")
    try:
        return np.linalg.eigh(arr)
    except np.linalg.LinAlgError as exc:
        raise NumericsError(f"eigh: LAPACK syevd did not converge on a {arr.shape} matrix ({exc})") from exc


def cond_spd(M) -> float:
    """λ_max/λ_min of a symmetric matrix; +inf once λ_min <= 1e-300."""
    vals, _ = eigh(M)
    if vals.size == 0:
        return 1.0
    lam_min, lam_max = float(vals[0]), float(vals[-1])
    if lam_min <= SPD_FLOOR:
        return float("inf")
    return lam_max / lam_min


def power_iteration(M, iterations: int = 50, rng: Optional[np.random.Generator] = None) -> float:
    """
    Largest eigenvalue estimate of a symmetric PSD matrix (Rayleigh quotient) from a
    seeded random start vector. The estimate never exceeds λ_max.
    """
    arr = np.asarray(M, dtype=float)
    if arr.size == 0:
        return 0.0
    rng = make_rng(0, 7) if rng is None else rng
    v = rng.standard_normal(arr.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iterations):
        w = arr @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        lam = float(v @ arr @ v)
    return lam


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> Tuple[np.ndarray, AdamState]:
    """Bias-corrected Adam update; returns new params and a new state."""
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape or state.m.shape != params.shape or state.v.shape != params.shape:
        raise ValueError(
            f"adam_step: shape mismatch params={params.shape} grads={grads.shape} "
            f"m={state.m.shape} v={state.v.shape}")
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grads * grads)
    m_hat = m / (1.0 - state.beta1 ** step)
    v_hat = v / (1.0 - state.beta2 ** step)
    new_params = params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps_adam)
    return new_params, state.model_copy(update={"step": step, "m": m, "v": v})


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-6,
                     indices: Sequence[int] = None) -> np.ndarray:
    """
    Central differences (f(x+h·eᵢ) - f(x-h·eᵢ)) / 2h.
    `indices` restricts the check to a subset of coordinates (others stay 0).
    """
    x = np.array(x, dtype=float, copy=True)
    grad = np.zeros_like(x)
    coords = range(x.size) if indices is None else indices
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(f(x))
        flat[i] = orig - h
        f_minus = float(f(x))
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericsError(f"finite_diff_grad: non-finite f value at index {i}")
        out[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def as_controls(controls, n_u: int) -> np.ndarray:
    """(L, n_u) control matrix; autonomous systems (n_u = 0) must pass an (L, 0) array."""
    arr = np.asarray(controls, dtype=float)
    if arr.ndim == 2:
        if arr.shape[1] != n_u:
            raise ValueError(f"controls have {arr.shape[1]} columns, expected n_u={n_u}")
        return arr
    if n_u == 0:
        raise ValueError("controls of an autonomous system must be an (L, 0) array")
    return arr.reshape(-1, n_u)
