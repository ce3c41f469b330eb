"""
Linear MPC on a lifted model (Koopman or EDMD) and the NNDM random-shooting baseline.

The finite-horizon problem
    min_U  Σ_{k=1..H} ‖P z_k - r_k‖²_Q + Σ_{k=0..H-1} u_kᵀ R u_k,   z_{k+1} = A z_k + B u_k,
    u_min <= u_k <= u_max
is condensed into ½ UᵀHU + linᵀU + const over the stacked controls U and solved
with accelerated projected gradient (function-value restart).
"""
import json
import logging
import math
import os
from typing import Callable, List, NamedTuple, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, model_validator

from src.data.environments import env_step
from src.errors import EnvError, MpcError
from src.logic.nndm_engine import NndmModel, nndm_step
from src.logic.numerics import check_symmetric, make_rng, power_iteration
from src.models.base import ClosedLoopResult, EnvSpec, MpcConfig

logger = logging.getLogger(__name__)

LIPSCHITZ_SAFETY = 1.05
POWER_ITERATIONS = 50


class MpcProblem(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    Hess: np.ndarray
    lin: np.ndarray
    const: float = 0.0
    lower: np.ndarray
    upper: np.ndarray
    H: int
    n_u: int
    tol: float = 1e-8
    max_iter: int = 5000

    @model_validator(mode="after")
    def _check(self):
        size = self.H * self.n_u
        if self.Hess.shape != (size, size) or self.lin.shape != (size,):
            raise ValueError(f"Hess/lin must have size {size}")
        if self.lower.shape != (size,) or self.upper.shape != (size,):
            raise ValueError("stacked bounds must have H*n_u entries")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")
        check_symmetric(self.Hess, "MpcProblem")
        return self

    def objective(self, U: np.ndarray) -> float:
        return float(0.5 * U @ self.Hess @ U + self.lin @ U + self.const)

    def project(self, U: np.ndarray) -> np.ndarray:
        return np.clip(U, self.lower, self.upper)

    def kkt_residual(self, U: np.ndarray) -> float:
        if U.size == 0:
            return 0.0
        return float(np.max(np.abs(U - self.project(U - (self.Hess @ U + self.lin)))))


def _prediction_matrices(model, H: int):
    """Free-response maps F_k = A^k and control maps S_k (n × H·n_u) for k = 1..H."""
    A, B = np.asarray(model.A, dtype=float), np.asarray(model.B, dtype=float)
    n, n_u = B.shape
    F = np.empty((H, n, n))
    S = np.zeros((H, n, H * n_u))
    Ak = np.eye(n)
    prev = np.zeros((n, H * n_u))
    for k in range(H):
        Ak = A @ Ak
        F[k] = Ak
        prev = A @ prev
        prev[:, k * n_u:(k + 1) * n_u] += B
        S[k] = prev
    return F, S


def condense(model, x_t: np.ndarray, ref: np.ndarray, cfg: MpcConfig,
             env: Optional[EnvSpec] = None) -> MpcProblem:
    """Eliminates z through the linear recursion from z_t = encode(x_t)."""
    H = cfg.H
    P = np.asarray(model.P, dtype=float)
    n_x = P.shape[0]
    n_u = np.shape(model.B)[1]
    ref = np.asarray(ref, dtype=float).reshape(-1, n_x)
    if len(ref) != H:
        raise ValueError(f"condense: reference window has {len(ref)} rows, horizon H={H}")
    Q, R = cfg.q_matrix(n_x), cfg.r_matrix(n_u)
    z0 = np.asarray(model.encode(x_t), dtype=float)
    F, S = _prediction_matrices(model, H)

    Hess = np.zeros((H * n_u, H * n_u))
    lin = np.zeros(H * n_u)
    const = 0.0
    for k in range(H):
        PS = P @ S[k]
        offset = P @ (F[k] @ z0) - ref[k]
        Hess += 2.0 * PS.T @ Q @ PS
        lin += 2.0 * PS.T @ Q @ offset
        const += float(offset @ Q @ offset)
    Hess += 2.0 * np.kron(np.eye(H), R)
    lo, hi = cfg.bounds(n_u, env)
    return MpcProblem(Hess=0.5 * (Hess + Hess.T), lin=lin, const=const,
                      lower=np.tile(lo, H), upper=np.tile(hi, H), H=H, n_u=n_u,
                      tol=cfg.tol, max_iter=cfg.max_iter)


def rollout_cost(model, x_t: np.ndarray, ref: np.ndarray, U: np.ndarray, cfg: MpcConfig) -> float:
    """Direct evaluation of the horizon cost by stepping the lifted model."""
    P = np.asarray(model.P, dtype=float)
    n_x, n_u = P.shape[0], np.shape(model.B)[1]
    Q, R = cfg.q_matrix(n_x), cfg.r_matrix(n_u)
    U = np.asarray(U, dtype=float).reshape(cfg.H, n_u)
    ref = np.asarray(ref, dtype=float).reshape(cfg.H, n_x)
    z = np.asarray(model.encode(x_t), dtype=float)
    cost = 0.0
    for k in range(cfg.H):
        z = model.A @ z + model.B @ U[k]
        e = P @ z - ref[k]
        cost += float(e @ Q @ e + U[k] @ R @ U[k])
    return cost


class QpResult(NamedTuple):
    U: np.ndarray
    kkt_residual: float
    converged: bool
    iterations: int


def _solve_linear_cost(p: MpcProblem) -> QpResult:
    """Hess = 0: each coordinate goes to the bound that lowers linᵀU, or to proj(0) when lin is 0."""
    U = p.project(np.zeros_like(p.lin))
    U = np.where(p.lin > 0, p.lower, np.where(p.lin < 0, p.upper, U))
    if not np.all(np.isfinite(U)):
        raise MpcError("solve_box_qp: linear cost is unbounded below on an open box")
    return QpResult(U, p.kkt_residual(U), True, 0)


def _projected_step(p: MpcProblem, Y: np.ndarray, L: float, L_cap: float) -> Tuple[np.ndarray, float]:
    """Projected gradient step from Y; L doubles (up to ‖Hess‖_F) until ½dᵀHd <= ½L‖d‖² holds."""
    g = p.Hess @ Y + p.lin
    while True:
        U = p.project(Y - g / L)
        d = U - Y
        if d @ p.Hess @ d <= L * (d @ d) * (1.0 + 1e-12) or L >= L_cap:
            return U, L
        L = min(2.0 * L, L_cap)
        logger.debug("solve_box_qp: step bound raised to %.3e", L)


def solve_box_qp(p: MpcProblem) -> QpResult:
    """Accelerated projected gradient with function-value restart and a backtracked step bound."""
    if p.lin.size == 0:
        return QpResult(np.zeros(0), 0.0, True, 0)
    if not np.any(p.Hess):
        return _solve_linear_cost(p)
    L_cap = float(np.linalg.norm(p.Hess))
    L = LIPSCHITZ_SAFETY * power_iteration(p.Hess, POWER_ITERATIONS)
    L = min(L, L_cap) if L > 0 else L_cap

    U = p.project(np.zeros_like(p.lin))
    f_U = p.objective(U)
    Y, t = U.copy(), 1.0
    residual = p.kkt_residual(U)
    for it in range(1, p.max_iter + 1):
        U_new, L = _projected_step(p, Y, L, L_cap)
        f_new = p.objective(U_new)
        if f_new > f_U:
            # restart from the last iterate without momentum
            U_new, L = _projected_step(p, U, L, L_cap)
            f_new = p.objective(U_new)
            t = 1.0
            Y = U_new.copy()
        else:
            t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            Y = U_new + ((t - 1.0) / t_new) * (U_new - U)
            t = t_new
        U, f_U = U_new, f_new
        residual = p.kkt_residual(U)
        if residual <= p.tol:
            logger.debug("solve_box_qp: converged in %d iterations (residual %.2e)", it, residual)
            return QpResult(U, residual, True, it)
    logger.warning("solve_box_qp: iteration cap %d reached, KKT residual %.3e", p.max_iter, residual)
    return QpResult(U, residual, False, p.max_iter)


class ControlDecision(NamedTuple):
    u: np.ndarray
    kkt_residual: float


def mpc_step(model, x: np.ndarray, ref: np.ndarray, cfg: MpcConfig,
             env: Optional[EnvSpec] = None) -> ControlDecision:
    problem = condense(model, x, ref, cfg, env)
    result = solve_box_qp(problem)
    return ControlDecision(result.U[:problem.n_u].copy(), result.kkt_residual)


class KoopmanMpcController:
    """Receding-horizon controller over any lifted model exposing encode, A, B and P."""

    def __init__(self, model, cfg: MpcConfig, env: Optional[EnvSpec] = None):
        self.model = model
        self.cfg = cfg
        self.env = env

    @property
    def horizon(self) -> int:
        return self.cfg.H

    def __call__(self, x: np.ndarray, ref: np.ndarray) -> ControlDecision:
        return mpc_step(self.model, x, ref, self.cfg, self.env)


def random_shooting_control(nndm: NndmModel, x: np.ndarray, ref: np.ndarray, H: int, n_samples: int,
                            seed: int, u_min: np.ndarray, u_max: np.ndarray) -> np.ndarray:
    """
    Samples n_samples control sequences uniformly in the box, rolls each through the
    NNDM and returns the head of the cheapest one (Q = I, R = 0).
    """
    if n_samples < 1:
        raise ValueError("random_shooting_control: n_samples must be >= 1")
    lo, hi = np.asarray(u_min, dtype=float), np.asarray(u_max, dtype=float)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("random_shooting_control: control box must be finite")
    ref = np.asarray(ref, dtype=float).reshape(H, nndm.n_x)
    rng = make_rng(seed, 6)
    U = rng.uniform(lo, hi, size=(n_samples, H, nndm.n_u))
    X = np.repeat(np.asarray(x, dtype=float).reshape(1, nndm.n_x), n_samples, axis=0)
    cost = np.zeros(n_samples)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(H):
            X = nndm_step(nndm, X, U[:, k])
            cost += np.sum((X - ref[k]) ** 2, axis=1)
    cost[~np.isfinite(cost)] = np.inf
    return U[int(np.argmin(cost)), 0].copy()


class RandomShootingController:
    """Uses the same sampled sequence set at every step (fixed seed)."""

    def __init__(self, nndm: NndmModel, H: int, n_samples: int, seed: int, u_min, u_max):
        self.nndm = nndm
        self.H = H
        self.n_samples = n_samples
        self.seed = seed
        self.u_min = np.asarray(u_min, dtype=float)
        self.u_max = np.asarray(u_max, dtype=float)

    @property
    def horizon(self) -> int:
        return self.H

    def __call__(self, x: np.ndarray, ref: np.ndarray) -> ControlDecision:
        u = random_shooting_control(self.nndm, x, ref, self.H, self.n_samples, self.seed, self.u_min, self.u_max)
        return ControlDecision(u, float("nan"))


Controller = Callable[[np.ndarray, np.ndarray], ControlDecision]
StepFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def sinusoid_reference(env: EnvSpec, steps: int, amplitude: float = 0.8, frequency: float = 0.5) -> np.ndarray:
    """Joint angles A·sin(f t) and rates A·f·cos(f t) at t = k·dt, k = 0..steps."""
    if env.is_discrete:
        raise ValueError("sinusoid_reference: needs a continuous-time pendulum")
    joints = env.n_x // 2
    t = np.arange(steps + 1) * env.dt
    angles = amplitude * np.sin(frequency * t)
    rates = amplitude * frequency * np.cos(frequency * t)
    return np.hstack([np.repeat(angles[:, None], joints, axis=1), np.repeat(rates[:, None], joints, axis=1)])


def _step_function(env: Union[EnvSpec, StepFn]) -> StepFn:
    if isinstance(env, EnvSpec):
        return lambda x, u: env_step(env, x, u)
    return env


def run_closed_loop(env: Union[EnvSpec, StepFn], controller: Controller, reference: np.ndarray, steps: int,
                    fail_threshold: float = 0.5, x0: Optional[np.ndarray] = None) -> ClosedLoopResult:
    """
    Drives the true system with the controller's first control at each step. The reference
    rows are x_0^ref, x_1^ref, ...; it is padded by holding its last row. The state
    starts at x0 (default: the first reference row).
    """
    step = _step_function(env)
    reference = np.atleast_2d(np.asarray(reference, dtype=float))
    H = int(getattr(controller, "horizon", 1))
    need = steps + H + 1
    if len(reference) < need:
        reference = np.vstack([reference, np.repeat(reference[-1:], need - len(reference), axis=0)])
    x = np.asarray(reference[0] if x0 is None else x0, dtype=float).copy()

    states: List[List[float]] = [x.tolist()]
    controls: List[List[float]] = []
    errors: List[float] = []
    residuals: List[float] = []
    truncated = False
    for k in range(steps):
        decision = controller(x, reference[k + 1:k + 1 + H])
        try:
            x = np.asarray(step(x, decision.u), dtype=float)
        except EnvError as exc:
            logger.warning("run_closed_loop: environment blew up at step %d (%s)", k, exc)
            truncated = True
            break
        if not np.all(np.isfinite(x)):
            truncated = True
            break
        controls.append(np.atleast_1d(decision.u).tolist())
        residuals.append(float(decision.kkt_residual))
        states.append(x.tolist())
        errors.append(float(np.linalg.norm(x - reference[k + 1])))

    failed = [i for i, e in enumerate(errors) if e > fail_threshold]
    survival = failed[0] if failed else len(errors)
    tracking = float(np.mean(errors)) if errors else float("nan")
    logger.info("closed loop: %d/%d steps, tracking error %.4e, survival %d", len(errors), steps, tracking, survival)
    return ClosedLoopResult(states=states, controls=controls, references=reference[:len(states)].tolist(),
                            errors=errors, kkt_residuals=residuals, tracking_error=tracking,
                            survival_steps=survival, steps=steps, truncated=truncated)


def save_closed_loop(result: ClosedLoopResult, json_path: str, csv_path: Optional[str] = None) -> str:
    """JSON summary plus one CSV row per step: t, x*, u*, ref*, error, kkt_residual."""
    directory = os.path.dirname(json_path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(result.model_dump(mode="json"), f, indent=2)
    if csv_path:
        rows = []
        for k, error in enumerate(result.errors):
            row = {"t": k + 1}
            row.update({f"x{i}": v for i, v in enumerate(result.states[k + 1])})
            row.update({f"u{j}": v for j, v in enumerate(result.controls[k])})
            row.update({f"ref{i}": v for i, v in enumerate(result.references[k + 1])})
            row["error"] = error
            row["kkt_residual"] = result.kkt_residuals[k]
            rows.append(row)
        pd.DataFrame(rows).to_csv(csv_path, index=False)
    return json_path
