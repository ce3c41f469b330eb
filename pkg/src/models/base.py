import math
from enum import Enum
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class EnvKind(str, Enum):
    POLYNOMIAL = "polynomial"
    DAMPED_PENDULUM = "damped-pendulum"
    DOUBLE_PENDULUM = "double-pendulum"


# (n_x, n_u) per environment kind
ENV_DIMS = {
    EnvKind.POLYNOMIAL: (3, 0),
    EnvKind.DAMPED_PENDULUM: (2, 1),
    EnvKind.DOUBLE_PENDULUM: (4, 2),
}


class EnvSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: EnvKind
    n_x: int
    n_u: int
    dt: float = 0.0

    # Physical parameters (pendulums)
    gravity: float = 9.81
    length: float = 1.0
    mass: float = 1.0
    damping: float = 0.0
    u_bound: float = 0.0

    # Polynomial system
    n_poly: int = 3
    b_p: float = 0.9
    b_coeffs: Optional[List[float]] = None

    # Strategy-I sampling box for initial states
    state_low: List[float] = []
    state_high: List[float] = []

    @model_validator(mode="after")
    def _check_dims(self):
        n_x, n_u = ENV_DIMS[self.kind]
        if (self.n_x, self.n_u) != (n_x, n_u):
            raise ValueError(f"{self.kind.value} requires n_x={n_x}, n_u={n_u}")
        if self.kind != EnvKind.POLYNOMIAL and self.dt <= 0:
            raise ValueError(f"{self.kind.value} requires dt > 0")
        if self.kind == EnvKind.POLYNOMIAL and self.n_poly < 3:
            raise ValueError("polynomial system requires n_poly >= 3")
        if self.b_coeffs is not None and len(self.b_coeffs) != self.n_poly - 2:
            raise ValueError(f"b_coeffs needs n_poly-2={self.n_poly - 2} entries")
        if len(self.state_low) != self.n_x or len(self.state_high) != self.n_x:
            raise ValueError("state_low/state_high must have n_x entries")
        if any(lo > hi for lo, hi in zip(self.state_low, self.state_high)):
            raise ValueError("state_low must not exceed state_high")
        return self

    @property
    def name(self) -> str:
        if self.kind == EnvKind.POLYNOMIAL:
            return f"polynomial-n{self.n_poly}"
        return self.kind.value

    @property
    def is_discrete(self) -> bool:
        return self.kind == EnvKind.POLYNOMIAL

    def poly_coeffs(self) -> np.ndarray:
        if self.b_coeffs is not None:
            return np.asarray(self.b_coeffs, dtype=float)
        return np.full(self.n_poly - 2, self.b_p, dtype=float)

    def control_bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return -np.full(self.n_u, self.u_bound), np.full(self.n_u, self.u_bound)


def make_env(kind: Union[str, EnvKind], **overrides) -> EnvSpec:
    """Fully populated EnvSpec with the lab's default physical constants."""
    kind = EnvKind(kind)
    if kind == EnvKind.POLYNOMIAL:
        base = dict(kind=kind, n_x=3, n_u=0, dt=0.0, n_poly=3, b_p=0.9,
                    state_low=[-1.0] * 3, state_high=[1.0] * 3)
    elif kind == EnvKind.DAMPED_PENDULUM:
        base = dict(kind=kind, n_x=2, n_u=1, dt=0.02, gravity=9.81, length=1.0, mass=1.0,
                    damping=0.1, u_bound=2.0,
                    state_low=[-math.pi, -4.0], state_high=[math.pi, 4.0])
    else:
        base = dict(kind=kind, n_x=4, n_u=2, dt=0.01, gravity=9.81, length=1.0, mass=1.0,
                    damping=0.05, u_bound=1.0,
                    state_low=[-math.pi, -math.pi, -4.0, -4.0],
                    state_high=[math.pi, math.pi, 4.0, 4.0])
    base.update(overrides)
    return EnvSpec(**base)


def coerce_env(value):
    """Config documents may name a preset ("damped-pendulum") or override part of one."""
    if isinstance(value, (str, EnvKind)):
        return make_env(value)
    if isinstance(value, dict) and "kind" in value and "n_x" not in value:
        rest = {k: v for k, v in value.items() if k != "kind"}
        return make_env(value["kind"], **rest)
    return value


def _default_env() -> EnvSpec:
    return make_env(EnvKind.DAMPED_PENDULUM)


class LossVariant(str, Enum):
    BASELINE = "baseline"
    COV = "+cov"
    CTRL = "+ctrl"
    BOTH = "+both"


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    T: int = Field(5, ge=1)
    beta: float = Field(0.9, gt=0.0, le=1.0)
    w_cov: float = Field(1.0, ge=0.0)
    w_ctrl: float = Field(0.1, ge=0.0)
    batch_size: int = Field(256, ge=2)
    epochs: int = Field(200, ge=0)
    learning_rate: float = Field(1e-3, gt=0.0)
    lr_decay: float = Field(0.1, gt=0.0, le=1.0)
    lr_decay_at: float = Field(0.8, ge=0.0, le=1.0)
    eps_B: float = Field(1e-6, ge=0.0)
    seed: int = 0
    hidden_width: int = Field(256, ge=1)
    log_every: int = Field(10, ge=1)

    @property
    def W(self) -> float:
        return float(sum(self.beta ** j for j in range(1, self.T + 1)))

    def for_variant(self, variant: LossVariant) -> "TrainConfig":
        """Template weights for +cov/+ctrl; the other term is switched off."""
        variant = LossVariant(variant)
        w_cov = self.w_cov if variant in (LossVariant.COV, LossVariant.BOTH) else 0.0
        w_ctrl = self.w_ctrl if variant in (LossVariant.CTRL, LossVariant.BOTH) else 0.0
        return self.model_copy(update={"w_cov": w_cov, "w_ctrl": w_ctrl})


class AdamState(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    step: int = Field(0, ge=0)
    m: np.ndarray
    v: np.ndarray
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    learning_rate: float = 1e-3

    @classmethod
    def zeros(cls, size: int, **kwargs) -> "AdamState":
        return cls(m=np.zeros(size), v=np.zeros(size), **kwargs)


class TrainReport(BaseModel):
    model_config = ConfigDict(extra="ignore")

    epoch_losses: List[Dict[str, float]] = []
    eps_test: float = float("nan")
    grad_check: str = "not-run"
    wall_s: float = 0.0
    status: str = "ok"
    blowups: int = 0
    param_count: int = 0
    param_target: Optional[int] = None  # matched Koopman count for NNDM runs


class MpcConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    H: int = Field(10, ge=1)
    Q: Optional[List[List[float]]] = None  # None -> identity
    R: Optional[List[List[float]]] = None  # None -> zero
    u_min: Optional[List[float]] = None    # None -> environment bounds
    u_max: Optional[List[float]] = None
    tol: float = Field(1e-8, gt=0.0)
    max_iter: int = Field(5000, ge=1)

    @model_validator(mode="after")
    def _check_bounds(self):
        if self.u_min is not None and self.u_max is not None:
            if len(self.u_min) != len(self.u_max):
                raise ValueError("u_min and u_max must have the same length")
            if any(lo > hi for lo, hi in zip(self.u_min, self.u_max)):
                raise ValueError("u_min must not exceed u_max")
        for name in ("Q", "R"):
            mat = getattr(self, name)
            if mat is not None:
                arr = np.asarray(mat, dtype=float)
                if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
                    raise ValueError(f"{name} must be square")
                if np.max(np.abs(arr - arr.T), initial=0.0) > 1e-9:
                    raise ValueError(f"{name} must be symmetric")
                if arr.size and np.min(np.linalg.eigvalsh(arr)) < -1e-9:
                    raise ValueError(f"{name} must be positive semidefinite")
        return self

    def q_matrix(self, n_x: int) -> np.ndarray:
        return np.eye(n_x) if self.Q is None else np.asarray(self.Q, dtype=float)

    def r_matrix(self, n_u: int) -> np.ndarray:
        return np.zeros((n_u, n_u)) if self.R is None else np.asarray(self.R, dtype=float)

    def bounds(self, n_u: int, env: Optional[EnvSpec] = None) -> Tuple[np.ndarray, np.ndarray]:
        if self.u_min is not None and self.u_max is not None:
            return np.asarray(self.u_min, dtype=float), np.asarray(self.u_max, dtype=float)
        if env is not None:
            return env.control_bounds()
        return -np.full(n_u, np.inf), np.full(n_u, np.inf)


class ClosedLoopResult(BaseModel):
    model_config = ConfigDict(extra="ignore")

    states: List[List[float]]
    controls: List[List[float]]
    references: List[List[float]]
    errors: List[float]
    kkt_residuals: List[float]
    tracking_error: float
    survival_steps: int
    steps: int
    truncated: bool = False

    @model_validator(mode="after")
    def _check_survival(self):
        if self.survival_steps > self.steps:
            raise ValueError("survival_steps cannot exceed the episode length")
        return self


class DiagnosticsReport(BaseModel):
    model_config = ConfigDict(extra="ignore")

    kappa_G: float
    lambda_min_G: float
    kappa_BtB: Optional[float] = None
    mean_abs_offdiag_corr: float
    correlation: List[List[float]]
    excluded_coordinates: List[int] = []
    degenerate_coordinates: List[int] = []


class PowerLawFit(BaseModel):
    """eps(D) = A * D**(-alpha) + C, fitted in log space."""
    model_config = ConfigDict(extra="ignore")

    A: float
    alpha: float
    C: float
    r2: float
    points: List[Tuple[float, float]] = []
    degenerate: bool = False

    @property
    def n_points(self) -> int:
        return len(self.points)

    def predict(self, D) -> np.ndarray:
        return self.A * np.asarray(D, dtype=float) ** (-self.alpha) + self.C


class ExperimentRecord(BaseModel):
    model_config = ConfigDict(extra="ignore", frozen=True)

    env: str
    variant: LossVariant
    m: int
    n_mult: int
    n: int
    seed: int
    eps_test: float = float("nan")
    kappa_G: float = float("nan")
    kappa_BtB: Optional[float] = None
    mean_offdiag_corr: float = float("nan")
    wall_s: float = 0.0
    status: str = "ok"
    coeff: Optional[float] = None
    model_path: str = ""

    def key(self) -> Tuple:
        return (self.env, self.variant.value, self.m, self.n_mult, self.seed, self.coeff)


class GridConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    schema_version: int = Field(1, alias="schema")
    env: EnvSpec
    m_values: List[int] = [1000, 4000, 16000, 64000, 140000]
    n_mult_values: List[int] = [1, 2, 4, 8, 16]
    seeds: Union[int, List[int]] = 5
    variants: List[LossVariant] = [LossVariant.BASELINE]
    train: TrainConfig = TrainConfig()
    coupled_coeff: Optional[float] = Field(None, gt=0.0)
    desk_scale: bool = False

    @field_validator("env", mode="before")
    @classmethod
    def _coerce_env(cls, value):
        return coerce_env(value)

    @field_validator("m_values", "n_mult_values")
    @classmethod
    def _positive(cls, values: List[int]) -> List[int]:
        if not values or any(v < 1 for v in values):
            raise ValueError("grid axes need at least one value, all >= 1")
        return values

    @field_validator("seeds")
    @classmethod
    def _check_seeds(cls, seeds):
        if isinstance(seeds, int) and seeds < 1:
            raise ValueError("seeds count must be >= 1")
        if isinstance(seeds, list) and not seeds:
            raise ValueError("seeds list must not be empty")
        return seeds

    def seed_list(self) -> List[int]:
        return list(range(self.seeds)) if isinstance(self.seeds, int) else list(self.seeds)

    def m_list(self) -> List[int]:
        if self.desk_scale:
            return [m for m in self.m_values if m <= 64000]
        return list(self.m_values)


class _RunConfig(BaseModel):
    """Common header of the per-command config documents."""
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    schema_version: int = Field(1, alias="schema")
    env: EnvSpec = Field(default_factory=_default_env)

    @field_validator("env", mode="before")
    @classmethod
    def _coerce_env(cls, value):
        return coerce_env(value)

    @field_validator("schema_version")
    @classmethod
    def _check_schema(cls, version: int) -> int:
        if version != 1:
            raise ValueError(f"config schema {version} not supported (expected 1)")
        return version


class DataRunConfig(_RunConfig):
    """`gen-data`"""
    m: int = Field(1000, ge=1)
    window: int = Field(5, ge=1)
    seed: int = 0


class TrainRunConfig(_RunConfig):
    """`train`"""
    m: int = Field(1000, ge=1)
    n_mult: int = Field(4, ge=1)
    model: str = Field("koopman", pattern="^(koopman|nndm|edmd)$")
    edmd_degree: int = Field(2, ge=1)
    train: TrainConfig = TrainConfig()


class MpcRunConfig(_RunConfig):
    """`mpc`"""
    steps: int = Field(200, ge=1)
    fail_threshold: float = Field(0.5, gt=0.0)
    amplitude: float = 0.8
    frequency: float = 0.5
    n_samples: int = Field(1000, ge=1)
    seed: int = 0
    mpc: MpcConfig = MpcConfig()
