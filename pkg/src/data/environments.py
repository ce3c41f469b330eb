"""
Ground-truth dynamical systems used to generate training data and to close the MPC loop.

- Polynomial (discrete): x⁺ = (0.85x₁, 0.90x₂, 0.90x₃ + Σ_{p=1}^{n_poly-2} b_p x₁^p)
- Damped pendulum (continuous, RK4, zero-order hold on u)
- Double pendulum (continuous, point masses, angles measured from the downward vertical)
"""
from typing import Callable

import numpy as np

from src.errors import EnvError
from src.models.base import EnvKind, EnvSpec

Deriv = Callable[[np.ndarray, np.ndarray], np.ndarray]

MASS_MATRIX_MIN_DET = 1e-12


def poly_step(x: np.ndarray, spec: EnvSpec) -> np.ndarray:
    if spec.kind != EnvKind.POLYNOMIAL:
        raise ValueError(f"poly_step: spec is {spec.kind.value}, not polynomial")
    x = np.asarray(x, dtype=float)
    coeffs = spec.poly_coeffs()
    powers = x[0] ** np.arange(1, coeffs.size + 1)
    return np.array([0.85 * x[0], 0.90 * x[1], 0.90 * x[2] + float(coeffs @ powers)])


def pendulum_deriv(x: np.ndarray, u: np.ndarray, spec: EnvSpec) -> np.ndarray:
    if spec.kind != EnvKind.DAMPED_PENDULUM:
        raise ValueError(f"pendulum_deriv: spec is {spec.kind.value}, not damped-pendulum")
    theta, omega = float(x[0]), float(x[1])
    torque = float(np.asarray(u, dtype=float).reshape(-1)[0]) if np.size(u) else 0.0
    g, l, m, c = spec.gravity, spec.length, spec.mass, spec.damping
    return np.array([omega, -(g / l) * np.sin(theta) - c * omega + torque / (m * l * l)])


def double_pendulum_deriv(x: np.ndarray, u: np.ndarray, spec: EnvSpec) -> np.ndarray:
    """Standard two-link point-mass equations with per-joint viscous damping and torque."""
    if spec.kind != EnvKind.DOUBLE_PENDULUM:
        raise ValueError(f"double_pendulum_deriv: spec is {spec.kind.value}, not double-pendulum")
    th1, th2, w1, w2 = (float(v) for v in x)
    tau = np.zeros(2) if np.size(u) == 0 else np.asarray(u, dtype=float).reshape(2)
    m1 = m2 = spec.mass
    l1 = l2 = spec.length
    g, c = spec.gravity, spec.damping
    delta = th1 - th2
    cos_d, sin_d = np.cos(delta), np.sin(delta)

    mass = np.array([
        [(m1 + m2) * l1 * l1, m2 * l1 * l2 * cos_d],
        [m2 * l1 * l2 * cos_d, m2 * l2 * l2],
    ])
    det = mass[0, 0] * mass[1, 1] - mass[0, 1] * mass[1, 0]
    if abs(det) <= MASS_MATRIX_MIN_DET:
        raise EnvError(f"double_pendulum_deriv: near-singular mass matrix (det={det:.3e})")
    rhs = np.array([
        -m2 * l1 * l2 * w2 * w2 * sin_d - (m1 + m2) * g * l1 * np.sin(th1) - c * w1 + tau[0],
        m2 * l1 * l2 * w1 * w1 * sin_d - m2 * g * l2 * np.sin(th2) - c * w2 + tau[1],
    ])
    acc = np.linalg.solve(mass, rhs)
    return np.array([w1, w2, acc[0], acc[1]])


def double_pendulum_energy(x: np.ndarray, spec: EnvSpec) -> float:
    th1, th2, w1, w2 = (float(v) for v in x)
    m1 = m2 = spec.mass
    l1 = l2 = spec.length
    g = spec.gravity
    kinetic = (0.5 * (m1 + m2) * l1 * l1 * w1 * w1 + 0.5 * m2 * l2 * l2 * w2 * w2
               + m2 * l1 * l2 * w1 * w2 * np.cos(th1 - th2))
    potential = -(m1 + m2) * g * l1 * np.cos(th1) - m2 * g * l2 * np.cos(th2)
    return float(kinetic + potential)


def rk4_step(deriv: Deriv, x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    """Classical RK4; u is held constant over the step."""
    if dt <= 0:
        raise ValueError("rk4_step: dt must be > 0")
    x = np.asarray(x, dtype=float)
    k1 = deriv(x, u)
    k2 = deriv(x + 0.5 * dt * k1, u)
    k3 = deriv(x + 0.5 * dt * k2, u)
    k4 = deriv(x + dt * k3, u)
    for name, k in (("k1", k1), ("k2", k2), ("k3", k3), ("k4", k4)):
        if not np.all(np.isfinite(k)):
            raise EnvError(f"rk4_step: non-finite stage {name}")
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def derivative_for(spec: EnvSpec) -> Deriv:
    if spec.kind == EnvKind.DAMPED_PENDULUM:
        return lambda x, u: pendulum_deriv(x, u, spec)
    if spec.kind == EnvKind.DOUBLE_PENDULUM:
        return lambda x, u: double_pendulum_deriv(x, u, spec)
    raise ValueError(f"derivative_for: {spec.kind.value} is discrete-time")


def env_step(spec: EnvSpec, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """One step of the true system; raises EnvError on a non-finite result."""
    if spec.is_discrete:
        nxt = poly_step(x, spec)
    else:
        nxt = rk4_step(derivative_for(spec), x, np.asarray(u, dtype=float), spec.dt)
    if not np.all(np.isfinite(nxt)):
        raise EnvError(f"env_step: {spec.name} produced a non-finite state")
    return nxt


def rollout(spec: EnvSpec, x0: np.ndarray, controls: np.ndarray) -> np.ndarray:
    """States x₀..x_L for a (L, n_u) control array; n_u = 0 systems take an (L, 0) array."""
    controls = np.asarray(controls, dtype=float)
    if controls.ndim != 2 or controls.shape[1] != spec.n_u:
        raise ValueError(f"rollout: controls must have shape (L, {spec.n_u}), got {controls.shape}")
    states = np.empty((len(controls) + 1, spec.n_x))
    states[0] = np.asarray(x0, dtype=float)
    for k in range(len(controls)):
        states[k + 1] = env_step(spec, states[k], controls[k])
    return states
