import numpy as np

from src.logic.koopman_engine import KoopmanModel


def lifted_scalar_model(a: float = 0.8, b: float = 0.5) -> KoopmanModel:
    """
    n_x = 1, n_mult = 1, H = 1 with z = [x, x + 10] for every x > -10.
    A = [[a, 0], [a-1, 1]], B = [[b], [b]] makes z⁺ = Az + Bu exact for x⁺ = a·x + b·u.
    """
    return KoopmanModel(
        n_x=1, n_u=1, n_mult=1, hidden_width=1,
        W1=np.array([[1.0]]), b1=np.array([10.0]),
        W2=np.array([[0.0]]), b2=np.array([0.0]),
        W3=np.array([[1.0]]),
        A=np.array([[a, 0.0], [a - 1.0, 1.0]]),
        B=np.array([[b], [b]]),
    )


def scalar_windows(a: float, b: float, count: int, T: int, seed: int = 0):
    """Windows of x⁺ = a·x + b·u that stay where relu(x + 10) = x + 10."""
    rng = np.random.default_rng(seed)
    S = np.empty((count, T + 1, 1))
    U = rng.uniform(-1.0, 1.0, size=(count, T, 1))
    S[:, 0, 0] = rng.uniform(-1.0, 1.0, size=count)
    for k in range(T):
        S[:, k + 1] = a * S[:, k] + b * U[:, k]
    return S, U
