"""
Neural Koopman model: state-augmented encoder z = [x; Ψθ(x)], bias-free latent
dynamics z⁺ = Az + Bu, the three training losses and their exact reverse-mode gradients.

Encoder (fixed architecture, hidden width H):
    h1 = relu(W1 x + b1)
    h2 = h1 + relu(W2 h1 + b2)      # residual around the second hidden layer
    Ψ  = W3 h2                      # no bias, orthogonal init
"""
import logging
from typing import List, NamedTuple, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from src.data.model_store import read_container, write_container
from src.errors import FormatError, TrainingError
from src.logic.numerics import as_controls, make_rng, pinv, svd
from src.models.base import TrainConfig

logger = logging.getLogger(__name__)

PARAM_ORDER = ("W1", "b1", "W2", "b2", "W3", "A", "B")
BLOWUP_NORM = 1e12
LOSS_CLIP = 1e10
A_INIT_SCALE = 0.99
B_INIT_SCALE = 0.01


class KoopmanModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    n_x: int
    n_u: int
    n_mult: int
    hidden_width: int
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    A: np.ndarray
    B: np.ndarray

    @model_validator(mode="after")
    def _check_shapes(self):
        for name, shape in self.shapes().items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        return self

    @property
    def n_enc(self) -> int:
        return self.n_mult * self.n_x

    @property
    def n(self) -> int:
        return (self.n_mult + 1) * self.n_x

    @property
    def P(self) -> np.ndarray:
        return np.hstack([np.eye(self.n_x), np.zeros((self.n_x, self.n_enc))])

    @property
    def state_index(self) -> np.ndarray:
        return np.arange(self.n_x)

    def shapes(self) -> dict:
        H, n = self.hidden_width, (self.n_mult + 1) * self.n_x
        return {
            "W1": (H, self.n_x), "b1": (H,), "W2": (H, H), "b2": (H,),
            "W3": (self.n_mult * self.n_x, H), "A": (n, n), "B": (n, self.n_u),
        }

    @property
    def param_count(self) -> int:
        return int(sum(int(np.prod(s)) for s in self.shapes().values()))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, name).reshape(-1) for name in PARAM_ORDER])

    def with_vector(self, vec: np.ndarray) -> "KoopmanModel":
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.param_count:
            raise ValueError(f"parameter vector has {vec.size} entries, model needs {self.param_count}")
        update, offset = {}, 0
        for name in PARAM_ORDER:
            shape = self.shapes()[name]
            size = int(np.prod(shape))
            update[name] = vec[offset:offset + size].reshape(shape).copy()
            offset += size
        return self.model_copy(update=update)

    def encode(self, x: np.ndarray) -> np.ndarray:
        return encode(self, x)


def _orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Nearest (semi-)orthogonal matrix to a Gaussian draw: U·Vt, singular values 1."""
    U, _, Vt = svd(rng.standard_normal((rows, cols)))
    return U @ Vt


def init_model(n_x: int, n_u: int, n_mult: int, seed: int, hidden_width: int = 256) -> KoopmanModel:
    if n_mult < 1:
        raise ValueError("init_model: n_mult must be >= 1")
    rng = make_rng(seed, 2)
    H = hidden_width
    n = (n_mult + 1) * n_x
    bound1 = 1.0 / np.sqrt(n_x)
    bound2 = 1.0 / np.sqrt(H)
    return KoopmanModel(
        n_x=n_x, n_u=n_u, n_mult=n_mult, hidden_width=H,
        W1=rng.uniform(-bound1, bound1, size=(H, n_x)),
        b1=rng.uniform(-bound1, bound1, size=H),
        W2=rng.uniform(-bound2, bound2, size=(H, H)),
        b2=rng.uniform(-bound2, bound2, size=H),
        W3=_orthogonal(rng, n_mult * n_x, H),
        A=A_INIT_SCALE * _orthogonal(rng, n, n),
        B=B_INIT_SCALE * rng.standard_normal((n, n_u)),
    )


# ---------------------------------------------------------------- encoder

class _EncoderCache(NamedTuple):
    X: np.ndarray
    a1: np.ndarray
    h1: np.ndarray
    a2: np.ndarray
    h2: np.ndarray


def _encoder_forward(model: KoopmanModel, X: np.ndarray) -> Tuple[np.ndarray, _EncoderCache]:
    a1 = X @ model.W1.T + model.b1
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ model.W2.T + model.b2
    h2 = h1 + np.maximum(a2, 0.0)
    psi = h2 @ model.W3.T
    return np.hstack([X, psi]), _EncoderCache(X, a1, h1, a2, h2)


def _encoder_backward(model: KoopmanModel, cache: _EncoderCache, dZ: np.ndarray):
    """Returns ({W1, b1, W2, b2, W3} grads, dX)."""
    dpsi = dZ[:, model.n_x:]
    dW3 = dpsi.T @ cache.h2
    dh2 = dpsi @ model.W3
    da2 = dh2 * (cache.a2 > 0)
    dW2 = da2.T @ cache.h1
    db2 = da2.sum(axis=0)
    dh1 = dh2 + da2 @ model.W2
    da1 = dh1 * (cache.a1 > 0)
    dW1 = da1.T @ cache.X
    db1 = da1.sum(axis=0)
    dX = dZ[:, :model.n_x] + da1 @ model.W1
    return {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2, "W3": dW3}, dX


def encode(model: KoopmanModel, x: np.ndarray) -> np.ndarray:
    """z = [x; Ψθ(x)] for a single state (n_x,) or a batch (N, n_x)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    Z, _ = _encoder_forward(model, x.reshape(-1, model.n_x))
    return Z[0] if single else Z


def encode_jacobian(model: KoopmanModel, x: np.ndarray) -> np.ndarray:
    """Analytic ∂z/∂x (n × n_x) by backpropagating each output coordinate."""
    x = np.asarray(x, dtype=float).reshape(1, model.n_x)
    X = np.repeat(x, model.n, axis=0)
    _, cache = _encoder_forward(model, X)
    _, dX = _encoder_backward(model, cache, np.eye(model.n))
    return dX


# ---------------------------------------------------------------- rollout and losses

def rollout_latent(model: KoopmanModel, x_t: np.ndarray, controls: np.ndarray):
    """
    ẑ_{t+1..t+T} and x̂ = Pẑ from z_t = encode(x_t). Returns (Z_hat, X_hat, blown);
    once ‖ẑ‖ exceeds 1e12 the remaining steps are NaN and `blown` is True.
    """
    controls = as_controls(controls, model.n_u)
    T = len(controls)
    if T < 1:
        raise ValueError("rollout_latent: need at least one control step")
    z = encode(model, x_t)
    Z_hat = np.full((T, model.n), np.nan)
    blown = False
    for k in range(T):
        z = model.A @ z + model.B @ controls[k]
        if not np.all(np.isfinite(z)) or np.linalg.norm(z) > BLOWUP_NORM:
            blown = True
            break
        Z_hat[k] = z
    return Z_hat, Z_hat[:, :model.n_x], blown


def _window_arrays(window, T: int) -> Tuple[np.ndarray, np.ndarray]:
    states, controls = (window.states, window.controls) if hasattr(window, "states") else window
    states = np.asarray(states, dtype=float)
    controls = np.asarray(controls, dtype=float)
    if len(states) < T + 1:
        raise ValueError(f"window has {len(states)} states, horizon T={T} needs {T + 1}")
    return states[:T + 1], controls[:T].reshape(T, -1)


def _batch_arrays(windows, T: int) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(windows, tuple) and len(windows) == 2 and np.ndim(windows[0]) == 3:
        S, U = windows
        return np.asarray(S, dtype=float)[:, :T + 1], np.asarray(U, dtype=float)[:, :T]
    pairs = [_window_arrays(w, T) for w in windows]
    if not pairs:
        raise ValueError("batch must not be empty")
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def discount_weights(cfg: TrainConfig) -> np.ndarray:
    """β^j / W for j = 1..T."""
    powers = cfg.beta ** np.arange(1, cfg.T + 1)
    return powers / cfg.W


def loss_pred(model: KoopmanModel, window, cfg: TrainConfig) -> float:
    """(1/W) Σ_{τ=t+1}^{t+T} β^{τ-t} ‖x̂_τ - x_τ‖²."""
    states, controls = _window_arrays(window, cfg.T)
    _, X_hat, blown = rollout_latent(model, states[0], controls)
    if blown:
        return LOSS_CLIP
    sq = np.sum((X_hat - states[1:]) ** 2, axis=1)
    return float(discount_weights(cfg) @ sq)


def loss_cov(embeddings: np.ndarray) -> float:
    """Average squared off-diagonal entry of the centered batch covariance."""
    value, _ = _cov_loss_and_grad(np.asarray(embeddings, dtype=float))
    return value


def _cov_loss_and_grad(Z: np.ndarray) -> Tuple[float, np.ndarray]:
    b, n = Z.shape
    if b < 2:
        raise ValueError(f"loss_cov: batch of {b} samples, need at least 2")
    C = Z - Z.mean(axis=0)
    G = C.T @ C / (b - 1)
    off = G - np.diag(np.diag(G))
    norm = n * (n - 1)
    value = float(np.sum(off * off) / norm)
    dG = 2.0 * off / norm
    dC = 2.0 * C @ dG / (b - 1)
    return value, dC - dC.mean(axis=0)


def inverse_control(model: KoopmanModel, z: np.ndarray, z_next: np.ndarray, eps_B: float) -> np.ndarray:
    """û = (BᵀB + ε_B I)⁻¹ Bᵀ (z⁺ - Az), rows are samples."""
    K = pinv(model.B, eps_B)
    return (np.atleast_2d(z_next) - np.atleast_2d(z) @ model.A.T) @ K.T


def loss_ctrl(model: KoopmanModel, window, cfg: TrainConfig) -> float:
    """(1/W) Σ_{τ=t}^{t+T-1} β^{τ-t} ‖û_τ - u_τ‖² with z from encoded ground-truth states."""
    if model.n_u < 1:
        raise ValueError("loss_ctrl: model has no control input")
    states, controls = _window_arrays(window, cfg.T)
    Z = encode(model, states)
    U_hat = inverse_control(model, Z[:-1], Z[1:], cfg.eps_B)
    sq = np.sum((U_hat - controls) ** 2, axis=1)
    weights = cfg.beta ** np.arange(cfg.T) / cfg.W
    return float(weights @ sq)


class LossBreakdown(NamedTuple):
    total: float
    grad: np.ndarray
    pred: float
    cov: float
    ctrl: float
    blown: bool


def composite_loss(model: KoopmanModel, windows, cfg: TrainConfig) -> LossBreakdown:
    """
    L_total = L_pred + w_cov·L_cov + w_ctrl·L_ctrl averaged over the batch, with the
    gradient over (W1, b1, W2, b2, W3, A, B) flattened in PARAM_ORDER.
    """
    S, U = _batch_arrays(windows, cfg.T)
    b, T = S.shape[0], cfg.T
    n, n_x = model.n, model.n_x
    A, B = model.A, model.B
    bad_input = ~(np.all(np.isfinite(S), axis=(1, 2)) & np.all(np.isfinite(U), axis=(1, 2)))
    if np.any(bad_input):
        raise TrainingError(f"total_loss_and_grads: non-finite loss in window {int(np.flatnonzero(bad_input)[0])}")

    Z_all, cache = _encoder_forward(model, S.reshape(-1, n_x))
    Z = Z_all.reshape(b, T + 1, n)
    dZ = np.zeros_like(Z)
    dA = np.zeros_like(A)
    dB = np.zeros_like(B)

    # 1. Prediction: latent rollout from the encoded first state
    w = discount_weights(cfg)
    Z_hat = np.empty((T + 1, b, n))
    Z_hat[0] = Z[:, 0]
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(1, T + 1):
            Z_hat[k] = Z_hat[k - 1] @ A.T + U[:, k - 1] @ B.T
        latent_norm = np.linalg.norm(Z_hat, axis=2).max(axis=0)
    blown = ~np.isfinite(latent_norm) | (latent_norm > BLOWUP_NORM)
    if np.any(blown):
        logger.warning("composite_loss: latent blow-up in %d of %d windows, loss clipped", int(blown.sum()), b)
        return LossBreakdown(LOSS_CLIP, np.zeros(model.param_count), LOSS_CLIP, 0.0, 0.0, True)

    err = Z_hat[1:, :, :n_x] - np.transpose(S[:, 1:], (1, 0, 2))  # (T, b, n_x)
    per_window = np.einsum("k,kbi->b", w, err * err)
    pred = float(per_window.mean())
    carry = np.zeros((b, n))
    for k in range(T, 0, -1):
        g = carry.copy()
        g[:, :n_x] += 2.0 * w[k - 1] * err[k - 1] / b
        dA += g.T @ Z_hat[k - 1]
        dB += g.T @ U[:, k - 1]
        carry = g @ A
    dZ[:, 0] += carry

    # 2. Covariance of the batch embeddings
    cov = 0.0
    if b >= 2:
        cov, dZ0 = _cov_loss_and_grad(Z[:, 0])
        dZ[:, 0] += cfg.w_cov * dZ0

    # 3. Inverse control through the ridge pseudoinverse
    ctrl = 0.0
    per_window_ctrl = np.zeros(b)
    if model.n_u >= 1:
        K = pinv(B, cfg.eps_B)
        v = cfg.beta ** np.arange(T) / cfg.W
        dK = np.zeros_like(K)
        for k in range(T):
            R = Z[:, k + 1] - Z[:, k] @ A.T
            E = R @ K.T - U[:, k]
            per_window_ctrl += v[k] * np.sum(E * E, axis=1)
            gU = cfg.w_ctrl * 2.0 * v[k] * E / b
            dK += gU.T @ R
            gR = gU @ K
            dZ[:, k + 1] += gR
            dZ[:, k] -= gR @ A
            dA -= gR.T @ Z[:, k]
        ctrl = float(per_window_ctrl.mean())
        M = B.T @ B + cfg.eps_B * np.eye(model.n_u)
        M_inv = np.linalg.inv(M) if cfg.eps_B > 0 else pinv(M)
        GM = -M_inv @ dK @ K.T
        dB += (M_inv @ dK).T + B @ (GM + GM.T)

    total = pred + cfg.w_cov * cov + cfg.w_ctrl * ctrl
    if not np.isfinite(total):
        bad = np.flatnonzero(~np.isfinite(per_window + per_window_ctrl))
        index = int(bad[0]) if bad.size else -1
        raise TrainingError(f"total_loss_and_grads: non-finite loss in window {index}")

    enc_grads, _ = _encoder_backward(model, cache, dZ.reshape(-1, n))
    grads = dict(enc_grads, A=dA, B=dB)
    grad = np.concatenate([grads[name].reshape(-1) for name in PARAM_ORDER])
    return LossBreakdown(float(total), grad, pred, cov, ctrl, False)


def total_loss_and_grads(model: KoopmanModel, windows, cfg: TrainConfig) -> Tuple[float, np.ndarray]:
    out = composite_loss(model, windows, cfg)
    return out.total, out.grad


def prediction_error(model: KoopmanModel, S: np.ndarray, U: np.ndarray) -> float:
    """Undiscounted multi-step error: mean over windows of (1/T) Σ_k ‖x̂_k - x_k‖²."""
    b, T1, n_x = S.shape
    T = T1 - 1
    Z_hat = encode(model, S[:, 0])
    total = np.zeros(b)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(1, T + 1):
            Z_hat = Z_hat @ model.A.T + U[:, k - 1] @ model.B.T
            total += np.sum((Z_hat[:, :n_x] - S[:, k]) ** 2, axis=1)
    per_window = np.minimum(total / T, LOSS_CLIP)
    per_window[~np.isfinite(per_window)] = LOSS_CLIP
    return float(per_window.mean())


# ---------------------------------------------------------------- persistence

def model_blocks(model: KoopmanModel, prefix: str = "") -> List[Tuple[str, np.ndarray]]:
    return [(prefix + name, getattr(model, name)) for name in PARAM_ORDER]


def model_meta(model: KoopmanModel) -> dict:
    return {"n_x": model.n_x, "n_u": model.n_u, "n_mult": model.n_mult, "hidden_width": model.hidden_width}


def model_from_blocks(meta: dict, blocks: dict, prefix: str = "") -> KoopmanModel:
    try:
        dims = {key: int(meta[key]) for key in ("n_x", "n_u", "n_mult", "hidden_width")}
    except KeyError as exc:
        raise FormatError(f"load_model: header field {exc} is missing") from exc
    params = {}
    for name in PARAM_ORDER:
        if prefix + name not in blocks:
            raise FormatError(f"load_model: block '{prefix + name}' is missing")
        params[name] = blocks[prefix + name].copy()
    try:
        return KoopmanModel(**dims, **params)
    except ValueError as exc:
        raise FormatError(f"load_model: dimension mismatch ({exc})") from exc


def save_model(model: KoopmanModel, path: str) -> str:
    return write_container(path, "koopman", model_meta(model), model_blocks(model))


def load_model(path: str) -> KoopmanModel:
    _, meta, blocks = read_container(path, "koopman")
    return model_from_blocks(meta, blocks)
