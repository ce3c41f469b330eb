"""
Neural-network dynamics model (NNDM): a direct MLP x⁺ = f([x; u]) used as the
non-linear baseline against the Koopman model at a matched parameter count.

    h1 = relu(W1 [x; u] + b1)      (hidden_width units)
    h2 = relu(W2 h1 + b2)          (hidden_width2 units)
    x⁺ = W3 h2 + b3
"""
import logging
import math
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from src.data.model_store import read_container, write_container
from src.errors import FormatError, TrainingError
from src.logic.numerics import as_controls, make_rng
from src.models.base import TrainConfig

logger = logging.getLogger(__name__)

PARAM_ORDER = ("W1", "b1", "W2", "b2", "W3", "b3")
LOSS_CLIP = 1e10
BLOWUP_NORM = 1e12
MATCH_TOLERANCE = 0.02


class NndmModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    n_x: int
    n_u: int
    hidden_width: int
    hidden_width2: int
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray

    @model_validator(mode="before")
    @classmethod
    def _square_by_default(cls, data):
        if isinstance(data, dict) and data.get("hidden_width2") is None:
            data = dict(data, hidden_width2=data.get("hidden_width"))
        return data

    @model_validator(mode="after")
    def _check_shapes(self):
        for name, shape in self.shapes().items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        return self

    def shapes(self) -> dict:
        h1, h2, d = self.hidden_width, self.hidden_width2, self.n_x + self.n_u
        return {"W1": (h1, d), "b1": (h1,), "W2": (h2, h1), "b2": (h2,), "W3": (self.n_x, h2), "b3": (self.n_x,)}

    @property
    def param_count(self) -> int:
        return nndm_param_count(self.n_x, self.n_u, self.hidden_width, self.hidden_width2)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, name).reshape(-1) for name in PARAM_ORDER])

    def with_vector(self, vec: np.ndarray) -> "NndmModel":
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.param_count:
            raise ValueError(f"parameter vector has {vec.size} entries, model needs {self.param_count}")
        update, offset = {}, 0
        for name, shape in self.shapes().items():
            size = int(np.prod(shape))
            update[name] = vec[offset:offset + size].reshape(shape).copy()
            offset += size
        return self.model_copy(update=update)


def nndm_param_count(n_x: int, n_u: int, hidden_width: int, hidden_width2: Optional[int] = None) -> int:
    h1, d = hidden_width, n_x + n_u
    h2 = h1 if hidden_width2 is None else hidden_width2
    return h1 * d + h1 + h2 * h1 + h2 + n_x * h2 + n_x


def matched_widths(n_x: int, n_u: int, target_params: int) -> Tuple[int, int]:
    """
    Hidden widths (h1, h2) whose parameter count lands within 2% of `target_params`.
    Among the candidates within 1% the most balanced pair wins. Raises TrainingError
    when no pair gets within 2%.
    """
    if target_params < 1:
        raise ValueError("matched_widths: target_params must be >= 1")
    d = n_x + n_u
    best, best_key = None, None
    for h1 in range(1, int(2.0 * math.sqrt(target_params)) + 3):
        # count is linear in h2 once h1 is fixed
        h2 = max(1, round((target_params - n_x - h1 * (d + 1)) / (h1 + 1 + n_x)))
        miss = abs(nndm_param_count(n_x, n_u, h1, h2) - target_params)
        key = (miss > 0.5 * MATCH_TOLERANCE * target_params, abs(h1 - h2), miss)
        if best_key is None or key < best_key:
            best, best_key = (h1, h2), key
    count = nndm_param_count(n_x, n_u, *best)
    mismatch = abs(count - target_params) / target_params
    if mismatch > MATCH_TOLERANCE:
        raise TrainingError(
            f"matched_widths: closest NNDM {best[0]}x{best[1]} has {count} parameters, "
            f"{100 * mismatch:.1f}% away from the {target_params}-parameter target")
    return best


def init_nndm(n_x: int, n_u: int, seed: int, hidden_width: Optional[int] = None,
              target_params: Optional[int] = None) -> NndmModel:
    """Square hidden layers of `hidden_width`, or widths matched to `target_params`."""
    if hidden_width is not None:
        h1 = h2 = hidden_width
    elif target_params is not None:
        h1, h2 = matched_widths(n_x, n_u, target_params)
    else:
        raise ValueError("init_nndm: give hidden_width or target_params")
    rng = make_rng(seed, 4)
    d = n_x + n_u
    b_in, b_1, b_2 = 1.0 / np.sqrt(d), 1.0 / np.sqrt(h1), 1.0 / np.sqrt(h2)
    return NndmModel(
        n_x=n_x, n_u=n_u, hidden_width=h1, hidden_width2=h2,
        W1=rng.uniform(-b_in, b_in, size=(h1, d)), b1=rng.uniform(-b_in, b_in, size=h1),
        W2=rng.uniform(-b_1, b_1, size=(h2, h1)), b2=rng.uniform(-b_1, b_1, size=h2),
        W3=rng.uniform(-b_2, b_2, size=(n_x, h2)), b3=np.zeros(n_x),
    )


class _StepCache(NamedTuple):
    inp: np.ndarray
    a1: np.ndarray
    h1: np.ndarray
    a2: np.ndarray
    h2: np.ndarray


def _forward(model: NndmModel, X: np.ndarray, U: np.ndarray) -> Tuple[np.ndarray, _StepCache]:
    inp = np.hstack([X, U])
    a1 = inp @ model.W1.T + model.b1
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ model.W2.T + model.b2
    h2 = np.maximum(a2, 0.0)
    return h2 @ model.W3.T + model.b3, _StepCache(inp, a1, h1, a2, h2)


def nndm_step(model: NndmModel, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """x⁺ for one state (n_x,) or a batch (N, n_x); u matches."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x.reshape(-1, model.n_x)
    U = np.asarray(u, dtype=float).reshape(len(X), model.n_u)
    out, _ = _forward(model, X, U)
    return out[0] if single else out


def nndm_rollout(model: NndmModel, x0: np.ndarray, controls: np.ndarray) -> np.ndarray:
    controls = as_controls(controls, model.n_u)
    x = np.asarray(x0, dtype=float)
    out = np.empty((len(controls), model.n_x))
    for k, u in enumerate(controls):
        x = nndm_step(model, x, u)
        out[k] = x
    return out


class NndmLoss(NamedTuple):
    total: float
    grad: np.ndarray
    rollout: float
    one_step: float
    blown: bool


def _backward(model: NndmModel, c: _StepCache, dy: np.ndarray) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """Parameter gradients of one step and the gradient with respect to its input [x; u]."""
    grads = {"W3": dy.T @ c.h2, "b3": dy.sum(axis=0)}
    da2 = (dy @ model.W3) * (c.a2 > 0)
    grads["W2"] = da2.T @ c.h1
    grads["b2"] = da2.sum(axis=0)
    da1 = (da2 @ model.W2) * (c.a1 > 0)
    grads["W1"] = da1.T @ c.inp
    grads["b1"] = da1.sum(axis=0)
    return grads, da1 @ model.W1


def nndm_loss_and_grads(model: NndmModel, S: np.ndarray, U: np.ndarray, cfg: TrainConfig) -> NndmLoss:
    """
    Discounted T-step rollout error (1/W) Σ β^k ‖x̂_k - x_k‖² plus the single-step error
    (1/T) Σ_k ‖f(x_k, u_k) - x_{k+1}‖² from ground-truth states, both averaged over the batch.
    """
    S = np.asarray(S, dtype=float)[:, :cfg.T + 1]
    U = np.asarray(U, dtype=float)[:, :cfg.T]
    b, T = S.shape[0], cfg.T
    w = cfg.beta ** np.arange(1, T + 1) / cfg.W

    x = S[:, 0]
    caches: List[_StepCache] = []
    errs = []
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(T):
            x, cache = _forward(model, x, U[:, k])
            caches.append(cache)
            errs.append(x - S[:, k + 1])
        one_pred, one_cache = _forward(model, S[:, :T].reshape(b * T, model.n_x), U.reshape(b * T, model.n_u))
    one_err = one_pred - S[:, 1:].reshape(b * T, model.n_x)
    norms = np.array([np.linalg.norm(e, axis=1).max() for e in errs + [one_err]])
    if not np.all(np.isfinite(norms)) or norms.max() > BLOWUP_NORM:
        logger.warning("nndm_loss_and_grads: rollout blew up, loss clipped")
        return NndmLoss(LOSS_CLIP, np.zeros(model.param_count), LOSS_CLIP, 0.0, True)

    rollout_pw = sum(w[k] * np.sum(errs[k] ** 2, axis=1) for k in range(T))
    one_step_pw = np.sum(one_err ** 2, axis=1).reshape(b, T).mean(axis=1)
    per_window = rollout_pw + one_step_pw
    if not np.all(np.isfinite(per_window)):
        bad = np.flatnonzero(~np.isfinite(per_window))
        raise TrainingError(f"nndm_loss_and_grads: non-finite loss in window {int(bad[0])}")
    rollout, one_step = float(rollout_pw.mean()), float(one_step_pw.mean())

    grads, _ = _backward(model, one_cache, 2.0 * one_err / (b * T))
    carry = np.zeros((b, model.n_x))
    for k in range(T - 1, -1, -1):
        step_grads, d_inp = _backward(model, caches[k], carry + 2.0 * w[k] * errs[k] / b)
        for name, g in step_grads.items():
            grads[name] = grads[name] + g
        carry = d_inp[:, :model.n_x]
    grad = np.concatenate([grads[name].reshape(-1) for name in PARAM_ORDER])
    return NndmLoss(rollout + one_step, grad, rollout, one_step, False)


def prediction_error(model: NndmModel, S: np.ndarray, U: np.ndarray) -> float:
    """Mean over windows of (1/T) Σ_k ‖x̂_k - x_k‖², blown windows count as 1e10."""
    T = S.shape[1] - 1
    x = S[:, 0]
    total = np.zeros(S.shape[0])
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(T):
            x = nndm_step(model, x, U[:, k])
            total += np.sum((x - S[:, k + 1]) ** 2, axis=1)
    per_window = total / T
    per_window[~np.isfinite(per_window)] = LOSS_CLIP
    return float(np.minimum(per_window, LOSS_CLIP).mean())


def save_nndm(model: NndmModel, path: str) -> str:
    meta = {"n_x": model.n_x, "n_u": model.n_u, "hidden_width": model.hidden_width,
            "hidden_width2": model.hidden_width2}
    return write_container(path, "nndm", meta, [(name, getattr(model, name)) for name in PARAM_ORDER])


def load_nndm(path: str) -> NndmModel:
    _, meta, blocks = read_container(path, "nndm")
    try:
        params = {name: blocks[name].copy() for name in PARAM_ORDER}
        return NndmModel(n_x=int(meta["n_x"]), n_u=int(meta["n_u"]), hidden_width=int(meta["hidden_width"]),
                         hidden_width2=int(meta["hidden_width2"]), **params)
    except KeyError as exc:
        raise FormatError(f"load_nndm: field {exc} is missing") from exc
    except ValueError as exc:
        raise FormatError(f"load_nndm: dimension mismatch ({exc})") from exc
