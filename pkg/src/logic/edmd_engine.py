"""
Extended DMD: closed-form least-squares Koopman operator over a fixed dictionary.

    G      = (1/m) Σ Φ(s_i) Φ(s_i)ᵀ
    A_cross = (1/m) Σ Φ(s_i⁺) Φ(s_i)ᵀ
    K      = A_cross (G + ridge·I)⁻¹

With controls the lifted sample is [Φ(x); u] and K splits into (A, B).
Samples are put in canonical lexicographic order before accumulation, so the
fit does not depend on the order of the input transitions.
"""
import itertools
import logging
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.data.model_store import read_container, write_container
from src.errors import EdmdError, FormatError
from src.logic import koopman_engine
from src.logic.numerics import as_controls, cond_spd, eigh

logger = logging.getLogger(__name__)

SINGULAR_GRAM = 1e-14
NEURAL_RIDGE_SCALE = 1e-8
BLOWUP_NORM = 1e12


class DictionaryKind(str, Enum):
    IDENTITY = "identity"
    POLYNOMIAL = "polynomial"
    NEURAL = "neural"


def monomial_exponents(n_in: int, max_degree: int) -> np.ndarray:
    """Exponent rows of every monomial of total degree <= max_degree, graded-lex order."""
    rows = []
    for degree in range(max_degree + 1):
        for combo in itertools.combinations_with_replacement(range(n_in), degree):
            exps = np.zeros(n_in, dtype=int)
            for j in combo:
                exps[j] += 1
            rows.append(exps)
    return np.array(rows, dtype=int).reshape(-1, n_in)


class Dictionary(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    kind: DictionaryKind
    n_in: int = Field(ge=1)
    max_degree: int = Field(1, ge=1)
    network: Optional[koopman_engine.KoopmanModel] = None

    @model_validator(mode="after")
    def _check_network(self):
        if self.kind == DictionaryKind.NEURAL:
            if self.network is None:
                raise ValueError("a neural dictionary needs a trained encoder")
            if self.network.n_x != self.n_in:
                raise ValueError(f"encoder expects n_x={self.network.n_x}, dictionary has n_in={self.n_in}")
        return self

    @classmethod
    def identity(cls, n_in: int) -> "Dictionary":
        return cls(kind=DictionaryKind.IDENTITY, n_in=n_in)

    @classmethod
    def polynomial(cls, n_in: int, max_degree: int) -> "Dictionary":
        return cls(kind=DictionaryKind.POLYNOMIAL, n_in=n_in, max_degree=max_degree)

    @classmethod
    def neural(cls, network: koopman_engine.KoopmanModel) -> "Dictionary":
        return cls(kind=DictionaryKind.NEURAL, n_in=network.n_x, network=network)

    @property
    def exponents(self) -> np.ndarray:
        return monomial_exponents(self.n_in, self.max_degree)

    @property
    def size(self) -> int:
        if self.kind == DictionaryKind.IDENTITY:
            return self.n_in
        if self.kind == DictionaryKind.POLYNOMIAL:
            return len(self.exponents)
        return self.network.n

    @property
    def state_index(self) -> np.ndarray:
        """Feature positions that read the original state back out."""
        if self.kind == DictionaryKind.POLYNOMIAL:
            return np.arange(1, self.n_in + 1)
        return np.arange(self.n_in)

    def descriptor(self) -> dict:
        return {"kind": self.kind.value, "n_in": self.n_in, "max_degree": self.max_degree}


def lift(x: np.ndarray, dictionary: Dictionary) -> np.ndarray:
    """Φ(x) for a single state (n_in,) or a batch (N, n_in)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x.reshape(-1, dictionary.n_in)
    if dictionary.kind == DictionaryKind.IDENTITY:
        out = X.copy()
    elif dictionary.kind == DictionaryKind.POLYNOMIAL:
        exps = dictionary.exponents
        out = np.prod(X[:, None, :] ** exps[None, :, :], axis=2)
    else:
        out = koopman_engine.encode(dictionary.network, X)
    return out[0] if single else out


def _transition_arrays(data) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Accepts a Dataset (train split) or an (X, U, X⁺) tuple."""
    if hasattr(data, "transitions"):
        X, U, Xn = data.transitions("train")
    else:
        X, U, Xn = data
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Xn = np.atleast_2d(np.asarray(Xn, dtype=float)).reshape(X.shape)
    U = np.asarray(U, dtype=float).reshape(len(X), -1) if U is not None else np.zeros((len(X), 0))
    if len(X) == 0:
        raise EdmdError("edmd_fit: no transitions")
    return X, U, Xn


def _canonical_order(X: np.ndarray, U: np.ndarray, Xn: np.ndarray):
    rows = np.hstack([X, U, Xn])
    order = np.lexsort(rows.T[::-1])
    return X[order], U[order], Xn[order]


def gram_matrices(data, dictionary: Dictionary) -> Tuple[np.ndarray, np.ndarray]:
    """(G, A_cross); for controlled data the lifted sample is [Φ(x); u]."""
    X, U, Xn = _canonical_order(*_transition_arrays(data))
    m = len(X)
    S = np.hstack([lift(X, dictionary), U])
    S_next = lift(Xn, dictionary)
    G = S.T @ S / m
    A_cross = S_next.T @ S / m
    return 0.5 * (G + G.T), A_cross


class EdmdModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    dictionary: Dictionary
    n_u: int
    A: np.ndarray
    B: np.ndarray
    ridge: float = 0.0
    lambda_min_G: float = float("nan")
    kappa_G: float = float("nan")
    residual: float = float("nan")

    @property
    def K(self) -> np.ndarray:
        return self.A if self.n_u == 0 else np.hstack([self.A, self.B])

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def n_x(self) -> int:
        return self.dictionary.n_in

    @property
    def state_index(self) -> np.ndarray:
        return self.dictionary.state_index

    @property
    def P(self) -> np.ndarray:
        P = np.zeros((self.n_x, self.n))
        P[np.arange(self.n_x), self.state_index] = 1.0
        return P

    def encode(self, x: np.ndarray) -> np.ndarray:
        return lift(x, self.dictionary)


def edmd_fit(data, dictionary: Dictionary, ridge: Optional[float] = None) -> EdmdModel:
    """
    Least-squares K. `ridge=None` picks 1e-8·trace(G)/n for a neural dictionary and
    0 otherwise; with no ridge a Gram matrix with λ_min <= 1e-14 is rejected.
    """
    X, U, Xn = _transition_arrays(data)
    n_u = U.shape[1]
    G, A_cross = gram_matrices((X, U, Xn), dictionary)
    n_aug = G.shape[0]
    if ridge is None:
        ridge = NEURAL_RIDGE_SCALE * float(np.trace(G)) / n_aug if dictionary.kind == DictionaryKind.NEURAL else 0.0
    if ridge < 0:
        raise ValueError("edmd_fit: ridge must be >= 0")

    vals, _ = eigh(G)
    lam_min = float(vals[0])
    if ridge == 0.0 and lam_min <= SINGULAR_GRAM:
        raise EdmdError(f"edmd_fit: Gram matrix is singular (lambda_min={lam_min:.3e}, m={len(X)}, "
                        f"features={n_aug}); add ridge or more data")
    # K (G + rI) = A_cross  ->  (G + rI)ᵀ Kᵀ = A_crossᵀ
    K = np.linalg.solve(G + ridge * np.eye(n_aug), A_cross.T).T
    n = dictionary.size
    A, B = K[:, :n], K[:, n:]

    S = np.hstack([lift(X, dictionary), U])
    residual = float(np.mean(np.sum((lift(Xn, dictionary) - S @ K.T) ** 2, axis=1)))
    model = EdmdModel(dictionary=dictionary, n_u=n_u, A=A, B=B, ridge=float(ridge),
                      lambda_min_G=lam_min, kappa_G=cond_spd(G), residual=residual)
    logger.info("edmd_fit: %s dictionary, %d features, m=%d, kappa(G)=%.3e, residual=%.3e",
                dictionary.kind.value, n, len(X), model.kappa_G, residual)
    return model


class EdmdRollout(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    states: np.ndarray     # (steps, n_x), NaN rows after a blow-up
    truncated: bool = False


def edmd_rollout(model: EdmdModel, x0: np.ndarray, controls: Optional[np.ndarray] = None,
                 T: Optional[int] = None) -> EdmdRollout:
    """x̂_k read from the lifted state after k applications of (A, B)."""
    if controls is None or (np.size(controls) == 0 and np.ndim(controls) < 2):
        if T is None:
            raise ValueError("edmd_rollout: give controls or a horizon T")
        controls = np.zeros((T, model.n_u))
    controls = as_controls(controls, model.n_u)
    steps = len(controls) if T is None else T
    if steps > len(controls):
        raise ValueError(f"edmd_rollout: T={steps} exceeds the {len(controls)} controls given")
    phi = lift(x0, model.dictionary)
    out = np.full((steps, model.n_x), np.nan)
    truncated = False
    for k in range(steps):
        phi = model.A @ phi + model.B @ controls[k]
        if not np.all(np.isfinite(phi)) or np.linalg.norm(phi) > BLOWUP_NORM:
            truncated = True
            logger.warning("edmd_rollout: lifted state blew up at step %d", k + 1)
            break
        out[k] = phi[model.state_index]
    return EdmdRollout(states=out, truncated=truncated)


def fit_residual(model: EdmdModel, data) -> float:
    """Mean squared one-step lifted residual ‖Φ(x⁺) - K[Φ(x); u]‖² on the given transitions."""
    X, U, Xn = _transition_arrays(data)
    S = np.hstack([lift(X, model.dictionary), U])
    return float(np.mean(np.sum((lift(Xn, model.dictionary) - S @ model.K.T) ** 2, axis=1)))


def prediction_error(model: EdmdModel, S: np.ndarray, U: np.ndarray) -> float:
    """Mean over windows of (1/T) Σ_k ‖x̂_k - x_k‖², blown windows count as 1e10."""
    errors: List[float] = []
    T = S.shape[1] - 1
    for states, controls in zip(S, U):
        roll = edmd_rollout(model, states[0], controls, T)
        if roll.truncated:
            errors.append(koopman_engine.LOSS_CLIP)
            continue
        errors.append(float(np.mean(np.sum((roll.states - states[1:]) ** 2, axis=1))))
    return float(np.mean(errors))


def save_edmd(model: EdmdModel, path: str) -> str:
    meta = {
        "dictionary": model.dictionary.descriptor(),
        "n_u": model.n_u,
        "ridge": model.ridge,
        "lambda_min_G": model.lambda_min_G,
        "kappa_G": model.kappa_G,
        "residual": model.residual,
    }
    blocks = [("A", model.A), ("B", model.B)]
    if model.dictionary.kind == DictionaryKind.NEURAL:
        meta["encoder"] = koopman_engine.model_meta(model.dictionary.network)
        blocks += koopman_engine.model_blocks(model.dictionary.network, prefix="encoder.")
    return write_container(path, "edmd", meta, blocks)


def load_edmd(path: str) -> EdmdModel:
    _, meta, blocks = read_container(path, "edmd")
    try:
        desc = meta["dictionary"]
        kind = DictionaryKind(desc["kind"])
        network = None
        if kind == DictionaryKind.NEURAL:
            network = koopman_engine.model_from_blocks(meta["encoder"], blocks, prefix="encoder.")
        dictionary = Dictionary(kind=kind, n_in=int(desc["n_in"]), max_degree=int(desc["max_degree"]),
                                network=network)
        A, B = blocks["A"].copy(), blocks["B"].copy()
        if A.shape != (dictionary.size, dictionary.size) or B.shape != (dictionary.size, int(meta["n_u"])):
            raise FormatError(f"load_edmd: A{A.shape}/B{B.shape} do not match a {dictionary.size}-feature dictionary")
        return EdmdModel(dictionary=dictionary, n_u=int(meta["n_u"]), A=A, B=B, ridge=float(meta["ridge"]),
                         lambda_min_G=float(meta["lambda_min_G"]), kappa_G=float(meta["kappa_G"]),
                         residual=float(meta["residual"]))
    except KeyError as exc:
        raise FormatError(f"load_edmd: field {exc} is missing") from exc
    except ValueError as exc:
        raise FormatError(f"load_edmd: invalid header ({exc})") from exc
