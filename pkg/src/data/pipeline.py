"""
Strategy-I data generation: uniform initial states and uniform per-step controls,
rolled out through the true environment into fixed-length windows.
"""
import logging
import math
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from src.data.environments import rollout
from src.errors import EnvError
from src.logic.numerics import make_rng
from src.models.base import EnvSpec

logger = logging.getLogger(__name__)

TEST_TRANSITIONS = 2048
RESAMPLE_CAP = 100


class Trajectory(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    states: np.ndarray    # (L+1, n_x)
    controls: np.ndarray  # (L, n_u)

    @model_validator(mode="after")
    def _check_lengths(self):
        if self.states.ndim != 2 or self.controls.ndim != 2:
            raise ValueError("states and controls must be 2-D arrays")
        if len(self.states) != len(self.controls) + 1:
            raise ValueError("a trajectory of L controls needs L+1 states")
        return self

    @property
    def length(self) -> int:
        return len(self.controls)


class Dataset(BaseModel):
    """Immutable collection of windows with a disjoint train/test split."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    env: EnvSpec
    seed: int
    m: int
    window: int
    windows: List[Trajectory]
    train_index: List[int]
    test_index: List[int]

    @model_validator(mode="after")
    def _check_split(self):
        if set(self.train_index) & set(self.test_index):
            raise ValueError("train and test windows overlap")
        total = sum(self.windows[i].length for i in self.train_index)
        if total != self.m:
            raise ValueError(f"train transitions {total} != m={self.m}")
        return self

    @property
    def train_windows(self) -> List[Trajectory]:
        return [self.windows[i] for i in self.train_index]

    @property
    def test_windows(self) -> List[Trajectory]:
        return [self.windows[i] for i in self.test_index]

    def _split(self, split: str) -> List[Trajectory]:
        if split == "train":
            return self.train_windows
        if split == "test":
            return self.test_windows
        raise ValueError(f"unknown split '{split}'")

    def transitions(self, split: str = "train") -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(X, U, X⁺) stacked over every transition of the split."""
        wins = self._split(split)
        X = np.concatenate([w.states[:-1] for w in wins])
        U = np.concatenate([w.controls for w in wins])
        Xn = np.concatenate([w.states[1:] for w in wins])
        return X, U, Xn

    def states(self, split: str = "test") -> np.ndarray:
        return np.concatenate([w.states for w in self._split(split)])

    def window_arrays(self, split: str, T: int) -> Tuple[np.ndarray, np.ndarray]:
        """
        Windows with at least T transitions, cut to T: states (b, T+1, n_x), controls (b, T, n_u).
        """
        wins = [w for w in self._split(split) if w.length >= T]
        if not wins:
            raise ValueError(f"no {split} window has {T} transitions (window={self.window})")
        S = np.stack([w.states[:T + 1] for w in wins])
        U = np.stack([w.controls[:T] for w in wins])
        return S, U


def _sample_window(spec: EnvSpec, rng: np.random.Generator, length: int,
                   low: np.ndarray, high: np.ndarray) -> Trajectory:
    u_lo, u_hi = spec.control_bounds()
    for attempt in range(RESAMPLE_CAP):
        x0 = rng.uniform(low, high)
        controls = rng.uniform(u_lo, u_hi, size=(length, spec.n_u)) if spec.n_u else np.zeros((length, 0))
        try:
            states = rollout(spec, x0, controls)
        except EnvError as exc:
            logger.debug("window rejected (attempt %d): %s", attempt + 1, exc)
            continue
        if np.all(np.isfinite(states)):
            return Trajectory(states=states, controls=controls)
    raise EnvError(f"generate_dataset: {spec.name} blew up {RESAMPLE_CAP} times for one window")


def generate_dataset(spec: EnvSpec, m: int, window: int, seed: int,
                     bounds: Optional[Tuple[List[float], List[float]]] = None,
                     test_transitions: int = TEST_TRANSITIONS) -> Dataset:
    """
    ⌈m/window⌉ train windows holding exactly m transitions (the last one truncated if
    needed) plus ⌈test_transitions/window⌉ test windows from an independent child stream.
    """
    if window < 1:
        raise ValueError("generate_dataset: window must be >= 1")
    if m < window:
        raise ValueError(f"generate_dataset: m={m} must be >= window={window}")
    low = np.asarray(bounds[0] if bounds else spec.state_low, dtype=float)
    high = np.asarray(bounds[1] if bounds else spec.state_high, dtype=float)

    train_rng = make_rng(seed, 0)
    test_rng = make_rng(seed, 1)

    n_train = math.ceil(m / window)
    windows = []
    for k in range(n_train):
        length = min(window, m - k * window)
        windows.append(_sample_window(spec, train_rng, length, low, high))
    n_test = math.ceil(test_transitions / window)
    for _ in range(n_test):
        windows.append(_sample_window(spec, test_rng, window, low, high))

    data = Dataset(env=spec, seed=seed, m=m, window=window, windows=windows,
                   train_index=list(range(n_train)),
                   test_index=list(range(n_train, n_train + n_test)))
    logger.info("dataset %s: m=%d, %d train windows, %d test windows (seed=%d)",
                spec.name, m, n_train, n_test, seed)
    return data
