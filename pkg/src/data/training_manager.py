import logging
import time
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from src.data.pipeline import Dataset
from src.logic import koopman_engine, nndm_engine
from src.logic.numerics import adam_step, finite_diff_grad, make_rng
from src.models.base import AdamState, TrainConfig, TrainReport

logger = logging.getLogger(__name__)

DIVERGENCE_LOSS = 1e10
DIVERGENCE_EPOCHS = 3
GRAD_CHECK_COORDS = 24
GRAD_CHECK_TOL = 1e-4
GRAD_CHECK_FLOOR = 1e-4

# (params, S, U) -> (total, grad, {"pred": .., "cov": .., "ctrl": .., ...}, blown)
BatchLoss = Callable[[np.ndarray, np.ndarray, np.ndarray], Tuple[float, np.ndarray, Dict[str, float], bool]]


class TrainingManager:
    """
    Training orchestrator: one Adam loop shared by the Koopman model and the NNDM.
    Cycle: full windows -> fixed per-epoch shuffle -> mini-batches -> held-out evaluation.
    """

    def __init__(self, cfg: TrainConfig, grad_check: bool = False):
        self.cfg = cfg
        self.grad_check = grad_check

    # ------------------------------------------------------------ models

    def train(self, data: Dataset, n_mult: int,
              init: Optional[koopman_engine.KoopmanModel] = None) -> Tuple[koopman_engine.KoopmanModel, TrainReport]:
        cfg = self.cfg
        model = init or koopman_engine.init_model(data.env.n_x, data.env.n_u, n_mult, cfg.seed, cfg.hidden_width)

        def batch_loss(params, S, U):
            out = koopman_engine.composite_loss(model.with_vector(params), (S, U), cfg)
            return out.total, out.grad, {"pred": out.pred, "cov": out.cov, "ctrl": out.ctrl}, out.blown

        params, report = self._fit(model.to_vector(), batch_loss, data)
        trained = model.with_vector(params)
        S_test, U_test = data.window_arrays("test", cfg.T)
        eps = koopman_engine.prediction_error(trained, S_test, U_test)
        report = report.model_copy(update={"eps_test": eps, "param_count": trained.param_count})
        logger.info("train: koopman n=%d finished, eps_test=%.4e status=%s (%.1fs)",
                    trained.n, eps, report.status, report.wall_s)
        return trained, report

    def train_nndm(self, data: Dataset, n_mult: Optional[int] = None,
                   hidden_width: Optional[int] = None) -> Tuple[nndm_engine.NndmModel, TrainReport]:
        """NNDM with the parameter count of the Koopman model of latent multiplier `n_mult`."""
        cfg = self.cfg
        env = data.env
        target = None
        if hidden_width is None:
            ref = koopman_engine.init_model(env.n_x, env.n_u, n_mult or 1, cfg.seed, cfg.hidden_width)
            target = ref.param_count
        model = nndm_engine.init_nndm(env.n_x, env.n_u, cfg.seed, hidden_width=hidden_width, target_params=target)

        def batch_loss(params, S, U):
            out = nndm_engine.nndm_loss_and_grads(model.with_vector(params), S, U, cfg)
            parts = {"pred": out.rollout, "cov": 0.0, "ctrl": 0.0, "one_step": out.one_step}
            return out.total, out.grad, parts, out.blown

        params, report = self._fit(model.to_vector(), batch_loss, data)
        trained = model.with_vector(params)
        S_test, U_test = data.window_arrays("test", cfg.T)
        eps = nndm_engine.prediction_error(trained, S_test, U_test)
        report = report.model_copy(update={"eps_test": eps, "param_count": trained.param_count,
                                           "param_target": target})
        logger.info("train_nndm: widths %dx%d (%d params, target %s), eps_test=%.4e status=%s",
                    trained.hidden_width, trained.hidden_width2, trained.param_count, target, eps, report.status)
        return trained, report

    # ------------------------------------------------------------ shared loop

    def _fit(self, params: np.ndarray, batch_loss: BatchLoss, data: Dataset) -> Tuple[np.ndarray, TrainReport]:
        cfg = self.cfg
        start = time.perf_counter()
        S, U = data.window_arrays("train", cfg.T)
        n_windows = len(S)
        n_batches = max(1, int(np.ceil(n_windows / cfg.batch_size)))
        shuffle_rng = make_rng(cfg.seed, 3)
        state = AdamState.zeros(params.size, learning_rate=cfg.learning_rate)
        decay_epoch = int(cfg.lr_decay_at * cfg.epochs)

        grad_status = "not-run"
        if self.grad_check and cfg.epochs > 0:
            grad_status = self._check_gradient(params, batch_loss, S[:min(n_windows, 8)], U[:min(n_windows, 8)])

        epoch_losses = []
        blowups = 0
        over_limit = 0
        status = "ok"
        for epoch in range(cfg.epochs):
            if epoch == decay_epoch and epoch > 0:
                state = state.model_copy(update={"learning_rate": state.learning_rate * cfg.lr_decay})
                logger.debug("epoch %d: learning rate decayed to %.3e", epoch, state.learning_rate)
            order = shuffle_rng.permutation(n_windows)
            sums: Dict[str, float] = {"total": 0.0}
            for batch in np.array_split(order, n_batches):
                total, grad, parts, blown = batch_loss(params, S[batch], U[batch])
                blowups += int(blown)
                params, state = adam_step(params, grad, state)
                sums["total"] += total
                for key, value in parts.items():
                    sums[key] = sums.get(key, 0.0) + value
            means = {key: value / n_batches for key, value in sums.items()}
            epoch_losses.append(means)
            if (epoch + 1) % cfg.log_every == 0 or epoch + 1 == cfg.epochs:
                logger.info("epoch %d/%d: %s", epoch + 1, cfg.epochs,
                            " ".join(f"{key}={value:.4e}" for key, value in means.items()))

            over_limit = over_limit + 1 if means["total"] >= DIVERGENCE_LOSS else 0
            if over_limit >= DIVERGENCE_EPOCHS:
                status = "diverged"
                logger.warning("training aborted: loss above %.0e for %d consecutive epochs (epoch %d)",
                               DIVERGENCE_LOSS, DIVERGENCE_EPOCHS, epoch + 1)
                break

        report = TrainReport(epoch_losses=epoch_losses, grad_check=grad_status,
                             wall_s=time.perf_counter() - start, status=status, blowups=blowups)
        return params, report

    def _check_gradient(self, params: np.ndarray, batch_loss: BatchLoss, S: np.ndarray, U: np.ndarray) -> str:
        """Central differences on a random subset of coordinates at the initial parameters."""
        _, grad, _, blown = batch_loss(params, S, U)
        if blown:
            return "skipped: blow-up at init"
        rng = make_rng(self.cfg.seed, 5)
        coords = rng.choice(params.size, size=min(GRAD_CHECK_COORDS, params.size), replace=False)
        numeric = finite_diff_grad(lambda p: batch_loss(p, S, U)[0], params, indices=coords)
        diff = np.abs(numeric[coords] - grad[coords])
        magnitude = np.maximum(np.abs(numeric[coords]), np.abs(grad[coords]))
        # floor scales with the largest checked entry
        scale = np.maximum(magnitude, GRAD_CHECK_FLOOR * max(1.0, float(magnitude.max())))
        worst = float(np.max(diff / scale))
        status = "passed" if worst < GRAD_CHECK_TOL else f"failed: max relative deviation {worst:.2e}"
        logger.info("gradient check on %d coordinates: %s", len(coords), status)
        return status


def train(data: Dataset, cfg: TrainConfig, n_mult: int = 4) -> Tuple[koopman_engine.KoopmanModel, TrainReport]:
    return TrainingManager(cfg).train(data, n_mult)


def train_nndm(data: Dataset, cfg: TrainConfig, n_mult: int = 4) -> Tuple[nndm_engine.NndmModel, TrainReport]:
    return TrainingManager(cfg).train_nndm(data, n_mult)
