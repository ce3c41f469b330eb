"""
Execution of a scaling grid: dataset -> training -> held-out error -> diagnostics -> record.
Coordinates run in a worker pool; the parent process is the only writer of records.jsonl.
"""
import logging
import os
import time
from multiprocessing import Pool
from typing import List, NamedTuple, Optional

import numpy as np

from src.data.pipeline import generate_dataset
from src.data.results_manager import ResultsManager
from src.data.training_manager import TrainingManager
from src.errors import KoopmanLabError
from src.logic import diagnostics_engine, koopman_engine
from src.logic.power_law_engine import coupled_schedule
from src.models.base import ExperimentRecord, GridConfig, LossVariant

logger = logging.getLogger(__name__)


class Coordinate(NamedTuple):
    m: int
    n_mult: int
    seed: int
    variant: LossVariant
    coeff: Optional[float] = None

    def record_key(self, env_name: str):
        return (env_name, self.variant.value, self.m, self.n_mult, self.seed, self.coeff)

    def slug(self) -> str:
        base = f"m{self.m}_n{self.n_mult}_s{self.seed}_{self.variant.value.replace('+', 'p')}"
        return base if self.coeff is None else f"{base}_c{self.coeff:g}"


def grid_coordinates(cfg: GridConfig) -> List[Coordinate]:
    """Fixed enumeration order: m, n_mult, seed, variant (or n_mult, seed, variant on a coupled grid)."""
    coords = []
    if cfg.coupled_coeff is None:
        for m in cfg.m_list():
            for n_mult in cfg.n_mult_values:
                for seed in cfg.seed_list():
                    for variant in cfg.variants:
                        coords.append(Coordinate(m, n_mult, seed, LossVariant(variant)))
        return coords
    n_values = [(k + 1) * cfg.env.n_x for k in cfg.n_mult_values]
    schedule = dict(coupled_schedule(cfg.coupled_coeff, n_values))
    for n_mult, n in zip(cfg.n_mult_values, n_values):
        for seed in cfg.seed_list():
            for variant in cfg.variants:
                coords.append(Coordinate(schedule[n], n_mult, seed, LossVariant(variant), cfg.coupled_coeff))
    return coords


def run_coordinate(cfg: GridConfig, coord: Coordinate, out_dir: str) -> ExperimentRecord:
    env = cfg.env
    n = (coord.n_mult + 1) * env.n_x
    base = dict(env=env.name, variant=coord.variant, m=coord.m, n_mult=coord.n_mult, n=n,
                seed=coord.seed, coeff=coord.coeff)
    start = time.perf_counter()
    try:
        train_cfg = cfg.train.for_variant(coord.variant).model_copy(update={"seed": coord.seed})
        data = generate_dataset(env, coord.m, train_cfg.T, coord.seed)
        model, report = TrainingManager(train_cfg).train(data, coord.n_mult)
        diag = diagnostics_engine.diagnose(model, data)
        model_path = os.path.join(out_dir, "models", f"{env.name}_{coord.slug()}.kml")
        koopman_engine.save_model(model, model_path)
        return ExperimentRecord(**base, eps_test=report.eps_test, kappa_G=diag.kappa_G,
                                kappa_BtB=diag.kappa_BtB, mean_offdiag_corr=diag.mean_abs_offdiag_corr,
                                wall_s=time.perf_counter() - start, status=report.status,
                                model_path=model_path)
    except (KoopmanLabError, ValueError, np.linalg.LinAlgError) as exc:
        logger.error("grid coordinate %s failed: %s", coord.slug(), exc)
        return ExperimentRecord(**base, wall_s=time.perf_counter() - start, status=f"failed: {exc}")


def _run_task(task) -> ExperimentRecord:
    cfg, coord, out_dir = task
    return run_coordinate(cfg, coord, out_dir)


def run_grid(cfg: GridConfig, out_dir: str, workers: int = 1) -> List[ExperimentRecord]:
    """
    Runs every coordinate without a record yet and returns all records of the grid
    (existing and new). Failed runs are recorded with their status and the grid continues.
    """
    store = ResultsManager(out_dir)
    existing = {r.key(): r for r in store.load_records()}
    coords = grid_coordinates(cfg)
    pending = [c for c in coords if c.record_key(cfg.env.name) not in existing]
    logger.info("grid %s: %d coordinates, %d already recorded, %d to run (workers=%d)",
                cfg.env.name, len(coords), len(coords) - len(pending), len(pending), workers)

    tasks = [(cfg, c, out_dir) for c in pending]
    if workers > 1 and len(tasks) > 1:
        with Pool(processes=workers) as pool:
            for record in pool.imap(_run_task, tasks):
                store.append(record)
                existing[record.key()] = record
                logger.info("recorded %s m=%d n_mult=%d seed=%d: eps=%.4e (%s)", record.variant.value,
                            record.m, record.n_mult, record.seed, record.eps_test, record.status)
    else:
        for task in tasks:
            record = _run_task(task)
            store.append(record)
            existing[record.key()] = record
            logger.info("recorded %s m=%d n_mult=%d seed=%d: eps=%.4e (%s)", record.variant.value,
                        record.m, record.n_mult, record.seed, record.eps_test, record.status)
    return [existing[c.record_key(cfg.env.name)] for c in coords]
