"""
Command-line entry point of the Koopman lab.

    python run_lab.py <command> [--config cfg.json] [--set key.path=value ...] [--out DIR] [--seed N]

Exit codes: 0 success, 1 usage/config error, 2 numerical or runtime failure.
"""
import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ValidationError

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from src.config import apply_overrides, check_schema, load_settings
from src.data.model_store import load_any_model, load_dataset, save_dataset
from src.data.pipeline import generate_dataset
from src.data.results_manager import ResultsManager, export_results, load_records_csv
from src.data.training_manager import TrainingManager
from src.errors import KoopmanLabError, UsageError
from src.logic import diagnostics_engine, edmd_engine, koopman_engine, nndm_engine
from src.logic.grid_runner import run_grid
from src.logic.mpc_engine import (KoopmanMpcController, RandomShootingController, run_closed_loop,
                                  save_closed_loop, sinusoid_reference)
from src.logic.power_law_engine import coupled_schedule, fit_groups, variant_improvements
from src.models.base import DataRunConfig, GridConfig, MpcRunConfig, TrainRunConfig

logger = logging.getLogger("kooplab")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kooplab", description="Koopman scaling lab")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p: argparse.ArgumentParser, config: bool = True):
        if config:
            p.add_argument("--config", help="JSON config document")
            p.add_argument("--set", dest="overrides", action="append", default=[],
                           metavar="KEY=VALUE", help="dotted-path override, repeatable")
        p.add_argument("--out", help="output directory (default: KOOPLAB_OUT_DIR)")
        p.add_argument("--seed", type=int, help="overrides every seed in the config")
        p.add_argument("--log-level", help="DEBUG, INFO, WARNING, ...")

    p = sub.add_parser("gen-data", help="generate a Strategy-I dataset")
    common(p)
    p.add_argument("--env", help="environment preset")
    p.add_argument("--m", type=int, help="train transitions")
    p.add_argument("--window", type=int, help="transitions per window")

    p = sub.add_parser("train", help="train a Koopman, NNDM or EDMD model")
    common(p)
    p.add_argument("--data", help="dataset file (generated from the config when omitted)")
    p.add_argument("--grad-check", action="store_true", help="finite-difference check before training")

    p = sub.add_parser("eval", help="held-out multi-step error of a model")
    common(p, config=False)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--T", type=int, default=5, help="evaluation horizon")

    p = sub.add_parser("mpc", help="closed-loop tracking episode")
    common(p)
    p.add_argument("--model", required=True)

    p = sub.add_parser("diag", help="conditioning and correlation diagnostics")
    common(p, config=False)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("grid", help="run a scaling grid and export results")
    common(p)
    p.add_argument("--workers", type=int, help="worker processes (default: KOOPLAB_WORKERS)")

    p = sub.add_parser("fit", help="power-law fits from a results CSV")
    common(p, config=False)
    p.add_argument("--points", required=True, help="results.csv")
    p.add_argument("--axis", default="all", choices=["m", "n", "coupled", "all"])

    p = sub.add_parser("schedule", help="coupled m = coeff·n·ln n schedule")
    common(p, config=False)
    p.add_argument("--coeff", type=float, required=True)
    p.add_argument("--n-values", type=int, nargs="+", required=True)
    return parser


# ---------------------------------------------------------------- config plumbing

def _read_doc(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as exc:
        raise UsageError(f"cannot read config {path} ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must be a JSON object")
    return doc


def _resolve(model_cls, args, flags: Dict[str, Any], seed_paths: List[str]) -> BaseModel:
    doc = check_schema(_read_doc(getattr(args, "config", None)))
    for key, value in flags.items():
        if value is not None:
            doc[key] = value
    overrides = list(getattr(args, "overrides", []) or [])
    if args.seed is not None:
        overrides += [f"{path}={args.seed}" for path in seed_paths]
    doc = apply_overrides(doc, overrides)
    return model_cls.model_validate(doc)


def _announce(command: str, cfg: Optional[BaseModel], seed: Optional[int], out_dir: str):
    print(f"--- kooplab {command} ---")
    if cfg is not None:
        print("Config: " + cfg.model_dump_json(by_alias=True))
    print(f"Seed: {seed if seed is not None else '-'}")
    print(f"Salida: {out_dir}")


def _write_json(path: str, payload: Any):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def _prediction_error(model, data, T: int) -> float:
    S, U = data.window_arrays("test", T)
    if isinstance(model, koopman_engine.KoopmanModel):
        return koopman_engine.prediction_error(model, S, U)
    if isinstance(model, edmd_engine.EdmdModel):
        return edmd_engine.prediction_error(model, S, U)
    return nndm_engine.prediction_error(model, S, U)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, out_dir: str) -> int:
    cfg = _resolve(DataRunConfig, args, {"env": args.env, "m": args.m, "window": args.window}, ["seed"])
    _announce("gen-data", cfg, cfg.seed, out_dir)
    data = generate_dataset(cfg.env, cfg.m, cfg.window, cfg.seed)
    path = save_dataset(data, os.path.join(out_dir, "dataset.kml"))
    print(f"Dataset: {path}")
    print(f"m={data.m} ventanas train={len(data.train_index)} test={len(data.test_index)}")
    return 0


def cmd_train(args, out_dir: str) -> int:
    cfg = _resolve(TrainRunConfig, args, {}, ["train.seed"])
    _announce("train", cfg, cfg.train.seed, out_dir)
    env = cfg.env
    if args.data:
        data = load_dataset(args.data)
    else:
        data = generate_dataset(env, cfg.m, cfg.train.T, cfg.train.seed)
        save_dataset(data, os.path.join(out_dir, "dataset.kml"))

    model_path = os.path.join(out_dir, "model.kml")
    if cfg.model == "edmd":
        dictionary = edmd_engine.Dictionary.polynomial(env.n_x, cfg.edmd_degree)
        model = edmd_engine.edmd_fit(data, dictionary)
        edmd_engine.save_edmd(model, model_path)
        summary = {"model": "edmd", "eps_test": _prediction_error(model, data, cfg.train.T),
                   "kappa_G": model.kappa_G, "residual": model.residual}
    else:
        manager = TrainingManager(cfg.train, grad_check=args.grad_check)
        if cfg.model == "nndm":
            model, report = manager.train_nndm(data, cfg.n_mult)
            nndm_engine.save_nndm(model, model_path)
        else:
            model, report = manager.train(data, cfg.n_mult)
            koopman_engine.save_model(model, model_path)
        summary = dict(report.model_dump(mode="json"), model=cfg.model)
        print(f"Parametros: {report.param_count}  Estado: {report.status}  Grad-check: {report.grad_check}")
    _write_json(os.path.join(out_dir, "report.json"), summary)
    print(f"Modelo: {model_path}")
    print(f"eps_test final: {summary['eps_test']!r}")
    return 0


def cmd_eval(args, out_dir: str) -> int:
    _announce("eval", None, None, out_dir)
    model = load_any_model(args.model)
    data = load_dataset(args.data)
    eps = _prediction_error(model, data, args.T)
    _write_json(os.path.join(out_dir, "eval.json"), {"model": args.model, "T": args.T, "eps_test": eps})
    print(f"eps_test (T={args.T}): {eps!r}")
    return 0


def cmd_mpc(args, out_dir: str) -> int:
    cfg = _resolve(MpcRunConfig, args, {}, ["seed"])
    _announce("mpc", cfg, cfg.seed, out_dir)
    env = cfg.env
    model = load_any_model(args.model)
    if isinstance(model, nndm_engine.NndmModel):
        lo, hi = cfg.mpc.bounds(env.n_u, env)
        controller = RandomShootingController(model, cfg.mpc.H, cfg.n_samples, cfg.seed, lo, hi)
    else:
        controller = KoopmanMpcController(model, cfg.mpc, env)
    reference = sinusoid_reference(env, cfg.steps + cfg.mpc.H, cfg.amplitude, cfg.frequency)
    result = run_closed_loop(env, controller, reference, cfg.steps, cfg.fail_threshold)
    save_closed_loop(result, os.path.join(out_dir, "closed_loop.json"), os.path.join(out_dir, "closed_loop.csv"))
    print(f"Error de seguimiento medio: {result.tracking_error:.6f}")
    print(f"Pasos de supervivencia: {result.survival_steps}/{result.steps}" + ("  (truncado)" if result.truncated else ""))
    return 0


def cmd_diag(args, out_dir: str) -> int:
    _announce("diag", None, None, out_dir)
    model = load_any_model(args.model)
    data = load_dataset(args.data)
    report = diagnostics_engine.diagnose(model, data)
    diagnostics_engine.save_report(report, os.path.join(out_dir, "diagnostics.json"),
                                   os.path.join(out_dir, "correlation.csv"))
    print(f"kappa(G): {report.kappa_G:.6e}")
    print(f"kappa(BtB): {report.kappa_BtB if report.kappa_BtB is not None else 'n/a'}")
    print(f"media |corr| fuera de la diagonal: {report.mean_abs_offdiag_corr:.4f}")
    return 0


def cmd_grid(args, out_dir: str, workers: int) -> int:
    cfg = _resolve(GridConfig, args, {}, [])
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seeds": [args.seed]})
    _announce("grid", cfg, args.seed, out_dir)
    records = run_grid(cfg, out_dir, workers=workers)
    fits = fit_groups(records)
    paths = ResultsManager(out_dir).export(records, fits, variant_improvements(records))
    failed = sum(1 for r in records if r.status != "ok")
    print(f"Registros: {len(records)} (fallidos: {failed})")
    for key, fit in fits.items():
        if key.endswith("|mean"):
            print(f"  {key}: alpha={fit['alpha']:.4f} C={fit['C']:.3e} r2={fit['r2']:.4f}")
    print(f"CSV: {paths['csv']}")
    return 0


def cmd_fit(args, out_dir: str) -> int:
    _announce("fit", None, None, out_dir)
    records = load_records_csv(args.points)
    fits = fit_groups(records, args.axis)
    paths = export_results(records, fits, out_dir, variant_improvements(records))
    for key, fit in fits.items():
        print(f"  {key}: A={fit['A']:.4e} alpha={fit['alpha']:.4f} C={fit['C']:.3e} r2={fit['r2']:.4f}")
    print(f"Ajustes: {paths['fits']}")
    return 0


def cmd_schedule(args, out_dir: str) -> int:
    _announce("schedule", None, None, out_dir)
    pairs = coupled_schedule(args.coeff, args.n_values)
    _write_json(os.path.join(out_dir, "schedule.json"),
                {"coeff": args.coeff, "schedule": [{"n": n, "m": m} for n, m in pairs]})
    for n, m in pairs:
        print(f"  n={n:4d}  m={m}")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    settings = load_settings()
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1

    try:
        logging.basicConfig(level=(args.log_level or settings.log_level).upper(),
                            format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    out_dir = args.out or settings.out_dir
    handlers = {
        "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "mpc": cmd_mpc,
        "diag": cmd_diag, "fit": cmd_fit, "schedule": cmd_schedule,
    }
    try:
        os.makedirs(out_dir, exist_ok=True)
        if args.command == "grid":
            return cmd_grid(args, out_dir, args.workers or settings.workers)
        return handlers[args.command](args, out_dir)
    except (UsageError, ValidationError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (KoopmanLabError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
