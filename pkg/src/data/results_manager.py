import json
import logging
import math
import os
from typing import Dict, List, Optional, Sequence, Set, Tuple

import pandas as pd

from src.errors import FormatError
from src.models.base import ExperimentRecord

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["env", "variant", "m", "n_mult", "n", "seed", "eps_test", "kappa_G", "kappa_BtB",
               "mean_offdiag_corr", "wall_s", "status", "coeff", "model_path"]
OPTIONAL_FLOATS = ("kappa_BtB", "coeff")


def _record_row(record: ExperimentRecord) -> dict:
    row = record.model_dump()
    row["variant"] = record.variant.value
    return row


class ResultsManager:
    """
    Experiment log of one results grid.
    One JSON line per grid coordinate in records.jsonl; only the parent process writes.
    """

    def __init__(self, out_dir: str = "results"):
        self.out_dir = out_dir
        self.path = os.path.join(out_dir, "records.jsonl")
        os.makedirs(out_dir, exist_ok=True)

    def load_records(self) -> List[ExperimentRecord]:
        if not os.path.exists(self.path):
            return []
        records = []
        with open(self.path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    records.append(ExperimentRecord.model_validate(json.loads(line)))
                except (json.JSONDecodeError, ValueError) as exc:
                    raise FormatError(f"load_records: {self.path} line {lineno} is not a valid record ({exc})") from exc
        return records

    def completed_keys(self) -> Set[Tuple]:
        return {r.key() for r in self.load_records()}

    def append(self, record: ExperimentRecord):
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(_record_row(record), sort_keys=True) + "\n")
            f.flush()

    def export(self, records: Sequence[ExperimentRecord], fits: Dict[str, dict],
               improvements: Optional[Dict[str, dict]] = None) -> Dict[str, str]:
        return export_results(records, fits, self.out_dir, improvements)


def export_results(records: Sequence[ExperimentRecord], fits: Dict[str, dict], out_dir: str,
                   improvements: Optional[Dict[str, dict]] = None) -> Dict[str, str]:
    """results.csv (one row per record), fits.json and, when given, improvements.json."""
    if not records:
        raise ValueError("export_results: no records to export")
    os.makedirs(out_dir, exist_ok=True)
    paths = {"csv": os.path.join(out_dir, "results.csv"), "fits": os.path.join(out_dir, "fits.json")}
    df = pd.DataFrame([_record_row(r) for r in records], columns=CSV_COLUMNS)
    df.to_csv(paths["csv"], index=False)
    with open(paths["fits"], "w", encoding="utf-8") as f:
        json.dump(fits, f, indent=2, sort_keys=True)
    if improvements is not None:
        paths["improvements"] = os.path.join(out_dir, "improvements.json")
        with open(paths["improvements"], "w", encoding="utf-8") as f:
            json.dump(improvements, f, indent=2, sort_keys=True)
    logger.info("exported %d records and %d fits to %s", len(records), len(fits), out_dir)
    return paths


def load_records_csv(path: str) -> List[ExperimentRecord]:
    try:
        df = pd.read_csv(path, float_precision="round_trip", keep_default_na=True)
    except (OSError, pd.errors.ParserError) as exc:
        raise FormatError(f"load_records_csv: cannot read {path} ({exc})") from exc
    missing = [c for c in CSV_COLUMNS[:12] if c not in df.columns]
    if missing:
        raise FormatError(f"load_records_csv: column(s) {missing} missing in {path}")
    records = []
    for row in df.to_dict(orient="records"):
        for name in OPTIONAL_FLOATS:
            value = row.get(name)
            if value is None or (isinstance(value, float) and math.isnan(value)):
                row[name] = None
        path_value = row.get("model_path")
        row["model_path"] = "" if path_value is None or (isinstance(path_value, float) and math.isnan(path_value)) \
            else str(path_value)
        records.append(ExperimentRecord.model_validate(row))
    return records
