"""
Portable container shared by datasets and every model kind.

Layout (all integers little-endian):
    bytes 0..7    magic b"KOOPLAB\\x00"
    bytes 8..15   uint64 header length H
    next H bytes  UTF-8 JSON header, sorted keys, compact separators:
                  {"format_version": 1, "kind": ..., "meta": {...},
                   "blocks": [{"name": ..., "shape": [...]}, ...]}
    remainder     the blocks in header order, C-ordered little-endian float64

Writing is deterministic, so save -> load -> save reproduces the same bytes.
"""
import json
import os
import struct
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from src.errors import FormatError
from src.models.base import EnvSpec

MAGIC = b"KOOPLAB\x00"
FORMAT_VERSION = 1


def write_container(path: str, kind: str, meta: Dict[str, Any], blocks: List[Tuple[str, np.ndarray]]) -> str:
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta,
        "blocks": [{"name": name, "shape": list(np.shape(arr))} for name, arr in blocks],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for _, arr in blocks:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return path


def _require(header: Dict[str, Any], field: str, kind=None):
    if field not in header:
        raise FormatError(f"read_container: header field '{field}' is missing")
    value = header[field]
    if kind is not None and not isinstance(value, kind):
        raise FormatError(f"read_container: header field '{field}' has the wrong type")
    return value


def read_container(path: str, expected_kind: Optional[str] = None) -> Tuple[str, Dict[str, Any], Dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MAGIC:
        raise FormatError(f"read_container: {path} has a bad magic field")
    if len(raw) < 16:
        raise FormatError(f"read_container: {path} is truncated (header length)")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"read_container: header of {path} is not valid JSON ({exc})") from exc
    if not isinstance(header, dict):
        raise FormatError("read_container: header must be a JSON object")

    version = _require(header, "format_version", int)
    if version != FORMAT_VERSION:
        raise FormatError(f"read_container: field 'format_version'={version} not supported")
    kind = _require(header, "kind", str)
    if expected_kind is not None and kind != expected_kind:
        raise FormatError(f"read_container: field 'kind' is '{kind}', expected '{expected_kind}'")
    meta = _require(header, "meta", dict)
    block_specs = _require(header, "blocks", list)

    blocks: Dict[str, np.ndarray] = {}
    offset = 16 + header_len
    for spec in block_specs:
        if not isinstance(spec, dict) or "name" not in spec or "shape" not in spec:
            raise FormatError("read_container: field 'blocks' has a malformed entry")
        shape = tuple(int(s) for s in spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(raw):
            raise FormatError(f"read_container: block '{spec['name']}' runs past the end of the file")
        blocks[spec["name"]] = np.frombuffer(raw[offset:end], dtype="<f8").astype(float).reshape(shape)
        offset = end
    if offset != len(raw):
        raise FormatError(f"read_container: {len(raw) - offset} trailing bytes after the last block")
    return kind, meta, blocks


def save_dataset(data, path: str) -> str:
    """Windows are concatenated per block; per-window lengths live in the header."""
    lengths = [w.length for w in data.windows]
    meta = {
        "env": data.env.model_dump(mode="json"),
        "seed": data.seed,
        "m": data.m,
        "window": data.window,
        "lengths": lengths,
        "train_index": data.train_index,
        "test_index": data.test_index,
        "n_train": len(data.train_index),
        "n_test": len(data.test_index),
    }
    states = np.concatenate([w.states for w in data.windows])
    controls = np.concatenate([w.controls for w in data.windows])
    return write_container(path, "dataset", meta, [("states", states), ("controls", controls)])


def load_dataset(path: str):
    from src.data.pipeline import Dataset, Trajectory

    _, meta, blocks = read_container(path, "dataset")
    try:
        env = EnvSpec.model_validate(meta["env"])
        lengths = [int(v) for v in meta["lengths"]]
        states, controls = blocks["states"], blocks["controls"]
        windows = []
        s_off = c_off = 0
        for length in lengths:
            windows.append(Trajectory(states=states[s_off:s_off + length + 1].copy(),
                                      controls=controls[c_off:c_off + length].reshape(length, env.n_u).copy()))
            s_off += length + 1
            c_off += length
        return Dataset(env=env, seed=int(meta["seed"]), m=int(meta["m"]), window=int(meta["window"]),
                       windows=windows, train_index=list(meta["train_index"]),
                       test_index=list(meta["test_index"]))
    except KeyError as exc:
        raise FormatError(f"load_dataset: field {exc} is missing") from exc
    except ValueError as exc:
        raise FormatError(f"load_dataset: inconsistent dataset file ({exc})") from exc


def load_any_model(path: str):
    """Dispatches on the header 'kind' to the owning engine's loader."""
    kind, _, _ = read_container(path)
    if kind == "koopman":
        from src.logic.koopman_engine import load_model
        return load_model(path)
    if kind == "edmd":
        from src.logic.edmd_engine import load_edmd
        return load_edmd(path)
    if kind == "nndm":
        from src.logic.nndm_engine import load_nndm
        return load_nndm(path)
    raise FormatError(f"load_any_model: field 'kind'='{kind}' is not a model")
