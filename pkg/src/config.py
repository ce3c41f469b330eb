import os
import json
from typing import Any, Dict, List

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field

from src.errors import UsageError

SCHEMA_VERSION = 1


class Settings(BaseModel):
    """Process-wide defaults read from the environment (.env supported)."""
    model_config = ConfigDict(extra="ignore")

    out_dir: str = "results"
    workers: int = Field(1, ge=1)
    log_level: str = "INFO"


def load_settings() -> Settings:
    load_dotenv()
    return Settings(
        out_dir=os.getenv("KOOPLAB_OUT_DIR", "results"),
        workers=int(os.getenv("KOOPLAB_WORKERS", "1")),
        log_level=os.getenv("KOOPLAB_LOG_LEVEL", "INFO").upper(),
    )


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(doc: Dict[str, Any], overrides: List[str]) -> Dict[str, Any]:
    """
    Applies "dotted.path=value" overrides to a raw config document.
    Values are parsed as JSON when possible ("3" -> 3, "[1,2]" -> list), else kept as text.
    """
    out = json.loads(json.dumps(doc))
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override '{item}' must look like key.path=value")
        path, raw = item.split("=", 1)
        keys = [k for k in path.strip().split(".") if k]
        if not keys:
            raise UsageError(f"override '{item}' has an empty key path")
        node = out
        for key in keys[:-1]:
            if not isinstance(node.get(key), dict):
                node[key] = {}
            node = node[key]
        node[keys[-1]] = _parse_value(raw)
    return out


def check_schema(doc: Dict[str, Any]) -> Dict[str, Any]:
    version = doc.get("schema", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise UsageError(f"config schema {version!r} not supported (expected {SCHEMA_VERSION})")
    return doc
