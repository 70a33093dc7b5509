"""Access to the JSON schemas shipped with the package."""

import json
from functools import lru_cache
from importlib import resources

SCHEMA_NAMES = ("analysis", "estimate", "profile", "manifest", "model", "compat",
                "train_report", "event")


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    """Parsed schema ``<name>.schema.json``; cross-file refs use the file name."""
    if name not in SCHEMA_NAMES:
        raise KeyError(f"unknown schema {name!r}")
    text = resources.files("bpclip").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)
