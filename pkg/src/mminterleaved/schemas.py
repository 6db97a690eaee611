"""Access to the JSON/CSV schemas shipped with the package, and validators."""

from __future__ import annotations

import csv
import io
import json
from functools import lru_cache
from importlib import resources

import jsonschema


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    """``name`` is a file stem, e.g. ``"selftest"`` or ``"flops.csv"``."""
    suffix = ".json" if name.endswith(".csv") else ".schema.json"
    text = resources.files("mminterleaved").joinpath("schemas", name + suffix).read_text()
    return json.loads(text)


def validate_json(obj, name: str) -> None:
    jsonschema.validate(obj, load_schema(name))


_PARSERS = {"integer": int, "number": float, "string": str}


def validate_csv(text: str, name: str) -> int:
    """Check header and cell types; returns the number of data rows."""
    schema = load_schema(name)
    cols = schema["columns"]
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    expect = [c["name"] for c in cols]
    if header != expect:
        raise ValueError(f"{name}: header {header} != {expect}")
    n = 0
    for lineno, row in enumerate(reader, 2):
        if len(row) != len(cols):
            raise ValueError(f"{name}:{lineno}: {len(row)} cells, expected {len(cols)}")
        for c, cell in zip(cols, row):
            try:
                _PARSERS[c["type"]](cell)
            except ValueError:
                raise ValueError(f"{name}:{lineno}: {c['name']}={cell!r} is not {c['type']}") from None
        n += 1
    return n
