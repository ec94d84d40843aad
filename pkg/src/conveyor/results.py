"""Result tables: fixed columns, 12 significant digits, plot-ready text files."""
from __future__ import annotations

import csv
import io
import json
import math
from datetime import datetime, timezone
from functools import lru_cache
from importlib import resources
from pathlib import Path

FLOAT_FORMAT = "{:.12g}"


@lru_cache(maxsize=None)
def columns() -> dict:
    text = resources.files("conveyor").joinpath("data/columns.json").read_text()
    return {k: tuple(v) for k, v in json.loads(text).items()}


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float) or hasattr(value, "dtype"):
        value = float(value)
        if math.isnan(value):
            return "nan"
        return FLOAT_FORMAT.format(value)
    return str(value)


def csv_body(rows, table: str) -> str:
    cols = columns()[table]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for row in rows:
        extra = set(row) - set(cols)
        if extra:
            raise KeyError(f"columns {sorted(extra)} not in the {table!r} schema")
        writer.writerow([_cell(row.get(c)) for c in cols])
    return buf.getvalue()


def _stamp() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def write_table(rows, table: str, out_dir, fmt: str = "csv", name: str | None = None) -> Path:
    """Write ``rows`` as ``<name>.csv`` (one timestamp comment line, then the body) or ``.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = name or table
    if fmt == "csv":
        path = out_dir / f"{name}.csv"
        path.write_text(f"# generated {_stamp()}\n" + csv_body(rows, table))
    else:
        path = out_dir / f"{name}.json"
        cols = columns()[table]
        clean = [{c: _json_value(r.get(c)) for c in cols} for r in rows]
        path.write_text(json.dumps({"generated": _stamp(), "columns": list(cols), "rows": clean}, indent=1))
    return path


def _json_value(v):
    if hasattr(v, "dtype"):
        v = v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    return v


def read_csv_table(path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_blocks(path, blocks: dict, cols) -> Path:
    """Gnuplot data file: one whitespace-separated block per key, separated by two blank lines."""
    path = Path(path)
    out = [f"# {' '.join(cols)}"]
    for key in sorted(blocks):
        out.append(f"# {key}")
        out.extend(" ".join(_cell(v) for v in row) for row in blocks[key])
        out.extend(["", ""])
    path.write_text("\n".join(out))
    return path


def write_json(path, payload) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, default=_json_value))
    return path
