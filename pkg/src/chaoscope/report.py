"""CSV tables, atomic file writes and the run manifest."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MANIFEST_NAME = "manifest.json"


class OutputCollision(FileExistsError):
    """Refusing to replace results from an earlier run."""


@dataclass
class Table:
    """Column names plus rows; one CSV file, one record type."""

    kind: str
    columns: list[str]
    rows: list[tuple] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]


def format_value(value) -> str:
    """Shortest round-trip scientific notation for floats; plain text otherwise."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        x = float(value)
        if np.isnan(x):
            return "nan"
        if np.isinf(x):
            return "inf" if x > 0 else "-inf"
        return np.format_float_scientific(x, unique=True, trim="-")
    return str(value)


def table_to_csv(table: Table) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(table.columns)
    for row in table.rows:
        w.writerow([format_value(v) for v in row])
    return buf.getvalue()


def read_csv(path: str | Path) -> tuple[list[str], list[dict[str, str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        return list(reader.fieldnames or []), rows


def atomic_write(path: str | Path, data: str | bytes) -> None:
    """Write to a sibling temporary file, flush to disk, then rename over ``path``."""
    path = Path(path)
    raw = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def check_collision(output_dir: str | Path, names, overwrite: bool) -> None:
    out = Path(output_dir)
    taken = [n for n in [*names, MANIFEST_NAME] if (out / n).exists()]
    if taken and not overwrite:
        raise OutputCollision(f"{out / taken[0]} already exists (pass --overwrite to replace it)")


def write_manifest(output_dir: str | Path, manifest: dict) -> Path:
    path = Path(output_dir) / MANIFEST_NAME
    atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def read_manifest(output_dir: str | Path) -> dict:
    return json.loads((Path(output_dir) / MANIFEST_NAME).read_text(encoding="utf-8"))


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")
