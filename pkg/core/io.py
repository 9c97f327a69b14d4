"""
On-disk formats: plot-ready CSV tables and raw field dumps.

CSV files carry one '#' comment line (units and norm conventions), a header
row, then rows with floats written as '%.17g'. Field dumps are little-endian
float64 arrays (complex values interleaved as re, im) with a JSON sidecar.
"""
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from core.errors import ShapeError
from core.fields import Grid

logger = logging.getLogger(__name__)


def format_value(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "%.17g" % float(value)
    return str(value)


def write_csv(path: Path, comment: str, columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# " + comment.replace("\n", " "), ",".join(columns)]
    for row in rows:
        if len(row) != len(columns):
            raise ShapeError(f"{path.name}: row has {len(row)} values for {len(columns)} columns")
        lines.append(",".join(format_value(v) for v in row))
    with open(path, "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
    logger.debug("wrote %s (%d rows)", path, len(lines) - 2)
    return path


def read_csv(path: Path) -> Tuple[str, List[str], List[List[str]]]:
    with open(path, "r") as f:
        lines = [line.rstrip("\n") for line in f]
    comment = lines[0][2:] if lines and lines[0].startswith("# ") else ""
    body = lines[1:] if comment or (lines and lines[0].startswith("#")) else lines
    columns = body[0].split(",")
    return comment, columns, [line.split(",") for line in body[1:] if line]


def grid_meta(grid: Grid) -> Dict[str, Any]:
    return {
        "shape": list(grid.shape),
        "periodic": list(grid.periodic),
        "lengths": list(grid.lengths),
        "origins": list(grid.origins),
        "roles": list(grid.roles),
    }


def dump_field(stem: Path, values: np.ndarray, grid: Optional[Grid] = None,
               meta: Optional[Mapping[str, Any]] = None) -> Tuple[Path, Path]:
    """Write `<stem>.bin` and `<stem>.json`; returns both paths."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    values = np.asarray(values)
    is_complex = np.iscomplexobj(values)
    flat = np.ascontiguousarray(values, dtype=np.complex128 if is_complex else np.float64)
    raw = flat.view(np.float64) if is_complex else flat
    bin_path = stem.with_suffix(".bin")
    raw.astype("<f8").tofile(bin_path)
    sidecar = {
        "shape": list(values.shape),
        "dtype": "complex128-interleaved" if is_complex else "float64",
        "byte_order": "little",
    }
    if grid is not None:
        sidecar["grid"] = grid_meta(grid)
    if meta:
        sidecar.update(meta)
    json_path = stem.with_suffix(".json")
    with open(json_path, "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")
    return bin_path, json_path


def read_field(stem: Path) -> Tuple[np.ndarray, Dict[str, Any]]:
    stem = Path(stem)
    with open(stem.with_suffix(".json"), "r") as f:
        meta = json.load(f)
    raw = np.fromfile(stem.with_suffix(".bin"), dtype="<f8")
    shape = tuple(meta["shape"])
    if meta["dtype"] == "complex128-interleaved":
        values = raw.view(np.complex128).reshape(shape)
    else:
        values = raw.reshape(shape)
    return values, meta


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()
