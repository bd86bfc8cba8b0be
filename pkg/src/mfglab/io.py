"""Field serialization: flat CSV and a row-major binary dump.

The binary layout is a 32-byte little-endian header ``(d: int64, n: int64,
nt: int64, T: float64)`` followed by float64 values in C order.  A dump holds
either one spatial slice or a full trajectory; readers tell them apart from
the payload size.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .grid import Grid

_HEADER = struct.Struct("<qqqd")


def _fmt(x) -> str:
    return repr(float(x))


def _node_rows(grid: Grid):
    idx = np.indices(grid.shape).reshape(grid.d, -1).T
    coords = np.stack([c.ravel() for c in grid.coords], axis=1)
    return idx, coords


def write_field_csv(path, grid: Grid, values) -> None:
    """Write a scalar or space-time field as one CSV row per node (and level)."""
    values = np.asarray(values, dtype=float)
    _, coords = _node_rows(grid)
    xcols = [f"x{a}" for a in range(grid.d)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if values.shape == grid.shape:
            writer.writerow(["node", *xcols, "value"])
            for k, (xs, val) in enumerate(zip(coords, values.ravel())):
                writer.writerow([k, *map(_fmt, xs), _fmt(val)])
        elif values.shape == grid.st_shape:
            writer.writerow(["level", "t", "node", *xcols, "value"])
            for lvl, t in enumerate(grid.times):
                for k, (xs, val) in enumerate(zip(coords, values[lvl].ravel())):
                    writer.writerow([lvl, _fmt(t), k, *map(_fmt, xs), _fmt(val)])
        else:
            raise ValueError(f"values of shape {values.shape} do not fit the grid")


def read_field_csv(path, grid: Grid) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    vals = np.array([float(r["value"]) for r in rows])
    if "level" in rows[0]:
        return vals.reshape(grid.st_shape)
    return vals.reshape(grid.shape)


def write_field_binary(path, grid: Grid, values) -> None:
    values = np.ascontiguousarray(values, dtype="<f8")
    if values.shape not in (grid.shape, grid.st_shape):
        raise ValueError(f"values of shape {values.shape} do not fit the grid")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(grid.d, grid.n, grid.nt, grid.T))
        fh.write(values.tobytes(order="C"))


def read_field_binary(path):
    """Return ``(header, values)`` where header is a dict with d, n, nt, T."""
    raw = Path(path).read_bytes()
    d, n, nt, T = _HEADER.unpack_from(raw)
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).copy()
    spatial = (n + 2,) * d
    size = int(np.prod(spatial))
    if data.size == size:
        values = data.reshape(spatial)
    elif data.size == size * (nt + 1):
        values = data.reshape((nt + 1,) + spatial)
    else:
        raise ValueError(f"{path}: payload of {data.size} values matches no layout")
    return {"d": d, "n": n, "nt": nt, "T": T}, values


def write_table_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v
                             for v in row])


def write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")
