"""Small file helpers: atomic writes and CSV/JSON emitters."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile

import numpy as np


def atomic_write_text(path, text):
    """Write ``text`` to ``path`` via a temporary file and rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"{type(value).__name__} is not JSON serialisable")


def write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    atomic_write_text(path, buf.getvalue())


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def write_grid_csv(path, grid_values, dense=False):
    """Write a field ``u[x_index, t_index]``.

    Long form (default) has header ``x_index,t_index,value``; dense form writes
    one row per spatial node with one column per time step.
    """
    values = np.asarray(grid_values, dtype=float)
    if dense:
        header = [f"t{j}" for j in range(values.shape[1])]
        write_csv(path, header, values.tolist())
        return
    nx, nt = values.shape
    rows = ((i, j, values[i, j]) for i in range(nx) for j in range(nt))
    write_csv(path, ["x_index", "t_index", "value"], rows)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
