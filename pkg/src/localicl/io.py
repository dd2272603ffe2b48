"""File plumbing: atomic writes, CSV ingestion, hashing."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .datagen import DataError, Dataset


_UMASK = os.umask(0)
os.umask(_UMASK)


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_UMASK)  # mkstemp creates 0600
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def format_value(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(path: Path, columns, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([format_value(r[c]) for c in columns])
    atomic_write_text(path, buf.getvalue())


def write_json(path: Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def ingest_csv(path, label_col: str, cat_cols=(), max_features: int = 100, max_classes: int = 10) -> Dataset:
    """Read a headered UTF-8 CSV into a Dataset.

    Feature cells must parse as finite reals, except categorical columns,
    whose values are coded by first appearance. Labels are mapped to
    0, 1, ... by first appearance. Any empty, NaN or unparseable cell
    rejects the file with its row and column.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if label_col not in header:
        raise DataError(f"{path}: label column {label_col!r} not in header")
    cat_cols = set(cat_cols)
    missing = cat_cols - set(header)
    if missing:
        raise DataError(f"{path}: categorical columns not in header: {sorted(missing)}")
    li = header.index(label_col)
    feat_idx = [j for j in range(len(header)) if j != li]
    codes: dict[int, dict[str, int]] = {j: {} for j in feat_idx if header[j] in cat_cols}
    label_codes: dict[str, int] = {}
    X = np.empty((len(body), len(feat_idx)))
    y = np.empty(len(body), dtype=np.int64)
    for i, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}: row {i} has {len(row)} cells, expected {len(header)}")
        for out_j, j in enumerate(feat_idx):
            cell = row[j].strip()
            if j in codes:
                if cell == "" or cell.lower() in ("nan", "na", "null", "?"):
                    raise DataError(f"{path}: missing value at row {i}, column {header[j]!r}")
                X[i - 2, out_j] = codes[j].setdefault(cell, len(codes[j]))
                continue
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}: unparseable value {cell!r} at row {i}, column {header[j]!r}") from None
            if not math.isfinite(v):
                raise DataError(f"{path}: non-finite value {cell!r} at row {i}, column {header[j]!r}")
            X[i - 2, out_j] = v
        lab = row[li].strip()
        if lab == "":
            raise DataError(f"{path}: missing label at row {i}")
        y[i - 2] = label_codes.setdefault(lab, len(label_codes))
    if len(feat_idx) > max_features:
        raise DataError(f"{path}: {len(feat_idx)} features exceed the limit of {max_features}")
    if len(label_codes) > max_classes:
        raise DataError(f"{path}: {len(label_codes)} classes exceed the limit of {max_classes}")
    if len(label_codes) < 2:
        raise DataError(f"{path}: needs at least two classes")
    cat_mask = np.array([header[j] in cat_cols for j in feat_idx], dtype=bool)
    return Dataset(X, y, cat_mask, name=path.stem, provenance={"path": str(path), "labels": list(label_codes)})
