"""File formats: embedding sets, curve CSVs and summary CSVs.

``TTC1`` embedding files are little-endian: the magic ``b"TTC1"``, ``u32 n``,
``u32 dim``, then ``n`` records of ``dim`` float32 values followed by an
int32 label. The CSV form has a ``label,x0,...,x{D-1}`` header. Readers
check that rows have unit norm within 1e-4 and renormalise them.
"""

from __future__ import annotations

import csv
import math
import struct
from pathlib import Path

import numpy as np

from .curves import PerfCurve, ThresholdGrid
from .errors import InvalidArgument
from .synth import EmbeddingSet

EMB_MAGIC = b"TTC1"
NORM_TOL = 1e-4
CURVE_HEADER = ["threshold", "tpr", "tnr"]
SUMMARY_HEADER = ["method", "scenario", "seed", "mae_comb",
                  "d_opt_tpr80", "d_opt_tpr90", "d_opt_tnr80", "d_opt_tnr90",
                  "ae_tpr80", "ae_tpr90", "ae_tnr80", "ae_tnr90", "rounds", "converged"]


def _renormalize(x: np.ndarray, source) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOL)
    if bad.size:
        raise InvalidArgument(f"{source}: row {bad[0]} has norm {norms[bad[0]]:.6g}, not unit")
    return x / norms[:, None]


def write_embeddings(path, emb: EmbeddingSet) -> None:
    labels = emb.labels if emb.labels is not None else np.full(len(emb), -1)
    rec = np.dtype([("x", "<f4", (emb.dim,)), ("y", "<i4")])
    arr = np.empty(len(emb), dtype=rec)
    arr["x"] = emb.vectors
    arr["y"] = labels
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC + struct.pack("<II", len(emb), emb.dim))
        fh.write(arr.tobytes())


def read_embeddings(path) -> EmbeddingSet:
    """Read a ``TTC1`` file, or a CSV when the suffix is ``.csv``.

    A set whose labels are all ``-1`` is returned unlabeled.
    """
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return read_embeddings_csv(path)
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != EMB_MAGIC:
        raise InvalidArgument(f"{path}: not a TTC1 embedding file")
    n, dim = struct.unpack_from("<II", raw, 4)
    if dim == 0:
        raise InvalidArgument(f"{path}: zero embedding dimension")
    rec = np.dtype([("x", "<f4", (dim,)), ("y", "<i4")])
    if len(raw) != 12 + n * rec.itemsize:
        raise InvalidArgument(f"{path}: expected {n} records of dim {dim}, size mismatch")
    arr = np.frombuffer(raw, dtype=rec, count=n, offset=12)
    x = _renormalize(arr["x"].astype(np.float64), path)
    y = arr["y"].astype(np.int64)
    return EmbeddingSet(x, None if np.all(y == -1) else y)


def write_embeddings_csv(path, emb: EmbeddingSet) -> None:
    labels = emb.labels if emb.labels is not None else np.full(len(emb), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"x{k}" for k in range(emb.dim)])
        for y, row in zip(labels, emb.vectors):
            w.writerow([int(y)] + [repr(float(v)) for v in row])


def read_embeddings_csv(path) -> EmbeddingSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["label"]:
        raise InvalidArgument(f"{path}: missing 'label,x0,...' header")
    dim = len(rows[0]) - 1
    if rows[0][1:] != [f"x{k}" for k in range(dim)]:
        raise InvalidArgument(f"{path}: header must be label,x0,...,x{dim - 1}")
    try:
        y = np.array([int(r[0]) for r in rows[1:]], dtype=np.int64)
        x = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)
    except (ValueError, IndexError) as exc:
        raise InvalidArgument(f"{path}: malformed row ({exc})") from exc
    if x.shape != (len(rows) - 1, dim):
        raise InvalidArgument(f"{path}: ragged rows")
    x = _renormalize(x, path)
    return EmbeddingSet(x, None if np.all(y == -1) else y)


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def rounded_curve(curve: PerfCurve) -> PerfCurve:
    """The curve exactly as it reads back from ``write_curve``."""
    return PerfCurve(curve.grid,
                     np.array([float(_fmt(v)) for v in curve.tpr]),
                     np.array([float(_fmt(v)) for v in curve.tnr]))


def write_curve(path, curve: PerfCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for d, a, b in zip(curve.thresholds, curve.tpr, curve.tnr):
            w.writerow([_fmt(d), _fmt(a), _fmt(b)])


def read_curve(path) -> PerfCurve:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != CURVE_HEADER:
        raise InvalidArgument(f"{path}: expected header {','.join(CURVE_HEADER)}")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
    except ValueError as exc:
        raise InvalidArgument(f"{path}: non-numeric value ({exc})") from exc
    if data.ndim != 2 or data.shape[0] < 2 or data.shape[1] != 3:
        raise InvalidArgument(f"{path}: need at least two rows of three columns")
    d = data[:, 0]
    step = round(float(np.median(np.diff(d))), 10)
    grid = ThresholdGrid(round(float(d[0]), 10), round(float(d[-1]), 10), step)
    if grid.size != d.size or np.max(np.abs(grid.points - d)) > 1e-6:
        raise InvalidArgument(f"{path}: thresholds are not an evenly spaced grid")
    return PerfCurve(grid, data[:, 1], data[:, 2])


def _summary_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10g}"
    return str(v)


def write_summary(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for r in rows:
            w.writerow([_summary_cell(r.get(k)) for k in SUMMARY_HEADER])


def read_summary(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != SUMMARY_HEADER:
        raise InvalidArgument(f"{path}: summary schema mismatch")
    out = []
    for r in rows[1:]:
        if len(r) != len(SUMMARY_HEADER):
            raise InvalidArgument(f"{path}: summary row has {len(r)} fields")
        out.append(dict(zip(SUMMARY_HEADER, r)))
    return out
