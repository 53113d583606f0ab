"""On-disk artifact writers: CSV tables, graymap images, JSON summaries, PCA."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import gradcore as gc


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return f"{v:.9g}"
    return str(v)


def csv_text(columns: Sequence[str], rows: Iterable[dict | Sequence], config_hash: str | None = None) -> str:
    buf = io.StringIO()
    if config_hash:
        buf.write(f"# config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        vals = [row.get(c) for c in columns] if isinstance(row, dict) else list(row)
        w.writerow([format_value(v) for v in vals])
    return buf.getvalue()


def write_csv(path, columns, rows, config_hash: str | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(columns, rows, config_hash), encoding="utf-8")
    return path


def read_csv(path) -> tuple[dict, list[dict]]:
    """(comment key/values, rows as string dicts)."""
    meta, body = {}, []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            k, _, v = line[1:].strip().partition("=")
            meta[k] = v
        else:
            body.append(line)
    return meta, list(csv.DictReader(body))


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")
    return path


def to_uint8(img) -> np.ndarray:
    a = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(a * 255.0 + 0.5).astype(np.uint8)


def percentile_normalize(img, lo: float = 1.0, hi: float = 99.0) -> np.ndarray:
    """Map the [lo, hi] percentile range onto [0, 1], clipping outside it."""
    a = np.asarray(img, dtype=np.float64)
    p_lo, p_hi = np.percentile(a, [lo, hi])
    if p_hi <= p_lo:
        return np.zeros_like(a)
    return np.clip((a - p_lo) / (p_hi - p_lo), 0.0, 1.0)


def pgm_bytes(img, comment: str | None = None) -> bytes:
    """Binary portable graymap (P5), 8-bit, from an image in [0, 1]."""
    a = to_uint8(img)
    if a.ndim != 2:
        raise ValueError(f"graymap needs a 2-D image, got {a.shape}")
    head = "P5\n"
    if comment:
        head += f"# {comment}\n"
    head += f"{a.shape[1]} {a.shape[0]}\n255\n"
    return head.encode("ascii") + a.tobytes()


def write_pgm(path, img, comment: str | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(pgm_bytes(img, comment))
    return path


def read_pgm(path) -> tuple[np.ndarray, list[str]]:
    """(uint8 image, comment lines) from a P5 file written by ``write_pgm``."""
    data = Path(path).read_bytes()
    lines, pos, comments = [], 0, []
    while len(lines) < 4:
        end = data.index(b"\n", pos)
        line = data[pos:end].decode("ascii")
        pos = end + 1
        if line.startswith("#"):
            comments.append(line[1:].strip())
        else:
            lines.extend(line.split())
    if lines[0] != "P5":
        raise ValueError(f"{path}: not a P5 graymap")
    w, h = int(lines[1]), int(lines[2])
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w), comments


def pca_2d(X) -> np.ndarray:
    """First two principal-component scores of the rows of X (SVD of the centered data)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("pca_2d needs a nonempty 2-D array")
    Xc = X - X.mean(axis=0)
    k = min(2, *Xc.shape)
    f = gc.svd_thin(Xc)
    scores = f.U[:, :k] * f.S[:k]
    if k < 2:
        scores = np.hstack([scores, np.zeros((X.shape[0], 2 - k))])
    return scores
