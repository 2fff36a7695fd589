"""Raster export as plain (ASCII) PGM plus CSV.

PGM payloads are scaled to 0..254 with a sidecar min/max text file for
recovering physical values; NaN cells use the sentinel 255. Output is
byte-deterministic for identical inputs.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

NAN_SENTINEL = 255


def write_pgm(values: np.ndarray, path) -> None:
    """Write a 2-D float array as plain PGM with a ``.minmax.txt`` sidecar."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("raster must be 2-D")
    finite = np.isfinite(values)
    if finite.any():
        lo = float(values[finite].min())
        hi = float(values[finite].max())
    else:
        lo = hi = 0.0
    if hi > lo:
        scaled = np.round((values - lo) / (hi - lo) * 254.0)
    else:
        scaled = np.zeros_like(values)
    pixels = np.where(finite, scaled, NAN_SENTINEL).astype(np.int64)

    rows, cols = values.shape
    lines = [f"P2\n{cols} {rows}\n255\n"]
    for r in range(rows):
        lines.append(" ".join(str(v) for v in pixels[r]) + "\n")
    Path(path).write_text("".join(lines))
    Path(f"{path}.minmax.txt").write_text(f"min {lo!r}\nmax {hi!r}\n")


def write_csv(values: np.ndarray, path) -> None:
    """Write a 2-D array as ``row,col,value`` lines (NaN spelled ``nan``)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("raster must be 2-D")
    lines = ["row,col,value\n"]
    for r in range(values.shape[0]):
        for c in range(values.shape[1]):
            lines.append(f"{r},{c},{float(values[r, c])!r}\n")
    Path(path).write_text("".join(lines))


def write_raster(values: np.ndarray, basepath) -> None:
    """Write both representations: ``<base>.pgm`` (+sidecar) and ``<base>.csv``."""
    write_pgm(values, f"{basepath}.pgm")
    write_csv(values, f"{basepath}.csv")
