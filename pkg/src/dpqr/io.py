"""File formats: datasets (CSV or packed binary), vectors, matrices, intervals."""
from __future__ import annotations

import csv
import hashlib
import struct

import numpy as np

from .engine import Dataset

MAGIC = b"DPQR"
VERSION = 1
_HEADER = struct.Struct("<4sIII")  # magic, version, rows, cols


def write_dataset_csv(data: Dataset, path: str):
    """Header x0..xp,y then one row per sample, floats written to round-trip exactly."""
    cols = [f"x{j}" for j in range(data.X.shape[1])] + ["y"]
    M = np.hstack([data.X, data.y[:, None]])
    with open(path, "w", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        for row in M:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_dataset_csv(path: str) -> Dataset:
    with open(path, newline="") as fh:
        header = fh.readline().strip().split(",")
        if not header or header[-1] != "y" or header[0] != "x0":
            raise ValueError(f"{path}: expected header x0,...,xp,y")
        M = np.loadtxt(fh, delimiter=",", ndmin=2)
    if M.shape[1] != len(header):
        raise ValueError(f"{path}: row width does not match header")
    return Dataset(M[:, :-1], M[:, -1])


def write_dataset_bin(data: Dataset, path: str):
    """16-byte header (b"DPQR", version, rows, cols as uint32 LE) then LE float64, row-major."""
    M = np.ascontiguousarray(np.hstack([data.X, data.y[:, None]]), dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, M.shape[0], M.shape[1]))
        fh.write(M.tobytes(order="C"))


def read_dataset_bin(path: str) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    body = raw[_HEADER.size:]
    if len(body) != 8 * rows * cols:
        raise ValueError(f"{path}: expected {rows}x{cols} doubles, found {len(body)} bytes")
    M = np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(float)
    return Dataset(M[:, :-1], M[:, -1])


def write_dataset(data: Dataset, path: str):
    if path.endswith(".bin"):
        write_dataset_bin(data, path)
    else:
        write_dataset_csv(data, path)


def read_dataset(path: str) -> Dataset:
    with open(path, "rb") as fh:
        head = fh.read(4)
    return read_dataset_bin(path) if head == MAGIC else read_dataset_csv(path)


def write_vector(values, path: str, name: str = "value"):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["j", name])
        for j, v in enumerate(np.asarray(values, dtype=float)):
            w.writerow([j, repr(float(v))])


def write_matrix(M, path: str):
    """Dense CSV, no header; row i holds M[i, :]."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(M, dtype=float):
            w.writerow([repr(float(v)) for v in row])


def write_triplets(M, path: str, tol: float = 0.0):
    """Sparse CSV: i,j,value for |M_ij| > tol."""
    M = np.asarray(M, dtype=float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "value"])
        for i, j in zip(*np.nonzero(np.abs(M) > tol)):
            w.writerow([int(i), int(j), repr(float(M[i, j]))])


def write_intervals(intervals, path: str):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["j", "lower", "upper", "level", "method", "sigma_hat", "covered"])
        for iv in intervals:
            cov = "" if iv.covered is None else int(iv.covered)
            w.writerow([iv.j, repr(iv.lower), repr(iv.upper), repr(iv.level), iv.method, repr(iv.sigma_hat), cov])


def write_bootstrap_stats(q, path: str):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["replicate", "statistic"])
        for r, v in enumerate(q.statistic_samples):
            w.writerow([r, repr(float(v))])


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
