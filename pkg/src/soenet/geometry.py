"""Point-cloud containers, octant neighbor search and their file formats."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from soenet.errors import DataError, FormatError, ShapeError

SPC_MAGIC = b"SPC1"
SPC_VERSION = 1
CATALOG_HEADER = ["id", "file", "easting", "northing"]


@dataclass(frozen=True, eq=False)
class PointCloud:
    """N x 3 coordinates in normalized model space [-1, 1]."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ShapeError(f"point cloud must be N x 3 with N >= 1, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise DataError("point cloud contains non-finite coordinates")
        if np.abs(pts).max() > 1.0:
            raise DataError("point cloud coordinates must lie in [-1, 1]")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True, eq=False)
class Submap:
    id: str
    cloud: PointCloud
    location: tuple[float, float]  # (easting, northing) in meters


def octant_of(center, point) -> int:
    """Octant index 4*[dx>=0] + 2*[dy>=0] + [dz>=0] of ``point`` around ``center``."""
    d = np.asarray(point, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    return 4 * int(d[0] >= 0) + 2 * int(d[1] >= 0) + int(d[2] >= 0)


def s8n_neighbors(points, radius: float = 0.2, chunk: int = 512) -> np.ndarray:
    """Nearest in-radius neighbor of every point in each of its 8 octants.

    Returns an (N, 8) integer table. Column ``k`` holds the index of the
    closest other point within ``radius`` lying in octant ``k`` of the row's
    point; empty octants fall back to the point's own index. Distance ties go
    to the lowest index.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    pts = np.asarray(points.points if isinstance(points, PointCloud) else points, dtype=np.float64)
    n = pts.shape[0]
    table = np.empty((n, 8), dtype=np.int64)
    weights = np.array([4, 2, 1])
    for start in range(0, n, chunk):
        rows = np.arange(start, min(n, start + chunk))
        diff = pts[None, :, :] - pts[rows, None, :]
        dist = np.sqrt((diff * diff).sum(axis=-1))
        code = ((diff >= 0) * weights).sum(axis=-1)
        valid = dist <= radius
        valid[np.arange(rows.size), rows] = False
        for k in range(8):
            d = np.where(valid & (code == k), dist, np.inf)
            best = d.argmin(axis=1)  # first minimum: lowest index on ties
            found = np.isfinite(d[np.arange(rows.size), best])
            table[rows, k] = np.where(found, best, rows)
    return table


def gather_cube(features: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Arrange each point's 8 neighbor feature rows in an (N, 2, 2, 2, C) cube.

    Cube axes 1..3 are the x, y and z signs (0 = negative side).
    """
    features = np.asarray(features)
    table = np.asarray(table)
    if table.ndim != 2 or table.shape[1] != 8 or table.shape[0] != features.shape[0]:
        raise ShapeError(f"table shape {table.shape} does not match {features.shape[0]} points")
    if table.size and (table.min() < 0 or table.max() >= features.shape[0]):
        raise ShapeError("neighbor table index out of range")
    return features[table].reshape(features.shape[0], 2, 2, 2, features.shape[1])


# --------------------------------------------------------------------------
# files


def write_cloud(path, cloud: PointCloud | np.ndarray) -> None:
    pts = np.asarray(cloud.points if isinstance(cloud, PointCloud) else cloud)
    with open(path, "wb") as fh:
        fh.write(SPC_MAGIC)
        fh.write(struct.pack("<II", SPC_VERSION, pts.shape[0]))
        fh.write(np.ascontiguousarray(pts, dtype="<f4").tobytes())


def read_cloud(path) -> PointCloud:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != SPC_MAGIC:
        raise FormatError(f"{path}: not an SPC1 point-cloud file")
    version, n = struct.unpack("<II", data[4:12])
    if version != SPC_VERSION:
        raise FormatError(f"{path}: unsupported SPC1 version {version}")
    if len(data) != 12 + 12 * n:
        raise FormatError(f"{path}: expected {n} points ({12 + 12 * n} bytes), file has {len(data)} bytes")
    pts = np.frombuffer(data[12:], dtype="<f4").astype(np.float32).reshape(n, 3)
    return PointCloud(pts)


def write_catalog(path, rows: list[tuple[str, str, float, float]]) -> None:
    """Write ``(id, file, easting, northing)`` rows; files are relative to the catalog."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CATALOG_HEADER)
        for sid, fname, e, n in rows:
            w.writerow([sid, fname, repr(float(e)), repr(float(n))])


def read_catalog_rows(path) -> list[tuple[str, Path, float, float]]:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != CATALOG_HEADER:
                raise FormatError(f"{path}: catalog header must be {','.join(CATALOG_HEADER)}")
            rows = []
            seen = set()
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 4:
                    raise FormatError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
                sid, fname, e, n = row
                if sid in seen:
                    raise FormatError(f"{path}:{lineno}: duplicate submap id {sid!r}")
                seen.add(sid)
                try:
                    rows.append((sid, path.parent / fname, float(e), float(n)))
                except ValueError:
                    raise FormatError(f"{path}:{lineno}: bad coordinate") from None
    except FileNotFoundError:
        raise DataError(f"catalog not found: {path}") from None
    return rows


def read_catalog(path) -> list[Submap]:
    out = []
    for sid, fpath, e, n in read_catalog_rows(path):
        if not fpath.exists():
            raise DataError(f"cloud file not found: {fpath}")
        out.append(Submap(sid, read_cloud(fpath), (e, n)))
    return out
