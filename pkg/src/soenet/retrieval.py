"""Descriptor database, nearest-submap queries and Recall@N evaluation."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from soenet.errors import DataError, FormatError, ShapeError
from soenet.geometry import PointCloud, Submap
from soenet.model import ModelConfig, soenet_forward

SDB_MAGIC = b"SDB1"
SDB_VERSION = 1


@dataclass(frozen=True, eq=False)
class DescriptorDB:
    ids: tuple[str, ...]
    locations: np.ndarray  # (M, 2) float64
    descriptors: np.ndarray  # (M, D) float32
    dim: int

    def __post_init__(self):
        m = len(self.ids)
        if len(set(self.ids)) != m:
            raise DataError("descriptor database ids must be unique")
        if self.descriptors.shape != (m, self.dim) or self.locations.shape != (m, 2):
            raise ShapeError("descriptor database arrays disagree with its size/dimension")
        self.descriptors.setflags(write=False)
        self.locations.setflags(write=False)

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_arrays(cls, ids, locations, descriptors) -> "DescriptorDB":
        desc = np.asarray(descriptors, dtype=np.float32)
        desc = desc.reshape(len(ids), -1) if len(ids) else desc.reshape(0, desc.shape[-1] if desc.ndim else 0)
        return cls(tuple(ids), np.asarray(locations, dtype=np.float64).reshape(-1, 2), desc, desc.shape[1])


@dataclass(frozen=True, eq=False)
class QuerySet:
    descriptors: np.ndarray  # (Q, D)
    locations: np.ndarray  # (Q, 2)


@dataclass(frozen=True)
class EvalProtocol:
    correct_radius: float = 25.0
    top_n: tuple[int, ...] = tuple(range(1, 26))
    percent: float = 1.0

    def __post_init__(self):
        if self.correct_radius <= 0:
            raise ValueError("correct_radius must be positive")


def embed(submaps: Sequence[Submap], params, config: ModelConfig) -> np.ndarray:
    out = [soenet_forward(s.cloud, params, config) for s in submaps]
    return np.asarray(out, dtype=np.float32).reshape(len(submaps), config.out_dim)


def build_index(submaps: Sequence[Submap], params, config: ModelConfig) -> DescriptorDB:
    return DescriptorDB.from_arrays(
        [s.id for s in submaps],
        [s.location for s in submaps],
        embed(submaps, params, config).reshape(len(submaps), config.out_dim),
    )


def embed_queries(submaps: Sequence[Submap], params, config: ModelConfig) -> QuerySet:
    return QuerySet(
        embed(submaps, params, config),
        np.array([s.location for s in submaps], dtype=np.float64).reshape(-1, 2),
    )


def _ranking(db: DescriptorDB, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    diff = db.descriptors.astype(np.float64) - np.asarray(query, dtype=np.float64)
    dist = np.sqrt((diff * diff).sum(axis=1))
    id_rank = np.argsort(np.argsort(np.array(db.ids, dtype=object)))
    order = np.lexsort((id_rank, dist))
    return order, dist


def query_topk(db: DescriptorDB, query, k: int, params=None, config: ModelConfig | None = None) -> list[tuple[str, float]]:
    """Top-k entries by Euclidean descriptor distance, ties to the lower id.

    ``query`` is a descriptor vector, or a cloud when ``params`` and
    ``config`` are given.
    """
    if len(db) == 0:
        raise DataError("descriptor database is empty")
    if not 1 <= k <= len(db):
        raise DataError(f"k must be in [1, {len(db)}], got {k}")
    if isinstance(query, PointCloud) or params is not None:
        query = soenet_forward(query, params, config)
    query = np.asarray(query)
    if query.shape != (db.dim,):
        raise ShapeError(f"query descriptor has shape {query.shape}, database dimension is {db.dim}")
    order, dist = _ranking(db, query)
    return [(db.ids[i], float(dist[i])) for i in order[:k]]


def _hits(db: DescriptorDB, queries: QuerySet, max_n: int, radius: float) -> np.ndarray:
    """First rank (1-based) holding a correct match per query; inf when none in the top ``max_n``."""
    if len(queries.descriptors) == 0:
        raise DataError("query set is empty")
    if len(db) == 0:
        raise DataError("descriptor database is empty")
    first = np.full(len(queries.descriptors), np.inf)
    for q, (desc, loc) in enumerate(zip(queries.descriptors, queries.locations)):
        order, _ = _ranking(db, desc)
        top = order[:max_n]
        ok = np.linalg.norm(db.locations[top] - loc, axis=1) <= radius
        if ok.any():
            first[q] = int(np.argmax(ok)) + 1
    return first


def recall_at_n(db: DescriptorDB, queries: QuerySet, n: int, protocol: EvalProtocol = EvalProtocol()) -> float:
    if n < 1:
        raise ValueError("n must be >= 1")
    first = _hits(db, queries, n, protocol.correct_radius)
    return float(np.mean(first <= n))


def one_percent_n(db_size: int, percent: float = 1.0) -> int:
    """max(1, round(size * percent / 100)) with halves rounded away from zero."""
    return max(1, int(np.floor(db_size * percent / 100 + 0.5)))


def recall_at_1pct(db: DescriptorDB, queries: QuerySet, protocol: EvalProtocol = EvalProtocol()) -> float:
    return recall_at_n(db, queries, one_percent_n(len(db), protocol.percent), protocol)


def recall_curve(db: DescriptorDB, queries: QuerySet, protocol: EvalProtocol = EvalProtocol()) -> list[tuple[int, float]]:
    ns = sorted(set(n for n in protocol.top_n if n >= 1))
    first = _hits(db, queries, max(ns), protocol.correct_radius)
    return [(n, float(np.mean(first <= n))) for n in ns]


# --------------------------------------------------------------------------
# SDB1


def dump_index(db: DescriptorDB) -> bytes:
    buf = io.BytesIO()
    buf.write(SDB_MAGIC)
    buf.write(struct.pack("<III", SDB_VERSION, db.dim, len(db)))
    for sid, loc, desc in zip(db.ids, db.locations, db.descriptors):
        raw = sid.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<dd", float(loc[0]), float(loc[1])))
        buf.write(np.ascontiguousarray(desc, dtype="<f4").tobytes())
    return buf.getvalue()


def parse_index(data: bytes, expected_dim: int | None = None) -> DescriptorDB:
    def take(pos, n):
        if pos + n > len(data):
            raise FormatError(f"SDB1: truncated at byte {pos}")
        return data[pos : pos + n], pos + n

    head, pos = take(0, 16)
    if head[:4] != SDB_MAGIC:
        raise FormatError("SDB1: bad magic")
    version, dim, count = struct.unpack("<III", head[4:])
    if version != SDB_VERSION:
        raise FormatError(f"SDB1: unsupported version {version}")
    if expected_dim is not None and dim != expected_dim:
        raise ShapeError(f"SDB1: descriptor dimension {dim}, expected {expected_dim}")
    ids, locs, descs = [], [], []
    for _ in range(count):
        raw, pos = take(pos, 4)
        (length,) = struct.unpack("<I", raw)
        raw, pos = take(pos, length)
        try:
            ids.append(raw.decode("utf-8"))
        except UnicodeDecodeError:
            raise FormatError("SDB1: bad id encoding") from None
        raw, pos = take(pos, 16)
        locs.append(struct.unpack("<dd", raw))
        raw, pos = take(pos, 4 * dim)
        descs.append(np.frombuffer(raw, dtype="<f4"))
    if pos != len(data):
        raise FormatError(f"SDB1: {len(data) - pos} trailing bytes")
    desc = np.array(descs, dtype=np.float32).reshape(count, dim)
    return DescriptorDB(tuple(ids), np.array(locs, dtype=np.float64).reshape(count, 2), desc, dim)


def save_index(db: DescriptorDB, path) -> None:
    Path(path).write_bytes(dump_index(db))


def load_index(path, expected_dim: int | None = None) -> DescriptorDB:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"index not found: {path}") from None
    return parse_index(data, expected_dim)
