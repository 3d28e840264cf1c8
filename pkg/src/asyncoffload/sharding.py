"""Simulated row-sharded gradients and communication accounting.

Each worker holds a contiguous block of rows of a weight gradient. To rank
channels globally, workers exchange only their per-column squared norms
instead of all-gathering the full matrix. The exchange is an in-process
reduction; what matters is the byte count recorded in a :class:`CommLedger`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gradcore import as_gradient, column_norms_sq
from .selection import ChannelSelection

__all__ = [
    "CommLedger",
    "Segment",
    "SegmentMap",
    "ShardLayout",
    "allgather_exchange_bytes",
    "build_segment_map",
    "comm_reduction_factor",
    "flatten_column_major",
    "full_matrix_bytes",
    "gather_column_norms",
    "reduction_table",
    "shard_matrix",
]

NORM_BYTES = 4
GRAD_DTYPE_BYTES = 2


@dataclass(frozen=True)
class ShardLayout:
    """Row ranges ``[start, stop)`` per shard plus byte sizes for accounting."""

    n_shards: int
    row_ranges: tuple[tuple[int, int], ...]
    dtype_bytes: int = GRAD_DTYPE_BYTES
    norm_bytes: int = NORM_BYTES

    def __post_init__(self):
        if self.n_shards != len(self.row_ranges):
            raise ValueError("n_shards does not match the number of row ranges")
        pos = 0
        for start, stop in self.row_ranges:
            if start != pos or stop <= start:
                raise ValueError(f"row ranges must tile [0, n) contiguously, got {self.row_ranges}")
            pos = stop

    @classmethod
    def even(cls, rows: int, n_shards: int, dtype_bytes: int = GRAD_DTYPE_BYTES,
             norm_bytes: int = NORM_BYTES) -> "ShardLayout":
        """Near-equal contiguous split; the first ``rows % n`` shards get one extra row."""
        if n_shards < 1:
            raise ValueError("n_shards must be >= 1")
        if n_shards > rows:
            raise ValueError(f"cannot split {rows} rows into {n_shards} shards")
        base, extra = divmod(rows, n_shards)
        ranges, start = [], 0
        for s in range(n_shards):
            stop = start + base + (1 if s < extra else 0)
            ranges.append((start, stop))
            start = stop
        return cls(n_shards, tuple(ranges), dtype_bytes, norm_bytes)

    @property
    def rows(self) -> int:
        return self.row_ranges[-1][1]

    def local_rows(self, shard_id: int) -> int:
        start, stop = self.row_ranges[shard_id]
        return stop - start


@dataclass
class CommLedger:
    """Cumulative byte counters; only ever grow."""

    bytes_full_gather: int = 0
    bytes_proxy_gather: int = 0
    bytes_grad_offload: int = 0
    bytes_param_upload: int = 0

    def charge(self, *, full_gather: int = 0, proxy_gather: int = 0,
               grad_offload: int = 0, param_upload: int = 0) -> None:
        for v in (full_gather, proxy_gather, grad_offload, param_upload):
            if v < 0:
                raise ValueError("ledger charges must be non-negative")
        self.bytes_full_gather += int(full_gather)
        self.bytes_proxy_gather += int(proxy_gather)
        self.bytes_grad_offload += int(grad_offload)
        self.bytes_param_upload += int(param_upload)

    def merge(self, other: "CommLedger") -> None:
        self.charge(full_gather=other.bytes_full_gather, proxy_gather=other.bytes_proxy_gather,
                    grad_offload=other.bytes_grad_offload, param_upload=other.bytes_param_upload)

    def to_dict(self) -> dict[str, int]:
        return {
            "full_gather_bytes": self.bytes_full_gather,
            "proxy_gather_bytes": self.bytes_proxy_gather,
            "grad_offload_bytes": self.bytes_grad_offload,
            "param_upload_bytes": self.bytes_param_upload,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CommLedger":
        return cls(d["full_gather_bytes"], d["proxy_gather_bytes"],
                   d["grad_offload_bytes"], d["param_upload_bytes"])


def shard_matrix(g, n_shards: int, dtype_bytes: int = GRAD_DTYPE_BYTES) -> tuple[list[np.ndarray], ShardLayout]:
    g = as_gradient(g)
    if n_shards < 1:
        raise ValueError("n_shards must be >= 1")
    layout = ShardLayout.even(g.rows, n_shards, dtype_bytes)
    shards = [np.asfortranarray(g.data[a:b]) for a, b in layout.row_ranges]
    return shards, layout


def gather_column_norms(shards, layout: ShardLayout | None = None) -> tuple[np.ndarray, CommLedger]:
    """Reduce per-shard column norms in shard order.

    Charges ``n_shards * m * norm_bytes`` proxy bytes, and records what a
    full all-gather of the same shards would have cost for comparison.
    """
    shards = [np.asarray(s) for s in shards]
    if not shards:
        raise ValueError("no shards to gather")
    m = shards[0].shape[1]
    if any(s.ndim != 2 or s.shape[1] != m for s in shards):
        raise ValueError("all shards must share the same column count")
    dtype_bytes = layout.dtype_bytes if layout is not None else GRAD_DTYPE_BYTES
    norm_bytes = layout.norm_bytes if layout is not None else NORM_BYTES
    total = np.zeros(m, dtype=np.float64)
    for s in shards:
        total += column_norms_sq(s)
    delta = CommLedger()
    delta.charge(proxy_gather=len(shards) * m * norm_bytes,
                 full_gather=sum(s.size for s in shards) * dtype_bytes)
    return total, delta


def full_matrix_bytes(rows: int, cols: int, dtype_bytes: int = GRAD_DTYPE_BYTES) -> int:
    return rows * cols * dtype_bytes


def allgather_exchange_bytes(layout: ShardLayout, cols: int) -> int:
    """Bytes moved when every shard sends its block to every other shard."""
    n = layout.n_shards
    return sum(layout.local_rows(s) * cols * layout.dtype_bytes * (n - 1) for s in range(n))


def comm_reduction_factor(layout: ShardLayout, rows: int, cols: int) -> float:
    """Full-gather bytes over proxy-gather bytes for one weight matrix."""
    if layout.rows != rows:
        raise ValueError(f"layout covers {layout.rows} rows, matrix has {rows}")
    full = sum(layout.local_rows(s) for s in range(layout.n_shards)) * cols * layout.dtype_bytes
    proxy = layout.n_shards * cols * layout.norm_bytes
    return full / proxy


def reduction_table(rows: int, cols: int, n_shards: int,
                    dtype_options=(2, 4), norm_options=(2, 4)) -> list[dict]:
    """Reduction factors under each (gradient dtype, norm dtype) byte pairing.

    ``per_shard`` compares one shard's block with one norm vector;
    ``matrix_vs_vector`` compares the whole unsharded matrix with a single
    shard's norm vector.
    """
    out = []
    for db in dtype_options:
        for nb in norm_options:
            layout = ShardLayout.even(rows, n_shards, db, nb)
            out.append({
                "dtype_bytes": db,
                "norm_bytes": nb,
                "per_shard": comm_reduction_factor(layout, rows, cols),
                "matrix_vs_vector": full_matrix_bytes(rows, cols, db) / (cols * nb),
            })
    return out


def flatten_column_major(shard: np.ndarray) -> np.ndarray:
    return np.asarray(shard).ravel(order="F")


@dataclass(frozen=True)
class Segment:
    segment_id: int
    shard_id: int
    offset: int
    length: int
    channel: int


@dataclass
class SegmentMap:
    """Where each selected channel's slices live across shards.

    ``offset`` indexes the shard's column-major flattened storage, so a
    channel slice is ``flat[offset:offset + length]``.
    """

    entries: list[Segment] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            key = (e.segment_id, e.shard_id)
            if key in seen:
                raise ValueError(f"duplicate segment entry {key}")
            seen.add(key)

    def lookup(self, segment_id: int) -> list[Segment]:
        return [e for e in self.entries if e.segment_id == segment_id]

    def reassemble(self, shards, segment_id: int) -> np.ndarray:
        parts = []
        for e in sorted(self.lookup(segment_id), key=lambda e: e.shard_id):
            flat = flatten_column_major(shards[e.shard_id])
            parts.append(flat[e.offset:e.offset + e.length])
        return np.concatenate(parts)


def build_segment_map(sel: ChannelSelection, layout: ShardLayout, cols: int | None = None) -> SegmentMap:
    cols = cols if cols is not None else sel.num_columns
    if cols is not None and len(sel) and sel.channel_ids[-1] >= cols:
        raise ValueError(f"channel id {sel.channel_ids[-1]} out of range for {cols} columns")
    entries = []
    for seg_id, ch in enumerate(sel.channel_ids):
        ch = int(ch)
        for s in range(layout.n_shards):
            r = layout.local_rows(s)
            entries.append(Segment(seg_id, s, ch * r, r, ch))
    return SegmentMap(entries)
