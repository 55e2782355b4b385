"""Per-product customer view sequences, skip-gram pairs and the
negative-sampling distribution."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data_model import VIEW, EventLog, TimeSplit
from .errors import DataError
from .io import atomic_path

DEFAULT_WINDOW = 11
DEFAULT_EXPONENT = 0.75
MAX_REDRAWS = 8

PAIR_MAGIC = b"CLTVPRS\x00"
PAIR_VERSION = 1
_PAIR_HEADER = struct.Struct("<8sIIQ")


@dataclass(frozen=True)
class ViewStream:
    product_id: str
    customers: tuple

    def __len__(self):
        return len(self.customers)


@dataclass(frozen=True)
class TrainingPair:
    c_in: str
    c_out: str

    def __post_init__(self):
        if self.c_in == self.c_out:
            raise ValueError("a training pair needs two different customers")


@dataclass(frozen=True)
class NegativeTable:
    customer_ids: np.ndarray
    cumulative_weights: np.ndarray
    exponent: float = DEFAULT_EXPONENT
    weights: np.ndarray | None = None

    @property
    def probabilities(self) -> np.ndarray:
        """Normalised weights; recovered from the CDF when not stored."""
        if self.weights is not None:
            return self.weights
        return np.diff(self.cumulative_weights, prepend=0.0)

    def __len__(self):
        return len(self.customer_ids)


def build_view_streams(events: EventLog, window: TimeSplit) -> list[ViewStream]:
    """One stream per product, ordered by view time then customer id.

    Only views inside the feature window are used.  Consecutive repeat
    views by one customer collapse to a single entry and streams left with
    fewer than two entries are dropped.
    """
    f = events.frame
    ts = f.ts.to_numpy()
    mask = (f.kind.to_numpy() == VIEW) & window.in_feature_window(ts)
    views = f.loc[mask, ["product_id", "ts", "customer_id"]]
    views = views.sort_values(["product_id", "ts", "customer_id"], kind="mergesort")
    prod = views.product_id.to_numpy()
    cust = views.customer_id.to_numpy()
    if prod.size == 0:
        return []
    keep = np.ones(prod.size, dtype=bool)
    keep[1:] = ~((prod[1:] == prod[:-1]) & (cust[1:] == cust[:-1]))
    prod, cust = prod[keep], cust[keep]
    starts = np.flatnonzero(np.r_[True, prod[1:] != prod[:-1]])
    ends = np.r_[starts[1:], prod.size]
    return [
        ViewStream(str(prod[s]), tuple(cust[s:e]))
        for s, e in zip(starts, ends)
        if e - s >= 2
    ]


def _check_window(window_length: int) -> int:
    if window_length < 3 or window_length % 2 == 0:
        raise ValueError(f"window_length must be odd and >= 3, got {window_length}")
    return window_length // 2


def generate_pairs(stream: ViewStream | Sequence, window_length: int = DEFAULT_WINDOW) -> list[TrainingPair]:
    """Skip-gram pairs from one stream, position by position.

    The window is centred on each element in turn and truncated at the
    sequence ends.  The centre is ``c_in``; every other in-window customer
    gives one pair, except repeats of the centre customer itself.
    """
    half = _check_window(window_length)
    seq = stream.customers if isinstance(stream, ViewStream) else tuple(stream)
    pairs = []
    for i, centre in enumerate(seq):
        for j in range(max(0, i - half), min(len(seq), i + half + 1)):
            if j != i and seq[j] != centre:
                pairs.append(TrainingPair(centre, seq[j]))
    return pairs


def encode_streams(streams: Sequence[ViewStream], index: dict) -> list[np.ndarray]:
    """Map customer ids to integer rows via ``index`` (id -> row)."""
    return [np.fromiter((index[c] for c in s.customers), dtype=np.int64, count=len(s))
            for s in streams]


def pair_arrays(encoded: Sequence[np.ndarray], window_length: int = DEFAULT_WINDOW
                ) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised pair generation over integer-coded streams.

    Yields the same multiset of pairs as :func:`generate_pairs`, grouped by
    stream (in the given order) and then by offset.
    """
    half = _check_window(window_length)
    ins, outs = [], []
    for seq in encoded:
        seq = np.asarray(seq, dtype=np.int64)
        for d in range(1, min(half, seq.size - 1) + 1):
            a, b = seq[:-d], seq[d:]
            ok = a != b
            a, b = a[ok], b[ok]
            ins.append(a)
            outs.append(b)
            ins.append(b)
            outs.append(a)
    if not ins:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    return np.concatenate(ins), np.concatenate(outs)


def stream_counts(streams: Sequence[ViewStream]) -> dict:
    counts: dict = {}
    for s in streams:
        for c in s.customers:
            counts[c] = counts.get(c, 0) + 1
    return counts


def table_from_counts(counts: dict, exponent: float = DEFAULT_EXPONENT) -> NegativeTable:
    if not counts:
        raise DataError("cannot build a negative table from no customers")
    ids = np.array(sorted(counts), dtype=object)
    weights = np.array([counts[c] for c in ids], dtype=float) ** exponent
    probs = weights / weights.sum()
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    return NegativeTable(ids, cdf, float(exponent), probs)


def build_negative_table(streams: Sequence[ViewStream], exponent: float = DEFAULT_EXPONENT) -> NegativeTable:
    """Unigram-to-a-power sampling table over customers seen in ``streams``."""
    if not streams:
        raise DataError("cannot build a negative table from no streams")
    return table_from_counts(stream_counts(streams), exponent)


def sample_negatives(table: NegativeTable, k: int, exclude, rng: np.random.Generator) -> list:
    """``k`` inverse-CDF draws, each redrawn up to 8 times while it equals
    ``exclude``; a draw still equal after that is returned as is."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ids = table.customer_ids
    idx = np.searchsorted(table.cumulative_weights, rng.random(k), side="right")
    for _ in range(MAX_REDRAWS):
        hit = ids[idx] == exclude
        if not hit.any():
            break
        idx[hit] = np.searchsorted(table.cumulative_weights, rng.random(hit.sum()), side="right")
    return list(ids[idx])


# -- out-of-core pair files --------------------------------------------------

def write_pairs(path, c_in: np.ndarray, c_out: np.ndarray) -> None:
    """Binary pair file: header ``<8s magic, u32 version, u32 reserved,
    u64 count>`` followed by ``count`` little-endian ``(u64, u64)`` rows."""
    c_in = np.asarray(c_in, dtype="<u8")
    c_out = np.asarray(c_out, dtype="<u8")
    if c_in.shape != c_out.shape:
        raise ValueError("pair arrays differ in length")
    body = np.empty((c_in.size, 2), dtype="<u8")
    body[:, 0] = c_in
    body[:, 1] = c_out
    with atomic_path(path) as tmp, open(tmp, "wb") as fh:
        fh.write(_PAIR_HEADER.pack(PAIR_MAGIC, PAIR_VERSION, 0, c_in.size))
        fh.write(body.tobytes())


def read_pairs(path, mmap: bool = True) -> np.ndarray:
    """``(count, 2)`` uint64 array of ``(c_in, c_out)`` rows."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(_PAIR_HEADER.size)
    if len(head) < _PAIR_HEADER.size:
        raise DataError(f"{path}: truncated pair file")
    magic, version, _, count = _PAIR_HEADER.unpack(head)
    if magic != PAIR_MAGIC:
        raise DataError(f"{path}: not a pair file")
    if version != PAIR_VERSION:
        raise DataError(f"{path}: unsupported pair file version {version}")
    if mmap:
        if count == 0:
            return np.empty((0, 2), dtype="<u8")
        return np.memmap(path, dtype="<u8", mode="r", offset=_PAIR_HEADER.size, shape=(count, 2))
    raw = path.read_bytes()[_PAIR_HEADER.size:]
    return np.frombuffer(raw, dtype="<u8", count=2 * count).reshape(count, 2)
