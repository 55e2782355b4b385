"""Customer embeddings by skip-gram with negative sampling.

``W_in`` rows are the customer vectors handed to downstream models;
``W_out`` rows are the context vectors scored against them.  Every update
goes through :func:`_sgd_update`, which computes the output-row and
input-row deltas from a single forward pass.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numba
import numpy as np
import pandas as pd

from . import pairgen
from .data_model import EventLog, TimeSplit, cohort as feature_cohort
from .errors import DataError
from .io import atomic_path, atomic_write_bytes

EMB_MAGIC = b"CLTVEMB\x00"
EMB_VERSION = 1
_EMB_HEADER = struct.Struct("<8sIQI")

PHASES = ("old->old", "new->old", "old->new", "new->new")


@dataclass(frozen=True)
class SgnsConfig:
    dim: int = 64
    window_length: int = 11
    k_negatives: int = 5
    eta: float = 0.025
    eta_floor: float = 1e-4
    epochs: int = 5
    exponent: float = 0.75
    init_scale: float | None = None
    warm_init_scale: float | None = None
    seed: int = 0
    deterministic: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.k_negatives < 1:
            raise ValueError("k_negatives must be >= 1")
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.init_scale is not None and not self.init_scale > 0:
            raise ValueError("init_scale must be > 0")
        if self.warm_init_scale is not None and self.warm_init_scale < 0:
            raise ValueError("warm_init_scale must be >= 0")

    @property
    def init_range(self) -> float:
        return self.init_scale if self.init_scale is not None else 0.5 / self.dim

    @property
    def warm_range(self) -> float:
        if self.warm_init_scale is not None:
            return self.warm_init_scale
        return 0.01 * self.init_range

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CohortMap:
    old_customers: frozenset
    new_customers: frozenset

    def __post_init__(self):
        if self.old_customers & self.new_customers:
            raise ValueError("old and new customers overlap")

    @classmethod
    def split(cls, current: Iterable, prior_ids: Iterable) -> "CohortMap":
        current = set(current)
        prior = set(prior_ids)
        return cls(frozenset(current & prior), frozenset(current - prior))

    @property
    def customers(self) -> frozenset:
        return self.old_customers | self.new_customers


class EmbeddingModel:
    """Input and output embedding matrices over an ordered customer index."""

    def __init__(self, customer_ids: Sequence, W_in: np.ndarray, W_out: np.ndarray):
        ids = np.array([str(c) for c in customer_ids], dtype=object)
        if ids.size < 2:
            raise ValueError("an embedding model needs at least two customers")
        if len(set(ids)) != ids.size:
            raise ValueError("duplicate customer ids")
        W_in = np.ascontiguousarray(W_in, dtype=np.float64)
        W_out = np.ascontiguousarray(W_out, dtype=np.float64)
        if W_in.shape != W_out.shape or W_in.shape[0] != ids.size:
            raise ValueError("matrix shapes do not match the customer index")
        if not (np.isfinite(W_in).all() and np.isfinite(W_out).all()):
            raise ValueError("embedding matrices must be finite")
        self.customer_ids = ids
        self.index = {c: i for i, c in enumerate(ids)}
        self.W_in = W_in
        self.W_out = W_out

    @property
    def dim(self) -> int:
        return self.W_in.shape[1]

    def __len__(self):
        return self.customer_ids.size

    def rows(self, ids: Iterable) -> np.ndarray:
        return np.fromiter((self.index[c] for c in ids), dtype=np.int64)

    def vectors(self, ids: Iterable) -> np.ndarray:
        return self.W_in[self.rows(ids)]

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(self.customer_ids, self.W_in.copy(), self.W_out.copy())


def init_model(cohort: Iterable, config: SgnsConfig, scale: float | None = None) -> EmbeddingModel:
    """Uniform ``W_in`` in ``[-scale, scale]`` (default ``config.init_range``),
    zero ``W_out``.  Rows follow the sorted customer ids."""
    ids = sorted({str(c) for c in cohort})
    if not ids:
        raise ValueError("cohort is empty")
    s = config.init_range if scale is None else scale
    rng = np.random.default_rng(config.seed)
    W_in = rng.uniform(-s, s, size=(len(ids), config.dim))
    return EmbeddingModel(ids, W_in, np.zeros_like(W_in))


def warm_start_init(prior: EmbeddingModel, cohorts: CohortMap, config: SgnsConfig) -> EmbeddingModel:
    """Copy both matrices' rows for returning customers from ``prior``;
    new customers get small uniform ``W_in`` rows and zero ``W_out`` rows."""
    missing = [c for c in cohorts.old_customers if c not in prior.index]
    if missing:
        raise KeyError(f"{len(missing)} old customers missing from prior model, e.g. {sorted(missing)[0]!r}")
    if prior.dim != config.dim:
        raise ValueError(f"prior dim {prior.dim} != config dim {config.dim}")
    ids = sorted(cohorts.customers)
    if not ids:
        raise ValueError("cohort is empty")
    n, d = len(ids), config.dim
    W_in = np.zeros((n, d))
    W_out = np.zeros((n, d))
    is_old = np.array([c in cohorts.old_customers for c in ids], dtype=bool)
    src = prior.rows(c for c, o in zip(ids, is_old) if o)
    W_in[is_old] = prior.W_in[src]
    W_out[is_old] = prior.W_out[src]
    rng = np.random.default_rng(config.seed)
    eps = config.warm_range
    W_in[~is_old] = rng.uniform(-eps, eps, size=(int((~is_old).sum()), d))
    return EmbeddingModel(ids, W_in, W_out)


# -- numerical kernels -------------------------------------------------------

@numba.njit(cache=True, nogil=True)
def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@numba.njit(cache=True, nogil=True)
def _log_sigmoid(x):
    if x >= 0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


@numba.njit(cache=True, nogil=True)
def _sgd_update(W_in, W_out, i, o, negs, eta, g, acc):
    """One SGNS step for input row ``i``, positive output row ``o`` and
    negative output rows ``negs``.  Returns the pre-update loss.

    ``g`` (len k+1) and ``acc`` (len dim) are scratch buffers.
    """
    k = negs.shape[0]
    dim = W_in.shape[1]
    loss = 0.0
    for a in range(dim):
        acc[a] = 0.0
    for j in range(k + 1):
        r = o if j == 0 else negs[j - 1]
        s = 0.0
        for a in range(dim):
            s += W_out[r, a] * W_in[i, a]
        if r == o:
            g[j] = _sigmoid(s) - 1.0
            loss -= _log_sigmoid(s)
        else:
            g[j] = _sigmoid(s)
            loss -= _log_sigmoid(-s)
        for a in range(dim):
            acc[a] += g[j] * W_out[r, a]
    for j in range(k + 1):
        r = o if j == 0 else negs[j - 1]
        for a in range(dim):
            W_out[r, a] -= eta * g[j] * W_in[i, a]
    for a in range(dim):
        W_in[i, a] -= eta * acc[a]
    return loss


@numba.njit(cache=True, nogil=True)
def _next_uniform(state):
    # splitmix64
    state[0] += np.uint64(0x9E3779B97F4A7C15)
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@numba.njit(cache=True, nogil=True)
def _draw(cdf, state):
    u = _next_uniform(state)
    lo, hi = 0, cdf.shape[0] - 1
    while lo < hi:
        mid = (lo + hi) >> 1
        if cdf[mid] > u:
            hi = mid
        else:
            lo = mid + 1
    return lo


@numba.njit(cache=True, nogil=True)
def _run_pairs(W_in, W_out, pin, pout, order, cdf, table_rows, k,
               eta0, eta_floor, step0, total_steps, state):
    g = np.empty(k + 1)
    acc = np.empty(W_in.shape[1])
    negs = np.empty(k, dtype=np.int64)
    loss = 0.0
    span = eta0 - eta_floor
    for t in range(order.shape[0]):
        p = order[t]
        i = pin[p]
        o = pout[p]
        eta = eta0 - span * (step0 + t) / total_steps
        if eta < eta_floor:
            eta = eta_floor
        for j in range(k):
            r = table_rows[_draw(cdf, state)]
            tries = 0
            while r == o and tries < 8:
                r = table_rows[_draw(cdf, state)]
                tries += 1
            negs[j] = r
        loss += _sgd_update(W_in, W_out, i, o, negs, eta, g, acc)
    return loss


@numba.njit(cache=True, parallel=True)
def _run_pairs_hogwild(W_in, W_out, pin, pout, order, cdf, table_rows, k,
                       eta0, eta_floor, step0, total_steps, states):
    # lock-free: shards race on shared rows by design
    n_shards = states.shape[0]
    n = order.shape[0]
    losses = np.zeros(n_shards)
    for s in numba.prange(n_shards):
        lo = s * n // n_shards
        hi = (s + 1) * n // n_shards
        st = states[s:s + 1]
        losses[s] = _run_pairs(W_in, W_out, pin, pout, order[lo:hi], cdf, table_rows, k,
                               eta0, eta_floor, step0 + lo, total_steps, st)
    return losses.sum()


# -- public operations -------------------------------------------------------

def _neg_rows(model: EmbeddingModel, negatives) -> np.ndarray:
    return np.array([model.index[c] for c in negatives], dtype=np.int64)


def sgd_step(model: EmbeddingModel, pair: pairgen.TrainingPair, negatives: Sequence, eta: float) -> float:
    """Apply one gradient step in place and return the loss before it."""
    negs = _neg_rows(model, negatives)
    return float(_sgd_update(model.W_in, model.W_out, model.index[pair.c_in],
                             model.index[pair.c_out], negs, float(eta),
                             np.empty(negs.size + 1), np.empty(model.dim)))


def _log_sigmoid_np(x):
    return -np.logaddexp(0.0, -x)


def embedding_loss(model: EmbeddingModel, pair: pairgen.TrainingPair, negatives: Sequence) -> float:
    """``-log s(v'_out . v_in) - sum_neg log s(-v'_neg . v_in)``.

    A negative that coincides with the positive customer is scored as a
    positive, mirroring the update rule.
    """
    v = model.W_in[model.index[pair.c_in]]
    o = model.index[pair.c_out]
    loss = -_log_sigmoid_np(model.W_out[o] @ v)
    for r in _neg_rows(model, negatives):
        s = model.W_out[r] @ v
        loss -= _log_sigmoid_np(s) if r == o else _log_sigmoid_np(-s)
    return float(loss)


def _as_pair_rows(model: EmbeddingModel, pairs) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(pairs, tuple) and len(pairs) == 2:
        pin, pout = (np.ascontiguousarray(a, dtype=np.int64) for a in pairs)
    elif isinstance(pairs, np.ndarray):
        arr = np.asarray(pairs)
        pin = np.ascontiguousarray(arr[:, 0], dtype=np.int64)
        pout = np.ascontiguousarray(arr[:, 1], dtype=np.int64)
    else:
        pairs = list(pairs)
        pin = np.fromiter((model.index[p.c_in] for p in pairs), dtype=np.int64, count=len(pairs))
        pout = np.fromiter((model.index[p.c_out] for p in pairs), dtype=np.int64, count=len(pairs))
    if pin.shape != pout.shape:
        raise ValueError("pair arrays differ in length")
    n = len(model)
    if pin.size and (min(pin.min(), pout.min()) < 0 or max(pin.max(), pout.max()) >= n):
        raise IndexError("pair row outside the model index")
    return pin, pout


def phase_buckets(pin: np.ndarray, pout: np.ndarray, is_old: np.ndarray) -> np.ndarray:
    """Phase id per pair: 0 (old,old), 1 (new,old), 2 (old,new), 3 (new,new)."""
    return (~is_old[pin]).astype(np.int64) + 2 * (~is_old[pout]).astype(np.int64)


def epoch_order(pin, pout, rng: np.random.Generator, is_old: np.ndarray | None = None) -> np.ndarray:
    """Visiting order of pair indices for one epoch."""
    if is_old is None:
        return rng.permutation(pin.size)
    phase = phase_buckets(pin, pout, is_old)
    return np.concatenate([rng.permutation(np.flatnonzero(phase == b)) for b in range(4)])


def train(pairs, model: EmbeddingModel, table: pairgen.NegativeTable, config: SgnsConfig,
          cohorts: CohortMap | None = None) -> tuple[EmbeddingModel, list[float]]:
    """Run ``config.epochs`` passes of SGNS over ``pairs`` in place.

    ``pairs`` is a list of :class:`~cltv.pairgen.TrainingPair`, a tuple of
    integer row arrays ``(c_in, c_out)`` or an ``(n, 2)`` row array (e.g. a
    memory-mapped pair file).  With ``cohorts`` each epoch visits pairs in
    the order (old,old), (new,old), (old,new), (new,new), shuffled within
    each phase.  Returns the model and the mean loss of every epoch.
    """
    pin, pout = _as_pair_rows(model, pairs)
    if pin.size == 0:
        raise DataError("no training pairs")
    table_rows = model.rows(table.customer_ids)
    cdf = np.ascontiguousarray(table.cumulative_weights, dtype=np.float64)
    is_old = None
    if cohorts is not None:
        is_old = np.array([c in cohorts.old_customers for c in model.customer_ids], dtype=bool)

    rng = np.random.default_rng(config.seed)
    total = pin.size * config.epochs
    losses = []
    for epoch in range(config.epochs):
        order = epoch_order(pin, pout, rng, is_old)
        step0 = epoch * pin.size
        if config.deterministic or config.workers <= 1:
            state = rng.integers(0, 2**63, size=1, dtype=np.uint64)
            loss = _run_pairs(model.W_in, model.W_out, pin, pout, order, cdf, table_rows,
                              config.k_negatives, config.eta, config.eta_floor,
                              step0, total, state)
        else:
            states = rng.integers(0, 2**63, size=config.workers, dtype=np.uint64)
            numba.set_num_threads(min(config.workers, numba.config.NUMBA_NUM_THREADS))
            loss = _run_pairs_hogwild(model.W_in, model.W_out, pin, pout, order, cdf,
                                      table_rows, config.k_negatives, config.eta,
                                      config.eta_floor, step0, total, states)
        losses.append(loss / pin.size)
    return model, losses


def embed_customers(events: EventLog, split: TimeSplit, config: SgnsConfig,
                    prior: EmbeddingModel | None = None,
                    customers: Iterable | None = None) -> tuple[EmbeddingModel, list[float]]:
    """Streams -> pairs -> trained model for one feature window.

    The model covers every feature-window customer (or ``customers``) plus
    every customer seen in a view stream.  With ``prior`` the model is warm
    started and trained in phase order.
    """
    streams = pairgen.build_view_streams(events, split)
    if not streams:
        raise DataError("no product has two or more viewers in the feature window")
    cohort = set(feature_cohort(events, split) if customers is None else map(str, customers))
    table = pairgen.build_negative_table(streams, config.exponent)
    cohort.update(table.customer_ids)
    cohorts = None
    if prior is None:
        model = init_model(cohort, config)
    else:
        cohorts = CohortMap.split(cohort, prior.customer_ids)
        model = warm_start_init(prior, cohorts, config)
    encoded = pairgen.encode_streams(streams, model.index)
    pin, pout = pairgen.pair_arrays(encoded, config.window_length)
    return train((pin, pout), model, table, config, cohorts)


# -- export and persistence --------------------------------------------------

def embedding_columns(dim: int) -> list[str]:
    width = max(3, len(str(dim - 1)))
    return [f"emb_{d:0{width}d}" for d in range(dim)]


def export_embeddings(model: EmbeddingModel) -> pd.DataFrame:
    """``W_in`` rows as a frame indexed by customer id, one column per dimension."""
    return pd.DataFrame(model.W_in.copy(), index=pd.Index(model.customer_ids, name="customer_id"),
                        columns=embedding_columns(model.dim))


def import_embeddings(frame: pd.DataFrame) -> EmbeddingModel:
    """Inverse of :func:`export_embeddings`; ``W_out`` is not exported and comes back zero."""
    W = frame.to_numpy(dtype=np.float64)
    return EmbeddingModel(list(frame.index), W, np.zeros_like(W))


def save_model(path, model: EmbeddingModel) -> None:
    """Binary layout: ``<8s magic, u32 version, u64 |C|, u32 dim>``, then per
    customer ``u16 byte length + utf-8 id``, then ``W_in`` and ``W_out`` as
    row-major little-endian float32."""
    parts = [_EMB_HEADER.pack(EMB_MAGIC, EMB_VERSION, len(model), model.dim)]
    for c in model.customer_ids:
        raw = c.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError("customer id too long")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
    parts.append(model.W_in.astype("<f4").tobytes())
    parts.append(model.W_out.astype("<f4").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_model(path) -> EmbeddingModel:
    buf = Path(path).read_bytes()
    if len(buf) < _EMB_HEADER.size:
        raise DataError(f"{path}: truncated embedding file")
    magic, version, n, dim = _EMB_HEADER.unpack_from(buf)
    if magic != EMB_MAGIC:
        raise DataError(f"{path}: not an embedding file")
    if version != EMB_VERSION:
        raise DataError(f"{path}: unsupported embedding file version {version}")
    pos = _EMB_HEADER.size
    ids = []
    for _ in range(n):
        (length,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        ids.append(buf[pos:pos + length].decode("utf-8"))
        pos += length
    size = n * dim
    W_in = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(n, dim)
    W_out = np.frombuffer(buf, dtype="<f4", count=size, offset=pos + 4 * size).reshape(n, dim)
    return EmbeddingModel(ids, W_in.astype(np.float64), W_out.astype(np.float64))


def write_tsv(path, model: EmbeddingModel) -> None:
    """``customer_id`` then ``dim`` tab-separated values per line, exact repr."""
    with atomic_path(path) as tmp, open(tmp, "w", encoding="utf-8") as fh:
        for c, row in zip(model.customer_ids, model.W_in):
            fh.write(c + "\t" + "\t".join(repr(float(x)) for x in row) + "\n")


def read_tsv(path) -> pd.DataFrame:
    ids, rows = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            c, *vals = line.split("\t")
            ids.append(c)
            rows.append([float(v) for v in vals])
    W = np.array(rows, dtype=np.float64)
    return pd.DataFrame(W, index=pd.Index(ids, name="customer_id"),
                        columns=embedding_columns(W.shape[1]))
