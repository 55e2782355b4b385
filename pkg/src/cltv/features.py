"""Handcrafted customer features over the feature window.

Dates are measured in days from ``feature_start``; recency features count
days back from ``feature_end``.  "Last quarter" is the final 91 days of the
window and "previous quarter" the 91 days before that.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone

import numpy as np
import pandas as pd

from .data_model import DAY, ORDER, RETURN, SESSION, VIEW, EventLog, TimeSplit
from .io import atomic_path, read_bundle, write_bundle

QUARTER_DAYS = 91
SUBSET_MAX_CARDINALITY = 32
MISSING = math.nan

NUMERIC_FEATURES = (
    "num_orders",
    "std_order_dates",
    "num_sessions_last_quarter",
    "num_items_new_collection",
    "num_items_kept",
    "net_sales",
    "days_first_to_last_session",
    "num_sessions",
    "customer_tenure",
    "total_items_ordered",
    "days_since_last_order",
    "days_since_last_session",
    "std_session_dates",
    "orders_last_quarter",
    "age",
    "avg_order_date",
    "total_ordered_value",
    "num_products_viewed",
    "days_since_first_order_in_window",
    "avg_session_date",
    "num_sessions_previous_quarter",
)
CATEGORICAL_FEATURES = ("country",)
FEATURE_NAMES = NUMERIC_FEATURES + CATEGORICAL_FEATURES


@dataclass(frozen=True)
class FeatureVector:
    customer_id: str
    num_orders: int = 0
    std_order_dates: float = 0.0
    num_sessions_last_quarter: int = 0
    num_items_new_collection: int = 0
    num_items_kept: int = 0
    net_sales: float = 0.0
    days_first_to_last_session: float = 0.0
    num_sessions: int = 0
    customer_tenure: float = 0.0
    total_items_ordered: int = 0
    days_since_last_order: float = 0.0
    days_since_last_session: float = 0.0
    std_session_dates: float = 0.0
    orders_last_quarter: int = 0
    age: float = MISSING
    avg_order_date: float = MISSING
    total_ordered_value: float = 0.0
    num_products_viewed: int = 0
    days_since_first_order_in_window: float = 0.0
    avg_session_date: float = MISSING
    num_sessions_previous_quarter: int = 0
    country: str | None = None


def _truthy(attrs) -> bool:
    if not attrs:
        return False
    flag = attrs.get("is_new_collection")
    return flag is not None and str(flag).strip().lower() in {"1", "true", "yes", "y", "t"}


def _latest_attr(hist: pd.DataFrame, key: str) -> pd.Series:
    """Most recent non-empty value of ``attrs[key]`` per customer."""
    has = hist["attrs"].map(lambda a: bool(a) and bool(a.get(key)))
    sub = hist.loc[has.to_numpy(), ["customer_id", "ts", "attrs"]]
    if sub.empty:
        return pd.Series(dtype=object)
    sub = sub.assign(v=sub["attrs"].map(lambda a: a[key]))
    sub = sub.sort_values(["customer_id", "ts"], kind="mergesort")
    return sub.groupby("customer_id").v.last()


def feature_frame(events: EventLog, split: TimeSplit) -> pd.DataFrame:
    """Feature table indexed by customer id, columns in ``FEATURE_NAMES`` order.

    Only events strictly before ``feature_end`` are read.  Missing values
    (no orders for order averages, unknown age) are NaN; absent country is
    None.
    """
    f = events.frame
    ts_all = f.ts.to_numpy()
    hist = f.loc[ts_all < split.feature_end]
    # canonical row order keeps sums and "latest" lookups independent of log order
    hist = (hist.assign(_p=hist.product_id.fillna(""))
            .sort_values(["customer_id", "ts", "kind", "_p", "value"], kind="mergesort")
            .drop(columns="_p"))
    in_win = hist.ts.to_numpy() >= split.feature_start
    win = hist.loc[in_win]
    customers = np.array(sorted(set(win.customer_id)), dtype=object)
    idx = pd.Index(customers, name="customer_id")
    out = pd.DataFrame(index=idx)
    if customers.size == 0:
        for name in FEATURE_NAMES:
            out[name] = pd.Series(dtype=object if name == "country" else float)
        return out

    W = split.feature_days
    end_day = W
    day = (win.ts.to_numpy() - split.feature_start) / DAY
    win = win.assign(day=day)
    kind = win.kind.to_numpy()

    items = win.loc[kind == ORDER]
    orders = items.drop_duplicates(["customer_id", "ts"])
    sessions = win.loc[kind == SESSION]
    returns = win.loc[kind == RETURN]
    views = win.loc[kind == VIEW]

    def per(frame, agg, default=0.0):
        if frame.empty:
            return pd.Series(default, index=idx, dtype=float)
        return agg(frame.groupby("customer_id")).reindex(idx).fillna(default).astype(float)

    def per_nan(frame, agg):
        if frame.empty:
            return pd.Series(np.nan, index=idx, dtype=float)
        return agg(frame.groupby("customer_id")).reindex(idx).astype(float)

    last_q = end_day - QUARTER_DAYS
    prev_q = end_day - 2 * QUARTER_DAYS

    out["num_orders"] = per(orders, lambda g: g.size())
    out["std_order_dates"] = per(orders, lambda g: g.day.std(ddof=0))
    out["num_sessions_last_quarter"] = per(sessions.loc[sessions.day >= last_q], lambda g: g.size())
    new_items = items.loc[items["attrs"].map(_truthy).to_numpy()] if not items.empty else items
    out["num_items_new_collection"] = per(new_items, lambda g: g.size())
    n_items = per(items, lambda g: g.size())
    n_returned = per(returns, lambda g: g.size())
    out["num_items_kept"] = np.maximum(n_items - n_returned, 0.0)
    ordered_value = per(items, lambda g: g.value.sum())
    out["net_sales"] = ordered_value - per(returns, lambda g: g.value.sum())
    first_s = per_nan(sessions, lambda g: g.day.min())
    last_s = per_nan(sessions, lambda g: g.day.max())
    out["days_first_to_last_session"] = (last_s - first_s).fillna(0.0)
    out["num_sessions"] = per(sessions, lambda g: g.size())

    first_ever = (hist.groupby("customer_id").ts.min().reindex(idx) - split.feature_end) / -DAY
    out["customer_tenure"] = first_ever.clip(0.0, W).astype(float)
    out["total_items_ordered"] = n_items
    last_o = per_nan(orders, lambda g: g.day.max())
    out["days_since_last_order"] = (end_day - last_o).fillna(W)
    out["days_since_last_session"] = (end_day - last_s).fillna(W)
    out["std_session_dates"] = per(sessions, lambda g: g.day.std(ddof=0))
    out["orders_last_quarter"] = per(orders.loc[orders.day >= last_q], lambda g: g.size())

    birth = _latest_attr(hist, "birth_year").reindex(idx)
    ref_year = datetime.fromtimestamp(split.feature_end, tz=timezone.utc).year
    birth = pd.to_numeric(birth, errors="coerce")
    out["age"] = (ref_year - birth).astype(float)

    out["avg_order_date"] = per_nan(orders, lambda g: g.day.mean())
    out["total_ordered_value"] = ordered_value
    out["num_products_viewed"] = per(views, lambda g: g.product_id.nunique())
    first_o = per_nan(orders, lambda g: g.day.min())
    out["days_since_first_order_in_window"] = (end_day - first_o).fillna(W)
    out["avg_session_date"] = per_nan(sessions, lambda g: g.day.mean())
    out["num_sessions_previous_quarter"] = per(
        sessions.loc[(sessions.day >= prev_q) & (sessions.day < last_q)], lambda g: g.size())

    country = _latest_attr(hist, "country").reindex(idx)
    out["country"] = country.astype(object).where(country.notna(), None)
    return out


_INT_FIELDS = {f.name for f in fields(FeatureVector) if f.type == "int"}


def compute_features(events: EventLog, split: TimeSplit) -> list[FeatureVector]:
    frame = feature_frame(events, split)
    return vectors_from_frame(frame)


def vectors_from_frame(frame: pd.DataFrame) -> list[FeatureVector]:
    out = []
    for cid, row in zip(frame.index, frame.itertuples(index=False)):
        vals = row._asdict()
        kw = {}
        for name, v in vals.items():
            if name == "country":
                kw[name] = v if isinstance(v, str) and v else None
            elif name in _INT_FIELDS:
                kw[name] = int(v)
            else:
                kw[name] = float(v)
        out.append(FeatureVector(customer_id=str(cid), **kw))
    return out


def frame_from_vectors(vectors) -> pd.DataFrame:
    rows = [{name: getattr(v, name) for name in FEATURE_NAMES} for v in vectors]
    frame = pd.DataFrame(rows, index=pd.Index([v.customer_id for v in vectors], name="customer_id"),
                         columns=list(FEATURE_NAMES))
    for name in NUMERIC_FEATURES:
        frame[name] = frame[name].astype(float)
    return frame


# -- categorical encoding ----------------------------------------------------

@dataclass
class CategoricalEncoder:
    """Integer codes for categorical columns.

    Categories are numbered by descending training frequency (ties by
    name).  Up to ``max_subset`` categories the tree learner splits on
    category subsets; above it the code is used as an ordinal.  Unseen
    categories map to the reserved code ``len(categories)``; missing stays
    NaN.
    """

    max_subset: int = SUBSET_MAX_CARDINALITY
    categories: dict = field(default_factory=dict)

    def fit(self, frame: pd.DataFrame, columns=CATEGORICAL_FEATURES) -> "CategoricalEncoder":
        self.categories = {}
        for col in columns:
            counts = frame[col].dropna().value_counts()
            ordered = sorted(counts.items(), key=lambda kv: (-kv[1], str(kv[0])))
            self.categories[col] = [str(k) for k, _ in ordered]
        return self

    def is_subset(self, col) -> bool:
        return len(self.categories[col]) <= self.max_subset

    def unknown_code(self, col) -> int:
        return len(self.categories[col])

    def transform_column(self, col, values) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.categories[col])}
        unk = self.unknown_code(col)
        out = np.empty(len(values), dtype=float)
        for i, v in enumerate(values):
            if v is None or (isinstance(v, float) and math.isnan(v)) or v == "":
                out[i] = np.nan
            else:
                out[i] = lookup.get(str(v), unk)
        return out

    def to_dict(self) -> dict:
        return {"max_subset": self.max_subset, "categories": self.categories}

    @classmethod
    def from_dict(cls, d) -> "CategoricalEncoder":
        return cls(max_subset=int(d["max_subset"]),
                   categories={k: list(v) for k, v in d["categories"].items()})


@dataclass
class DesignMatrix:
    """Numeric matrix ready for the forest; NaN marks missing values."""

    X: np.ndarray
    columns: list
    categorical: np.ndarray
    customer_ids: np.ndarray

    @property
    def n_features(self) -> int:
        return len(self.columns)


def encode_categoricals(frame: pd.DataFrame, encoder: CategoricalEncoder | None = None,
                        extra: pd.DataFrame | None = None) -> tuple[DesignMatrix, CategoricalEncoder]:
    """Feature frame (plus optional extra numeric columns, e.g. embeddings,
    aligned on customer id) -> :class:`DesignMatrix`.

    Pass a fitted ``encoder`` at predict time; otherwise one is fitted.
    """
    if isinstance(frame, list):
        frame = frame_from_vectors(frame)
    cat_cols = [c for c in frame.columns if c in CATEGORICAL_FEATURES]
    if encoder is None:
        encoder = CategoricalEncoder().fit(frame, cat_cols)
    blocks, names, is_cat = [], [], []
    for col in frame.columns:
        if col in cat_cols:
            blocks.append(encoder.transform_column(col, list(frame[col])))
            is_cat.append(encoder.is_subset(col))
        else:
            blocks.append(frame[col].to_numpy(dtype=float))
            is_cat.append(False)
        names.append(col)
    if extra is not None:
        extra = extra.reindex(frame.index)
        for col in extra.columns:
            blocks.append(extra[col].to_numpy(dtype=float))
            names.append(str(col))
            is_cat.append(False)
    X = np.column_stack(blocks) if blocks else np.empty((len(frame), 0))
    return DesignMatrix(X, names, np.array(is_cat, dtype=bool),
                        np.array(frame.index, dtype=object)), encoder


# -- persistence -------------------------------------------------------------

def write_features_csv(path, frame: pd.DataFrame) -> None:
    """CSV with header ``customer_id, <FEATURE_NAMES...>``; missing is empty."""
    with atomic_path(path) as tmp, open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["customer_id", *frame.columns])
        for cid, row in zip(frame.index, frame.itertuples(index=False)):
            cells = [cid]
            for v in row:
                if v is None or (isinstance(v, float) and math.isnan(v)):
                    cells.append("")
                elif isinstance(v, float):
                    cells.append(repr(v))
                else:
                    cells.append(str(v))
            w.writerow(cells)


def read_features_csv(path) -> pd.DataFrame:
    frame = pd.read_csv(path, dtype={"customer_id": str, "country": object},
                        keep_default_na=False, na_values={c: [""] for c in NUMERIC_FEATURES})
    frame = frame.set_index("customer_id")
    if "country" in frame:
        frame["country"] = frame["country"].map(lambda v: v if v else None)
    for c in frame.columns:
        if c != "country":
            frame[c] = frame[c].astype(float)
    return frame


def write_features_bin(path, frame: pd.DataFrame) -> None:
    """Bundle with the numeric block as float64 and categorical columns as
    string tables in the metadata."""
    num = [c for c in frame.columns if c not in CATEGORICAL_FEATURES]
    cat = [c for c in frame.columns if c in CATEGORICAL_FEATURES]
    meta = {
        "kind": "feature_matrix",
        "customer_ids": [str(c) for c in frame.index],
        "numeric_columns": num,
        "categorical": {c: [v if isinstance(v, str) else None for v in frame[c]] for c in cat},
    }
    write_bundle(path, meta, {"X": frame[num].to_numpy(dtype=np.float64)})


def read_features_bin(path) -> pd.DataFrame:
    meta, arrays = read_bundle(path)
    frame = pd.DataFrame(arrays["X"], columns=meta["numeric_columns"],
                         index=pd.Index(meta["customer_ids"], name="customer_id"))
    for c, vals in meta["categorical"].items():
        frame[c] = pd.Series(vals, index=frame.index, dtype=object)
    return frame
