"""Event schema, time windows and label derivation.

An event log is held as a pandas frame with one row per event and the
columns ``customer_id, ts, kind, product_id, value, attrs``.  Timestamps are
integer epoch seconds (UTC) and every window is half-open.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from .errors import DataError, EmptyCohortError
from .io import atomic_path

logger = logging.getLogger(__name__)

DAY = 86_400
YEAR_DAYS = 365

COLUMNS = ["customer_id", "ts", "kind", "product_id", "value", "attrs"]


class EventKind(str, Enum):
    PRODUCT_VIEW = "ProductView"
    SESSION_START = "SessionStart"
    ORDER_PLACED = "OrderPlaced"
    ITEM_RETURNED = "ItemReturned"


VIEW = EventKind.PRODUCT_VIEW.value
SESSION = EventKind.SESSION_START.value
ORDER = EventKind.ORDER_PLACED.value
RETURN = EventKind.ITEM_RETURNED.value

_KIND_VALUES = {k.value for k in EventKind}
_NEEDS_PRODUCT = {VIEW, ORDER, RETURN}
_ZERO_VALUE = {VIEW, SESSION}


@dataclass(frozen=True)
class CustomerEvent:
    customer_id: str
    timestamp: int
    kind: EventKind
    product_id: str | None = None
    monetary_value: float = 0.0
    attrs: Mapping[str, str] | None = None


@dataclass(frozen=True)
class TimeSplit:
    """Feature window ``[feature_start, feature_end)`` and label window
    ``[feature_end, label_end)``, all in epoch seconds."""

    feature_start: int
    feature_end: int
    label_end: int

    def __post_init__(self):
        if not self.feature_start < self.feature_end <= self.label_end:
            raise ValueError(
                "need feature_start < feature_end <= label_end, got "
                f"{self.feature_start}, {self.feature_end}, {self.label_end}"
            )

    @classmethod
    def from_start(cls, feature_start: int, feature_days: int = YEAR_DAYS,
                   label_days: int = YEAR_DAYS) -> "TimeSplit":
        feature_end = feature_start + feature_days * DAY
        return cls(feature_start, feature_end, feature_end + label_days * DAY)

    @property
    def feature_days(self) -> float:
        return (self.feature_end - self.feature_start) / DAY

    def in_feature_window(self, ts):
        return (ts >= self.feature_start) & (ts < self.feature_end)

    def in_label_window(self, ts):
        return (ts >= self.feature_end) & (ts < self.label_end)


@dataclass(frozen=True)
class LabelRecord:
    customer_id: str
    net_spend: float
    churned: bool
    percentile: float


class LabelList(list):
    """List of :class:`LabelRecord` that also carries the number of
    customers whose net spend was clamped at zero."""

    n_clamped: int = 0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "customer_id": [r.customer_id for r in self],
                "net_spend": np.array([r.net_spend for r in self], dtype=float),
                "churned": np.array([r.churned for r in self], dtype=bool),
                "percentile": np.array([r.percentile for r in self], dtype=float),
            }
        )


def parse_timestamp(value) -> int:
    """Epoch seconds from an int, float or ISO-8601 string (UTC if naive)."""
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        if not math.isfinite(value):
            raise DataError(f"non-finite timestamp {value!r}")
        return int(value)
    text = str(value).strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError as exc:
        raise DataError(f"unparseable timestamp {value!r}") from exc
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


class EventLog:
    """Immutable columnar event log.

    Use :meth:`from_events`, :meth:`from_records` or :meth:`read` to build
    one; every constructor validates the schema invariants.
    """

    def __init__(self, frame: pd.DataFrame, validate: bool = True):
        frame = frame.loc[:, COLUMNS].reset_index(drop=True)
        if validate:
            _validate(frame)
        self._frame = frame

    @property
    def frame(self) -> pd.DataFrame:
        return self._frame

    def __len__(self):
        return len(self._frame)

    def __eq__(self, other):
        if not isinstance(other, EventLog):
            return NotImplemented
        return self._frame.equals(other._frame)

    @classmethod
    def from_records(cls, records: Iterable[Mapping]) -> "EventLog":
        """Build from dicts shaped like the wire format
        ``{customer_id, ts, kind, product_id?, value?, attrs?}``."""
        cust, ts, kind, prod, value, attrs = [], [], [], [], [], []
        for rec in records:
            try:
                cust.append(str(rec["customer_id"]))
                ts.append(parse_timestamp(rec["ts"]))
                kind.append(str(rec["kind"]))
            except KeyError as exc:
                raise DataError(f"event record missing field {exc.args[0]!r}") from None
            p = rec.get("product_id")
            prod.append(None if p is None or p == "" or _isnan(p) else str(p))
            v = rec.get("value")
            value.append(0.0 if v is None or v == "" or _isnan(v) else float(v))
            a = rec.get("attrs")
            if isinstance(a, str):
                a = json.loads(a) if a else None
            attrs.append({str(k): str(x) for k, x in a.items()} if a else None)
        frame = pd.DataFrame(
            {
                "customer_id": pd.Series(cust, dtype=object),
                "ts": np.asarray(ts, dtype=np.int64),
                "kind": pd.Series(kind, dtype=object),
                "product_id": pd.Series(prod, dtype=object),
                "value": np.asarray(value, dtype=np.float64),
                "attrs": pd.Series(attrs, dtype=object),
            }
        )
        return cls(frame)

    @classmethod
    def from_events(cls, events: Iterable[CustomerEvent]) -> "EventLog":
        return cls.from_records(
            {
                "customer_id": e.customer_id,
                "ts": e.timestamp,
                "kind": EventKind(e.kind).value,
                "product_id": e.product_id,
                "value": e.monetary_value,
                "attrs": dict(e.attrs) if e.attrs else None,
            }
            for e in events
        )

    def events(self) -> list[CustomerEvent]:
        f = self._frame
        return [
            CustomerEvent(c, int(t), EventKind(k), p, float(v), a)
            for c, t, k, p, v, a in zip(
                f.customer_id, f.ts, f.kind, f.product_id, f.value, f["attrs"]
            )
        ]

    def records(self) -> Iterable[dict]:
        f = self._frame
        for c, t, k, p, v, a in zip(
            f.customer_id, f.ts, f.kind, f.product_id, f.value, f["attrs"]
        ):
            rec = {"customer_id": c, "ts": int(t), "kind": k}
            if p is not None:
                rec["product_id"] = p
            if k not in _ZERO_VALUE:
                rec["value"] = float(v)
            if a:
                rec["attrs"] = dict(a)
            yield rec

    def sorted(self) -> "EventLog":
        """Canonical order: timestamp, customer, kind, product, value."""
        f = self._frame.assign(_p=self._frame.product_id.fillna(""))
        f = f.sort_values(
            ["ts", "customer_id", "kind", "_p", "value"], kind="mergesort"
        ).drop(columns="_p")
        return EventLog(f, validate=False)

    def between(self, start: int | None = None, end: int | None = None) -> "EventLog":
        ts = self._frame.ts
        mask = np.ones(len(ts), dtype=bool)
        if start is not None:
            mask &= ts.to_numpy() >= start
        if end is not None:
            mask &= ts.to_numpy() < end
        return EventLog(self._frame.loc[mask], validate=False)

    def concat(self, other: "EventLog") -> "EventLog":
        return EventLog(pd.concat([self._frame, other._frame], ignore_index=True))

    @property
    def span(self) -> tuple[int, int]:
        ts = self._frame.ts
        return int(ts.min()), int(ts.max())

    # -- persistence -----------------------------------------------------

    @classmethod
    def read(cls, path) -> "EventLog":
        """Read newline-delimited JSON (``.ndjson``/``.jsonl``/``.json``) or CSV."""
        path = Path(path)
        if path.suffix.lower() == ".csv":
            with open(path, newline="", encoding="utf-8") as fh:
                return cls.from_records(csv.DictReader(fh))
        with open(path, encoding="utf-8") as fh:
            recs = []
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    recs.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
        return cls.from_records(recs)

    def write(self, path) -> None:
        path = Path(path)
        with atomic_path(path) as tmp:
            self._write(tmp, path.suffix.lower() == ".csv")

    def _write(self, path, as_csv: bool) -> None:
        if as_csv:
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["customer_id", "ts", "kind", "product_id", "value", "attrs"])
                for rec in self.records():
                    w.writerow([
                        rec["customer_id"], rec["ts"], rec["kind"],
                        rec.get("product_id", ""),
                        repr(rec["value"]) if "value" in rec else "",
                        json.dumps(rec["attrs"], sort_keys=True) if "attrs" in rec else "",
                    ])
            return
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")))
                fh.write("\n")


def _isnan(x) -> bool:
    return isinstance(x, float) and math.isnan(x)


def _validate(frame: pd.DataFrame) -> None:
    if len(frame) == 0:
        return
    kinds = frame.kind.to_numpy()
    bad = ~np.isin(kinds, list(_KIND_VALUES))
    if bad.any():
        raise DataError(f"unknown event kind {kinds[bad][0]!r}")
    value = frame.value.to_numpy()
    if not np.all(np.isfinite(value)) or (value < 0).any():
        raise DataError("monetary value must be finite and >= 0")
    zero_kind = np.isin(kinds, list(_ZERO_VALUE))
    if (value[zero_kind] != 0).any():
        raise DataError("views and session starts must carry value 0")
    missing_prod = frame.product_id.isna().to_numpy()
    if (missing_prod & np.isin(kinds, list(_NEEDS_PRODUCT))).any():
        raise DataError("ProductView/OrderPlaced/ItemReturned events need a product_id")

    # every return must follow an order of the same product by the same customer
    returns = frame.loc[kinds == RETURN, ["customer_id", "product_id", "ts"]]
    if len(returns):
        first_order = (
            frame.loc[kinds == ORDER, ["customer_id", "product_id", "ts"]]
            .groupby(["customer_id", "product_id"], sort=False)
            .ts.min()
            .rename("first_order")
        )
        joined = returns.join(first_order, on=["customer_id", "product_id"])
        orphan = joined.first_order.isna() | (joined.ts < joined.first_order)
        if orphan.any():
            row = joined.loc[orphan].iloc[0]
            raise DataError(
                f"ItemReturned for customer {row.customer_id!r} product "
                f"{row.product_id!r} has no earlier order"
            )


def fractional_rank(values) -> np.ndarray:
    """Average-tie fractional rank ``(rank - 1/2) / n`` in (0, 1)."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return values.copy()
    return (rankdata(values, method="average") - 0.5) / values.size


def cohort(events: EventLog, split: TimeSplit) -> np.ndarray:
    """Sorted unique customers with at least one feature-window event."""
    f = events.frame
    mask = split.in_feature_window(f.ts.to_numpy())
    return np.array(sorted(set(f.customer_id.to_numpy()[mask])), dtype=object)


def derive_labels(events: EventLog, split: TimeSplit) -> LabelList:
    """Churn flag, clamped net spend and spend percentile per customer.

    The cohort is every customer with a feature-window event; spend is
    measured in the label window only.  Customers whose returns exceed
    their orders are clamped to zero and counted in ``n_clamped``.
    """
    customers = cohort(events, split)
    if customers.size == 0:
        raise EmptyCohortError("no customer has an event in the feature window")

    f = events.frame
    in_label = split.in_label_window(f.ts.to_numpy())
    lab = f.loc[in_label & f.kind.isin([ORDER, RETURN]).to_numpy(),
                ["customer_id", "kind", "value"]]
    # fixed summation order so the labels do not depend on record order
    lab = lab.sort_values(["customer_id", "kind", "value"], kind="mergesort")
    orders = lab.loc[lab.kind == ORDER].groupby("customer_id").value.agg(["sum", "size"])
    returned = lab.loc[lab.kind == RETURN].groupby("customer_id").value.sum()

    idx = pd.Index(customers)
    order_value = orders["sum"].reindex(idx, fill_value=0.0).to_numpy(dtype=float)
    n_orders = orders["size"].reindex(idx, fill_value=0).to_numpy(dtype=np.int64)
    return_value = returned.reindex(idx, fill_value=0.0).to_numpy(dtype=float)

    net = order_value - return_value
    clamped = net < 0
    net = np.where(clamped, 0.0, net)
    churned = n_orders == 0
    pct = fractional_rank(net)

    out = LabelList(
        LabelRecord(str(c), float(s), bool(ch), float(p))
        for c, s, ch, p in zip(customers, net, churned, pct)
    )
    out.n_clamped = int(clamped.sum())
    if out.n_clamped:
        logger.warning("clamped negative net spend to 0 for %d customers", out.n_clamped)
    return out
