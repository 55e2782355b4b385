"""Synthetic e-commerce event logs with a planted latent customer value.

Each customer draws a log-normal latent value.  Value drives order rate,
order size and lifetime; it also fixes a value tier, and customers browse
products of their own tier more often when ``affinity_strength`` is
positive.  The co-viewing pattern is the only route by which value leaks
into product-view sequences, so embedding features are informative only
when affinity is on.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .data_model import DAY, ORDER, RETURN, SESSION, VIEW, EventLog
from .io import atomic_write_text

# 2016-01-01T00:00:00Z
DEFAULT_START = 1_451_606_400

COUNTRIES = ("UK", "US", "FR", "DE", "AU", "IT", "ES", "NL")
COUNTRY_WEIGHTS = (0.40, 0.15, 0.10, 0.10, 0.08, 0.07, 0.06, 0.04)


@dataclass(frozen=True)
class GenConfig:
    n_customers: int = 5000
    n_products: int = 500
    horizon_days: int = 730
    seed: int = 0
    latent_value_spread: float = 1.0
    product_popularity_exponent: float = 1.0
    affinity_strength: float = 3.0
    n_tiers: int = 5
    start_ts: int = DEFAULT_START
    sessions_per_year: float = 12.0
    views_per_session: float = 2.5
    orders_per_year: float = 2.0
    items_per_order: float = 1.5
    price_scale: float = 30.0
    annual_churn: float = 0.35
    churn_value_slope: float = 1.0
    lapsed_view_fraction: float = 0.15
    return_rate: float = 0.15
    new_collection_fraction: float = 0.3
    join_fraction: float = 0.2
    missing_age_fraction: float = 0.1
    countries: tuple = field(default=COUNTRIES)
    country_weights: tuple = field(default=COUNTRY_WEIGHTS)

    def __post_init__(self):
        if self.n_customers < 1 or self.n_products < 1:
            raise ValueError("n_customers and n_products must be >= 1")
        if self.horizon_days < 2:
            raise ValueError("horizon_days must be >= 2")
        if self.latent_value_spread <= 0 or self.product_popularity_exponent <= 0:
            raise ValueError("latent_value_spread and product_popularity_exponent must be > 0")
        if self.affinity_strength < 0:
            raise ValueError("affinity_strength must be >= 0")
        if not 0 <= self.annual_churn < 1:
            raise ValueError("annual_churn must be in [0, 1)")
        if self.n_tiers < 1:
            raise ValueError("n_tiers must be >= 1")
        if len(self.countries) != len(self.country_weights):
            raise ValueError("countries and country_weights differ in length")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["countries"] = list(self.countries)
        d["country_weights"] = list(self.country_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        for key in ("countries", "country_weights"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def customer_ids(n: int) -> list[str]:
    width = max(5, len(str(n - 1)))
    return [f"c{i:0{width}d}" for i in range(n)]


def product_ids(n: int) -> list[str]:
    width = max(4, len(str(n - 1)))
    return [f"p{i:0{width}d}" for i in range(n)]


def generate(config: GenConfig) -> EventLog:
    return generate_with_truth(config)[0]


def generate_with_truth(config: GenConfig) -> tuple[EventLog, pd.DataFrame]:
    """Event log plus the per-customer ground truth behind it.

    The truth frame (customer_id, latent_value, z, tier, join_day,
    lifetime_end_day) is for assertions only.
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    n, m, T = cfg.n_customers, cfg.n_products, cfg.horizon_days

    z = rng.standard_normal(n)
    latent = np.exp(cfg.latent_value_spread * z)
    order = np.argsort(z, kind="stable")
    tier = np.empty(n, dtype=np.int64)
    tier[order] = np.arange(n) * cfg.n_tiers // n

    prod_tier = rng.integers(0, cfg.n_tiers, size=m)
    pop_rank = rng.permutation(m) + 1
    popularity = pop_rank.astype(float) ** -cfg.product_popularity_exponent
    price = cfg.price_scale * np.exp(0.35 * prod_tier) * rng.lognormal(0.0, 0.25, size=m)
    new_coll = rng.random(m) < cfg.new_collection_fraction

    tiers = np.arange(cfg.n_tiers)
    pref = popularity[None, :] * np.exp(
        -cfg.affinity_strength * np.abs(tiers[:, None] - prod_tier[None, :])
    )
    pref_cdf = np.cumsum(pref, axis=1)
    pref_cdf /= pref_cdf[:, -1:]

    joiner = rng.random(n) < cfg.join_fraction
    join_day = np.where(joiner, rng.uniform(0, max(T - 365, 1), size=n), 0.0)
    hazard = -np.log1p(-cfg.annual_churn) / 365.0 * np.exp(-cfg.churn_value_slope * z)
    with np.errstate(divide="ignore"):
        life = rng.exponential(1.0 / np.maximum(hazard, 1e-300))
    life_end = np.minimum(join_day + life, T)

    country = rng.choice(len(cfg.countries), size=n,
                         p=np.asarray(cfg.country_weights) / np.sum(cfg.country_weights))
    birth_year = rng.integers(1960, 2003, size=n)
    age_missing = rng.random(n) < cfg.missing_age_fraction

    cids = customer_ids(n)
    pids = np.array(product_ids(m), dtype=object)
    ncf = {"is_new_collection": "1"}

    c_col, ts_col, kind_col, prod_col, val_col, attr_col = [], [], [], [], [], []

    def emit(ci, ts, kind, prods, values, attrs):
        k = len(ts)
        c_col.append(np.full(k, ci, dtype=np.int64))
        ts_col.append(ts)
        kind_col.append(np.full(k, kind, dtype=object))
        prod_col.append(prods)
        val_col.append(values)
        attr_col.append(attrs)

    for i in range(n):
        t0, t1 = join_day[i], life_end[i]
        cdf = pref_cdf[tier[i]]
        c_attrs = {"country": cfg.countries[country[i]]}
        if not age_missing[i]:
            c_attrs["birth_year"] = str(int(birth_year[i]))

        # sessions: active rate until lifetime end, lapsed rate after
        active_days = t1 - t0
        lapsed_days = T - t1
        n_act = rng.poisson(cfg.sessions_per_year * active_days / 365.0)
        n_lap = rng.poisson(cfg.sessions_per_year * cfg.lapsed_view_fraction * lapsed_days / 365.0)
        s_day = np.concatenate([rng.uniform(t0, t1, n_act), rng.uniform(t1, T, n_lap)])
        s_ts = np.sort(cfg.start_ts + (s_day * DAY).astype(np.int64))
        if s_ts.size:
            emit(i, s_ts, SESSION, np.full(s_ts.size, None, dtype=object),
                 np.zeros(s_ts.size), np.array([dict(c_attrs) for _ in s_ts], dtype=object))
            n_views = 1 + rng.poisson(cfg.views_per_session - 1.0, size=s_ts.size)
            v_ts = np.repeat(s_ts, n_views) + rng.integers(1, 1800, size=n_views.sum())
            v_prod = np.searchsorted(cdf, rng.random(v_ts.size), side="right")
            v_prod = np.minimum(v_prod, m - 1)
            emit(i, v_ts, VIEW, pids[v_prod], np.zeros(v_ts.size),
                 np.array([ncf if new_coll[p] else None for p in v_prod], dtype=object))

        # orders only while active
        rate = cfg.orders_per_year * np.sqrt(latent[i])
        n_ord = rng.poisson(rate * active_days / 365.0)
        if n_ord:
            o_ts = np.sort(cfg.start_ts + (rng.uniform(t0, t1, n_ord) * DAY).astype(np.int64))
            n_items = 1 + rng.poisson(cfg.items_per_order - 1.0, size=n_ord)
            i_ts = np.repeat(o_ts, n_items)
            i_prod = np.minimum(np.searchsorted(cdf, rng.random(i_ts.size), side="right"), m - 1)
            i_val = np.round(price[i_prod] * latent[i] ** 0.25 * rng.lognormal(0, 0.1, i_ts.size), 2)
            emit(i, i_ts, ORDER, pids[i_prod], i_val,
                 np.array([ncf if new_coll[p] else None for p in i_prod], dtype=object))

            ret = rng.random(i_ts.size) < cfg.return_rate
            r_ts = i_ts[ret] + (rng.uniform(1, 30, ret.sum()) * DAY).astype(np.int64)
            keep = r_ts < cfg.start_ts + T * DAY
            r_ts = r_ts[keep]
            if r_ts.size:
                emit(i, r_ts, RETURN, pids[i_prod[ret][keep]], i_val[ret][keep],
                     np.full(r_ts.size, None, dtype=object))

    cust_names = np.array(cids, dtype=object)
    frame = pd.DataFrame(
        {
            "customer_id": cust_names[np.concatenate(c_col)] if c_col else np.array([], dtype=object),
            "ts": np.concatenate(ts_col) if ts_col else np.array([], dtype=np.int64),
            "kind": np.concatenate(kind_col) if kind_col else np.array([], dtype=object),
            "product_id": np.concatenate(prod_col) if prod_col else np.array([], dtype=object),
            "value": np.concatenate(val_col) if val_col else np.array([], dtype=float),
            "attrs": np.concatenate(attr_col) if attr_col else np.array([], dtype=object),
        }
    )
    events = EventLog(frame).sorted()
    truth = pd.DataFrame(
        {
            "customer_id": cids,
            "latent_value": latent,
            "z": z,
            "tier": tier,
            "join_day": join_day,
            "lifetime_end_day": life_end,
        }
    )
    return events, truth


def write_truth(path, truth: pd.DataFrame) -> None:
    """Ground-truth sidecar JSON keyed by customer id."""
    payload = {
        row.customer_id: {
            "latent_value": float(row.latent_value),
            "tier": int(row.tier),
            "join_day": float(row.join_day),
            "lifetime_end_day": float(row.lifetime_end_day),
        }
        for row in truth.itertuples(index=False)
    }
    atomic_write_text(path, json.dumps(payload, sort_keys=True, indent=1))


def read_truth(path) -> pd.DataFrame:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    rows = [{"customer_id": k, **v} for k, v in payload.items()]
    return pd.DataFrame(rows)
