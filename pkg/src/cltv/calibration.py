"""Platt scaling for churn scores and a percentile -> value regression tree."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import forest
from .errors import DataError

log = logging.getLogger(__name__)

_EPS = 1e-15
SCORE_CLIP = 1e-6


def score_logit(scores, clip: float = SCORE_CLIP) -> np.ndarray:
    """Log-odds of probability scores clipped to ``[clip, 1 - clip]``."""
    p = np.clip(np.asarray(scores, dtype=float), clip, 1.0 - clip)
    return np.log(p) - np.log1p(-p)


def _sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _nll(a, b, s, y):
    z = a * s + b
    # softplus(z) - y z, the Bernoulli negative log-likelihood
    return float(np.sum(np.logaddexp(0.0, z) - y * z))


@dataclass(frozen=True)
class PlattModel:
    """``p = sigmoid(a * logit(s) + b)`` for a raw probability score ``s``;
    ``a = 1, b = 0`` is the identity."""

    a: float
    b: float
    iterations: int = 0
    converged: bool = True

    def __post_init__(self):
        if not (np.isfinite(self.a) and np.isfinite(self.b)):
            raise ValueError("Platt parameters must be finite")

    def __call__(self, scores):
        single = np.ndim(scores) == 0
        p = _sigmoid(self.a * score_logit(scores) + self.b)
        p = np.clip(p, _EPS, 1.0 - _EPS)
        return float(p) if single else p

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "iterations": self.iterations,
                "converged": self.converged}

    @classmethod
    def from_dict(cls, d) -> "PlattModel":
        return cls(float(d["a"]), float(d["b"]), int(d.get("iterations", 0)),
                   bool(d.get("converged", True)))


def fit_platt(scores, labels, max_iter: int = 100, tol: float = 1e-8) -> PlattModel:
    """Maximum-likelihood fit of ``p = sigmoid(a*logit(s) + b)``.

    Damped Newton from ``a = b = 0``: each step is halved until the
    negative log-likelihood stops increasing.  Stops when the gradient norm
    drops below ``tol`` or after ``max_iter`` steps.  On separable data the
    slope keeps growing until the iteration cap, without overflow.
    """
    s = np.asarray(scores, dtype=float)
    if s.size and (np.nanmin(s) < 0 or np.nanmax(s) > 1):
        raise ValueError("scores must be probabilities in [0, 1]")
    y = np.asarray(labels)
    if y.dtype != bool and not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary")
    y = y.astype(float)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    if s.size < 10:
        raise ValueError(f"need at least 10 scores, got {s.size}")
    if y.min() == y.max():
        raise DataError("calibration needs both classes")
    s = score_logit(s)

    a = b = 0.0
    loss = _nll(a, b, s, y)
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        p = _sigmoid(a * s + b)
        r = p - y
        g = np.array([r @ s, r.sum()])
        if np.hypot(*g) < tol:
            converged = True
            it -= 1
            break
        w = p * (1.0 - p)
        H = np.array([[w @ (s * s), w @ s], [w @ s, w.sum()]])
        try:
            step = np.linalg.solve(H + 1e-12 * np.eye(2), g)
        except np.linalg.LinAlgError:
            step = g
        t = 1.0
        while t > 1e-10:
            na, nb = a - t * step[0], b - t * step[1]
            nl = _nll(na, nb, s, y)
            if nl <= loss:
                break
            t *= 0.5
        else:
            converged = True
            break
        a, b, loss = na, nb, nl
    if not converged:
        log.debug("Platt fit stopped after %d iterations", it)
    return PlattModel(float(a), float(b), it, converged)


@dataclass
class PercentileValueMap:
    """Piecewise-constant map from predicted percentile to money."""

    tree: forest.Tree
    max_depth: int = 6
    min_samples_leaf: int = 50

    def __call__(self, percentiles):
        single = np.ndim(percentiles) == 0
        x = np.clip(np.atleast_1d(np.asarray(percentiles, dtype=float)), 0.0, 1.0)
        out = self.tree.predict(x[:, None])
        return float(out[0]) if single else out

    def breakpoints(self) -> np.ndarray:
        split = self.tree.left != -1
        return np.unique(self.tree.threshold[split])

    def step_values(self) -> np.ndarray:
        """Leaf value on each interval between breakpoints, left to right."""
        edges = np.concatenate([[0.0], self.breakpoints(), [1.0]])
        mids = 0.5 * (edges[:-1] + edges[1:])
        return self(mids)

    def is_monotone(self) -> bool:
        return bool(np.all(np.diff(self.step_values()) >= 0))


def fit_percentile_value_map(predicted_percentiles, actual_values, max_depth: int = 6,
                             min_samples_leaf: int = 50) -> PercentileValueMap:
    x = np.asarray(predicted_percentiles, dtype=float)
    v = np.asarray(actual_values, dtype=float)
    if x.shape != v.shape or x.ndim != 1:
        raise ValueError("percentiles and values must be equal-length vectors")
    if x.size < 2 * min_samples_leaf:
        raise ValueError(f"need at least {2 * min_samples_leaf} rows, got {x.size}")
    if (v < 0).any():
        raise ValueError("values must be non-negative")
    tree = forest.fit_tree(x[:, None], v, max_depth=max_depth, min_samples_leaf=min_samples_leaf,
                           mtry=1)
    return PercentileValueMap(tree, max_depth, min_samples_leaf)


@dataclass(frozen=True)
class PredictionRecord:
    customer_id: str
    churn_prob_raw: float
    churn_prob_calibrated: float
    percentile: float
    cltv_value: float


def apply_calibration(platt: PlattModel, value_map: PercentileValueMap, raw_churn_score,
                      raw_percentile, customer_id=None):
    """One :class:`PredictionRecord` for scalar inputs, else a list."""
    if np.ndim(raw_churn_score) == 0:
        return PredictionRecord(customer_id, float(raw_churn_score), platt(raw_churn_score),
                                float(raw_percentile), value_map(raw_percentile))
    raw = np.asarray(raw_churn_score, dtype=float)
    pct = np.asarray(raw_percentile, dtype=float)
    cal = platt(raw)
    val = value_map(pct)
    ids = customer_id if customer_id is not None else [None] * raw.size
    return [PredictionRecord(c, float(r), float(p), float(q), float(m))
            for c, r, p, q, m in zip(ids, raw, cal, pct, val)]


# -- persistence inside the model bundle --------------------------------------

def calibration_arrays(platt: PlattModel, value_map: PercentileValueMap,
                       prefix: str = "calib/") -> tuple[dict, dict]:
    t = value_map.tree
    arrays = {f"{prefix}{k}": getattr(t, k) for k in forest._TREE_FIELDS}
    meta = {"platt": platt.to_dict(), "value_map": {"max_depth": value_map.max_depth,
                                                    "min_samples_leaf": value_map.min_samples_leaf}}
    return meta, arrays


def calibration_from_arrays(meta: dict, arrays: dict,
                            prefix: str = "calib/") -> tuple[PlattModel, PercentileValueMap]:
    fields = {k: np.ascontiguousarray(arrays[f"{prefix}{k}"]) for k in forest._TREE_FIELDS}
    fields["cat_left"] = fields["cat_left"].astype(np.uint64)
    fields["cat_seen"] = fields["cat_seen"].astype(np.uint64)
    fields["missing_left"] = fields["missing_left"].astype(np.bool_)
    tree = forest.Tree(is_categorical=np.zeros(1, dtype=bool), **fields)
    vm = meta["value_map"]
    return (PlattModel.from_dict(meta["platt"]),
            PercentileValueMap(tree, int(vm["max_depth"]), int(vm["min_samples_leaf"])))
