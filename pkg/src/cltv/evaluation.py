"""Metrics, calibration curves and the embedding-uplift experiment."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats
from scipy.stats import rankdata

from .io import atomic_path, atomic_write_text


def _binary(labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.dtype != bool:
        if not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be binary")
        labels = labels.astype(bool)
    return labels


def auc(scores, labels) -> float:
    """Area under the ROC curve as the Mann-Whitney statistic, ties
    counting one half."""
    scores = np.asarray(scores, dtype=float)
    labels = _binary(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def spearman(x, y) -> float:
    """Pearson correlation of average-tie ranks."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError("inputs differ in length")
    if x.size < 2:
        raise ValueError("spearman needs at least two points")
    rx = rankdata(x, method="average")
    ry = rankdata(y, method="average")
    rx -= rx.mean()
    ry -= ry.mean()
    den = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if den == 0:
        raise ValueError("zero rank variance")
    return float(np.clip((rx * ry).sum() / den, -1.0, 1.0))


def rmse(pred, actual) -> float:
    pred = np.asarray(pred, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if pred.shape != actual.shape or pred.size == 0:
        raise ValueError("rmse needs two equal-length non-empty inputs")
    return float(np.sqrt(np.mean((pred - actual) ** 2)))


@dataclass(frozen=True)
class CalibrationBin:
    lower: float
    upper: float
    mean_predicted: float
    empirical_rate: float
    count: int


def calibration_bins(pred, labels, n_bins: int = 10) -> list[CalibrationBin]:
    """Equal-mass reliability bins.

    Rows are sorted by prediction and dealt into ``n_bins`` consecutive
    groups of near-equal size.  Bin edges run from 0 to 1 through the
    midpoints between neighbouring groups, so the bins partition [0, 1].
    """
    pred = np.asarray(pred, dtype=float)
    labels = _binary(labels).astype(float)
    order = np.argsort(pred, kind="mergesort")
    groups = [g for g in np.array_split(order, min(n_bins, pred.size)) if g.size]
    out = []
    lower = 0.0
    for i, g in enumerate(groups):
        if i + 1 < len(groups):
            upper = 0.5 * (pred[g].max() + pred[groups[i + 1]].min())
        else:
            upper = 1.0
        out.append(CalibrationBin(lower, upper, float(pred[g].mean()),
                                  float(labels[g].mean()), int(g.size)))
        lower = upper
    return out


def expected_calibration_error(pred, labels, n_bins: int = 10) -> float:
    bins = calibration_bins(pred, labels, n_bins)
    n = sum(b.count for b in bins)
    return float(sum(b.count / n * abs(b.mean_predicted - b.empirical_rate) for b in bins))


@dataclass
class MetricReport:
    auc: float
    spearman: float
    rmse: float
    calibration_bins: list
    n: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["calibration_bins"] = [asdict(b) if not isinstance(b, dict) else b
                                 for b in self.calibration_bins]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        rows = [("n", str(self.n)), ("auc", f"{self.auc:.4f}"),
                ("spearman", f"{self.spearman:.4f}"), ("rmse", f"{self.rmse:.4f}")]
        rows += [(k, f"{v:.4f}" if isinstance(v, float) else str(v))
                 for k, v in sorted(self.extra.items())]
        width = max(len(k) for k, _ in rows)
        lines = [f"{k:<{width}}  {v}" for k, v in rows]
        lines.append("")
        lines.append("bin  mean_pred  rate    count")
        for i, b in enumerate(self.calibration_bins):
            b = b if isinstance(b, CalibrationBin) else CalibrationBin(**b)
            lines.append(f"{i:>3}  {b.mean_predicted:9.4f}  {b.empirical_rate:6.4f}  {b.count}")
        return "\n".join(lines) + "\n"

    def write(self, json_path, table_path=None) -> None:
        atomic_write_text(json_path, self.to_json() + "\n")
        if table_path is not None:
            atomic_write_text(table_path, self.to_table())


def write_calibration_csv(path, bins) -> None:
    with atomic_path(path) as tmp, open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin", "lower", "upper", "mean_predicted", "empirical_rate", "count"])
        for i, b in enumerate(bins):
            w.writerow([i, repr(b.lower), repr(b.upper), repr(b.mean_predicted),
                        repr(b.empirical_rate), b.count])


def t_interval(values, level: float = 0.95) -> tuple[float, float, float]:
    """Mean and Student-t confidence interval of the sample mean."""
    v = np.asarray(values, dtype=float)
    mean = float(v.mean())
    if v.size < 2:
        return mean, mean, mean
    half = stats.t.ppf(0.5 + level / 2, v.size - 1) * v.std(ddof=1) / np.sqrt(v.size)
    return mean, float(mean - half), float(mean + half)


# -- embedding uplift ----------------------------------------------------------

@dataclass(frozen=True)
class UpliftConfig:
    """Settings for :func:`uplift_experiment`; ``test_size`` customers per
    seed are held out at random."""

    sgns: object = None
    forest: object = None
    test_size: int = 2000
    use_embeddings: bool = True


@dataclass
class UpliftResult:
    seeds: list
    auc_features: list
    auc_embeddings: list
    uplift: list
    mean: float
    ci_low: float
    ci_high: float

    def to_dict(self) -> dict:
        return asdict(self)


def uplift_experiment(events, split, configs: UpliftConfig | None = None, n_seeds: int = 10,
                      seed: int = 0) -> UpliftResult:
    """Churn AUC of handcrafted features alone versus handcrafted features
    plus customer embeddings, over ``n_seeds`` random test sets.

    Each seed retrains the embeddings, redraws the test set and refits both
    forests with the same forest seed.  Returns per-seed AUCs and a 95%
    t-interval for the mean difference.
    """
    from . import data_model, features, forest, sgns

    if n_seeds < 5:
        raise ValueError("n_seeds must be >= 5")
    configs = configs or UpliftConfig()
    sgns_cfg = configs.sgns or sgns.SgnsConfig()
    forest_cfg = configs.forest or forest.ForestConfig()

    frame = features.feature_frame(events, split)
    labels = data_model.derive_labels(events, split).to_frame().set_index("customer_id")
    labels = labels.reindex(frame.index)
    y = labels.churned.to_numpy(dtype=bool)
    n = len(frame)
    if configs.test_size >= n:
        raise ValueError(f"test_size {configs.test_size} leaves no training rows (n={n})")

    out_a, out_b, seeds = [], [], []
    for k in range(n_seeds):
        s = seed + k
        rng = np.random.default_rng(s)
        perm = rng.permutation(n)
        test, train = perm[: configs.test_size], perm[configs.test_size:]
        if configs.use_embeddings:
            model, _ = sgns.embed_customers(events, split, replace(sgns_cfg, seed=s),
                                            customers=frame.index)
            emb = sgns.export_embeddings(model)
        else:
            emb = None
        f_cfg = replace(forest_cfg, seed=s)

        enc = features.CategoricalEncoder().fit(frame.iloc[train])
        dm_a, _ = features.encode_categoricals(frame, enc)
        dm_b, _ = features.encode_categoricals(frame, enc, extra=emb)
        m_a = forest.fit(dm_a.X[train], y[train], f_cfg, forest.Task.CHURN, dm_a.categorical)
        m_b = forest.fit(dm_b.X[train], y[train], f_cfg, forest.Task.CHURN, dm_b.categorical)
        out_a.append(auc(m_a.predict(dm_a.X[test]), y[test]))
        out_b.append(auc(m_b.predict(dm_b.X[test]), y[test]))
        seeds.append(s)

    diff = [b - a for a, b in zip(out_a, out_b)]
    mean, lo, hi = t_interval(diff)
    return UpliftResult(seeds, out_a, out_b, diff, mean, lo, hi)


# -- calibration on held-out cohorts -----------------------------------------

@dataclass
class CalibrationResult:
    ece_raw: float
    ece_calibrated: float
    sum_actual: float
    sum_mapped: float
    sum_naive: float
    n_train: int
    n_calibration: int
    n_test: int

    @property
    def aggregate_error(self) -> float:
        return abs(self.sum_mapped - self.sum_actual) / self.sum_actual

    @property
    def naive_error(self) -> float:
        return abs(self.sum_naive - self.sum_actual) / self.sum_actual

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aggregate_error"] = self.aggregate_error
        d["naive_error"] = self.naive_error
        return d


def calibration_experiment(events, split, forest_config=None, test_fraction: float = 0.5,
                           calibration_fraction: float = 0.2, seed: int = 0,
                           n_bins: int = 10, naive: bool = True) -> CalibrationResult:
    """Fit both forests on a training cohort, calibrate on a held-out slice
    of it and score a disjoint random test cohort.

    The naive baseline (skipped, giving NaN, when ``naive`` is false) is a
    forest regressing net spend directly, rescaled to [0, 1] for fitting.
    """
    from . import calibration, data_model, features, forest

    cfg = replace(forest_config or forest.ForestConfig(), seed=seed)
    frame = features.feature_frame(events, split)
    labels = data_model.derive_labels(events, split).to_frame().set_index("customer_id")
    labels = labels.reindex(frame.index)
    churn = labels.churned.to_numpy(dtype=bool)
    pct = labels.percentile.to_numpy(dtype=float)
    spend = labels.net_spend.to_numpy(dtype=float)

    n = len(frame)
    perm = np.random.default_rng(seed).permutation(n)
    n_test = int(round(n * test_fraction))
    test, cohort = perm[:n_test], perm[n_test:]
    n_cal = int(round(cohort.size * calibration_fraction))
    cal, train = cohort[:n_cal], cohort[n_cal:]

    enc = features.CategoricalEncoder().fit(frame.iloc[train])
    dm, _ = features.encode_categoricals(frame, enc)
    X = dm.X
    m_churn = forest.fit(X[train], churn[train], cfg, forest.Task.CHURN, dm.categorical)
    m_pct = forest.fit(X[train], pct[train], cfg, forest.Task.PERCENTILE, dm.categorical)
    sum_naive = float("nan")
    if naive:
        scale = spend[train].max() or 1.0
        m_naive = forest.fit(X[train], spend[train] / scale, cfg, forest.Task.PERCENTILE,
                             dm.categorical)
        sum_naive = float(m_naive.predict(X[test]).sum() * scale)

    platt = calibration.fit_platt(m_churn.predict(X[cal]), churn[cal])
    vmap = calibration.fit_percentile_value_map(m_pct.predict(X[cal]), spend[cal])

    raw = m_churn.predict(X[test])
    return CalibrationResult(
        ece_raw=expected_calibration_error(raw, churn[test], n_bins),
        ece_calibrated=expected_calibration_error(platt(raw), churn[test], n_bins),
        sum_actual=float(spend[test].sum()),
        sum_mapped=float(vmap(m_pct.predict(X[test])).sum()),
        sum_naive=sum_naive,
        n_train=int(train.size), n_calibration=int(cal.size), n_test=int(test.size))
