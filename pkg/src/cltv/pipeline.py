"""End-to-end pipeline: config, file artifacts, manifests and rolling retrains.

Every step reads its inputs from the artifacts directory, writes outputs
atomically and records a ``<step>.manifest.json`` holding the config hash,
input and output hashes and the seed.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from . import __version__, calibration, datagen, evaluation, features, forest, pairgen, sgns
from .data_model import DAY, EventLog, TimeSplit, derive_labels, parse_timestamp
from .errors import ConfigError, DataError, MissingArtifactError
from .io import atomic_path, atomic_write_text, read_bundle, sha256_file, sha256_text, write_bundle

log = logging.getLogger(__name__)

EVENTS = "events.ndjson"
TRUTH = "truth.json"
FEATURES = "features.bin"
FEATURES_CSV = "features.csv"
LABELS = "labels.csv"
EMBEDDINGS = "embeddings.bin"
EMBEDDINGS_TSV = "embeddings.tsv"
FOREST = "forest.bundle"
MODEL = "model.bundle"
PREDICTIONS = "predictions.csv"
REPORT = "report.json"
REPORT_TABLE = "report.txt"
CALIBRATION_CURVE = "calibration_curve.csv"
ROLLING = "rolling.json"

PREDICTION_COLUMNS = ["customer_id", "churn_prob_raw", "churn_prob_calibrated", "percentile",
                      "cltv_value"]


# -- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class SplitConfig:
    feature_start: int | str | None = None
    feature_days: int = 365
    label_days: int = 365


@dataclass(frozen=True)
class CalibrationConfig:
    fraction: float = 0.2
    max_depth: int = 6
    min_samples_leaf: int = 50


@dataclass(frozen=True)
class EvaluationConfig:
    test_fraction: float = 0.2
    n_bins: int = 10


@dataclass(frozen=True)
class ModeConfig:
    embeddings: bool = True
    warm_start: bool = True
    leak_audit: bool = True


@dataclass(frozen=True)
class RollingConfig:
    n_periods: int = 3
    stride_days: int = 30


@dataclass(frozen=True)
class PipelineConfig:
    events: str | None = None
    artifacts: str = "artifacts"
    prior_embeddings: str | None = None
    seed: int = 0
    deterministic: bool = True
    datagen: datagen.GenConfig = field(default_factory=datagen.GenConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    sgns: sgns.SgnsConfig = field(default_factory=sgns.SgnsConfig)
    forest: forest.ForestConfig = field(default_factory=forest.ForestConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    mode: ModeConfig = field(default_factory=ModeConfig)
    rolling: RollingConfig = field(default_factory=RollingConfig)
    base_dir: str = field(default=".", compare=False, repr=False)

    @property
    def artifacts_dir(self) -> Path:
        return self._resolve(self.artifacts)

    @property
    def events_path(self) -> Path:
        return self._resolve(self.events) if self.events else self.artifacts_dir / EVENTS

    def _resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            if f.name == "base_dir":
                continue
            v = getattr(self, f.name)
            if hasattr(v, "to_dict"):
                v = v.to_dict()
            elif hasattr(v, "__dataclass_fields__"):
                v = asdict(v)
            d[f.name] = v
        return d

    def hash(self) -> str:
        return sha256_text(json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")))


_SECTIONS = {
    "datagen": datagen.GenConfig,
    "split": SplitConfig,
    "sgns": sgns.SgnsConfig,
    "forest": forest.ForestConfig,
    "calibration": CalibrationConfig,
    "evaluation": EvaluationConfig,
    "mode": ModeConfig,
    "rolling": RollingConfig,
}
_SCALARS = {"events": (str, type(None)), "artifacts": str, "prior_embeddings": (str, type(None)),
            "seed": int, "deterministic": bool}


def _check_type(value, default, path):
    if default is None or value is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, (tuple, list)):
        ok = isinstance(value, (tuple, list))
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"expected {type(default).__name__}, got {type(value).__name__}", path)


def _section(cls, raw, name):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError("expected a mapping", name)
    known = {f.name: f for f in fields(cls)}
    defaults = cls()
    for key, value in raw.items():
        if key not in known:
            raise ConfigError("unknown key", f"{name}.{key}")
        _check_type(value, getattr(defaults, key), f"{name}.{key}")
    try:
        if hasattr(cls, "from_dict"):
            return cls.from_dict(raw)
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), name) from None


def config_from_dict(raw: dict, base_dir=".") -> PipelineConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    kwargs = {"base_dir": str(base_dir)}
    for key, value in raw.items():
        if key in _SECTIONS:
            kwargs[key] = _section(_SECTIONS[key], value, key)
        elif key in _SCALARS:
            if not isinstance(value, _SCALARS[key]) or (key == "seed" and isinstance(value, bool)):
                raise ConfigError(f"invalid value {value!r}", key)
            kwargs[key] = value
        else:
            raise ConfigError("unknown key", key)
    cfg = PipelineConfig(**kwargs)
    if not 0 < cfg.calibration.fraction < 1:
        raise ConfigError("must be in (0, 1)", "calibration.fraction")
    if not 0 < cfg.evaluation.test_fraction < 1:
        raise ConfigError("must be in (0, 1)", "evaluation.test_fraction")
    if cfg.rolling.n_periods < 1:
        raise ConfigError("must be >= 1", "rolling.n_periods")
    if cfg.rolling.stride_days < 1:
        raise ConfigError("must be >= 1", "rolling.stride_days")
    if cfg.split.feature_start is not None:
        try:
            parse_timestamp(cfg.split.feature_start)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), "split.feature_start") from None
    return cfg


def load_config(path, seed: int | None = None, deterministic: bool | None = None,
                artifacts: str | None = None) -> PipelineConfig:
    """Read a YAML config and apply command-line overrides."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from None
    if artifacts is not None:
        raw = {**raw, "artifacts": str(Path(artifacts).resolve())}
    if seed is not None:
        raw = {**raw, "seed": seed}
    if deterministic:
        raw = {**raw, "deterministic": True}
    return config_from_dict(raw, path.parent.resolve())


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def effective_sgns(cfg: PipelineConfig, seed: int | None = None) -> sgns.SgnsConfig:
    s = replace(cfg.sgns, seed=cfg.seed if seed is None else seed)
    if cfg.deterministic:
        s = replace(s, deterministic=True, workers=1)
    return s


def effective_forest(cfg: PipelineConfig) -> forest.ForestConfig:
    return replace(cfg.forest, seed=cfg.seed)


# -- manifests ---------------------------------------------------------------

class Step:
    """Collects input and output hashes for one subcommand run."""

    def __init__(self, cfg: PipelineConfig, name: str):
        self.cfg = cfg
        self.name = name
        self.inputs: dict = {}
        self.outputs: dict = {}
        self.started = time.time()

    def need(self, filename: str, producer: str) -> Path:
        path = self.cfg.artifacts_dir / filename
        if not path.is_file():
            raise MissingArtifactError(path, producer)
        self.inputs[filename] = sha256_file(path)
        return path

    def out(self, filename: str) -> Path:
        self.cfg.artifacts_dir.mkdir(parents=True, exist_ok=True)
        return self.cfg.artifacts_dir / filename

    def done(self, *filenames: str, extra: dict | None = None) -> Path:
        for f in filenames:
            self.outputs[f] = sha256_file(self.cfg.artifacts_dir / f)
        manifest = {
            "step": self.name,
            "version": __version__,
            "config_hash": self.cfg.hash(),
            "config": self.cfg.to_dict(),
            "seed": self.cfg.seed,
            "deterministic": self.cfg.deterministic,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "started_at": self.started,
            "finished_at": time.time(),
        }
        if extra:
            manifest["summary"] = extra
        path = self.out(f"{self.name}.manifest.json")
        atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path


# -- shared building blocks ----------------------------------------------------

def resolve_split(cfg: PipelineConfig, events: EventLog, offset_days: int = 0) -> TimeSplit:
    if cfg.split.feature_start is None:
        start = events.span[0] // DAY * DAY
    else:
        start = parse_timestamp(cfg.split.feature_start)
    return TimeSplit.from_start(start + offset_days * DAY, cfg.split.feature_days,
                                cfg.split.label_days)


def load_events(cfg: PipelineConfig, step: Step | None = None) -> EventLog:
    path = cfg.events_path
    if not path.is_file():
        raise MissingArtifactError(path, "datagen")
    if step is not None:
        step.inputs[str(path.name)] = sha256_file(path)
    return EventLog.read(path)


def assign_folds(customer_ids, seed: int, test_fraction: float,
                 calibration_fraction: float) -> np.ndarray:
    """``"test"``, ``"calibration"`` or ``"train"`` per customer.

    The test cohort is held out first; the calibration slice is taken from
    what remains so the forests never see it.
    """
    n = len(customer_ids)
    perm = np.random.default_rng(seed).permutation(n)
    n_test = int(round(n * test_fraction))
    n_cal = int(round((n - n_test) * calibration_fraction))
    folds = np.full(n, "train", dtype=object)
    folds[perm[:n_test]] = "test"
    folds[perm[n_test:n_test + n_cal]] = "calibration"
    return folds


def label_table(events: EventLog, split: TimeSplit, customers, seed: int,
                cfg: PipelineConfig) -> pd.DataFrame:
    labels = derive_labels(events, split).to_frame().set_index("customer_id")
    labels = labels.reindex(pd.Index(customers, name="customer_id"))
    labels["fold"] = assign_folds(labels.index, seed, cfg.evaluation.test_fraction,
                                  cfg.calibration.fraction)
    return labels


def leak_audit(events: EventLog, split: TimeSplit, frame: pd.DataFrame | None = None) -> None:
    """Recompute features and view streams from events strictly before the
    feature-window end and require both to match the full-log versions."""
    clipped = events.between(None, split.feature_end)
    full = features.feature_frame(events, split) if frame is None else frame
    cut = features.feature_frame(clipped, split)
    if not full.equals(cut):
        diff = [c for c in full.columns if not full[c].equals(cut[c])]
        raise DataError(f"leak audit failed: features {diff} depend on events after feature_end")
    a = pairgen.build_view_streams(events, split)
    b = pairgen.build_view_streams(clipped, split)
    if a != b:
        raise DataError("leak audit failed: view streams depend on events after feature_end")


def write_labels(path, labels: pd.DataFrame) -> None:
    with atomic_path(path) as tmp, open(tmp, "w", encoding="utf-8") as fh:
        fh.write("customer_id,net_spend,churned,percentile,fold\n")
        for cid, r in labels.iterrows():
            fh.write(f"{cid},{r.net_spend!r},{int(r.churned)},{r.percentile!r},{r.fold}\n")


def read_labels(path) -> pd.DataFrame:
    labels = pd.read_csv(path, dtype={"customer_id": str}).set_index("customer_id")
    labels["churned"] = labels.churned.astype(bool)
    return labels


def design(frame: pd.DataFrame, encoder, embeddings: pd.DataFrame | None):
    return features.encode_categoricals(frame, encoder, extra=embeddings)[0]


@dataclass
class TrainedModels:
    churn: forest.ForestModel
    percentile: forest.ForestModel
    encoder: features.CategoricalEncoder
    embeddings: bool
    platt: calibration.PlattModel | None = None
    value_map: calibration.PercentileValueMap | None = None


def train_models(frame, labels, embeddings, cfg: PipelineConfig) -> TrainedModels:
    train = (labels.fold == "train").to_numpy()
    enc = features.CategoricalEncoder().fit(frame.loc[train])
    dm = design(frame, enc, embeddings)
    f_cfg = effective_forest(cfg)
    churn = forest.fit(dm.X[train], labels.churned.to_numpy()[train], f_cfg, forest.Task.CHURN,
                       dm.categorical, dm.columns)
    pct = forest.fit(dm.X[train], labels.percentile.to_numpy()[train], f_cfg,
                     forest.Task.PERCENTILE, dm.categorical, dm.columns)
    return TrainedModels(churn, pct, enc, embeddings is not None)


def calibrate_models(models: TrainedModels, frame, labels, embeddings,
                     cfg: PipelineConfig) -> TrainedModels:
    cal = (labels.fold == "calibration").to_numpy()
    dm = design(frame, models.encoder, embeddings)
    X = dm.X[cal]
    need = 2 * cfg.calibration.min_samples_leaf
    if cal.sum() < need:
        raise DataError(f"calibration fold has {int(cal.sum())} customers, the value map needs "
                        f"{need}; raise calibration.fraction or the cohort size")
    models.platt = calibration.fit_platt(models.churn.predict(X), labels.churned.to_numpy()[cal])
    models.value_map = calibration.fit_percentile_value_map(
        models.percentile.predict(X), labels.net_spend.to_numpy()[cal],
        cfg.calibration.max_depth, cfg.calibration.min_samples_leaf)
    return models


def predict_frame(models: TrainedModels, frame, embeddings) -> pd.DataFrame:
    dm = design(frame, models.encoder, embeddings)
    raw = models.churn.predict(dm.X)
    pct = models.percentile.predict(dm.X)
    return pd.DataFrame({
        "churn_prob_raw": raw,
        "churn_prob_calibrated": models.platt(raw),
        "percentile": pct,
        "cltv_value": models.value_map(pct),
    }, index=pd.Index(frame.index, name="customer_id"))


def evaluate_frame(pred: pd.DataFrame, labels: pd.DataFrame, n_bins: int = 10,
                   fold: str = "test") -> evaluation.MetricReport:
    lab = labels.loc[labels.fold == fold]
    p = pred.reindex(lab.index)
    churned = lab.churned.to_numpy(dtype=bool)
    spend = lab.net_spend.to_numpy(dtype=float)
    bins = evaluation.calibration_bins(p.churn_prob_calibrated, churned, n_bins)
    spenders = spend > 0
    extra = {
        "ece_raw": evaluation.expected_calibration_error(p.churn_prob_raw, churned, n_bins),
        "ece_calibrated": evaluation.expected_calibration_error(p.churn_prob_calibrated, churned,
                                                                n_bins),
        "auc_raw": evaluation.auc(p.churn_prob_raw, churned),
        "cltv_sum_predicted": float(p.cltv_value.sum()),
        "cltv_sum_actual": float(spend.sum()),
    }
    if spenders.sum() > 2:
        extra["spearman_spenders"] = evaluation.spearman(p.percentile[spenders], spend[spenders])
    return evaluation.MetricReport(
        auc=evaluation.auc(p.churn_prob_calibrated, churned),
        spearman=evaluation.spearman(p.percentile, spend),
        rmse=evaluation.rmse(p.percentile, lab.percentile),
        calibration_bins=bins, n=len(lab), extra=extra)


# -- model bundle ------------------------------------------------------------

def save_models(path, models: TrainedModels) -> None:
    c_meta, c_arr = forest.forest_arrays(models.churn, "churn/")
    p_meta, p_arr = forest.forest_arrays(models.percentile, "percentile/")
    meta = {"kind": "model", "version": __version__, "churn": c_meta, "percentile": p_meta,
            "encoder": models.encoder.to_dict(), "embeddings": models.embeddings}
    arrays = {**c_arr, **p_arr}
    if models.platt is not None:
        k_meta, k_arr = calibration.calibration_arrays(models.platt, models.value_map)
        meta["calibration"] = k_meta
        arrays.update(k_arr)
    write_bundle(path, meta, arrays)


def load_models(path) -> TrainedModels:
    meta, arrays = read_bundle(path)
    if meta.get("kind") != "model":
        raise DataError(f"{path}: not a model bundle")
    models = TrainedModels(
        forest.forest_from_arrays(meta["churn"], arrays, "churn/"),
        forest.forest_from_arrays(meta["percentile"], arrays, "percentile/"),
        features.CategoricalEncoder.from_dict(meta["encoder"]),
        bool(meta["embeddings"]))
    if "calibration" in meta:
        models.platt, models.value_map = calibration.calibration_from_arrays(
            meta["calibration"], arrays)
    return models


def write_predictions(path, pred: pd.DataFrame) -> None:
    with atomic_path(path) as tmp, open(tmp, "w", encoding="utf-8") as fh:
        fh.write(",".join(PREDICTION_COLUMNS) + "\n")
        for cid, r in zip(pred.index, pred.itertuples(index=False)):
            fh.write(f"{cid},{r.churn_prob_raw!r},{r.churn_prob_calibrated!r},"
                     f"{r.percentile!r},{r.cltv_value!r}\n")


def read_predictions(path) -> pd.DataFrame:
    return pd.read_csv(path, dtype={"customer_id": str}).set_index("customer_id")


# -- subcommands ---------------------------------------------------------------

def cmd_datagen(cfg: PipelineConfig) -> Path:
    step = Step(cfg, "datagen")
    events, truth = datagen.generate_with_truth(cfg.datagen)
    path = cfg.events_path
    path.parent.mkdir(parents=True, exist_ok=True)
    events.write(path)
    datagen.write_truth(step.out(TRUTH), truth)
    step.outputs[path.name] = sha256_file(path)
    return step.done(TRUTH, extra={"events": len(events), "customers": len(truth)})


def cmd_features(cfg: PipelineConfig) -> Path:
    step = Step(cfg, "features")
    events = load_events(cfg, step)
    split = resolve_split(cfg, events)
    frame = features.feature_frame(events, split)
    if cfg.mode.leak_audit:
        leak_audit(events, split, frame)
    labels = label_table(events, split, frame.index, cfg.seed, cfg)
    features.write_features_bin(step.out(FEATURES), frame)
    features.write_features_csv(step.out(FEATURES_CSV), frame)
    write_labels(step.out(LABELS), labels)
    return step.done(FEATURES, FEATURES_CSV, LABELS,
                     extra={"customers": len(frame), "split": asdict(split),
                            "churn_rate": float(labels.churned.mean())})


def cmd_embed(cfg: PipelineConfig) -> Path:
    step = Step(cfg, "embed")
    events = load_events(cfg, step)
    split = resolve_split(cfg, events)
    frame_path = step.need(FEATURES, "features")
    customers = features.read_features_bin(frame_path).index
    prior = None
    if cfg.prior_embeddings and cfg.mode.warm_start:
        p = cfg._resolve(cfg.prior_embeddings)
        if not p.is_file():
            raise MissingArtifactError(p, "embed")
        step.inputs[str(p)] = sha256_file(p)
        prior = sgns.load_model(p)
    model, losses = sgns.embed_customers(events, split, effective_sgns(cfg), prior, customers)
    sgns.save_model(step.out(EMBEDDINGS), model)
    sgns.write_tsv(step.out(EMBEDDINGS_TSV), model)
    return step.done(EMBEDDINGS, EMBEDDINGS_TSV,
                     extra={"customers": len(model), "epoch_loss": losses,
                            "warm_start": prior is not None})


def _embedding_frame(cfg: PipelineConfig, step: Step, customers) -> pd.DataFrame | None:
    if not cfg.mode.embeddings:
        return None
    model = sgns.load_model(step.need(EMBEDDINGS, "embed"))
    return sgns.export_embeddings(model).reindex(customers)


def cmd_train(cfg: PipelineConfig) -> Path:
    step = Step(cfg, "train")
    frame = features.read_features_bin(step.need(FEATURES, "features"))
    labels = read_labels(step.need(LABELS, "features"))
    emb = _embedding_frame(cfg, step, frame.index)
    models = train_models(frame, labels, emb, cfg)
    save_models(step.out(FOREST), models)
    top = forest.importance(models.churn)[:5]
    return step.done(FOREST, extra={"train_rows": int((labels.fold == "train").sum()),
                                    "top_churn_features": top})


def cmd_calibrate(cfg: PipelineConfig) -> Path:
    step = Step(cfg, "calibrate")
    models = load_models(step.need(FOREST, "train"))
    frame = features.read_features_bin(step.need(FEATURES, "features"))
    labels = read_labels(step.need(LABELS, "features"))
    emb = _embedding_frame(cfg, step, frame.index) if models.embeddings else None
    models = calibrate_models(models, frame, labels, emb, cfg)
    save_models(step.out(MODEL), models)
    return step.done(MODEL, extra={"platt": models.platt.to_dict(),
                                   "value_map_monotone": models.value_map.is_monotone()})


def cmd_predict(cfg: PipelineConfig) -> Path:
    step = Step(cfg, "predict")
    step.need(FOREST, "train")
    models = load_models(step.need(MODEL, "calibrate"))
    frame = features.read_features_bin(step.need(FEATURES, "features"))
    emb = _embedding_frame(cfg, step, frame.index) if models.embeddings else None
    write_predictions(step.out(PREDICTIONS), predict_frame(models, frame, emb))
    return step.done(PREDICTIONS, extra={"customers": len(frame)})


def cmd_evaluate(cfg: PipelineConfig) -> Path:
    step = Step(cfg, "evaluate")
    pred = read_predictions(step.need(PREDICTIONS, "predict"))
    labels = read_labels(step.need(LABELS, "features"))
    report = evaluate_frame(pred, labels, cfg.evaluation.n_bins)
    report.write(step.out(REPORT), step.out(REPORT_TABLE))
    evaluation.write_calibration_csv(step.out(CALIBRATION_CURVE), report.calibration_bins)
    return step.done(REPORT, REPORT_TABLE, CALIBRATION_CURVE,
                     extra={"auc": report.auc, "spearman": report.spearman})


def mean_cosine(a: sgns.EmbeddingModel, b: sgns.EmbeddingModel, ids) -> float:
    x, y = a.vectors(ids), b.vectors(ids)
    num = (x * y).sum(axis=1)
    den = np.linalg.norm(x, axis=1) * np.linalg.norm(y, axis=1)
    ok = den > 0
    return float(np.mean(num[ok] / den[ok])) if ok.any() else 0.0


def rolling(events: EventLog, cfg: PipelineConfig, n_periods: int | None = None) -> list[dict]:
    """Retrain every ``stride_days`` over ``n_periods`` windows.

    Each period trains a cold-started embedding and, from the second period
    on, one warm-started from the previous period's warm chain.  The forests
    use the warm chain when ``mode.warm_start`` is set.  Per period the
    report holds test metrics and the mean old-customer cosine between
    consecutive models for both chains.
    """
    n_periods = cfg.rolling.n_periods if n_periods is None else n_periods
    stride = cfg.rolling.stride_days
    if n_periods < 1:
        raise ConfigError("must be >= 1", "rolling.n_periods")
    last_split = resolve_split(cfg, events, (n_periods - 1) * stride)
    if last_split.label_end > events.span[1] // DAY * DAY + DAY:
        have = (events.span[1] - resolve_split(cfg, events).feature_start) / DAY
        need = (n_periods - 1) * stride + cfg.split.feature_days + cfg.split.label_days
        raise DataError(f"event log spans {have:.0f} days; {n_periods} periods with stride "
                        f"{stride} need {need}")
    out = []
    prev_cold = prev_warm = None
    for t in range(n_periods):
        split = resolve_split(cfg, events, t * stride)
        frame = features.feature_frame(events, split)
        if cfg.mode.leak_audit:
            leak_audit(events, split, frame)
        labels = label_table(events, split, frame.index, cfg.seed + t, cfg)
        s_cfg = effective_sgns(cfg, cfg.seed + t)
        cold, _ = sgns.embed_customers(events, split, s_cfg, customers=frame.index)
        if prev_warm is not None and cfg.mode.warm_start:
            warm, _ = sgns.embed_customers(events, split, s_cfg, prior=prev_warm,
                                           customers=frame.index)
        else:
            warm = cold
        entry = {"period": t, "split": asdict(split), "customers": len(frame)}
        if prev_cold is not None:
            old = sorted(set(prev_cold.customer_ids) & set(cold.customer_ids))
            entry["old_customers"] = len(old)
            entry["cosine_cold"] = mean_cosine(prev_cold, cold, old)
            if cfg.mode.warm_start:
                old_w = sorted(set(prev_warm.customer_ids) & set(warm.customer_ids))
                entry["cosine_warm"] = mean_cosine(prev_warm, warm, old_w)
        use = warm if cfg.mode.warm_start else cold
        emb = sgns.export_embeddings(use).reindex(frame.index) if cfg.mode.embeddings else None
        models = train_models(frame, labels, emb, cfg)
        models = calibrate_models(models, frame, labels, emb, cfg)
        report = evaluate_frame(predict_frame(models, frame, emb), labels, cfg.evaluation.n_bins)
        entry["report"] = report.to_dict()
        out.append(entry)
        prev_cold, prev_warm = cold, warm
    return out


def cmd_rolling(cfg: PipelineConfig, n_periods: int | None = None) -> Path:
    step = Step(cfg, "rolling")
    events = load_events(cfg, step)
    periods = rolling(events, cfg, n_periods)
    atomic_write_text(step.out(ROLLING), json.dumps(periods, indent=2, sort_keys=True) + "\n")
    drift = [{k: p[k] for k in ("period", "cosine_cold", "cosine_warm") if k in p}
             for p in periods]
    return step.done(ROLLING, extra={"drift": drift})


COMMANDS = {
    "datagen": cmd_datagen,
    "features": cmd_features,
    "embed": cmd_embed,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "rolling": cmd_rolling,
}
CHAIN = ("datagen", "features", "embed", "train", "calibrate", "predict", "evaluate")


def run_chain(cfg: PipelineConfig, steps=CHAIN) -> None:
    for name in steps:
        if name == "embed" and not cfg.mode.embeddings:
            continue
        log.info("cltv %s", name)
        COMMANDS[name](cfg)
