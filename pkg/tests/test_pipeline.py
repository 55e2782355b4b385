import json
import shutil
import subprocess
import sys

import numpy as np
import pytest
import yaml

from cltv import cli, pipeline
from cltv.data_model import DAY, EventLog
from cltv.errors import ConfigError, DataError

SMALL = {
    "seed": 3,
    "datagen": {"n_customers": 800, "n_products": 100},
    "sgns": {"dim": 8, "epochs": 2},
    "forest": {"n_trees": 10},
}


def write_cfg(tmp_path, body, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(body))
    return str(path)


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    root = tmp_path_factory.mktemp("chain")
    cfg = write_cfg(root, {**SMALL, "artifacts": "art"})
    assert cli.main(["run", "--config", cfg]) == 0
    return root, cfg


def test_config_roundtrip_and_defaults(tmp_path):
    cfg = pipeline.config_from_dict({**SMALL, "mode": {"warm_start": False}})
    assert cfg.seed == 3 and cfg.datagen.n_customers == 800 and cfg.sgns.dim == 8
    assert cfg.mode.warm_start is False and cfg.mode.embeddings is True
    again = pipeline.config_from_dict(yaml.safe_load(pipeline.dump_config(cfg)))
    assert again == cfg and again.hash() == cfg.hash()
    assert pipeline.load_config(write_cfg(tmp_path, SMALL), seed=9).seed == 9


def test_deterministic_forces_single_worker():
    cfg = pipeline.config_from_dict({"sgns": {"workers": 4}, "deterministic": True})
    assert pipeline.effective_sgns(cfg).workers == 1


@pytest.mark.parametrize("raw, path", [
    ({"sgns": {"dim": "x"}}, "sgns.dim"),
    ({"forest": {"ntrees": 3}}, "forest.ntrees"),
    ({"bogus": 1}, "bogus"),
    ({"seed": 1.5}, "seed"),
    ({"sgns": []}, "sgns"),
])
def test_config_errors_name_the_field(raw, path):
    with pytest.raises(ConfigError) as e:
        pipeline.config_from_dict(raw)
    assert e.value.path == path


def test_bad_config_exit_code(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"forest": {"ntrees": 3}})
    assert cli.main(["train", "--config", cfg]) == 2
    assert "forest.ntrees" in capsys.readouterr().err


def test_missing_artifact_names_producer(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"artifacts": "empty"})
    assert cli.main(["predict", "--config", cfg]) == 3
    assert "cltv train" in capsys.readouterr().err
    assert cli.main(["features", "--config", cfg]) == 3
    assert "cltv datagen" in capsys.readouterr().err


def test_chain_outputs(chain):
    root, _ = chain
    art = root / "art"
    for step in pipeline.CHAIN:
        m = json.loads((art / f"{step}.manifest.json").read_text())
        assert m["step"] == step and m["seed"] == 3
        for name, digest in m["outputs"].items():
            assert len(digest) == 64
    pred = pipeline.read_predictions(art / pipeline.PREDICTIONS)
    assert list(pred.columns[:1]) == ["customer_id"] or pred.index.name == "customer_id"
    assert ((pred.churn_prob_calibrated > 0) & (pred.churn_prob_calibrated < 1)).all()
    assert (pred.cltv_value >= 0).all()
    report = json.loads((art / pipeline.REPORT).read_text())
    assert 0.5 < report["auc"] <= 1.0
    assert sum(b["count"] for b in report["calibration_bins"]) == report["n"]
    train = json.loads((art / "train.manifest.json").read_text())
    assert set(train["inputs"]) >= {pipeline.FEATURES, pipeline.LABELS, pipeline.EMBEDDINGS}


def test_folds_disjoint(chain):
    root, _ = chain
    labels = pipeline.read_labels(root / "art" / pipeline.LABELS)
    counts = labels.fold.value_counts()
    assert set(counts.index) == {"train", "calibration", "test"}
    assert counts.sum() == len(labels) == labels.index.nunique()


def test_rerun_is_byte_identical(chain):
    root, cfg = chain
    art = root / "art"
    keep = {p.name: p.read_bytes() for p in art.iterdir() if not p.name.endswith(".manifest.json")}
    assert cli.main(["run", "--config", cfg, "--deterministic"]) == 0
    for name, data in keep.items():
        assert (art / name).read_bytes() == data, name


def test_module_entry_point(chain):
    root, cfg = chain
    r = subprocess.run([sys.executable, "-m", "cltv.cli", "evaluate", "--config", cfg],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr


def test_leak_audit_passes_on_clean_log(small_log):
    events, _, split = small_log
    pipeline.leak_audit(events, split)


def test_rolling_needs_enough_span(small_log, tmp_path):
    events, _, _ = small_log
    cfg = pipeline.config_from_dict(SMALL)
    with pytest.raises(DataError):
        pipeline.rolling(events, cfg, n_periods=3)


def test_rolling_single_period(small_log):
    events, _, _ = small_log
    cfg = pipeline.config_from_dict({**SMALL, "rolling": {"n_periods": 1},
                                      "calibration": {"fraction": 0.4}})
    out = pipeline.rolling(events, cfg)
    assert len(out) == 1 and "cosine_cold" not in out[0]
    assert 0 <= out[0]["report"]["auc"] <= 1


def test_cli_rolling_data_error(chain, capsys):
    root, cfg = chain
    assert cli.main(["rolling", "--config", cfg, "--periods", "5"]) == 4
    assert "periods" in capsys.readouterr().err


def test_small_calibration_fold_is_a_data_error(tmp_path, capsys):
    body = {**SMALL, "datagen": {"n_customers": 300, "n_products": 60}, "artifacts": "a"}
    cfg = write_cfg(tmp_path, body)
    for step in ("datagen", "features", "embed", "train"):
        assert cli.main([step, "--config", cfg]) == 0
    assert cli.main(["calibrate", "--config", cfg]) == 4
    assert "calibration fold" in capsys.readouterr().err
