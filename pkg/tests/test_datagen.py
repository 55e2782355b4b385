import numpy as np
import pandas as pd
import pytest

from cltv import datagen
from cltv.data_model import TimeSplit, derive_labels
from cltv.evaluation import spearman
from cltv.pairgen import build_view_streams


@pytest.fixture(scope="module")
def default_log():
    cfg = datagen.GenConfig()
    events, truth = datagen.generate_with_truth(cfg)
    return events, truth, TimeSplit.from_start(cfg.start_ts)


def test_same_seed_same_bytes(tmp_path):
    cfg = datagen.GenConfig(n_customers=200, n_products=40, seed=5)
    datagen.generate(cfg).write(tmp_path / "a.ndjson")
    datagen.generate(cfg).write(tmp_path / "b.ndjson")
    assert (tmp_path / "a.ndjson").read_bytes() == (tmp_path / "b.ndjson").read_bytes()


def test_different_seed_differs():
    a = datagen.generate(datagen.GenConfig(n_customers=100, n_products=20, seed=1))
    b = datagen.generate(datagen.GenConfig(n_customers=100, n_products=20, seed=2))
    assert a != b


@pytest.mark.parametrize("bad", [dict(n_customers=0), dict(n_products=0), dict(horizon_days=1),
                                 dict(affinity_strength=-1.0), dict(latent_value_spread=0.0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        datagen.GenConfig(**bad)


def test_config_roundtrip():
    cfg = datagen.GenConfig(n_customers=7, affinity_strength=0.5)
    assert datagen.GenConfig.from_dict(cfg.to_dict()) == cfg


def _spend_by_truth(events, truth, split):
    labels = derive_labels(events, split).to_frame().set_index("customer_id")
    t = truth.set_index("customer_id").reindex(labels.index)
    return labels, t


def test_latent_value_drives_spend(default_log):
    events, truth, split = default_log
    labels, t = _spend_by_truth(events, truth, split)
    assert spearman(t.latent_value, labels.net_spend) > 0.5


def test_spend_monotone_in_latent_decile(default_log):
    events, truth, split = default_log
    labels, t = _spend_by_truth(events, truth, split)
    decile = pd.qcut(t.latent_value, 10, labels=False)
    means = labels.net_spend.groupby(decile.to_numpy()).mean().to_numpy()
    assert np.all(np.diff(means) >= 0)


def test_has_churners_and_buyers(default_log):
    events, truth, split = default_log
    labels, _ = _spend_by_truth(events, truth, split)
    assert 0.2 < labels.churned.mean() < 0.8


def _same_tier_adjacency(events, truth, split):
    tier = truth.set_index("customer_id").tier
    same = total = 0
    for s in build_view_streams(events, split):
        t = tier.reindex(list(s.customers)).to_numpy()
        same += int((t[1:] == t[:-1]).sum())
        total += t.size - 1
    return same / total


def test_affinity_plants_coview_signal():
    cfg = datagen.GenConfig(n_customers=1500, n_products=200, seed=3)
    events, truth = datagen.generate_with_truth(cfg)
    split = TimeSplit.from_start(cfg.start_ts)
    # five equal tiers: about 0.2 of adjacent pairs would share a tier by chance
    assert _same_tier_adjacency(events, truth, split) > 0.3
    null = datagen.GenConfig(n_customers=1500, n_products=200, seed=3, affinity_strength=0.0)
    ev0, tr0 = datagen.generate_with_truth(null)
    assert abs(_same_tier_adjacency(ev0, tr0, split) - 0.2) < 0.03


def test_zero_affinity_views_ignore_tier():
    cfg = datagen.GenConfig(n_customers=2000, n_products=100, seed=4, affinity_strength=0.0)
    events, truth = datagen.generate_with_truth(cfg)
    f = events.frame
    views = f[f.kind == "ProductView"]
    tier = truth.set_index("customer_id").tier
    share = pd.crosstab(tier.reindex(views.customer_id).to_numpy(), views.product_id.to_numpy(),
                        normalize="index")
    # each tier browses the catalogue with the same distribution
    assert (share.max(axis=0) - share.min(axis=0)).max() < 0.05


def test_truth_sidecar_roundtrip(tmp_path):
    _, truth = datagen.generate_with_truth(datagen.GenConfig(n_customers=50, n_products=10))
    datagen.write_truth(tmp_path / "truth.json", truth)
    back = datagen.read_truth(tmp_path / "truth.json").set_index("customer_id")
    t = truth.set_index("customer_id")
    assert np.allclose(back.latent_value.reindex(t.index), t.latent_value, rtol=0, atol=0)
