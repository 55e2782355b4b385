# From an event log to calibrated churn probabilities and money.
#
# The forests never see raw spend: the value model predicts a percentile,
# and a small tree learnt on held-out customers turns percentiles back into
# currency.  The churn scores get the same treatment with a Platt fit.
#
#   python demos/churn_and_value.py

import numpy as np

from cltv import calibration, data_model, datagen, evaluation, features, forest
from cltv.data_model import DAY, TimeSplit

events, _ = datagen.generate_with_truth(datagen.GenConfig(n_customers=4000, seed=3))
split = TimeSplit.from_start(events.span[0] // DAY * DAY)

frame = features.feature_frame(events, split)
labels = data_model.derive_labels(events, split).to_frame().set_index("customer_id").reindex(frame.index)
print(frame.loc[frame.num_orders > 0].iloc[:3, :6])
print(f"churn rate {labels.churned.mean():.2f}, "
      f"top 10% of customers hold {labels.net_spend.nlargest(len(labels) // 10).sum() / labels.net_spend.sum():.0%} of spend")

rng = np.random.default_rng(0)
part = rng.permutation(len(frame))
test, cal, train = np.split(part, [len(part) // 4, len(part) // 4 + len(part) // 6])

enc = features.CategoricalEncoder().fit(frame.iloc[train])
dm, _ = features.encode_categoricals(frame, enc)
cfg = forest.ForestConfig(n_trees=100, seed=0)
churned = labels.churned.to_numpy(dtype=bool)
spend = labels.net_spend.to_numpy()
churn_model = forest.fit(dm.X[train], churned[train], cfg, forest.Task.CHURN, dm.categorical, dm.columns)
value_model = forest.fit(dm.X[train], labels.percentile.to_numpy()[train], cfg,
                         forest.Task.PERCENTILE, dm.categorical, dm.columns)

print("\nstrongest churn signals:")
for name, w in forest.importance(churn_model)[:5]:
    print(f"  {name:<32}{w:.3f}")

platt = calibration.fit_platt(churn_model.predict(dm.X[cal]), churned[cal])
value_map = calibration.fit_percentile_value_map(value_model.predict(dm.X[cal]), spend[cal])
print(f"\nPlatt a={platt.a:.3f} b={platt.b:.3f}; value map steps:",
      np.round(value_map.step_values(), 1))

raw = churn_model.predict(dm.X[test])
pct = value_model.predict(dm.X[test])
print(f"\ntest AUC {evaluation.auc(raw, churned[test]):.3f}")
print(f"ECE raw {evaluation.expected_calibration_error(raw, churned[test]):.4f}, "
      f"calibrated {evaluation.expected_calibration_error(platt(raw), churned[test]):.4f}")
mapped = value_map(pct)
print(f"cohort spend: actual {spend[test].sum():,.0f}, predicted {mapped.sum():,.0f}")
print(f"Spearman(predicted percentile, spend) {evaluation.spearman(pct, spend[test]):.3f}")

for rec in calibration.apply_calibration(platt, value_map, raw[:3], pct[:3], list(frame.index[test[:3]])):
    print(rec)
