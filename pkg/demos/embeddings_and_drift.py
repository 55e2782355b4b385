# Customer embeddings from co-viewing, and why warm starts matter.
#
# Two customers who look at the same products around the same time end up
# close together.  Retraining from scratch every month scrambles the axes
# though, so a downstream model trained on last month's vectors can't read
# this month's.  Copying the old vectors in as the starting point fixes that.
#
#   python demos/embeddings_and_drift.py

import numpy as np

from cltv import datagen, pairgen, sgns
from cltv.data_model import DAY, TimeSplit

events, truth = datagen.generate_with_truth(
    datagen.GenConfig(n_customers=1500, n_products=150, horizon_days=800, seed=1))
start = events.span[0] // DAY * DAY
march = TimeSplit.from_start(start)
april = TimeSplit.from_start(start + 30 * DAY)
print(f"{len(events)} events, {len(truth)} customers")

# Each product's viewers in time order form a "sentence" of customers.
streams = pairgen.build_view_streams(events, march)
lengths = np.array([len(s) for s in streams])
print(f"{len(streams)} view streams, median length {np.median(lengths):.0f}")
print("first pairs of the longest stream:",
      pairgen.generate_pairs(max(streams, key=len), 5)[:3])

cfg = sgns.SgnsConfig(dim=16, epochs=3, seed=0)
before, losses = sgns.embed_customers(events, march, cfg)
print("loss per epoch:", np.round(losses, 3))

# Do same-tier customers sit together?  Compare mean cosine within and across tiers.
ids = sorted(set(before.customer_ids) & set(truth.customer_id))
tier = truth.set_index("customer_id").loc[ids, "tier"].to_numpy()
V = before.vectors(ids)
V = V / np.linalg.norm(V, axis=1, keepdims=True)
S = V @ V.T
same = tier[:, None] == tier[None, :]
np.fill_diagonal(same, False)
print(f"cosine within tier {S[same].mean():.3f}, across tiers {S[tier[:, None] != tier[None, :]].mean():.3f}")


def drift(a, b):
    old = sorted(set(a.customer_ids) & set(b.customer_ids))
    x, y = a.vectors(old), b.vectors(old)
    return np.mean((x * y).sum(1) / (np.linalg.norm(x, axis=1) * np.linalg.norm(y, axis=1)))


later = sgns.SgnsConfig(dim=16, epochs=3, seed=1)
cold, _ = sgns.embed_customers(events, april, later)
warm, _ = sgns.embed_customers(events, april, later, prior=before)
print(f"same customer, one month apart: cold start cosine {drift(before, cold):.3f}, "
      f"warm start {drift(before, warm):.3f}")
