"""Cosine gap between own and borrowed rationales, before and after contrastive training,
plus a 2-D projection for plotting.

    python3 demos/thought_space_geometry.py [artifacts_dir]
"""
import sys

from pulse import pipeline as P
from pulse import thought_space as T
from pulse.config import parse_config

root = sys.argv[1] if len(sys.argv) > 1 else "artifacts/geometry"
cfg = parse_config({"artifacts_dir": root, "data": {"n_users": 500, "noise": 0.0}})
pipe = P.Pipeline(cfg)
prep = pipe.ingest()
bundle = pipe.gen_rationales()
pos = {u: r.text for u, r in bundle.positives.items()}
negs = T.sample_rationale_negatives(prep.users, 10, seed=1)

untrained = T.init_thought_space(pipe.encoder_config(), 0)
for name, ts in (("untrained", untrained), ("trained", pipe.train_ts())):
    p, n = T.separation(ts, pos, bundle.behaviors, negs)
    print(f"{name:10s} cos(own)={p:+.3f} cos(borrowed)={n:+.3f} gap={p - n:+.3f}")

path = pipe.project()
print(f"projection written to {path} (columns id,label,x,y)")
