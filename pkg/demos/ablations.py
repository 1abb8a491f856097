"""Default-scale synthetic ablations and the cross-domain transfer run (a few minutes on CPU).

    python3 demos/ablations.py [artifacts_dir]
"""
import sys

from pulse import pipeline as P
from pulse.config import parse_config

root = sys.argv[1] if len(sys.argv) > 1 else "artifacts/ablations"
cfg = parse_config({"artifacts_dir": root})


def show(title, reports):
    print(title)
    for r in reports:
        print(f"  {r.method:28s} {r.hr_at_1:.4f}")


show("rationale selection (800 users, noise 0.1)", P.run_ablation_b(cfg))
show("leaf scoring space", P.run_ablation_a(cfg))
res = P.run_cross_domain(cfg)
show(f"transfer {cfg.data.domain} -> {cfg.eval.target_domain}", [res.pulse, res.backbone_only])
print(f"optimizer steps on target: {res.steps_after}")
# reference numbers from the full-scale setting ride along as metadata only
print("reference (not comparable at this scale):", res.pulse.metadata["reference"])
