"""Small end-to-end run: synthetic corpus, rationale trees, encoders, scoring head.

    python3 demos/quickstart.py [artifacts_dir]
"""
import sys

from pulse import pipeline as P
from pulse.config import parse_config

root = sys.argv[1] if len(sys.argv) > 1 else "artifacts/quickstart"
cfg = parse_config({
    "artifacts_dir": root,
    "data": {"n_users": 200, "n_items": 150},
    "backbone": {"epochs": 5},
    "thought_space": {"epochs": 10},
})

report = P.run_experiment(cfg)
print(f"HR@1 {report.hr_at_1:.4f} over {report.n_users} users ({report.method})")

pipe = P.Pipeline(cfg)
prep = pipe.ingest()
bundle = pipe.gen_rationales()
chosen = pipe.select("tot_thought_space")
user = prep.users[0]
tree = bundle.trees[user]
traits = prep.traits["users"][user]

print(f"\nuser {user}, planted trait: {traits}")
print(f"  positive: {bundle.positives[user].text}")
print(f"  behavior: {bundle.behaviors[user]}")
print(f"  base:     {tree.root.text}")
for i, j, leaf in tree.iter_leaves():
    mark = "*" if chosen[user]["tree_pos"] == [2, i, j] else " "
    print(f"  {mark} leaf ({i},{j}): {leaf.text}")
print(f"\nartifacts in {root}; reports/report.csv has the summary row")
