"""End-to-end run at toy size: data, backbone, prompt tuning, evaluation, report.

    python demos/quickstart.py [out_dir]

Takes about a minute on one CPU core.
"""

import sys
from pathlib import Path

import numpy as np

from tpl.analysis import FeatureDump, analyze_dump
from tpl.data import generate_synthetic, make_splits
from tpl.encoders import ModelConfig
from tpl.harness import OriginalModel, evaluate, TrainConfig, pretrain_backbone, run_single

out = Path(sys.argv[1] if len(sys.argv) > 1 else "quickstart_out")
ds = generate_synthetic(n_classes=4, n_domains=4, n_per_cell=24, seed=0)
print("oracle:", ds.manifest["oracle"]["within_mean"], "within,", ds.manifest["oracle"]["across_mean"], "across")

model = ModelConfig(width=32, heads=4, vision_layers=2, text_layers=1, embed_dim=32, n_classes=4)
cfg = TrainConfig(model=model, pretrain_iterations=300, lr=1e-2, iterations=150, batch_size=16,
                  checkpoint_every=30, probe_size=64, seeds=[0])

target = 0
splits = make_splits(ds, target)
original = OriginalModel(pretrain_backbone(ds, splits, cfg), ds)
run, outcome, ev = run_single(original, ds, splits, cfg, seed=0)
print(f"target domain {target}: zero-shot {run.zero_shot:.3f}, tuned {run.accuracy:.3f}")
print("schedule (t, d, lambda, w_V, w_S):")
for row in outcome.schedule.history:
    print("  " + ", ".join(f"{v:.4g}" for v in row))

# tuned image features for every domain; the target is still only evaluated, never trained on
feats, labels, doms = [], [], []
for m in range(ds.n_domains):
    e = ev if m == target else evaluate(outcome.model, original, ds, m, cfg, outcome.domain_prompts)
    idx = (ds.domains == m).nonzero()[0]
    feats.append(e.features), labels.append(ds.labels[idx]), doms.append(ds.domains[idx])
dump = FeatureDump.build(np.concatenate(feats), np.concatenate(labels), np.concatenate(doms), "target",
                         outcome.selected_t)
summary = analyze_dump(dump, out, outcome.schedule.history)
print("report written to", out, summary)
