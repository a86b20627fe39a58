"""Prompt-design and learning-strategy ablation arms.

Arm names are stable identifiers used by the CLI and the acceptance tests.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .data import DomainDataset
from .harness import BackboneCache, RunResult, TrainConfig, run_protocol, zero_shot_run

PROMPT_DESIGN_ARMS = ["zero_shot", "language_only", "vision_only", "joint_no_fusion", "joint", "tpl"]
STRATEGY_ARMS = ["joint", "alternating", "two_stage", "cumulative", "transitive"]


def arm_config(arm: str, base: TrainConfig) -> TrainConfig:
    """Config for ``arm`` derived from ``base``; strategy arms keep every component on."""
    if arm == "language_only":
        return base.replace(vision_prompts=False, language_prompts=True, fusion=True, strategy="joint")
    if arm == "vision_only":
        return base.replace(vision_prompts=True, language_prompts=False, fusion=True, strategy="joint")
    if arm == "joint_no_fusion":
        return base.replace(vision_prompts=True, language_prompts=True, fusion=False, strategy="joint")
    if arm == "joint":
        return base.replace(vision_prompts=True, language_prompts=True, fusion=True, strategy="joint")
    if arm in ("tpl", "transitive"):
        return base.replace(vision_prompts=True, language_prompts=True, fusion=True, strategy="transitive")
    if arm in STRATEGY_ARMS:
        return base.replace(vision_prompts=True, language_prompts=True, fusion=True, strategy=arm)
    raise ValueError(f"unknown arm {arm!r}")


def run_arm(arm: str, ds: DomainDataset, base: TrainConfig, cache: BackboneCache,
            targets=None) -> RunResult:
    targets = list(range(ds.n_domains)) if targets is None else list(targets)
    if arm == "zero_shot":
        runs = []
        for t in targets:
            original, splits = cache.get(t), cache.splits(t)
            runs.extend(zero_shot_run(original, ds, splits, base, s) for s in base.seeds)
        return RunResult(arm, runs)
    return run_protocol(ds, arm_config(arm, base), targets, arm=arm, cache=cache)


@dataclass
class AblationReport:
    prompt_design: dict[str, RunResult]
    strategy: dict[str, RunResult]

    def rows(self, table: str) -> list[tuple[str, float]]:
        res = self.prompt_design if table == "prompt_design" else self.strategy
        return [(arm, r.grand_average()) for arm, r in res.items()]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["table", "arm", "accuracy"])
        for table in ("prompt_design", "strategy"):
            for arm, acc in self.rows(table):
                w.writerow([table, arm, repr(acc)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"prompt_design": {a: r.to_dict() for a, r in self.prompt_design.items()},
                "strategy": {a: r.to_dict() for a, r in self.strategy.items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def markdown(self) -> str:
        lines = ["| Prompt design | Accuracy |", "|---|---|"]
        lines += [f"| {a} | {100 * v:.2f} |" for a, v in self.rows("prompt_design")]
        lines += ["", "| Strategy | Accuracy |", "|---|---|"]
        lines += [f"| {a} | {100 * v:.2f} |" for a, v in self.rows("strategy")]
        return "\n".join(lines) + "\n"


def run_ablation(ds: DomainDataset, base: TrainConfig, targets=None,
                 cache: BackboneCache | None = None) -> AblationReport:
    """Both ablation tables; arms shared between them are trained once."""
    cache = cache or BackboneCache(ds, base)
    done: dict[str, RunResult] = {}

    def get(arm):
        key = "tpl" if arm == "transitive" else arm
        if key not in done:
            done[key] = run_arm(key, ds, base, cache, targets)
        return done[key]

    design = {a: get(a) for a in PROMPT_DESIGN_ARMS}
    strategy = {}
    for a in STRATEGY_ARMS:
        r = get(a)
        strategy[a] = RunResult(a, r.runs)
    return AblationReport(design, strategy)
