"""Command-line entry point: ``tpl <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical
failure.  Errors are written to stderr as one JSON object per line.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .ablation import PROMPT_DESIGN_ARMS, STRATEGY_ARMS, run_ablation
from .analysis import ConvergenceError, DumpFormatError, FeatureDump, analyze_dump, load_dump, save_dump
from .checkpoint import CheckpointError
from .data import DatasetFormatError, generate_synthetic, load_dataset, make_splits, save_dataset
from .encoders import ModelConfig
from .harness import (
    OriginalModel,
    RunResult,
    TrainConfig,
    TrainingDiverged,
    _features_nograd,
    evaluate,
    load_backbone,
    load_tuned,
    pretrain_backbone,
    run_single,
    save_backbone,
    save_tuned,
)
from .numerics import NonFiniteError
from .scheduler import StrategyKind

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CONFIG_NAME = "config.json"
RUN_NAME = "run.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_id() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for f in sorted(root.rglob("*.py")):
        h.update(f.relative_to(root).as_posix().encode())
        h.update(f.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


# -- config flags -------------------------------------------------------------
def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_field(group, name: str, ftype, dest: str, help_text: str):
    if ftype in (bool, "bool"):
        group.add_argument(_flag(name), dest=dest, action=argparse.BooleanOptionalAction, default=None,
                           help=help_text)
    elif name == "seeds":
        group.add_argument(_flag(name), dest=dest, type=lambda s: [int(x) for x in s.split(",")], default=None,
                           metavar="S1,S2,...", help=help_text)
    elif name == "theta":
        group.add_argument(_flag(name), dest=dest, type=float, default=None, help=help_text)
    elif name == "strategy":
        group.add_argument(_flag(name), dest=dest, choices=[k.value for k in StrategyKind], default=None,
                           help=help_text)
    else:
        py = {"int": int, "float": float, "str": str}.get(ftype if isinstance(ftype, str) else ftype.__name__, str)
        group.add_argument(_flag(name), dest=dest, type=py, default=None, help=help_text)


def add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training config overrides")
    defaults = TrainConfig()
    for f in dataclasses.fields(TrainConfig):
        if f.name == "model":
            continue
        _add_field(g, f.name, f.type, f"cfg__{f.name}", f"default {getattr(defaults, f.name)!r}")
    m = p.add_argument_group("model config overrides")
    for f in dataclasses.fields(ModelConfig):
        _add_field(m, "model_" + f.name, f.type, f"model__{f.name}", f"default {getattr(defaults.model, f.name)!r}")


def resolve_config(args) -> TrainConfig:
    base = {}
    if getattr(args, "config", None):
        try:
            base = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise DatasetFormatError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"{args.config}: invalid JSON ({e})") from None
        if not isinstance(base, dict):
            raise UsageError(f"{args.config}: expected a JSON object")
    model = dict(base.get("model", {}))
    for k, v in vars(args).items():
        if v is None:
            continue
        if k.startswith("cfg__"):
            base[k[5:]] = v
        elif k.startswith("model__"):
            model[k[7:]] = v
    if model:
        base["model"] = model
    try:
        return TrainConfig.from_dict(base)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid config: {e}") from None


def echo_run(out: Path, cfg: TrainConfig | None, command: str, extra: dict) -> None:
    """Write the resolved config and run record needed to replay ``command``."""
    out.mkdir(parents=True, exist_ok=True)
    if cfg is not None:
        (out / CONFIG_NAME).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    record = {"command": command, "build": build_id(), **extra}
    if cfg is not None:
        record["seeds"] = extra.get("seeds", cfg.seeds)
    (out / RUN_NAME).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _targets(arg: str | None, n_domains: int) -> list[int]:
    if arg is None:
        return list(range(n_domains))
    ts = [int(x) for x in arg.split(",")]
    bad = [t for t in ts if not 0 <= t < n_domains]
    if bad:
        raise UsageError(f"target domain(s) {bad} outside [0, {n_domains})")
    return ts


# -- commands -------------------------------------------------------------
def cmd_gen_data(args) -> dict:
    ds = generate_synthetic(args.classes, args.domains, args.per_cell, args.seed, with_oracle=not args.no_oracle)
    out = Path(args.out)
    save_dataset(ds, out)
    return {"images": len(ds), "out": str(out), "oracle": ds.manifest.get("oracle")}


def cmd_pretrain(args) -> dict:
    cfg = resolve_config(args)
    ds = load_dataset(args.data)
    target = _targets(str(args.target_domain), ds.n_domains)[0]
    splits = make_splits(ds, target, cfg.val_fraction, cfg.split_seed)
    backbone = pretrain_backbone(ds, splits, cfg)
    out = Path(args.out)
    echo_run(out, cfg, "pretrain", {"data": str(args.data), "target_domain": target})
    save_backbone(out / "backbone", backbone, {"target_domain": target, "dataset": ds.manifest.get("config_hash")})
    original = OriginalModel(backbone, ds)
    zs = evaluate(None, original, ds, target, cfg).accuracy
    summary = {"target_domain": target, "zero_shot_accuracy": zs, "fingerprint": backbone.fingerprint()}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _load_backbone_for(path, ds, target):
    backbone, meta = load_backbone(Path(path) / "backbone" if Path(path).is_dir() else path)
    if "target_domain" in meta and meta["target_domain"] != target:
        raise UsageError(f"backbone was pretrained with target domain {meta['target_domain']}, not {target}")
    return OriginalModel(backbone, ds)


def cmd_train(args) -> dict:
    cfg = resolve_config(args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    cfg = cfg.replace(seeds=[seed])
    ds = load_dataset(args.data)
    target = _targets(str(args.target_domain), ds.n_domains)[0]
    original = _load_backbone_for(args.backbone, ds, target)
    splits = make_splits(ds, target, cfg.val_fraction, cfg.split_seed)
    run, outcome, ev = run_single(original, ds, splits, cfg, seed)
    result = RunResult(cfg.strategy, [run])
    out = Path(args.out)
    echo_run(out, cfg, "train", {"data": str(args.data), "backbone": str(args.backbone),
                                 "target_domain": target, "seeds": [seed]})
    (out / "result.json").write_text(result.to_json())
    (out / "result.csv").write_text(result.to_csv())
    (out / "schedule.csv").write_text(outcome.schedule.to_csv())
    save_tuned(out / "model", outcome.model, outcome.domain_prompts, {"seed": seed, "target_domain": target})
    val_idx = splits.val_indices()
    tgt_idx = np.flatnonzero(ds.domains == target)
    _, val_feats = _features_nograd(outcome.model, ds, val_idx)
    dump = FeatureDump(np.concatenate([val_feats, ev.features]), ds.labels[np.r_[val_idx, tgt_idx]],
                       ds.domains[np.r_[val_idx, tgt_idx]],
                       np.r_[np.full(len(val_idx), 1), np.full(len(tgt_idx), 2)],
                       np.full(len(val_idx) + len(tgt_idx), outcome.selected_t),
                       {"target_domain": target, "seed": seed, "strategy": cfg.strategy})
    save_dump(dump, out / "features")
    return {"accuracy": run.accuracy, "zero_shot": run.zero_shot, "selected_t": run.selected_t}


def cmd_eval(args) -> dict:
    ds = load_dataset(args.data)
    target = _targets(str(args.target_domain), ds.n_domains)[0]
    original = _load_backbone_for(args.backbone, ds, target)
    model_path = Path(args.model)
    model, prompts, meta = load_tuned(model_path / "model" if model_path.is_dir() else model_path, original)
    cfg = model.cfg if args.eval_average is None else model.cfg.replace(eval_average=args.eval_average)
    ev = evaluate(model, original, ds, target, cfg, prompts)
    return {"target_domain": target, "accuracy": ev.accuracy, "n_images": int(len(ev.predictions))}


def cmd_ablate(args) -> dict:
    cfg = resolve_config(args)
    ds = load_dataset(args.data)
    targets = _targets(args.targets, ds.n_domains)
    report = run_ablation(ds, cfg, targets)
    out = Path(args.out)
    echo_run(out, cfg, "ablate", {"data": str(args.data), "targets": targets})
    (out / "ablation.csv").write_text(report.to_csv())
    (out / "ablation.json").write_text(report.to_json())
    (out / "ablation.md").write_text(report.markdown())
    return {"prompt_design": dict(report.rows("prompt_design")), "strategy": dict(report.rows("strategy"))}


def cmd_analyze(args) -> dict:
    dump = load_dump(args.dump)
    history = None
    if args.history:
        import csv
        with open(args.history, newline="") as fh:
            history = [[float(v) for v in row] for row in list(csv.reader(fh))[1:]]
    out = Path(args.out)
    summary = analyze_dump(dump, out, history)
    echo_run(out, None, "analyze", {"dump": str(args.dump)})
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "analyze": cmd_analyze}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tpl", description="Transitive prompt learning on a synthetic domain-generalisation benchmark.")
    p.add_argument("--help-json", action="store_true", help="print the flag schema as JSON and exit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="synthesise a dataset")
    g.add_argument("--classes", type=int, default=8)
    g.add_argument("--domains", type=int, default=4)
    g.add_argument("--per-cell", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--no-oracle", action="store_true", help="skip the shift-oracle measurements")
    g.add_argument("--out", required=True)

    pt = sub.add_parser("pretrain", help="stage-one backbone on pooled source domains")
    pt.add_argument("--data", required=True)
    pt.add_argument("--config")
    pt.add_argument("--target-domain", type=int, default=0, help="held-out domain excluded from pretraining")
    pt.add_argument("--out", required=True)
    add_config_flags(pt)

    t = sub.add_parser("train", help="stage-two prompt tuning for one target and seed")
    t.add_argument("--data", required=True)
    t.add_argument("--backbone", required=True)
    t.add_argument("--config")
    t.add_argument("--target-domain", type=int, required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--ensemble", dest="cfg__prompt_ensemble", action=argparse.BooleanOptionalAction, default=None)
    t.add_argument("--out", required=True)
    add_config_flags(t)

    e = sub.add_parser("eval", help="target-domain accuracy of a tuned model")
    e.add_argument("--model", required=True)
    e.add_argument("--backbone", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--target-domain", type=int, required=True)
    e.add_argument("--eval-average", action=argparse.BooleanOptionalAction, default=None)

    a = sub.add_parser("ablate", help=f"prompt-design arms {PROMPT_DESIGN_ARMS} and strategy arms {STRATEGY_ARMS}")
    a.add_argument("--data", required=True)
    a.add_argument("--config")
    a.add_argument("--targets", help="comma-separated target domains (default: all)")
    a.add_argument("--out", required=True)
    add_config_flags(a)

    z = sub.add_parser("analyze", help="metrics, MDS and figures from a feature dump")
    z.add_argument("--dump", required=True)
    z.add_argument("--history", help="schedule CSV written by train")
    z.add_argument("--out", required=True)
    return p


def help_schema(parser: argparse.ArgumentParser) -> dict:
    def actions(p):
        out = []
        for a in p._actions:
            if isinstance(a, (argparse._HelpAction, argparse._SubParsersAction)):
                continue
            kind = "flag" if a.nargs == 0 or isinstance(a, argparse.BooleanOptionalAction) else "value"
            typ = getattr(a.type, "__name__", None) if a.type is not None else None
            out.append({"flags": list(a.option_strings), "dest": a.dest, "kind": kind,
                        "type": typ if typ != "<lambda>" else "int-list",
                        "required": bool(a.required), "default": a.default,
                        "choices": list(a.choices) if a.choices else None, "help": a.help})
        return out

    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return {"prog": parser.prog, "version": __version__, "options": actions(parser),
            "exit_codes": {"0": "success", "1": "usage error", "2": "data or format error", "3": "numerical failure"},
            "commands": {name: {"help": next((c.help for c in sub._choices_actions if c.dest == name), None),
                                "options": actions(sp)} for name, sp in sub.choices.items()}}


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        return _fail(EXIT_USAGE, "usage", str(e))
    if args.help_json:
        sys.stdout.write(json.dumps(help_schema(parser), indent=2, default=str) + "\n")
        return EXIT_OK
    if not args.command:
        parser.print_usage(sys.stderr)
        return _fail(EXIT_USAGE, "usage", "a command is required")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = COMMANDS[args.command](args)
    except UsageError as e:
        return _fail(EXIT_USAGE, "usage", str(e))
    except (DatasetFormatError, DumpFormatError, CheckpointError, FileNotFoundError, IsADirectoryError,
            PermissionError) as e:
        return _fail(EXIT_DATA, "data", str(e))
    except (TrainingDiverged, NonFiniteError, ConvergenceError, FloatingPointError) as e:
        return _fail(EXIT_NUMERIC, "numerical", str(e))
    except ValueError as e:
        return _fail(EXIT_DATA, "data", str(e))
    sys.stdout.write(json.dumps(summary, indent=2, sort_keys=True, default=str) + "\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
