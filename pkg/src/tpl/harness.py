"""Stage-one backbone pretraining, stage-two prompt tuning, evaluation and protocol runs."""

from __future__ import annotations

import copy
import csv
import dataclasses
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .checkpoint import CheckpointError, load_parameters, save_parameters
from .data import DomainDataset, SplitPlan, make_splits
from .encoders import DualEncoder, ModelConfig, encode_image, encode_text
from .numerics import AdamWState, Tensor, adamw_step, cosine_lr
from .objective import LossBatch, loss_lv, loss_ls, per_sample_total, total_loss
from .prompting import DomainPromptGenerator, FusionGates, fuse_image, fuse_text
from .scheduler import (
    ScheduleState,
    StrategyKind,
    compute_domain_distance,
    grouped_pair_distances,
    per_domain_distances,
)

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, stage: str, iteration: int, weights=None):
        self.stage, self.iteration, self.weights = stage, iteration, weights
        super().__init__(f"{stage}: non-finite loss at iteration {iteration} (weights {weights})")


@dataclass
class TrainConfig:
    lr: float = 3e-5
    lr_floor: float = 0.0
    weight_decay: float = 0.01
    iterations: int = 2000
    theta: float | None = None  # None: d0 * T, fixed at the first checkpoint
    batch_size: int = 32
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    strategy: str = "transitive"
    per_domain_weights: bool = False
    prompt_ensemble: bool = False
    eval_average: bool = True
    average_space: str = "logit"  # or "prob"
    checkpoint_every: int = 100
    probe_size: int = 512
    val_fraction: float = 0.2
    split_seed: int = 0
    tau: float = 0.07
    gate_init: float = 0.1
    vision_prompts: bool = True
    language_prompts: bool = True
    fusion: bool = True
    pretrain_iterations: int = 1500
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 48
    pretrain_weight_decay: float = 0.05
    backbone_seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        self.strategy = StrategyKind(self.strategy).value
        positive = ["lr", "iterations", "batch_size", "checkpoint_every", "probe_size", "tau",
                    "pretrain_iterations", "pretrain_lr", "pretrain_batch"]
        bad = [k for k in positive if not getattr(self, k) > 0]
        if bad:
            raise ValueError(f"config fields must be positive: {bad}")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.average_space not in ("logit", "prob"):
            raise ValueError("average_space must be 'logit' or 'prob'")
        if self.theta is not None and self.theta <= 0:
            raise ValueError("theta must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        d = dict(d)
        if "model" in d and isinstance(d["model"], dict):
            mnames = {f.name for f in dataclasses.fields(ModelConfig)}
            bad = sorted(set(d["model"]) - mnames)
            if bad:
                raise ValueError(f"unknown model config keys: {bad}")
            d["model"] = ModelConfig(**d["model"])
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def _images(ds: DomainDataset, idx) -> np.ndarray:
    return ds.images[idx].astype(np.float64)


# -- stage one --------------------------------------------------------------
def pretrain_backbone(ds: DomainDataset, splits: SplitPlan, cfg: TrainConfig) -> DualEncoder:
    """Contrastive image-to-class-text training of the full dual encoder on pooled source data.

    Returns the model with every parameter frozen.
    """
    mcfg = dataclasses.replace(cfg.model, n_classes=ds.n_classes)
    model = DualEncoder(mcfg, seed=cfg.backbone_seed)
    model.set_trainable(True)
    params = model.parameters()
    state = AdamWState(weight_decay=cfg.pretrain_weight_decay)
    rng = np.random.default_rng([cfg.backbone_seed, splits.target, 1])
    train = splits.train_indices()
    classes = np.arange(mcfg.n_classes)
    warmup = max(1, cfg.pretrain_iterations // 20)
    for it in range(cfg.pretrain_iterations):
        idx = rng.choice(train, size=min(cfg.pretrain_batch, len(train)), replace=False)
        img = encode_image(_images(ds, idx), model.vision)
        txt = encode_text(classes, model.text)
        loss = loss_lv(LossBatch(img, ds.domains[idx], ds.labels[idx], txt, tau=cfg.tau), reduction="mean")
        if not math.isfinite(loss.item()):
            raise TrainingDiverged("pretrain", it)
        nx.zero_grad(params)
        nx.backward(loss)
        lr = cosine_lr(it, cfg.pretrain_iterations, cfg.pretrain_lr) * min(1.0, (it + 1) / warmup)
        adamw_step([p for p in params if p.grad is not None], state, lr)
        if it % 100 == 0:
            log.debug("pretrain target=%d it=%d loss=%.4f", splits.target, it, loss.item())
    model.set_trainable(False)
    return model


class OriginalModel:
    """Frozen stage-one model with cached image and class-text features."""

    def __init__(self, backbone: DualEncoder, ds: DomainDataset | None = None):
        self.backbone = backbone
        self.cfg = backbone.cfg
        with nx.no_grad():
            self.text = backbone.class_text_features().data
        self._ds_id = None
        self._image_cache: np.ndarray | None = None
        if ds is not None:
            self.cache(ds)

    def cache(self, ds: DomainDataset) -> None:
        if self._ds_id != id(ds):
            self._image_cache = self.backbone.encode_images(ds.images.astype(np.float64))
            self._ds_id = id(ds)

    def image_features(self, ds: DomainDataset, idx) -> np.ndarray:
        self.cache(ds)
        return self._image_cache[idx]

    def logits(self, ds: DomainDataset, idx, tau: float) -> np.ndarray:
        return self.image_features(ds, idx) @ self.text.T / tau

    def fingerprint(self) -> str:
        return self.backbone.fingerprint()


# -- stage two ---------------------------------------------------------------
class TPLModel:
    """Learnable prompt state on top of a frozen backbone."""

    def __init__(self, original: OriginalModel, cfg: TrainConfig, seed: int):
        self.original = original
        self.cfg = cfg
        mcfg = original.cfg
        rng = np.random.default_rng([seed, 2])
        self.prompts = original.backbone.vision.init_prompts(rng) if cfg.vision_prompts else None
        self.generator = (DomainPromptGenerator(mcfg.embed_dim, mcfg.generator_hidden, mcfg.text_prompt_tokens,
                                                mcfg.width, rng) if cfg.language_prompts else None)
        self.gates = FusionGates(mcfg.embed_dim, cfg.gate_init if cfg.fusion else 0.0)
        if not cfg.fusion:
            for g in self.gates.parameters():
                g.requires_grad = False

    @property
    def vision(self):
        return self.original.backbone.vision

    @property
    def text_encoder(self):
        return self.original.backbone.text

    def learnable(self) -> list[Tensor]:
        ps = list(self.prompts or [])
        if self.generator is not None:
            ps += self.generator.parameters()
        ps += [g for g in self.gates.parameters() if g.requires_grad]
        return ps

    def state(self) -> dict[str, np.ndarray]:
        ps = list(self.prompts or []) + (self.generator.parameters() if self.generator else []) \
            + self.gates.parameters()
        return {p.name: p.data.copy() for p in ps}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        ps = list(self.prompts or []) + (self.generator.parameters() if self.generator else []) \
            + self.gates.parameters()
        for p in ps:
            p.data[...] = state[p.name]

    # forward pieces
    def image_features(self, ds: DomainDataset, idx) -> tuple[Tensor, Tensor]:
        """(prompted I, fused I') for dataset rows ``idx``."""
        orig = Tensor(self.original.image_features(ds, idx))
        if self.prompts is None:
            img = orig
        else:
            img = encode_image(_images(ds, idx), self.vision, self.prompts)
        return img, fuse_image(img, orig, self.gates.P) if self.cfg.fusion else img

    def domain_prompt(self, feats: Tensor) -> Tensor:
        return self.generator(feats).mean(axis=0)

    def text_features(self, prompts: dict[int, Tensor]) -> tuple[dict[int, Tensor], dict[int, Tensor]]:
        """Fused (domain-agnostic T', domain-specific T_bar') class features per domain.

        T' mixes in a detached T_bar so the generator is trained by the
        domain-specific loss only.
        """
        base = Tensor(self.original.text)
        c = base.shape[0]
        doms = sorted(prompts)
        stack = nx.concat([prompts[m].reshape(1, *prompts[m].shape) for m in doms], axis=0)
        per_desc = stack[np.repeat(np.arange(len(doms)), c)]
        specific = encode_text(np.tile(np.arange(c), len(doms)), self.text_encoder, per_desc)
        agn, spec = {}, {}
        for j, m in enumerate(doms):
            t_bar = specific[j * c:(j + 1) * c]
            if self.cfg.fusion:
                spec[m], _ = fuse_text(t_bar, base, self.gates.Q, self.gates.R)
                _, agn[m] = fuse_text(t_bar.detach(), base, self.gates.Q, self.gates.R)
            else:
                spec[m], agn[m] = t_bar, base
        return agn, spec


@dataclass
class TrainOutcome:
    model: TPLModel
    schedule: ScheduleState
    d_trace: list[tuple[int, float]]
    loss_trace: list[tuple[int, float, float, float]]
    val_trace: list[tuple[int, float]]
    selected_t: int
    best_val: float
    domain_prompts: dict[int, np.ndarray]


def _balanced_batch(rng: np.random.Generator, splits: SplitPlan, size: int) -> np.ndarray:
    srcs = splits.sources
    base, extra = divmod(size, len(srcs))
    parts = []
    for k, m in enumerate(srcs):
        n = base + (1 if k < extra else 0)
        parts.append(rng.choice(splits.train[m], size=n, replace=False))
    return np.concatenate(parts)


def _probe(splits: SplitPlan, ds: DomainDataset, size: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, splits.target, 3])
    train = splits.train_indices()
    if size >= len(train):
        return train
    # keep every (class, domain) cell represented
    return np.sort(rng.choice(train, size=size, replace=False))


def _features_nograd(model: TPLModel, ds: DomainDataset, idx: np.ndarray, batch: int = 128):
    img, fused = [], []
    with nx.no_grad():
        for s in range(0, len(idx), batch):
            a, b = model.image_features(ds, idx[s:s + batch])
            img.append(a.data)
            fused.append(b.data)
    return np.concatenate(img), np.concatenate(fused)


def _domain_prompts_nograd(model: TPLModel, feats: np.ndarray, domains: np.ndarray) -> dict[int, np.ndarray]:
    out = {}
    with nx.no_grad():
        for m in np.unique(domains):
            out[int(m)] = model.domain_prompt(Tensor(feats[domains == m])).data
    return out


def score(model: TPLModel, fused_img: np.ndarray, domains: np.ndarray,
          prompts: dict[int, np.ndarray] | None) -> np.ndarray:
    """Tuned-model logits of fused image features against fused domain-agnostic class texts."""
    tau = model.cfg.tau
    if model.generator is None or prompts is None:
        return fused_img @ model.original.text.T / tau
    with nx.no_grad():
        agn, _ = model.text_features({m: Tensor(v) for m, v in prompts.items()})
    logits = np.empty((len(fused_img), model.original.text.shape[0]))
    for m in np.unique(domains):
        rows = domains == m
        logits[rows] = fused_img[rows] @ agn[int(m)].data.T / tau
    return logits


def combine_logits(tuned: np.ndarray, original: np.ndarray | None, space: str = "logit") -> np.ndarray:
    if original is None:
        return tuned
    if space == "logit":
        return 0.5 * (tuned + original)

    def sm(z):
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    return 0.5 * (sm(tuned) + sm(original))


def predict(scores: np.ndarray) -> np.ndarray:
    """Argmax per row; ties go to the lowest class id."""
    return np.argmax(scores, axis=1)


def _val_accuracy(model: TPLModel, ds: DomainDataset, splits: SplitPlan, prompts) -> float:
    idx = splits.val_indices()
    _, fused = _features_nograd(model, ds, idx)
    doms = ds.domains[idx].astype(np.int64)
    tuned = score(model, fused, doms, prompts)
    orig = model.original.logits(ds, idx, model.cfg.tau) if model.cfg.eval_average else None
    pred = predict(combine_logits(tuned, orig, model.cfg.average_space))
    return float(np.mean(pred == ds.labels[idx]))


def _ensemble_weight(t: int, total: int) -> float:
    return math.exp(-0.5 * ((t - 0.6 * total) / (0.2 * total)) ** 2)


def train_tpl(original: OriginalModel, ds: DomainDataset, splits: SplitPlan, cfg: TrainConfig,
              seed: int) -> TrainOutcome:
    """Tune prompts, generator and gates with the backbone frozen."""
    before = original.fingerprint()
    model = TPLModel(original, cfg, seed)
    original.cache(ds)
    params = model.learnable()
    opt = AdamWState(weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([seed, splits.target, 4])
    probe = _probe(splits, ds, cfg.probe_size, seed)
    probe_cls = ds.labels[probe].astype(np.int64)
    probe_dom = ds.domains[probe].astype(np.int64)
    T = cfg.iterations
    sched = ScheduleState(T, cfg.strategy, cfg.theta, cfg.checkpoint_every)
    d_trace, loss_trace, val_trace = [], [], []
    best_val, best_state, selected_t = -1.0, model.state(), 0
    ens_sum, ens_w = None, 0.0
    need_text = model.generator is not None

    def checkpoint(t: int):
        nonlocal best_val, best_state, selected_t, ens_sum, ens_w
        img, _ = _features_nograd(model, ds, probe)
        d = compute_domain_distance(img, probe_cls, probe_dom)
        d_trace.append((t, d))
        if t < T:
            dd = per_domain_distances(img, probe_cls, probe_dom) if cfg.per_domain_weights else None
            sched.checkpoint(t, d, dd)
        prompts = _domain_prompts_nograd(model, img, probe_dom) if need_text else None
        acc = _val_accuracy(model, ds, splits, prompts)
        val_trace.append((t, acc))
        if acc >= best_val:
            best_val, best_state, selected_t = acc, model.state(), t
        if cfg.prompt_ensemble:
            w = _ensemble_weight(t, T)
            st = model.state()
            ens_sum = {k: w * v for k, v in st.items()} if ens_sum is None else \
                {k: ens_sum[k] + w * v for k, v in st.items()}
            ens_w += w

    for t in range(T):
        if sched.is_checkpoint(t):
            checkpoint(t)
        w_v, w_s = sched.current(t)
        idx = _balanced_batch(rng, splits, cfg.batch_size)
        labels = ds.labels[idx].astype(np.int64)
        doms = ds.domains[idx].astype(np.int64)
        img, fused = model.image_features(ds, idx)
        if need_text:
            vm = {int(m): model.domain_prompt(img[np.flatnonzero(doms == m)]) for m in np.unique(doms)}
            agn, spec = model.text_features(vm)
        else:
            agn, spec = Tensor(original.text), {}
        batch = LossBatch(fused, doms, labels, agn, spec, tau=cfg.tau)
        if cfg.per_domain_weights and sched.domain_weights and need_text:
            lv = loss_lv(batch, reduction="none")
            ls = loss_ls(batch, reduction="none")
            loss = per_sample_total(lv, ls, doms, sched.domain_weights)
            lv_v, ls_v = float(lv.data.mean()), float(ls.data.mean())
        else:
            lv = loss_lv(batch, reduction="mean")
            if need_text and w_s > 0:
                ls = loss_ls(batch, reduction="mean")
                loss = total_loss(lv, ls, (w_v, w_s))
                ls_v = ls.item()
            else:
                # no language branch, or w_S == 0 so w_V == 1
                loss, ls_v = lv, float("nan")
            lv_v = lv.item()
        if not math.isfinite(loss.item()):
            raise TrainingDiverged("train_tpl", t, (w_v, w_s))
        loss_trace.append((t, loss.item(), lv_v, ls_v))
        nx.zero_grad(params)
        if loss.requires_grad:
            nx.backward(loss)
            live = [p for p in params if p.grad is not None]
            if live:
                adamw_step(live, opt, cosine_lr(t, T, cfg.lr, cfg.lr_floor))
    checkpoint(T)

    if cfg.prompt_ensemble and ens_sum is not None:
        model.load_state({k: v / ens_w for k, v in ens_sum.items()})
        selected_t = -1
    else:
        model.load_state(best_state)
    if original.fingerprint() != before:
        raise RuntimeError("backbone parameters changed during prompt tuning")
    prompts = {}
    if need_text:
        train = splits.train_indices()
        img, _ = _features_nograd(model, ds, train)
        prompts = _domain_prompts_nograd(model, img, ds.domains[train].astype(np.int64))
    return TrainOutcome(model, sched, d_trace, loss_trace, val_trace, selected_t, best_val, prompts)


def target_prompt(prompts: dict[int, np.ndarray]) -> np.ndarray | None:
    """Prompt for an unseen domain: the mean of the source-domain prompts."""
    if not prompts:
        return None
    return np.mean([prompts[m] for m in sorted(prompts)], axis=0)


@dataclass
class Evaluation:
    accuracy: float
    predictions: np.ndarray
    features: np.ndarray


def evaluate(model: TPLModel | None, original: OriginalModel, ds: DomainDataset, target: int,
             cfg: TrainConfig, prompts: dict[int, np.ndarray] | None = None) -> Evaluation:
    """Accuracy on every image of domain ``target``.

    ``model=None`` evaluates the original model alone (the zero-shot row).
    """
    idx = np.flatnonzero(ds.domains == target)
    orig_logits = original.logits(ds, idx, cfg.tau)
    if model is None:
        scores, feats = orig_logits, original.image_features(ds, idx)
    else:
        _, feats = _features_nograd(model, ds, idx)
        tp = target_prompt(prompts or {})
        tuned = score(model, feats, np.full(len(idx), target),
                      None if tp is None else {target: tp})
        scores = combine_logits(tuned, orig_logits if cfg.eval_average else None, cfg.average_space)
    pred = predict(scores)
    return Evaluation(float(np.mean(pred == ds.labels[idx])), pred, feats)


# -- protocol ---------------------------------------------------------------
@dataclass
class SingleRun:
    target: int
    seed: int
    accuracy: float
    zero_shot: float
    best_val: float
    selected_t: int
    history: list
    d_trace: list
    val_trace: list
    separability: dict
    invariance: dict

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RunResult:
    arm: str
    runs: list[SingleRun]

    def per_target(self) -> dict[int, tuple[float, float | None]]:
        out = {}
        for t in sorted({r.target for r in self.runs}):
            accs = [r.accuracy for r in self.runs if r.target == t]
            std = float(np.std(accs, ddof=1)) if len(accs) >= 2 else None
            out[t] = (float(np.mean(accs)), std)
        return out

    def grand_average(self) -> float:
        return float(np.mean([m for m, _ in self.per_target().values()]))

    def to_dict(self) -> dict:
        return {
            "arm": self.arm,
            "per_target": {str(t): {"mean": m, "std": s} for t, (m, s) in self.per_target().items()},
            "grand_average": self.grand_average(),
            "runs": [r.to_dict() for r in self.runs],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["arm", "target", "seed", "accuracy", "zero_shot", "best_val", "selected_t"])
        for r in self.runs:
            w.writerow([self.arm, r.target, r.seed, repr(r.accuracy), repr(r.zero_shot), repr(r.best_val),
                        r.selected_t])
        return buf.getvalue()

    def table_row(self) -> str:
        """One Table-1 style line: per-target mean +- std, then the average."""
        cells = []
        for t, (m, s) in self.per_target().items():
            cells.append(f"{100 * m:.1f}" + (f" ± {100 * s:.1f}" if s is not None else ""))
        return f"{self.arm} | " + " | ".join(cells) + f" | {100 * self.grand_average():.1f}"


def feature_metrics(features: np.ndarray, classes: np.ndarray, domains: np.ndarray) -> tuple[dict, dict]:
    """(class separability per domain, domain invariance distance per class)."""
    sep = grouped_pair_distances(features, domains, classes)
    inv = grouped_pair_distances(features, classes, domains)
    return {str(k): v for k, v in sep.items()}, {str(k): v for k, v in inv.items()}


def run_single(original: OriginalModel, ds: DomainDataset, splits: SplitPlan, cfg: TrainConfig,
               seed: int, zero_shot: float | None = None) -> tuple[SingleRun, TrainOutcome, Evaluation]:
    """Train one (target, seed) run and keep the tuned model and its target evaluation."""
    if zero_shot is None:
        zero_shot = evaluate(None, original, ds, splits.target, cfg).accuracy
    out = train_tpl(original, ds, splits, cfg, seed)
    ev = evaluate(out.model, original, ds, splits.target, cfg, out.domain_prompts)
    val_idx = splits.val_indices()
    _, val_feats = _features_nograd(out.model, ds, val_idx)
    feats = np.concatenate([val_feats, ev.features])
    tgt_idx = np.flatnonzero(ds.domains == splits.target)
    all_idx = np.concatenate([val_idx, tgt_idx])
    sep, inv = feature_metrics(feats, ds.labels[all_idx], ds.domains[all_idx])
    run = SingleRun(splits.target, seed, ev.accuracy, zero_shot, out.best_val, out.selected_t,
                    [list(r) for r in out.schedule.history], [list(r) for r in out.d_trace],
                    [list(r) for r in out.val_trace], sep, inv)
    return run, out, ev


def single_run(original: OriginalModel, ds: DomainDataset, splits: SplitPlan, cfg: TrainConfig,
               seed: int, zero_shot: float | None = None) -> SingleRun:
    return run_single(original, ds, splits, cfg, seed, zero_shot)[0]


def zero_shot_run(original: OriginalModel, ds: DomainDataset, splits: SplitPlan, cfg: TrainConfig,
                  seed: int) -> SingleRun:
    ev = evaluate(None, original, ds, splits.target, cfg)
    val_idx = splits.val_indices()
    tgt_idx = np.flatnonzero(ds.domains == splits.target)
    feats = np.concatenate([original.image_features(ds, val_idx), ev.features])
    all_idx = np.concatenate([val_idx, tgt_idx])
    sep, inv = feature_metrics(feats, ds.labels[all_idx], ds.domains[all_idx])
    return SingleRun(splits.target, seed, ev.accuracy, ev.accuracy, float("nan"), 0, [], [], [], sep, inv)


class BackboneCache:
    """One frozen backbone per held-out target, shared across seeds and arms."""

    def __init__(self, ds: DomainDataset, cfg: TrainConfig):
        self.ds, self.cfg = ds, cfg
        self._models: dict[int, OriginalModel] = {}

    def splits(self, target: int) -> SplitPlan:
        return make_splits(self.ds, target, self.cfg.val_fraction, self.cfg.split_seed)

    def get(self, target: int) -> OriginalModel:
        if target not in self._models:
            backbone = pretrain_backbone(self.ds, self.splits(target), self.cfg)
            self._models[target] = OriginalModel(backbone, self.ds)
        return self._models[target]


def run_protocol(ds: DomainDataset, cfg: TrainConfig, targets: Sequence[int] | None = None,
                 arm: str | None = None, cache: BackboneCache | None = None) -> RunResult:
    """Leave-one-domain-out over ``targets`` (default: every domain) and ``cfg.seeds``."""
    cache = cache or BackboneCache(ds, cfg)
    targets = list(range(ds.n_domains)) if targets is None else list(targets)
    runs = []
    for target in targets:
        original = cache.get(target)
        splits = cache.splits(target)
        zs = evaluate(None, original, ds, target, cfg).accuracy
        for seed in cfg.seeds:
            runs.append(single_run(original, ds, splits, cfg, seed, zs))
            log.info("arm=%s target=%d seed=%d acc=%.4f", arm or cfg.strategy, target, seed, runs[-1].accuracy)
    return RunResult(arm or cfg.strategy, runs)


# -- persistence ------------------------------------------------------------
def save_backbone(path, backbone: DualEncoder, meta: dict | None = None):
    meta = dict(meta or {})
    meta["model"] = backbone.cfg.to_dict()
    meta["fingerprint"] = backbone.fingerprint()
    return save_parameters(path, {k: p.data for k, p in backbone.named_parameters().items()}, meta)


def load_backbone(path) -> tuple[DualEncoder, dict]:
    params, meta = load_parameters(path)
    try:
        model = DualEncoder(ModelConfig(**meta["model"]))
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"checkpoint manifest lacks a valid model config ({e})") from None
    named = model.named_parameters()
    if set(named) != set(params):
        raise CheckpointError("checkpoint parameter names do not match the model")
    for k, p in named.items():
        if p.data.shape != params[k].shape:
            raise CheckpointError(f"{k}: shape {params[k].shape}, expected {p.data.shape}")
        p.data[...] = params[k]
    model.set_trainable(False)
    if meta.get("fingerprint") not in (None, model.fingerprint()):
        raise CheckpointError("backbone fingerprint mismatch after loading")
    return model, meta


def save_tuned(path, model: TPLModel, domain_prompts: dict[int, np.ndarray], meta: dict | None = None):
    params = dict(model.state())
    params.update({f"domain_prompt.{m}": v for m, v in sorted(domain_prompts.items())})
    meta = dict(meta or {})
    meta["config"] = model.cfg.to_dict()
    meta["backbone_fingerprint"] = model.original.fingerprint()
    return save_parameters(path, params, meta)


def load_tuned(path, original: OriginalModel) -> tuple[TPLModel, dict[int, np.ndarray], dict]:
    params, meta = load_parameters(path)
    if meta.get("backbone_fingerprint") != original.fingerprint():
        raise CheckpointError("tuned model was trained on a different backbone")
    cfg = TrainConfig.from_dict(meta["config"])
    model = TPLModel(original, cfg, int(meta.get("seed", 0)))
    prompts = {int(k.split(".", 1)[1]): v for k, v in params.items() if k.startswith("domain_prompt.")}
    try:
        model.load_state({k: v for k, v in params.items() if not k.startswith("domain_prompt.")})
    except KeyError as e:
        raise CheckpointError(f"tuned checkpoint lacks parameter {e}") from None
    return model, prompts, meta
