"""Multi-objective training: composite loss, per-group Adam, plateau scheduling."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import ops
from .data import DatasetManifest, StratificationError, materialize, standardize, stratified_split
from .features import FIT_CAP, extract_features, fit_normalizer_from_features, normalize, to_grayscale
from .model import SurformerModel
from .tensor import ConfigError, NumericError, Parameter, Tape, Tensor, get_default_dtype, make_rng

log = logging.getLogger(__name__)

LOG_COLUMNS = (
    "epoch", "total", "main", "aux_v", "aux_t",
    "acc_fused", "acc_v", "acc_t",
    "alpha_v", "alpha_t",
    "lr_v", "lr_t", "lr_f",
)


@dataclass
class TrainConfig:
    lr_vision: float = 5e-7
    lr_tactile: float = 1.5e-4
    lr_fusion: float = 5e-7
    aux_weight: float = 0.3
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    factor: float = 0.5
    min_lr: float = 1e-9
    threshold: float = 1e-8
    monitor: str = "val_acc"  # or "val_loss"
    val_fraction: float = 0.1
    normalizer_cap: int = FIT_CAP
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if not 0.0 < self.factor < 1.0:
            raise ConfigError(f"factor must lie in (0, 1), got {self.factor}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.aux_weight < 0:
            raise ConfigError(f"aux_weight must be non-negative, got {self.aux_weight}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.monitor not in ("val_acc", "val_loss"):
            raise ConfigError(f"monitor must be 'val_acc' or 'val_loss', got {self.monitor!r}")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ConfigError("batch_size must be >= 1 and max_epochs >= 0")
        if min(self.lr_vision, self.lr_tactile, self.lr_fusion, self.min_lr) < 0:
            raise ConfigError("learning rates must be non-negative")

    @property
    def mode(self) -> str:
        return "max" if self.monitor == "val_acc" else "min"

    def group_lrs(self) -> dict[str, float]:
        return {"vision": self.lr_vision, "tactile": self.lr_tactile, "fusion": self.lr_fusion}


# ---------------------------------------------------------------------------
# loss


def composite_loss(z_fused, z_v, z_t, targets, aux_weight: float = 0.3):
    """total = CE(fused) + w * CE(vision) + w * CE(tactile); returns (total, main, aux_v, aux_t)."""
    if aux_weight < 0:
        raise ConfigError(f"aux_weight must be non-negative, got {aux_weight}")
    main = ops.cross_entropy(z_fused, targets)
    aux_v = ops.cross_entropy(z_v, targets)
    aux_t = ops.cross_entropy(z_t, targets)
    total = main + ops.scale(aux_v, aux_weight) + ops.scale(aux_t, aux_weight)
    return total, main, aux_v, aux_t


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class ParamGroup:
    name: str
    params: list[Parameter]
    lr: float


def make_param_groups(model: SurformerModel, cfg: TrainConfig | None = None) -> list[ParamGroup]:
    """One group per branch plus fusion; frozen parameters belong to no group."""
    cfg = cfg or TrainConfig()
    lrs = cfg.group_lrs()
    groups = [
        ParamGroup(name, [p for p in params if p.trainable], lrs[name])
        for name, params in model.groups().items()
    ]
    seen: dict[int, str] = {}
    for g in groups:
        for p in g.params:
            if id(p) in seen:
                raise RuntimeError(f"parameter {p.name} is in groups {seen[id(p)]!r} and {g.name!r}")
            seen[id(p)] = g.name
    for name, p in model.named_parameters():
        if p.trainable and id(p) not in seen:
            raise RuntimeError(f"trainable parameter {name} is in no optimizer group")
    return groups


class Adam:
    """Adam over named parameter groups; parameters with ``trainable=False`` are never touched."""

    def __init__(self, groups: list[ParamGroup], betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = groups
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = {id(p): np.zeros_like(p.data) for g in groups for p in g.params}
        self._v = {id(p): np.zeros_like(p.data) for g in groups for p in g.params}

    def zero_grad(self) -> None:
        for g in self.groups:
            for p in g.params:
                p.zero_grad()

    def lrs(self) -> dict[str, float]:
        return {g.name: g.lr for g in self.groups}

    def set_lrs(self, lrs: dict[str, float]) -> None:
        for g in self.groups:
            g.lr = lrs[g.name]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for g in self.groups:
            for p in g.params:
                if not p.trainable or p.grad is None:
                    continue
                m, v = self._m[id(p)], self._v[id(p)]
                m *= self.b1
                m += (1.0 - self.b1) * p.grad
                v *= self.b2
                v += (1.0 - self.b2) * (p.grad * p.grad)
                if g.lr == 0.0:
                    continue
                step = (g.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
                p.data -= step.astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# scheduler


@dataclass
class SchedulerState:
    best_metric: float
    epochs_since_improvement: int
    current_lrs: dict[str, float]
    reductions: int = 0


def init_scheduler(cfg: TrainConfig) -> SchedulerState:
    best = -math.inf if cfg.mode == "max" else math.inf
    return SchedulerState(best, 0, cfg.group_lrs())


def plateau_step(state: SchedulerState, metric: float, cfg: TrainConfig) -> SchedulerState:
    """Reduce every group lr by ``factor`` once the metric has not improved for more than ``patience`` epochs."""
    if not math.isfinite(metric):
        raise NumericError(f"scheduler metric is not finite: {metric}")
    if cfg.mode == "max":
        improved = metric > state.best_metric + cfg.threshold
    else:
        improved = metric < state.best_metric - cfg.threshold
    if improved:
        return replace(state, best_metric=metric, epochs_since_improvement=0, current_lrs=dict(state.current_lrs))
    bad = state.epochs_since_improvement + 1
    lrs = dict(state.current_lrs)
    reductions = state.reductions
    if bad > cfg.patience:
        # floor at min_lr, but never raise a rate that already sits below it
        lrs = {k: min(v, max(v * cfg.factor, cfg.min_lr)) for k, v in lrs.items()}
        bad = 0
        reductions += 1
    return replace(state, epochs_since_improvement=bad, current_lrs=lrs, reductions=reductions)


# ---------------------------------------------------------------------------
# logging


@dataclass
class EpochRecord:
    epoch: int
    total: float
    main: float
    aux_v: float
    aux_t: float
    acc_fused: float
    acc_v: float
    acc_t: float
    alpha_v: float
    alpha_t: float
    lr_v: float
    lr_t: float
    lr_f: float


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    # (total, main, aux_v, aux_t) of every optimizer step
    steps: list[tuple[float, float, float, float]] = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.epochs:
            w.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in LOG_COLUMNS[1:]])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "columns": list(LOG_COLUMNS),
            "epochs": [asdict(r) for r in self.epochs],
            "best_epoch": self.best_epoch,
            "best_val_acc": self.best_val_acc,
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# data plumbing


@dataclass
class PreparedSet:
    images: np.ndarray  # uint8 [N, 3, S, S]
    raw_features: np.ndarray  # float64 [N, 7]
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def prepare(manifest: DatasetManifest, image_size: int) -> PreparedSet:
    """Decode images and compute raw tactile descriptors once."""
    vision, tactile, labels = materialize(manifest, image_size)
    raw = np.stack([extract_features(to_grayscale(t.astype(np.float64) / 255.0)) for t in tactile])
    return PreparedSet(vision, raw, labels)


def _inputs(model: SurformerModel, data: PreparedSet, idx: np.ndarray):
    dtype = get_default_dtype()
    images = standardize(data.images[idx], dtype=dtype)
    feats = normalize(data.raw_features[idx], model.normalizer).astype(dtype)
    return images, feats


def predict_prepared(model: SurformerModel, data: PreparedSet, batch_size: int = 32) -> dict[str, np.ndarray]:
    """Eval-mode logits of all three heads plus fused probabilities for a prepared set."""
    was_training = model.training
    model.eval()
    out = {"vision": [], "tactile": [], "fused": [], "probabilities": []}
    try:
        for start in range(0, len(data), batch_size):
            idx = np.arange(start, min(start + batch_size, len(data)))
            images, feats = _inputs(model, data, idx)
            o = model(images, feats)
            out["vision"].append(o.vision_logits.data)
            out["tactile"].append(o.tactile_logits.data)
            out["fused"].append(o.fused_logits.data)
            out["probabilities"].append(o.probabilities)
    finally:
        model.train(was_training)
    n_classes = model.n_classes
    return {k: np.concatenate(v) if v else np.zeros((0, n_classes)) for k, v in out.items()}


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == labels).mean()) if len(labels) else float("nan")


def fit(
    model: SurformerModel,
    train_set: DatasetManifest,
    cfg: TrainConfig | None = None,
) -> tuple[SurformerModel, TrainLog]:
    """Train with the composite objective and return the best-validation-accuracy state.

    Epochs tied on validation accuracy are ranked by validation loss.
    """
    cfg = cfg or TrainConfig()
    if len(train_set) == 0:
        raise ConfigError("training set is empty")
    ss_split, ss_shuffle, ss_dropout = np.random.SeedSequence(cfg.seed).spawn(3)

    counts = train_set.class_counts()
    if (counts == 0).any():
        empty = [train_set.classes[i] for i in np.flatnonzero(counts == 0)]
        raise StratificationError(f"classes without training samples: {empty}")
    split_seed = int(ss_split.generate_state(1)[0])
    sub, val = stratified_split(train_set, 1.0 - cfg.val_fraction, seed=split_seed)
    train_data = prepare(sub, model.vision_cfg.input_size)
    val_data = prepare(val, model.vision_cfg.input_size)

    if model.normalizer is None:
        model.normalizer = fit_normalizer_from_features(
            train_data.raw_features, cap=cfg.normalizer_cap, seed=cfg.seed
        )

    groups = make_param_groups(model, cfg)
    opt = Adam(groups, cfg.betas, cfg.adam_eps)
    sched = init_scheduler(cfg)
    shuffle_rng = make_rng(ss_shuffle)
    dropout_rng = make_rng(ss_dropout)
    trainlog = TrainLog()
    best_state = model.state_dict()
    best_acc, best_loss = -math.inf, math.inf
    n = len(train_data)

    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        lrs_used = opt.lrs()
        sums = np.zeros(4)
        order = shuffle_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            images, feats = _inputs(model, train_data, idx)
            y = train_data.labels[idx]
            opt.zero_grad()
            with Tape(skip_frozen=True) as tape:
                out = model(images, feats, dropout_rng)
                total, main, aux_v, aux_t = composite_loss(
                    out.fused_logits, out.vision_logits, out.tactile_logits, y, cfg.aux_weight
                )
            values = (total.item(), main.item(), aux_v.item(), aux_t.item())
            if not all(math.isfinite(v) for v in values):
                raise NumericError(f"non-finite loss at epoch {epoch}: {values}")
            tape.backward(total)
            opt.step()
            trainlog.steps.append(values)
            sums += np.array(values) * len(idx)

        preds = predict_prepared(model, val_data, cfg.batch_size)
        acc_f = _accuracy(preds["fused"], val_data.labels)
        acc_v = _accuracy(preds["vision"], val_data.labels)
        acc_t = _accuracy(preds["tactile"], val_data.labels)
        val_loss = ops.cross_entropy(Tensor._wrap(preds["fused"]), val_data.labels).item()
        metric = acc_f if cfg.monitor == "val_acc" else val_loss
        alpha_v, alpha_t = model.fusion.alpha_values()
        means = sums / n
        trainlog.epochs.append(
            EpochRecord(
                epoch, *(float(v) for v in means), acc_f, acc_v, acc_t, alpha_v, alpha_t,
                lrs_used["vision"], lrs_used["tactile"], lrs_used["fusion"],
            )
        )
        log.info(
            "epoch %d loss %.4f val acc fused %.3f vision %.3f tactile %.3f alpha_v %.3f",
            epoch, means[0], acc_f, acc_v, acc_t, alpha_v,
        )
        # ties in accuracy go to the lower validation loss
        if (acc_f, -val_loss) > (best_acc, -best_loss):
            best_acc, best_loss = acc_f, val_loss
            best_state = model.state_dict()
            trainlog.best_epoch = epoch
        sched = plateau_step(sched, metric, cfg)
        opt.set_lrs(sched.current_lrs)

    trainlog.best_val_acc = best_acc if trainlog.epochs else float("nan")
    model.load_state_dict(best_state)
    model.eval()
    return model, trainlog
