"""AdamW fine-tuning of SCTM + head, grid search and baselines."""

from __future__ import annotations

import enum
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import ConfigError, NonFiniteError, SctError, TrainingAborted
from .rng import Rng, derive_seed
from .sctm import InjectionPlan, TunedModel, inject
from .select import ChannelSelection
from .tensor import Tape, Tensor
from .vit import VisionTransformer

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

DEFAULT_LRS = (0.1, 0.5, 0.01, 0.05, 0.001, 0.005, 0.0001, 0.0005)
DEFAULT_WDS = (0.1, 0.01, 0.05, 0.001, 0.005, 0.0005, 0.0001)
DEFAULT_SCALES = tuple(round(0.1 * i, 1) for i in range(1, 11))


class Mode(enum.Enum):
    SCT = "sct"
    LINEAR_PROBE = "linear-probe"
    FULL_FT = "full-ft"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    weight_decay: float = 0.0001
    epochs: int = 100
    warmup_epochs: int = 10
    batch_size: int = 64
    scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup epochs {self.warmup_epochs} must be in [0, epochs={self.epochs})")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")


@dataclass(frozen=True)
class GridSpec:
    lrs: tuple[float, ...] = DEFAULT_LRS
    wds: tuple[float, ...] = DEFAULT_WDS
    scales: tuple[float, ...] = DEFAULT_SCALES

    def __post_init__(self):
        for name in ("lrs", "wds", "scales"):
            if not getattr(self, name):
                raise ConfigError(f"grid {name} is empty")

    def cells(self) -> list[tuple[float, float, float]]:
        return [(lr, wd, s) for lr in self.lrs for wd in self.wds for s in self.scales]


# ---------------------------------------------------------------------------
# schedule and optimizer


def lr_at(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup to ``base_lr`` over ``warmup_steps``, then cosine decay to 0 at ``total_steps``.

    Warmup: base * (t + 1) / warmup_steps for t < warmup_steps.
    Decay:  base * 0.5 * (1 + cos(pi * (t - w) / (total - w))).
    """
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(step - warmup_steps, span) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay.

    Per step t (1-based) for each parameter p with gradient g::

        p <- p * (1 - lr * wd)
        m <- b1 m + (1 - b1) g ;  v <- b2 v + (1 - b2) g^2
        p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)

    State and the update are computed in float64; parameters are stored as float32.
    """

    def __init__(self, weight_decay: float = 0.0, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, g in grads.items():
            g = np.asarray(g.data if isinstance(g, Tensor) else g, dtype=np.float64)
            p = params[name].astype(np.float64)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p *= 1.0 - lr * self.weight_decay
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[name] = p.astype(np.float32)


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_acc: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class TrainResult:
    model: TunedModel
    metrics: list[EpochMetrics] = field(default_factory=list)
    mode: Mode = Mode.SCT
    backbone: dict[str, np.ndarray] | None = None  # FULL_FT only: tuned backbone tensors

    @property
    def final(self) -> EpochMetrics:
        return self.metrics[-1]


def argmax_lowest(logits: np.ndarray) -> np.ndarray:
    """Row argmax; ties resolve to the lower class index (numpy's first-occurrence rule)."""
    return np.argmax(logits, axis=1)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(argmax_lowest(logits) == np.asarray(labels)))


class _Runner:
    """Forward plumbing for one training mode, with frozen-prefix caching where possible."""

    def __init__(self, model: TunedModel, mode: Mode):
        self.model = model
        self.mode = mode
        if mode is Mode.FULL_FT:
            self.site = None
        elif mode is Mode.LINEAR_PROBE or not model.plan.layers:
            self.site = -1  # cache pooled features
        else:
            self.site = model.first_site()

    def trainable(self) -> list[str]:
        names = list(self.model.params) if self.mode is not Mode.LINEAR_PROBE else self.model.head_names()
        if self.mode is Mode.FULL_FT:
            names = [n for n in self.model.vit.ckpt.names() if n != "head"] + names
        return names

    def cache(self, images: np.ndarray, batch_size: int) -> np.ndarray:
        if self.site is None:
            return images
        out = []
        for s in range(0, len(images), batch_size):
            chunk = images[s : s + batch_size]
            if self.site == -1:
                out.append(self.model.vit.features(chunk).data)
            else:
                out.append(self.model.prefix(chunk, self.site).data)
        return np.concatenate(out, axis=0)

    def logits(self, inputs: np.ndarray, weights=None) -> Tensor:
        m = self.model
        if self.site is None:
            return m.logits(inputs, weights)
        x = Tensor._wrap(np.ascontiguousarray(inputs))
        if self.site == -1:
            return m.head(x, weights)
        return m.logits_from_prefix(x, self.site, weights)


def _batched_logits(runner: _Runner, inputs: np.ndarray, batch_size: int, backbone=None) -> np.ndarray:
    weights = None
    if backbone is not None:
        weights = {n: Tensor._wrap(v) for n, v in backbone.items()}
    return np.concatenate(
        [runner.logits(inputs[s : s + batch_size], weights).data for s in range(0, len(inputs), batch_size)], axis=0
    )


def train(
    model: TunedModel,
    dataset: Dataset,
    cfg: TrainConfig,
    mode: Mode = Mode.SCT,
    log: Callable[[EpochMetrics], None] | None = None,
    on_step: Callable[[int, dict], None] | None = None,
) -> TrainResult:
    """Train the trainable set of ``model`` in place on the train split.

    ``on_step(step, grads)`` sees every step's gradient map (used by the freeze audit).
    Raises TrainingAborted on a non-finite loss or gradient, naming the step.
    """
    runner = _Runner(model, mode)
    names = runner.trainable()
    if not names:
        raise ConfigError("nothing to train")
    params: dict[str, np.ndarray] = {}
    for n in names:
        params[n] = model.params[n] if n in model.params else model.vit.ckpt[n].data.copy()
    tr, va = dataset.train(), dataset.val()
    bs = cfg.batch_size
    x_train = runner.cache(tr.images, bs)
    x_val = runner.cache(va.images, bs) if len(va) else None
    y_train = tr.labels.astype(np.int64)
    n = len(y_train)
    steps_per_epoch = math.ceil(n / bs)
    total = steps_per_epoch * cfg.epochs
    warm = steps_per_epoch * cfg.warmup_epochs
    opt = AdamW(cfg.weight_decay)
    rng = Rng(cfg.seed)
    result = TrainResult(model, mode=mode)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.spawn(epoch).permutation(n)
        loss_sum, correct = 0.0, 0
        for s in range(0, n, bs):
            idx = np.sort(order[s : s + bs])
            lr = lr_at(step, cfg.lr, warm, total)
            try:
                with Tape() as tape:
                    leaves = {k: tape.leaf(k, params[k]) for k in names}
                    logits = runner.logits(x_train[idx], leaves)
                    loss = T.cross_entropy(logits, y_train[idx])
                    value = loss.item()
                    if not math.isfinite(value):
                        raise NonFiniteError(f"loss is {value}")
                    grads = T.grad_of(loss, tape)
            except NonFiniteError as exc:
                raise TrainingAborted(f"non-finite value at step {step} (epoch {epoch}): {exc}") from exc
            if on_step is not None:
                on_step(step, grads)
            opt.step(params, grads, lr)
            for k in names:
                if k in model.params:
                    model.params[k] = params[k]
            loss_sum += value * len(idx)
            correct += int(np.sum(argmax_lowest(logits.data) == y_train[idx]))
            step += 1
        backbone = {k: v for k, v in params.items() if k not in model.params} or None
        val_acc = float("nan")
        if x_val is not None:
            val_acc = accuracy(_batched_logits(runner, x_val, 256, backbone), va.labels)
        rec = EpochMetrics(epoch + 1, lr_at(step - 1, cfg.lr, warm, total), loss_sum / n, correct / n, val_acc)
        result.metrics.append(rec)
        if log is not None:
            log(rec)
    if mode is Mode.FULL_FT:
        result.backbone = {k: v for k, v in params.items() if k not in model.params}
    return result


def predict(model: TunedModel, images: np.ndarray, batch_size: int = 256, extra_hooks=None, backbone=None) -> np.ndarray:
    weights = {n: Tensor._wrap(v) for n, v in backbone.items()} if backbone else None
    out = []
    for s in range(0, len(images), batch_size):
        feats = model.vit.features(images[s : s + batch_size], hooks=model.hooks(weights, extra_hooks), weights=weights)
        out.append(model.head(feats, weights).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.num_classes), np.float32)


def evaluate(model: TunedModel, dataset: Dataset, extra_hooks=None, batch_size: int = 256) -> float:
    """Top-1 accuracy on ``dataset`` (argmax ties go to the lower class index)."""
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate on an empty split")
    return accuracy(predict(model, dataset.images, batch_size, extra_hooks), dataset.labels)


# ---------------------------------------------------------------------------
# grid search


@dataclass
class GridRow:
    lr: float
    wd: float
    scale: float
    val_acc: float
    train_acc: float
    status: str = "ok"

    CSV_HEADER = "lr,wd,scale,val_acc,train_acc,status"

    def csv(self) -> str:
        return f"{self.lr!r},{self.wd!r},{self.scale!r},{self.val_acc!r},{self.train_acc!r},{self.status}"


@dataclass
class GridResult:
    rows: list[GridRow]
    best: GridRow
    best_params: dict[str, np.ndarray] | None = None
    best_metrics: list[EpochMetrics] = field(default_factory=list)

    def to_csv(self) -> str:
        return "\n".join([GridRow.CSV_HEADER] + [r.csv() for r in self.rows]) + "\n"


def _run_cell(args):
    vit, selection, plan, num_classes, dataset, cfg = args
    try:
        model = inject(vit, selection, plan, cfg.scale, num_classes)
        res = train(model, dataset, cfg)
        row = GridRow(cfg.lr, cfg.weight_decay, cfg.scale, res.final.val_acc, res.final.train_acc)
        return row, dict(model.params), res.metrics
    except SctError as exc:
        row = GridRow(cfg.lr, cfg.weight_decay, cfg.scale, float("nan"), float("nan"), f"failed: {exc}".replace(",", ";"))
        return row, None, []


def rank_key(row: GridRow):
    """Higher val accuracy first, then smaller lr, wd, scale. Failed cells sort last."""
    acc = row.val_acc if row.status == "ok" and not math.isnan(row.val_acc) else -math.inf
    return (-acc, row.lr, row.wd, row.scale)


def grid_search(
    vit: VisionTransformer,
    selection: ChannelSelection | None,
    plan: InjectionPlan,
    dataset: Dataset,
    grid: GridSpec,
    base: TrainConfig,
    workers: int = 1,
) -> GridResult:
    """One run per (lr, wd, scale) cell; each cell's seed is derive_seed(base.seed, cell index)."""
    if len(dataset.val()) == 0:
        raise ConfigError("grid search needs a non-empty validation split")
    jobs = []
    for i, (lr, wd, s) in enumerate(grid.cells()):
        cfg = replace(base, lr=lr, weight_decay=wd, scale=s, seed=derive_seed(base.seed, i))
        jobs.append((vit, selection, plan, dataset.num_classes, dataset, cfg))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]
    rows = [r[0] for r in results]
    best_i = min(range(len(rows)), key=lambda i: rank_key(rows[i]))
    return GridResult(rows, rows[best_i], results[best_i][1], results[best_i][2])


def baseline(
    mode: Mode,
    vit: VisionTransformer,
    dataset: Dataset,
    cfg: TrainConfig,
    log: Callable[[EpochMetrics], None] | None = None,
    on_step: Callable[[int, dict], None] | None = None,
) -> TrainResult:
    """LINEAR_PROBE trains a zero-initialised head only; FULL_FT trains every backbone tensor plus the head."""
    if mode is Mode.SCT:
        raise ConfigError("baseline mode must be LINEAR_PROBE or FULL_FT")
    model = inject(vit, None, InjectionPlan(), cfg.scale, dataset.num_classes)
    return train(model, dataset, cfg, mode, log, on_step)


def trainable_count(model: TunedModel, mode: Mode) -> int:
    names = _Runner(model, mode).trainable()
    return sum(int(model.params[n].size) if n in model.params else model.vit.ckpt[n].size for n in names)
