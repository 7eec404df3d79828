"""Toy benchmark and channel-erasing diagnostic.

Everything here is derived from one integer seed: the backbone comes from
``derive_seed(seed, 0)``, the synthetic dataset from ``derive_seed(seed, 1)``
and random erasure trial ``t`` from ``derive_seed(seed, 2, t)``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, SyntheticSpec, make_synthetic_dataset
from .finetune import Mode, TrainConfig, baseline, evaluate, train, trainable_count
from .rng import Rng, derive_seed
from .sctm import InjectionPlan, TunedModel, inject
from .select import (
    ChannelSelection,
    ScoringMode,
    Strategy,
    collect_importance,
    erase_hooks,
    random_like,
    select_channels,
)
from .vit import (
    PRESETS,
    VisionTransformer,
    VitConfig,
    init_toy_checkpoint,
    parameter_count,
)

SHIPPED_SEED = 0


def toy_setup(seed: int = SHIPPED_SEED, cfg: VitConfig = PRESETS["toy"], spec: SyntheticSpec = SyntheticSpec()):
    """Seeded frozen backbone plus synthetic dataset; returns (vit, dataset)."""
    vit = VisionTransformer(cfg, init_toy_checkpoint(cfg, Rng(derive_seed(seed, 0))))
    return vit, make_synthetic_dataset(spec, cfg, Rng(derive_seed(seed, 1)))


def select_on_train(vit: VisionTransformer, dataset: Dataset, k, mode=ScoringMode.CLASS_AWARE,
                    strategy=Strategy.SALIENT, rng: Rng | None = None) -> ChannelSelection:
    """Score channels on the train split only, then pick K per layer."""
    dataset.check_classes_present()
    tr = dataset.train()
    acc = collect_importance(vit, tr.images, tr.labels, dataset.num_classes)
    sel = select_channels(acc.scores(mode), k, strategy, rng)
    sel.model_fingerprint = vit.ckpt.fingerprint()
    return sel


# ---------------------------------------------------------------------------
# erasing


@dataclass
class EraseRow:
    layers: str  # "none", "all" or a layer number
    salient_acc: float
    random_mean: float
    random_min: float
    random_max: float

    CSV_HEADER = "layers,salient_acc,random_mean,random_min,random_max"

    def csv(self) -> str:
        return f"{self.layers},{self.salient_acc!r},{self.random_mean!r},{self.random_min!r},{self.random_max!r}"


def erase_table(model: TunedModel, dataset: Dataset, selection: ChannelSelection, per_layer: bool = False,
                trials: int = 10, seed: int = SHIPPED_SEED) -> list[EraseRow]:
    """Accuracy with no erasure, with the selected channels zeroed, and with ``trials`` random sets of equal size.

    The first row ("none") is plain evaluation. Without ``per_layer`` one more row erases every
    layer at once; with it, one row per layer.
    """
    cfg = model.cfg
    d, n = cfg.embed_dim, cfg.num_layers
    selection.validate(d)
    plain = evaluate(model, dataset)
    rows = [EraseRow("none", plain, plain, plain, plain)]
    randoms = [random_like(selection, d, Rng(derive_seed(seed, 2, t))) for t in range(trials)]
    groups = [[l] for l in selection.layers] if per_layer else [selection.layers]
    for layers in groups:
        salient = evaluate(model, dataset, erase_hooks(selection.indices, layers, n, d))
        accs = np.array([evaluate(model, dataset, erase_hooks(r, layers, n, d)) for r in randoms])
        label = str(layers[0]) if per_layer else "all"
        if trials:
            rows.append(EraseRow(label, salient, float(accs.mean()), float(accs.min()), float(accs.max())))
        else:
            rows.append(EraseRow(label, salient, float("nan"), float("nan"), float("nan")))
    return rows


# ---------------------------------------------------------------------------
# benchmark protocol


@dataclass(frozen=True)
class Protocol:
    """Fixed desk-scale settings for the toy comparison."""

    k: int = 16
    layers: str = "last-6"
    scale: float = 0.05
    sct: TrainConfig = TrainConfig(lr=0.5, weight_decay=1e-4, epochs=45, warmup_epochs=4)
    probe: TrainConfig = TrainConfig(lr=0.1, weight_decay=1e-4, epochs=100, warmup_epochs=10)
    probe_lrs: tuple[float, ...] = (0.01, 0.05, 0.1, 0.5)


@dataclass
class BenchmarkResult:
    probe_val: float
    probe_lr: float
    sct_val: float
    sct_train: float
    probe_train: float
    sct_trainable: int
    backbone_params: int
    seconds: dict = field(default_factory=dict)

    @property
    def margin(self) -> float:
        return self.sct_val - self.probe_val

    @property
    def trainable_fraction(self) -> float:
        return self.sct_trainable / self.backbone_params


def run_toy_benchmark(seed: int = SHIPPED_SEED, protocol: Protocol = Protocol(), log=None) -> BenchmarkResult:
    """Best-of-grid linear probe against one fixed SCT run on the seeded toy task."""
    clock = {}
    t0 = time.perf_counter()
    vit, ds = toy_setup(seed)
    probes = []
    for lr in protocol.probe_lrs:
        res = baseline(Mode.LINEAR_PROBE, vit, ds, replace(protocol.probe, lr=lr, seed=seed))
        probes.append((res.final.val_acc, -lr, res))
    probe_val, neg_lr, probe = max(probes, key=lambda p: (p[0], p[1]))
    clock["probe"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    sel = select_on_train(vit, ds, protocol.k)
    clock["select"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    plan = InjectionPlan.parse(protocol.layers, vit.cfg.num_layers)
    model = inject(vit, sel, plan, protocol.scale, ds.num_classes)
    res = train(model, ds, replace(protocol.sct, scale=protocol.scale, seed=seed), log=log)
    clock["sct"] = time.perf_counter() - t0
    return BenchmarkResult(
        probe_val=probe_val,
        probe_lr=-neg_lr,
        sct_val=res.final.val_acc,
        sct_train=res.final.train_acc,
        probe_train=probe.final.train_acc,
        sct_trainable=trainable_count(model, Mode.SCT),
        backbone_params=parameter_count(vit.cfg, include_head=True),
        seconds=clock,
    )


def run_erasing_diagnostic(seed: int = SHIPPED_SEED, k: int = 16, trials: int = 10,
                           probe: TrainConfig = Protocol().probe):
    """Train a frozen probe, then compare all-layer salient erasure with random erasures on the val split."""
    vit, ds = toy_setup(seed)
    res = baseline(Mode.LINEAR_PROBE, vit, ds, replace(probe, seed=seed))
    sel = select_on_train(vit, ds, k)
    return erase_table(res.model, ds.val(), sel, per_layer=False, trials=trials, seed=seed)
