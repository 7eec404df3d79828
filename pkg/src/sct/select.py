"""Class-aware channel importance, top-K selection and channel erasing."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    FormatError,
    VersionMismatchError,
)
from .rng import Rng
from .tensor import Tensor
from .vit import TapPoint, VisionTransformer, site_of

SELECTION_VERSION = 1


class ScoringMode(enum.Enum):
    CLASS_AWARE = "class-aware"
    GLOBAL = "global"


class Strategy(enum.Enum):
    SALIENT = "salient"
    INCONSPICUOUS = "inconspicuous"
    RANDOM = "random"


@dataclass(frozen=True)
class ClassPartition:
    """Sample indices grouped by class; every class must be non-empty."""

    groups: tuple[np.ndarray, ...]

    @classmethod
    def from_labels(cls, labels, num_classes: int | None = None) -> "ClassPartition":
        y = np.asarray(labels, dtype=np.int64).reshape(-1)
        if y.size and y.min() < 0:
            raise ContractError("labels must be non-negative")
        m = int(y.max()) + 1 if num_classes is None else int(num_classes)
        if y.size and y.max() >= m:
            raise ContractError(f"label {int(y.max())} out of range for {m} classes")
        groups = tuple(np.flatnonzero(y == c) for c in range(m))
        missing = [c for c, g in enumerate(groups) if g.size == 0]
        if missing:
            raise ContractError(f"classes {missing} have no samples")
        return cls(groups)

    @property
    def num_classes(self) -> int:
        return len(self.groups)

    @property
    def sizes(self) -> list[int]:
        return [int(g.size) for g in self.groups]

    @property
    def num_samples(self) -> int:
        return sum(self.sizes)

    def labels(self) -> np.ndarray:
        y = np.empty(self.num_samples, dtype=np.int64)
        for c, g in enumerate(self.groups):
            y[g] = c
        return y


def class_score(features: Tensor) -> Tensor:
    """Per-channel L2 norm of one class's features [B_m, N, D] over samples and tokens."""
    features = T.as_tensor(features)
    if features.ndim != 3:
        raise DimensionError(f"class features must be [B, N, D], got {list(features.shape)}")
    if features.shape[0] < 1:
        raise ContractError("class_score needs at least one sample")
    return T.reduce_l2_over_all_but_channel(features)


class ScoreAccumulator:
    """Streaming per-layer, per-class sums of squares (float64).

    Batch boundaries do not affect the result beyond float64 rounding, so the
    dataset can be fed in any batching.
    """

    def __init__(self, layers: Sequence[int], num_classes: int, width: int):
        self.layers = list(layers)
        self.num_classes = num_classes
        self.width = width
        self.sumsq = {l: np.zeros((num_classes, width), dtype=np.float64) for l in self.layers}
        self.counts = np.zeros(num_classes, dtype=np.int64)

    def update(self, layer: int, features, labels) -> None:
        f = np.asarray(features.data if isinstance(features, Tensor) else features)
        y = np.asarray(labels, dtype=np.int64).reshape(-1)
        if f.ndim != 3 or f.shape[0] != y.size or f.shape[2] != self.width:
            raise DimensionError(f"features {list(f.shape)} do not match {y.size} labels and width {self.width}")
        sq = np.einsum("bnd,bnd->bd", f.astype(np.float64), f.astype(np.float64))
        np.add.at(self.sumsq[layer], y, sq)

    def count(self, labels) -> None:
        np.add.at(self.counts, np.asarray(labels, dtype=np.int64).reshape(-1), 1)

    def class_scores(self, layer: int) -> np.ndarray:
        """[M, D] matrix of per-class channel norms."""
        return np.sqrt(self.sumsq[layer]).astype(np.float32)

    def scores(self, mode: ScoringMode) -> "ImportanceScores":
        if np.any(self.counts == 0):
            raise ContractError(f"classes {np.flatnonzero(self.counts == 0).tolist()} have no samples")
        out = {}
        for l in self.layers:
            if mode is ScoringMode.CLASS_AWARE:
                # fixed class-index order for the average
                z = np.zeros(self.width, dtype=np.float64)
                for m in range(self.num_classes):
                    z += np.sqrt(self.sumsq[l][m])
                z /= self.num_classes
            else:
                z = np.sqrt(self.sumsq[l].sum(axis=0))
            out[l] = z.astype(np.float32)
        return ImportanceScores(out, mode)


@dataclass
class ImportanceScores:
    per_layer: dict[int, np.ndarray]
    mode: ScoringMode = ScoringMode.CLASS_AWARE

    @property
    def layers(self) -> list[int]:
        return sorted(self.per_layer)

    @property
    def width(self) -> int:
        return next(iter(self.per_layer.values())).size

    def __getitem__(self, layer: int) -> np.ndarray:
        return self.per_layer[layer]


def importance_scores(
    features: Mapping[int, object],
    partition: ClassPartition,
    mode: ScoringMode = ScoringMode.CLASS_AWARE,
) -> ImportanceScores:
    """Z^l for every layer in ``features`` (layer -> [S, N, D] over the whole dataset).

    CLASS_AWARE averages the per-class channel norms over classes; GLOBAL takes
    the channel norm over all samples as one group.
    """
    layers = sorted(features)
    if not layers:
        raise ContractError("no tapped features given")
    first = features[layers[0]]
    first = first.data if isinstance(first, Tensor) else np.asarray(first)
    acc = ScoreAccumulator(layers, partition.num_classes, first.shape[-1])
    labels = partition.labels()
    for l in layers:
        f = features[l]
        f = f.data if isinstance(f, Tensor) else np.asarray(f)
        if f.shape[0] != partition.num_samples:
            raise ContractError(
                f"layer {l}: {f.shape[0]} feature rows but the partition covers {partition.num_samples} samples"
            )
        acc.update(l, f, labels)
    acc.count(labels)
    return acc.scores(mode)


def collect_importance(
    vit: VisionTransformer,
    images: np.ndarray,
    labels: np.ndarray,
    num_classes: int | None = None,
    point: TapPoint = TapPoint.AFTER_ATTN_RESIDUAL,
    batch_size: int = 64,
) -> ScoreAccumulator:
    """One frozen forward pass over the data, accumulating class-wise channel energy at each layer."""
    partition = ClassPartition.from_labels(labels, num_classes)
    cfg = vit.cfg
    layers = list(range(1, cfg.num_layers + 1))
    sites = {site_of(l, point, cfg.num_layers): l for l in layers}
    acc = ScoreAccumulator(layers, partition.num_classes, cfg.embed_dim)
    y = np.asarray(labels, dtype=np.int64)
    last = max(sites) + 1
    for s in range(0, len(y), batch_size):
        taps = dict.fromkeys(sites)
        vit.run(vit.embed(images[s : s + batch_size]), 0, last, taps=taps)
        for site, l in sites.items():
            acc.update(l, taps[site], y[s : s + batch_size])
    acc.count(y)
    return acc


def _k_list(k, layers: Sequence[int], width: int) -> dict[int, int]:
    if isinstance(k, Mapping):
        ks = {l: int(k[l]) for l in layers}
    elif np.ndim(k) == 0:
        ks = {l: int(k) for l in layers}
    else:
        k = list(k)
        if len(k) != len(layers):
            raise ConfigError(f"per-layer K list has {len(k)} entries for {len(layers)} layers")
        ks = {l: int(v) for l, v in zip(layers, k)}
    for l, v in ks.items():
        if not 1 <= v <= width:
            raise ConfigError(f"K={v} at layer {l} must lie in [1, {width}]")
    return ks


def top_k(scores: np.ndarray, k: int, largest: bool = True) -> np.ndarray:
    """Indices of the k largest (or smallest) scores, ties to the lower index, sorted ascending."""
    z = np.asarray(scores, dtype=np.float64)
    idx = np.arange(z.size)
    order = np.lexsort((idx, -z if largest else z))
    return np.sort(order[:k])


@dataclass
class ChannelSelection:
    indices: dict[int, np.ndarray]
    strategy: Strategy = Strategy.SALIENT
    mode: ScoringMode = ScoringMode.CLASS_AWARE
    seed: int | None = None
    scores: dict[int, np.ndarray] = field(default_factory=dict)
    model_fingerprint: str = ""

    @property
    def layers(self) -> list[int]:
        return sorted(self.indices)

    @property
    def k(self) -> dict[int, int]:
        return {l: int(v.size) for l, v in self.indices.items()}

    def __getitem__(self, layer: int) -> np.ndarray:
        return self.indices[layer]

    def validate(self, width: int) -> None:
        for l, idx in self.indices.items():
            T.validate_indices(idx, width, layer=l)

    def to_dict(self) -> dict:
        strategy = self.strategy.value
        if self.strategy is Strategy.RANDOM:
            strategy = f"random:{self.seed}"
        layers = []
        for l in self.layers:
            idx = self.indices[l]
            sc = self.scores.get(l)
            layers.append(
                {
                    "layer": l,
                    "k": int(idx.size),
                    "indices": [int(i) for i in idx],
                    "scores": [float(v) for v in np.asarray(sc, dtype=np.float32)] if sc is not None else [],
                }
            )
        return {
            "version": SELECTION_VERSION,
            "model_fingerprint": self.model_fingerprint,
            "mode": self.mode.value,
            "strategy": strategy,
            "layers": layers,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ChannelSelection":
        try:
            if d["version"] != SELECTION_VERSION:
                raise VersionMismatchError(f"selection version {d['version']} unsupported")
            strategy, seed = d["strategy"], None
            if strategy.startswith("random:"):
                strategy, seed = "random", int(strategy.split(":", 1)[1])
            indices, scores = {}, {}
            for entry in d["layers"]:
                l = int(entry["layer"])
                idx = np.asarray(entry["indices"], dtype=np.int64)
                if idx.size != int(entry["k"]):
                    raise FormatError(f"layer {l}: k={entry['k']} but {idx.size} indices")
                indices[l] = idx
                if entry["scores"]:
                    scores[l] = np.asarray(entry["scores"], dtype=np.float32)
            return cls(
                indices=indices,
                strategy=Strategy(strategy),
                mode=ScoringMode(d["mode"]),
                seed=seed,
                scores=scores,
                model_fingerprint=d["model_fingerprint"],
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"malformed selection document: {exc}") from exc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"


def select_channels(
    scores: ImportanceScores,
    k,
    strategy: Strategy = Strategy.SALIENT,
    rng: Rng | None = None,
) -> ChannelSelection:
    """Per-layer channel indices. ``k`` is an int or one value per scored layer.

    RANDOM draws layers in ascending order from ``rng``.
    """
    layers = scores.layers
    width = scores.width
    ks = _k_list(k, layers, width)
    indices = {}
    seed = None
    if strategy is Strategy.RANDOM:
        if rng is None:
            raise ConfigError("random selection needs an rng")
        seed = rng.seed
    for l in layers:
        if strategy is Strategy.SALIENT:
            idx = top_k(scores[l], ks[l], largest=True)
        elif strategy is Strategy.INCONSPICUOUS:
            idx = top_k(scores[l], ks[l], largest=False)
        else:
            idx = np.sort(rng.sample_without_replacement(width, ks[l]))
        indices[l] = idx.astype(np.int64)
    return ChannelSelection(
        indices=indices,
        strategy=strategy,
        mode=scores.mode,
        seed=seed,
        scores={l: scores[l][indices[l]] for l in layers},
    )


def save_selection(path, selection: ChannelSelection) -> None:
    Path(path).write_text(selection.dumps())


def load_selection(path) -> ChannelSelection:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not a selection document ({exc})") from exc
    return ChannelSelection.from_dict(doc)


# ---------------------------------------------------------------------------
# channel erasing


def erase(x: Tensor, indices) -> Tensor:
    """Zero channels ``indices`` of the last axis."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        return x
    return T.scatter_channels(T.zeros(x.shape[:-1] + (idx.size,)), idx, x)


def erase_hooks(
    indices: Mapping[int, Iterable[int]],
    layers: Iterable[int],
    num_layers: int,
    width: int,
    point: TapPoint = TapPoint.AFTER_ATTN_RESIDUAL,
) -> dict[int, callable]:
    """Site hooks zeroing ``indices[l]`` at the tap point of each layer in ``layers``."""
    hooks = {}
    for l in layers:
        if l not in indices:
            raise ConfigError(f"no channel indices for layer {l}")
        idx = T.validate_indices(np.asarray(list(indices[l]), dtype=np.int64), width, layer=l)
        hooks[site_of(l, point, num_layers)] = lambda x, idx=idx: erase(x, idx)
    return hooks


def random_like(selection: ChannelSelection, width: int, rng: Rng) -> dict[int, np.ndarray]:
    """Random index sets of the same per-layer sizes as ``selection``."""
    return {l: np.sort(rng.sample_without_replacement(width, selection.k[l])) for l in selection.layers}
