"""Salient channel tuning module: injection into the backbone and cost accounting."""

from __future__ import annotations

import enum
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from . import container
from . import tensor as T
from .errors import ConfigError, ContractError, FormatError, MissingTensorError
from .select import ChannelSelection
from .tensor import Tensor
from .vit import TapPoint, VisionTransformer, VitConfig, site_of


class Position(enum.Enum):
    ATTN = "attn"
    MLP = "mlp"
    BOTH = "both"

    def points(self) -> tuple[TapPoint, ...]:
        if self is Position.ATTN:
            return (TapPoint.AFTER_ATTN_RESIDUAL,)
        if self is Position.MLP:
            return (TapPoint.AFTER_MLP_RESIDUAL,)
        return (TapPoint.AFTER_ATTN_RESIDUAL, TapPoint.AFTER_MLP_RESIDUAL)


_POINT_TAG = {TapPoint.AFTER_ATTN_RESIDUAL: "attn", TapPoint.AFTER_MLP_RESIDUAL: "mlp"}
_TAG_POINT = {v: k for k, v in _POINT_TAG.items()}


@dataclass(frozen=True)
class InjectionPlan:
    position: Position = Position.ATTN
    layers: tuple[int, ...] = ()

    @classmethod
    def all_layers(cls, num_layers: int, position: Position = Position.ATTN) -> "InjectionPlan":
        return cls(position, tuple(range(1, num_layers + 1)))

    @classmethod
    def last(cls, num_layers: int, n: int, position: Position = Position.ATTN) -> "InjectionPlan":
        """Only the last ``n`` layers."""
        if not 0 <= n <= num_layers:
            raise ConfigError(f"cannot inject into the last {n} of {num_layers} layers")
        return cls(position, tuple(range(num_layers - n + 1, num_layers + 1)))

    @classmethod
    def parse(cls, spec: str, num_layers: int, position: Position = Position.ATTN) -> "InjectionPlan":
        """``all``, ``none``, ``last-6`` or a comma list such as ``1,2,5``."""
        spec = spec.strip().lower()
        if spec == "all":
            return cls.all_layers(num_layers, position)
        if spec == "none":
            return cls(position, ())
        if spec.startswith("last-"):
            return cls.last(num_layers, int(spec[5:]), position)
        try:
            layers = tuple(sorted({int(v) for v in spec.split(",") if v}))
        except ValueError as exc:
            raise ConfigError(f"bad layer spec {spec!r}") from exc
        return cls(position, layers).checked(num_layers)

    def checked(self, num_layers: int) -> "InjectionPlan":
        bad = [l for l in self.layers if not 1 <= l <= num_layers]
        if bad:
            raise ConfigError(f"injection layers {bad} outside [1, {num_layers}]")
        return self

    def slots(self) -> list[tuple[int, TapPoint]]:
        return [(l, p) for l in sorted(self.layers) for p in self.position.points()]


def param_name(layer: int, point: TapPoint, which: str) -> str:
    return f"sctm.{layer}.{_POINT_TAG[point]}.{which}"


def sctm_forward(x: Tensor, indices, weight: Tensor, bias: Tensor, scale: float, layer: int | None = None) -> Tensor:
    """Transform channels ``indices`` of x [..., D] as g + s * (g @ W + b); other channels pass through."""
    g = T.gather_channels(x, indices, layer=layer)
    branch = T.scale(T.linear(g, weight, bias), scale)
    return T.scatter_channels(T.add(g, branch), indices, x, layer=layer)


class TunedModel:
    """Frozen backbone + SCTM at the planned sites + a task head.

    ``params`` holds every tunable array by name: ``sctm.{layer}.{attn|mlp}.W``
    and ``.b`` for injected sites, and ``head.W`` [D, M], ``head.b`` [M].
    """

    def __init__(
        self,
        vit: VisionTransformer,
        selection: ChannelSelection | None,
        plan: InjectionPlan,
        scale: float,
        num_classes: int,
        params: Mapping[str, np.ndarray] | None = None,
    ):
        cfg = vit.cfg
        plan.checked(cfg.num_layers)
        if plan.layers:
            if selection is None:
                raise ConfigError("an injection plan with layers needs a channel selection")
            missing = [l for l in plan.layers if l not in selection.indices]
            if missing:
                raise ConfigError(f"plan references layers {missing} without a channel selection")
            selection.validate(cfg.embed_dim)
        if num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        self.vit = vit
        self.selection = selection
        self.plan = plan
        self.scale = float(scale)
        self.num_classes = int(num_classes)
        self.params: OrderedDict[str, np.ndarray] = OrderedDict()
        for layer, point in plan.slots():
            k = selection.k[layer]
            self.params[param_name(layer, point, "W")] = np.zeros((k, k), dtype=np.float32)
            self.params[param_name(layer, point, "b")] = np.zeros(k, dtype=np.float32)
        self.params["head.W"] = np.zeros((cfg.embed_dim, num_classes), dtype=np.float32)
        self.params["head.b"] = np.zeros(num_classes, dtype=np.float32)
        if params is not None:
            for name, value in params.items():
                if name not in self.params:
                    raise ContractError(f"unexpected parameter {name!r}")
                value = np.asarray(value, dtype=np.float32)
                if value.shape != self.params[name].shape:
                    raise ContractError(f"parameter {name!r} has shape {value.shape}, expected {self.params[name].shape}")
                self.params[name] = value.copy()

    @property
    def cfg(self) -> VitConfig:
        return self.vit.cfg

    def sctm_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("sctm.")]

    def head_names(self) -> list[str]:
        return ["head.W", "head.b"]

    def _tensor(self, name: str, weights: Mapping[str, Tensor] | None) -> Tensor:
        if weights is not None and name in weights:
            return weights[name]
        return Tensor._wrap(self.params[name])

    def hooks(self, weights: Mapping[str, Tensor] | None = None, extra: Mapping[int, callable] | None = None) -> dict:
        """Site hooks; ``extra`` hooks (e.g. channel erasing) run before the SCTM at the same site."""
        n = self.cfg.num_layers
        hooks: dict[int, callable] = dict(extra or {})
        for layer, point in self.plan.slots():
            site = site_of(layer, point, n)
            idx = self.selection.indices[layer]
            w = self._tensor(param_name(layer, point, "W"), weights)
            b = self._tensor(param_name(layer, point, "b"), weights)

            def sctm(x, idx=idx, w=w, b=b, layer=layer):
                return sctm_forward(x, idx, w, b, self.scale, layer)

            before = hooks.get(site)
            hooks[site] = sctm if before is None else (lambda x, f=before, g=sctm: g(f(x)))
        return hooks

    def first_site(self) -> int | None:
        sites = [site_of(l, p, self.cfg.num_layers) for l, p in self.plan.slots()]
        return min(sites) if sites else None

    def head(self, feats: Tensor, weights=None) -> Tensor:
        return T.linear(feats, self._tensor("head.W", weights), self._tensor("head.b", weights))

    def logits(self, images, weights=None, extra_hooks=None) -> Tensor:
        feats = self.vit.features(images, hooks=self.hooks(weights, extra_hooks), weights=weights)
        return self.head(feats, weights)

    def prefix(self, images, site: int) -> Tensor:
        """Frozen token state right after sub-block ``site`` (before its hook)."""
        return self.vit.run(self.vit.embed(images), 0, site + 1)

    def logits_from_prefix(self, state: Tensor, site: int, weights=None) -> Tensor:
        x = self.vit.run(state, site, hooks=self.hooks(weights), resume=True)
        return self.head(self.vit.pool(x), weights)

    # -- persistence ------------------------------------------------------

    def to_tensors(self, selection_fingerprint: str = "") -> "OrderedDict[str, np.ndarray]":
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        out["meta.base_fingerprint"] = _fp_words(self.vit.ckpt.fingerprint())
        out["meta.selection_fingerprint"] = _fp_words(selection_fingerprint or "0" * 16)
        out["meta.num_layers"] = np.asarray([self.cfg.num_layers], dtype=np.uint32)
        out["scale"] = np.asarray(self.scale, dtype=np.float32)
        for layer in sorted(self.plan.layers):
            out[f"sctm.{layer}.indices"] = self.selection.indices[layer].astype(np.uint32)
        for name, value in self.params.items():
            out[name] = value
        return out


def _fp_words(hexstr: str) -> np.ndarray:
    v = int(hexstr, 16)
    return np.asarray([v >> 32, v & 0xFFFFFFFF], dtype=np.uint32)


def _fp_hex(words: np.ndarray) -> str:
    return f"{(int(words[0]) << 32) | int(words[1]):016x}"


def inject(
    vit: VisionTransformer,
    selection: ChannelSelection | None,
    plan: InjectionPlan,
    scale: float,
    num_classes: int,
    params=None,
) -> TunedModel:
    """Zero-initialised SCTM at every planned site and a zero task head, unless ``params`` are given."""
    return TunedModel(vit, selection, plan, scale, num_classes, params)


def save_tuned(path, model: TunedModel, selection_fingerprint: str = "") -> None:
    container.save(path, model.to_tensors(selection_fingerprint))


def load_tuned(path, vit: VisionTransformer) -> tuple[TunedModel, str]:
    """Rebuild a tuned model over ``vit``; returns it with the recorded selection fingerprint."""
    tensors = container.load(path)
    try:
        base = _fp_hex(tensors["meta.base_fingerprint"])
        sel_fp = _fp_hex(tensors["meta.selection_fingerprint"])
        scale = float(tensors["scale"])
    except KeyError as exc:
        raise MissingTensorError(f"tuned artifact lacks {exc.args[0]!r}") from None
    if base != vit.ckpt.fingerprint():
        raise FormatError(f"artifact was trained on backbone {base}, got {vit.ckpt.fingerprint()}")
    indices, points = {}, {}
    for name, value in tensors.items():
        parts = name.split(".")
        if parts[0] == "sctm" and parts[2] == "indices":
            indices[int(parts[1])] = value.astype(np.int64)
        elif parts[0] == "sctm":
            points.setdefault(int(parts[1]), set()).add(_TAG_POINT[parts[2]])
    layers = tuple(sorted(points))
    kinds = {frozenset(p) for p in points.values()}
    if not kinds:
        position = Position.ATTN
    elif kinds == {frozenset({TapPoint.AFTER_ATTN_RESIDUAL})}:
        position = Position.ATTN
    elif kinds == {frozenset({TapPoint.AFTER_MLP_RESIDUAL})}:
        position = Position.MLP
    elif kinds == {frozenset(_TAG_POINT.values())}:
        position = Position.BOTH
    else:
        raise FormatError("artifact mixes injection positions across layers")
    selection = ChannelSelection(indices=indices) if indices else None
    num_classes = tensors["head.b"].shape[0]
    params = {n: v for n, v in tensors.items() if n.startswith("head.") or (n.startswith("sctm.") and not n.endswith("indices"))}
    model = TunedModel(vit, selection, InjectionPlan(position, layers), scale, num_classes, params)
    return model, sel_fp


# ---------------------------------------------------------------------------
# accounting


def _k_for(k, layers: Iterable[int], num_layers: int) -> dict[int, int]:
    if isinstance(k, Mapping):
        return {l: int(k[l]) for l in layers}
    if np.ndim(k) == 0:
        return {l: int(k) for l in layers}
    k = list(k)
    if len(k) != num_layers:
        raise ConfigError(f"per-layer K list has {len(k)} entries for {num_layers} layers")
    return {l: int(k[l - 1]) for l in layers}


def count_extra_params(cfg: VitConfig, plan: InjectionPlan, k, with_bias: bool = True) -> int:
    """Sum over injected sites of K^2 (+K with bias). The task head is not included."""
    ks = _k_for(k, plan.layers, cfg.num_layers)
    return sum(ks[l] * ks[l] + (ks[l] if with_bias else 0) for l, _ in plan.slots())


def count_extra_flops(cfg: VitConfig, plan: InjectionPlan, k) -> int:
    """N * K^2 multiply-accumulates per injected site (bias and residual add not counted)."""
    ks = _k_for(k, plan.layers, cfg.num_layers)
    return sum(cfg.num_tokens * ks[l] * ks[l] for l, _ in plan.slots())


@dataclass(frozen=True)
class ComparatorSpec:
    adapter_dim: int = 96  # D' (reduction 8 on ViT-B)
    prompt_len: int = 10  # n
    ssf_inserts: int = 74  # m


def comparator_costs(cfg: VitConfig, k: int, spec: ComparatorSpec = ComparatorSpec()) -> list[dict]:
    """Closed-form extra parameters / FLOPs of Adapter, VPT-Deep, SSF and SCT over all L layers."""
    d, l, n = cfg.embed_dim, cfg.num_layers, cfg.num_tokens
    dp, p, m = spec.adapter_dim, spec.prompt_len, spec.ssf_inserts
    return [
        {"method": "adapter", "params": 2 * l * d * dp, "flops": 2 * n * l * d * dp},
        {"method": "vpt-deep", "params": p * l * d, "flops": 2 * p * (2 * n + p) * l * d},
        {"method": "ssf", "params": m * l * d, "flops": m * n * l * d},
        {"method": "sct", "params": l * k * k, "flops": n * l * k * k},
    ]
