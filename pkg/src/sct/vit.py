"""Pre-norm Vision Transformer over the tape primitives.

Checkpoint naming (one tensor per component, 5 + 8 L tensors in total)::

    patch_embed          [C*p*p + 1, D]   packed linear: weight rows, bias last
    cls_token            [1, D]
    pos_embed            [N, D]
    blocks.{l}.ln1       [2, D]           row 0 gamma, row 1 beta
    blocks.{l}.attn.q    [D + 1, D]       packed linear
    blocks.{l}.attn.k    [D + 1, D]
    blocks.{l}.attn.v    [D + 1, D]
    blocks.{l}.attn.proj [D + 1, D]
    blocks.{l}.ln2       [2, D]
    blocks.{l}.mlp.fc1   [D + 1, r*D]
    blocks.{l}.mlp.fc2   [r*D + 1, D]
    norm                 [2, D]
    head                 [D + 1, M]

Layers are numbered 1..L. Patches are flattened channel-major (c, y, x), the
same order as a strided convolution kernel.
"""

from __future__ import annotations

import enum
import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, NamedTuple

import numpy as np

from . import container
from . import tensor as T
from .errors import ConfigError, DimensionError, MissingTensorError
from .rng import Rng
from .tensor import Tensor

INIT_STD = 0.02
INIT_BOUND = 2.0  # truncation, in units of INIT_STD


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 32
    patch_size: int = 4
    channels_in: int = 3
    embed_dim: int = 128
    num_layers: int = 12
    num_heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 8

    def __post_init__(self):
        for name in ("image_size", "patch_size", "channels_in", "embed_dim", "num_layers", "num_heads", "mlp_ratio"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.num_classes < 0:
            raise ConfigError(f"num_classes must be >= 0, got {self.num_classes}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} is not a multiple of patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not a multiple of num_heads {self.num_heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def hidden_dim(self) -> int:
        return self.mlp_ratio * self.embed_dim

    @property
    def patch_dim(self) -> int:
        return self.channels_in * self.patch_size * self.patch_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "VitConfig":
        known = {k: int(v) for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**known)


PRESETS = {
    "toy": VitConfig(),
    "vit-b16": VitConfig(image_size=224, patch_size=16, embed_dim=768, num_layers=12, num_heads=12, num_classes=1000),
    "tiny": VitConfig(image_size=8, patch_size=4, embed_dim=16, num_layers=2, num_heads=2, num_classes=4),
}


class TapPoint(enum.Enum):
    AFTER_ATTN_RESIDUAL = "after_attn_residual"
    AFTER_MLP_RESIDUAL = "after_mlp_residual"


class FeatureTap(NamedTuple):
    layer: int
    point: TapPoint = TapPoint.AFTER_ATTN_RESIDUAL


def site_of(layer: int, point: TapPoint, num_layers: int) -> int:
    """Linear position of a tap: sub-block index 0..2L-1 (attn even, mlp odd)."""
    if not 1 <= layer <= num_layers:
        raise ConfigError(f"layer {layer} out of range [1, {num_layers}]")
    return 2 * (layer - 1) + (0 if point is TapPoint.AFTER_ATTN_RESIDUAL else 1)


def tap_of(site: int) -> FeatureTap:
    return FeatureTap(site // 2 + 1, TapPoint.AFTER_ATTN_RESIDUAL if site % 2 == 0 else TapPoint.AFTER_MLP_RESIDUAL)


def checkpoint_shapes(cfg: VitConfig) -> "OrderedDict[str, tuple[int, ...]]":
    d, h = cfg.embed_dim, cfg.hidden_dim
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    shapes["patch_embed"] = (cfg.patch_dim + 1, d)
    shapes["cls_token"] = (1, d)
    shapes["pos_embed"] = (cfg.num_tokens, d)
    for l in range(1, cfg.num_layers + 1):
        p = f"blocks.{l}."
        shapes[p + "ln1"] = (2, d)
        for name in ("q", "k", "v", "proj"):
            shapes[p + "attn." + name] = (d + 1, d)
        shapes[p + "ln2"] = (2, d)
        shapes[p + "mlp.fc1"] = (d + 1, h)
        shapes[p + "mlp.fc2"] = (h + 1, d)
    shapes["norm"] = (2, d)
    shapes["head"] = (d + 1, cfg.num_classes)
    return shapes


def parameter_count(cfg: VitConfig, include_head: bool = False) -> int:
    """Scalar parameters of the backbone (packed biases included)."""
    return sum(
        int(np.prod(s)) for name, s in checkpoint_shapes(cfg).items() if include_head or name != "head"
    )


class VitCheckpoint:
    """Ordered, immutable name -> Tensor map holding frozen backbone weights."""

    def __init__(self, tensors: Mapping[str, object]):
        self._tensors: OrderedDict[str, Tensor] = OrderedDict(
            (name, t if isinstance(t, Tensor) else Tensor(np.asarray(t, dtype=np.float32)))
            for name, t in tensors.items()
        )

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise MissingTensorError(f"checkpoint has no tensor named {name!r}") from None

    def __contains__(self, name) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def validate(self, cfg: VitConfig) -> None:
        for name, shape in checkpoint_shapes(cfg).items():
            if name not in self._tensors:
                raise MissingTensorError(f"checkpoint is missing tensor {name!r}")
            got = self._tensors[name].shape
            if got != shape:
                raise DimensionError(f"checkpoint tensor {name!r} has shape {list(got)}, config needs {list(shape)}")

    def to_bytes(self) -> bytes:
        return container.encode(self._tensors)

    def fingerprint(self) -> str:
        return f"{container.fnv1a64(self.to_bytes()):016x}"

    def equals(self, other: "VitCheckpoint") -> bool:
        return self.to_bytes() == other.to_bytes()


def init_toy_checkpoint(cfg: VitConfig, rng: Rng) -> VitCheckpoint:
    """Random backbone: truncated normal (std 0.02, cut at 2 std) weights, zero biases,
    unit layernorm gain. Tensors are drawn in naming-schema order."""
    tensors = OrderedDict()
    for name, shape in checkpoint_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("ln1", "ln2", "norm"):
            arr = np.zeros(shape, dtype=np.float32)
            arr[0] = 1.0
        elif name in ("cls_token", "pos_embed"):
            arr = rng.truncated_normal(shape, INIT_STD, INIT_BOUND)
        else:
            arr = np.zeros(shape, dtype=np.float32)
            arr[:-1] = rng.truncated_normal((shape[0] - 1, shape[1]), INIT_STD, INIT_BOUND)
        tensors[name] = Tensor(arr)
    return VitCheckpoint(tensors)


def save_checkpoint(path, ckpt: VitCheckpoint) -> None:
    container.save(path, dict(ckpt.items()))


def load_checkpoint(path, cfg: VitConfig | None = None) -> VitCheckpoint:
    ckpt = VitCheckpoint(container.load(path))
    if cfg is not None:
        ckpt.validate(cfg)
    return ckpt


Hook = Callable[[Tensor], Tensor]


class VisionTransformer:
    """Frozen backbone bound to a config.

    Every method takes an optional ``weights`` mapping that overrides
    checkpoint tensors by name (used when backbone tensors are trainable
    leaves on a tape).
    """

    def __init__(self, cfg: VitConfig, ckpt: VitCheckpoint):
        ckpt.validate(cfg)
        self.cfg = cfg
        self.ckpt = ckpt

    def _w(self, name: str, weights: Mapping[str, Tensor] | None) -> Tensor:
        if weights is not None and name in weights:
            return weights[name]
        return self.ckpt[name]

    @property
    def num_sites(self) -> int:
        return 2 * self.cfg.num_layers

    def check_images(self, images) -> Tensor:
        images = T.as_tensor(images)
        c = self.cfg
        want = (c.channels_in, c.image_size, c.image_size)
        if images.ndim != 4 or images.shape[1:] != want:
            raise DimensionError(f"images must be [B, {want[0]}, {want[1]}, {want[2]}], got {list(images.shape)}")
        return images

    def embed(self, images, weights=None) -> Tensor:
        images = self.check_images(images)
        c = self.cfg
        b, g, p = images.shape[0], c.grid, c.patch_size
        x = T.reshape(images, (b, c.channels_in, g, p, g, p))
        x = T.transpose(x, (0, 2, 4, 1, 3, 5))
        x = T.reshape(x, (b, g * g, c.patch_dim))
        tokens = T.affine_packed(x, self._w("patch_embed", weights))
        cls = T.reshape(self._w("cls_token", weights), (1, 1, c.embed_dim))
        cls = T.add(T.zeros((b, 1, c.embed_dim)), cls)
        x = T.concat([cls, tokens], axis=1)
        return T.add(x, T.reshape(self._w("pos_embed", weights), (1, c.num_tokens, c.embed_dim)))

    def _ln(self, x: Tensor, packed: Tensor) -> Tensor:
        return T.layernorm(x, T.take(packed, 0, 0), T.take(packed, 1, 0))

    def attention(self, layer: int, x: Tensor, weights=None) -> Tensor:
        c = self.cfg
        pre = f"blocks.{layer}."
        b, n, d = x.shape
        hd, nh = c.head_dim, c.num_heads
        h = self._ln(x, self._w(pre + "ln1", weights))
        q = T.affine_packed(h, self._w(pre + "attn.q", weights))
        k = T.affine_packed(h, self._w(pre + "attn.k", weights))
        v = T.affine_packed(h, self._w(pre + "attn.v", weights))
        q = T.transpose(T.reshape(q, (b, n, nh, hd)), (0, 2, 1, 3))
        kt = T.transpose(T.reshape(k, (b, n, nh, hd)), (0, 2, 3, 1))
        v = T.transpose(T.reshape(v, (b, n, nh, hd)), (0, 2, 1, 3))
        attn = T.softmax(T.scale(T.matmul(q, kt), 1.0 / math.sqrt(hd)), axis=-1)
        o = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (b, n, d))
        return T.affine_packed(o, self._w(pre + "attn.proj", weights))

    def mlp(self, layer: int, x: Tensor, weights=None) -> Tensor:
        pre = f"blocks.{layer}."
        h = self._ln(x, self._w(pre + "ln2", weights))
        h = T.gelu(T.affine_packed(h, self._w(pre + "mlp.fc1", weights)))
        return T.affine_packed(h, self._w(pre + "mlp.fc2", weights))

    def sub_block(self, site: int, x: Tensor, weights=None) -> Tensor:
        """Residual sub-block ``site`` (attn for even, mlp for odd)."""
        layer = site // 2 + 1
        branch = self.attention(layer, x, weights) if site % 2 == 0 else self.mlp(layer, x, weights)
        return T.add(x, branch)

    def run(
        self,
        x: Tensor,
        start: int = 0,
        stop: int | None = None,
        *,
        hooks: Mapping[int, Hook] | None = None,
        taps: dict[int, Tensor] | None = None,
        resume: bool = False,
        weights=None,
    ) -> Tensor:
        """Run sub-blocks ``start..stop-1`` on token state ``x``.

        After each sub-block the state is recorded into ``taps`` (if that site
        is a key) and then passed through ``hooks[site]`` if present. With
        ``resume`` the sub-block at ``start`` is taken as already applied:
        ``x`` is its output and only its tap/hook run.
        """
        stop = self.num_sites if stop is None else stop
        hooks = hooks or {}
        for site in range(start, stop):
            if not (resume and site == start):
                x = self.sub_block(site, x, weights)
            if taps is not None and site in taps:
                taps[site] = x
            hook = hooks.get(site)
            if hook is not None:
                x = hook(x)
        return x

    def pool(self, x: Tensor, weights=None) -> Tensor:
        """Final layernorm of the class token: [B, N, D] -> [B, D]."""
        return self._ln(T.take(x, 0, 1), self._w("norm", weights))

    def features(self, images, *, hooks=None, taps=None, weights=None) -> Tensor:
        x = self.embed(images, weights)
        return self.pool(self.run(x, hooks=hooks, taps=taps, weights=weights), weights)


def forward(
    ckpt: VitCheckpoint,
    cfg: VitConfig,
    images,
    taps: Iterable[FeatureTap] = (),
    hooks: Mapping[FeatureTap, Hook] | None = None,
) -> tuple[Tensor, dict[FeatureTap, Tensor]]:
    """Logits from the checkpoint head plus the requested tapped features."""
    vit = VisionTransformer(cfg, ckpt)
    site_taps = {site_of(t.layer, t.point, cfg.num_layers): None for t in taps}
    site_hooks = {site_of(t.layer, t.point, cfg.num_layers): h for t, h in (hooks or {}).items()}
    feats = vit.features(images, hooks=site_hooks, taps=site_taps)
    logits = T.affine_packed(feats, ckpt["head"])
    return logits, {tap_of(site): value for site, value in site_taps.items()}


def save_config(path, cfg: VitConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def load_config(path) -> VitConfig:
    return VitConfig.from_dict(json.loads(Path(path).read_text()))
