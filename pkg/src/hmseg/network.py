"""Hetero-modal segmentation network.

Each available modality goes through its own convolutional front-end; the
resulting feature maps are averaged over the available modalities and fed to
a shared trunk of dilated residual blocks and a softmax head. Everything is
2D and keeps the input resolution.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

MIN_SIZE = 8
T1 = 0


@dataclass(frozen=True)
class NetworkConfig:
    n_modalities: int = 2
    n_classes: int = 8
    base_channels: int = 16
    # (n_convs, dilation) or (n_convs, dilation, width)
    residual_blocks: tuple = ((3, 1), (3, 2), (3, 4))
    kernel_size: int = 3
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.n_modalities < 1:
            raise ValueError("n_modalities must be >= 1")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        for blk in self.residual_blocks:
            if len(blk) not in (2, 3) or blk[0] < 1 or blk[1] < 1:
                raise ValueError(f"bad residual block spec {blk!r}")

    def blocks(self) -> list[tuple[int, int, int]]:
        return [(b[0], b[1], b[2] if len(b) == 3 else self.base_channels) for b in self.residual_blocks]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["residual_blocks"] = [list(b) for b in self.residual_blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        if "residual_blocks" in d:
            d["residual_blocks"] = tuple(tuple(int(v) for v in b) for b in d["residual_blocks"])
        return cls(**d)


@dataclass(frozen=True)
class ModalityMask:
    available: tuple[bool, ...]

    def __post_init__(self):
        if not any(self.available):
            raise ValueError("at least one modality must be available")

    @classmethod
    def of(cls, *indices: int, n: int = 2) -> "ModalityMask":
        return cls(tuple(i in indices for i in range(n)))

    @classmethod
    def all(cls, n: int = 2) -> "ModalityMask":
        return cls((True,) * n)

    def indices(self) -> list[int]:
        return [i for i, a in enumerate(self.available) if a]

    def __len__(self) -> int:
        return len(self.available)

    def __str__(self) -> str:
        return "{" + ",".join(str(i) for i in self.indices()) + "}"


@dataclass
class ModelParams:
    config: NetworkConfig
    tensors: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, OrderedDict(
            (k, Tensor(v.data.copy(), requires_grad=v.requires_grad)) for k, v in self.tensors.items()))


def param_shapes(config: NetworkConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Name -> shape for every learnable tensor, in a fixed order."""
    k = config.kernel_size
    f = config.base_channels
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    for m in range(config.n_modalities):
        shapes[f"front.{m}.conv.weight"] = (f, 1, k, k)
        shapes[f"front.{m}.norm.scale"] = (f,)
        shapes[f"front.{m}.norm.shift"] = (f,)
    width = f
    for b, (n_convs, _dil, out_w) in enumerate(config.blocks()):
        w_in = width
        for i in range(n_convs):
            shapes[f"trunk.{b}.norm{i}.scale"] = (w_in,)
            shapes[f"trunk.{b}.norm{i}.shift"] = (w_in,)
            shapes[f"trunk.{b}.conv{i}.weight"] = (out_w, w_in, k, k)
            w_in = out_w
        if out_w != width:
            shapes[f"trunk.{b}.proj.weight"] = (out_w, width, 1, 1)
        width = out_w
    shapes["head.norm.scale"] = (width,)
    shapes["head.norm.shift"] = (width,)
    shapes["head.conv.weight"] = (config.n_classes, width, 1, 1)
    shapes["head.conv.bias"] = (config.n_classes,)
    return shapes


def init_params(config: NetworkConfig, seed: int = 0) -> ModelParams:
    """He-normal convolution weights, unit norm scales, zero shifts and biases."""
    rng = np.random.default_rng(seed)
    tensors: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in param_shapes(config).items():
        if name.endswith(".weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif name.endswith(".scale"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(config, tensors)


def fuse_modalities(features: Sequence[Tensor | None], mask: ModalityMask) -> Tensor:
    """Mean of the feature maps of available modalities; the rest are ignored."""
    idx = mask.indices()
    if not idx:
        raise ValueError("empty modality mask")
    chosen = [features[i] for i in idx]
    if any(f is None for f in chosen):
        raise ValueError("feature map missing for an available modality")
    for f in chosen[1:]:
        if f.shape != chosen[0].shape:
            raise ValueError(f"feature maps differ in shape: {chosen[0].shape} vs {f.shape}")
    if len(chosen) == 1:
        return chosen[0]
    total = chosen[0]
    for f in chosen[1:]:
        total = T.add(total, f)
    return T.mul(total, 1.0 / len(chosen))


def _norm_relu(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    eps = params.config.norm_eps
    return T.relu(T.instance_norm(x, params[prefix + ".scale"], params[prefix + ".shift"], eps))


def forward(params: ModelParams, image, mask: ModalityMask) -> Tensor:
    """Class probabilities [C,H,W] for an image [M,H,W] under a modality mask."""
    cfg = params.config
    data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if data.ndim != 3 or data.shape[0] != cfg.n_modalities:
        raise ValueError(f"image must be [{cfg.n_modalities},H,W], got {data.shape}")
    if len(mask) != cfg.n_modalities:
        raise ValueError(f"mask covers {len(mask)} modalities, network has {cfg.n_modalities}")
    _, h, w = data.shape
    if h < MIN_SIZE or w < MIN_SIZE:
        raise ValueError(f"image must be at least {MIN_SIZE}x{MIN_SIZE}, got {h}x{w}")
    feats: list[Tensor | None] = [None] * cfg.n_modalities
    for m in mask.indices():
        x = Tensor(data[m:m + 1])
        x = T.conv2d(x, params[f"front.{m}.conv.weight"], 1)
        feats[m] = _norm_relu(x, params, f"front.{m}.norm")
    x = fuse_modalities(feats, mask)
    for b, (n_convs, dil, out_w) in enumerate(cfg.blocks()):
        y = x
        for i in range(n_convs):
            y = _norm_relu(y, params, f"trunk.{b}.norm{i}")
            y = T.conv2d(y, params[f"trunk.{b}.conv{i}.weight"], dil)
        skip = x
        if f"trunk.{b}.proj.weight" in params.tensors:
            skip = T.conv2d(x, params[f"trunk.{b}.proj.weight"], 1)
        x = T.add(skip, y)
    x = _norm_relu(x, params, "head.norm")
    logits = T.conv2d(x, params["head.conv.weight"], 1, bias=params["head.conv.bias"])
    return T.softmax_channels(logits)


def project_t1(image, mask: ModalityMask):
    """Drop every modality except T1 (index 0); pixel data is untouched."""
    if not mask.available[T1]:
        raise ValueError("projection to T1 needs the T1 modality")
    return image, ModalityMask.of(T1, n=len(mask))
