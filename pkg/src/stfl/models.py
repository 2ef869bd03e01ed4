"""Segmentation U-Net, PatchGAN discriminator and their parameter layouts.

Models are functional: a config describes the architecture, ``init_*``
returns a :class:`ParamVector`, and ``*_forward`` maps (params, input) to an
output tensor. Layer specs are kept as plain tuples so the parameter layout
can be audited (:func:`architecture_report`).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from stfl.engine import ParamVector, Tensor
from stfl.engine import tensor as T
from stfl.errors import ConfigError, ShapeError


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 2
    base_channels: int = 8
    depth: int = 3
    out_channels: int = 1
    norm: str = "instance"
    head: str = "none"  # "none" → logits, "sigmoid" → [0,1] images
    outer_norm: bool = True  # False: first encoder and last decoder convs stay unnormalized

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1:
            raise ConfigError("UNet depth and base_channels must be >= 1")
        if self.norm not in ("instance", "none"):
            raise ConfigError(f"UNet norm must be 'instance' or 'none', got {self.norm!r}")
        if self.head not in ("none", "sigmoid"):
            raise ConfigError(f"UNet head must be 'none' or 'sigmoid', got {self.head!r}")


@dataclass(frozen=True)
class PatchGANConfig:
    in_channels: int = 1
    layers: int = 3
    base_channels: int = 8


@dataclass(frozen=True)
class Layer:
    """One parametrized layer: conv, transposed conv ("up") or 1x1 head."""
    name: str
    kind: str  # conv | up
    c_in: int
    c_out: int
    k: int
    stride: int
    pad: int
    norm: bool
    act: str  # relu | lrelu | none


def unet_layers(cfg: UNetConfig) -> list[Layer]:
    norm = cfg.norm == "instance"
    outer = norm and cfg.outer_norm
    ch = [cfg.base_channels * 2 ** i for i in range(cfg.depth + 1)]
    layers = [Layer("enc0a", "conv", cfg.in_channels, ch[0], 3, 1, 1, outer, "relu"),
              Layer("enc0b", "conv", ch[0], ch[0], 3, 1, 1, norm, "relu")]
    for i in range(1, cfg.depth + 1):
        layers.append(Layer(f"enc{i}a", "conv", ch[i - 1], ch[i], 3, 2, 1, norm, "relu"))
        layers.append(Layer(f"enc{i}b", "conv", ch[i], ch[i], 3, 1, 1, norm, "relu"))
    for i in reversed(range(cfg.depth)):
        layers.append(Layer(f"up{i}", "up", ch[i + 1], ch[i], 2, 2, 0, norm, "relu"))
        layers.append(Layer(f"dec{i}a", "conv", 2 * ch[i], ch[i], 3, 1, 1, norm, "relu"))
        layers.append(Layer(f"dec{i}b", "conv", ch[i], ch[i], 3, 1, 1, norm if i else outer, "relu"))
    layers.append(Layer("head", "conv", ch[0], cfg.out_channels, 1, 1, 0, False, "none"))
    return layers


def patchgan_layers(cfg: PatchGANConfig) -> list[Layer]:
    layers, c_in = [], cfg.in_channels
    for i in range(cfg.layers):
        c_out = cfg.base_channels * 2 ** i
        layers.append(Layer(f"conv{i}", "conv", c_in, c_out, 4, 2, 1, i > 0, "lrelu"))
        c_in = c_out
    layers.append(Layer("score", "conv", c_in, 1, 3, 1, 1, False, "none"))
    return layers


def _init_layers(layers: list[Layer], seed: int, zero_last: bool, dtype) -> ParamVector:
    rng = np.random.default_rng(seed)
    blocks = []
    for idx, L in enumerate(layers):
        wshape = (L.c_out, L.c_in, L.k, L.k) if L.kind == "conv" else (L.c_in, L.c_out, L.k, L.k)
        fan_in = L.c_in * L.k * L.k
        if zero_last and idx == len(layers) - 1:
            w = np.zeros(wshape)
        else:
            gain = 2.0 if L.act == "relu" else 2.0 / (1 + 0.2 ** 2) if L.act == "lrelu" else 1.0
            w = rng.standard_normal(wshape) * np.sqrt(gain / fan_in)
        blocks.append((f"{L.name}.w", w.astype(dtype)))
        blocks.append((f"{L.name}.b", np.zeros(L.c_out, dtype=dtype)))
        if L.norm:
            blocks.append((f"{L.name}.g", np.ones(L.c_out, dtype=dtype)))
            blocks.append((f"{L.name}.beta", np.zeros(L.c_out, dtype=dtype)))
    return ParamVector(blocks)


def init_unet(cfg: UNetConfig, seed: int, dtype=np.float32, zero_head: bool = False) -> ParamVector:
    return _init_layers(unet_layers(cfg), seed, zero_head, dtype)


def init_patchgan(cfg: PatchGANConfig, seed: int, dtype=np.float32) -> ParamVector:
    return _init_layers(patchgan_layers(cfg), seed, False, dtype)


def _as_tensors(params) -> Mapping[str, Tensor]:
    if isinstance(params, ParamVector):
        return {k: Tensor(v) for k, v in params.items()}
    return params


def _apply(L: Layer, p: Mapping[str, Tensor], x: Tensor) -> Tensor:
    w, b = p[f"{L.name}.w"], p[f"{L.name}.b"]
    if L.kind == "conv":
        y = T.conv2d(x, w, b, stride=L.stride, padding=L.pad)
    else:
        y = T.conv_transpose2d(x, w, b, stride=L.stride, padding=L.pad)
    if L.norm:
        y = T.instance_norm(y, p[f"{L.name}.g"], p[f"{L.name}.beta"])
    if L.act == "relu":
        y = T.relu(y)
    elif L.act == "lrelu":
        y = T.leaky_relu(y, 0.2)
    return y


def unet_forward(cfg: UNetConfig, params, x) -> Tensor:
    """Map N×C_in×H×W to N×C_out×H×W (logits, or sigmoid images)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    p = _as_tensors(params)
    if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"unet_forward: expected N×{cfg.in_channels}×H×W input, got {x.shape}")
    f = 2 ** cfg.depth
    if x.shape[2] % f or x.shape[3] % f:
        raise ShapeError(f"unet_forward: spatial extent {x.shape[2:]} not divisible by 2^depth={f}")
    layers = {L.name: L for L in unet_layers(cfg)}
    skips = []
    h = _apply(layers["enc0b"], p, _apply(layers["enc0a"], p, x))
    for i in range(1, cfg.depth + 1):
        skips.append(h)
        h = _apply(layers[f"enc{i}b"], p, _apply(layers[f"enc{i}a"], p, h))
    for i in reversed(range(cfg.depth)):
        h = _apply(layers[f"up{i}"], p, h)
        h = T.concat([h, skips[i]], axis=1)
        h = _apply(layers[f"dec{i}b"], p, _apply(layers[f"dec{i}a"], p, h))
    out = _apply(layers["head"], p, h)
    return T.sigmoid(out) if cfg.head == "sigmoid" else out


def patchgan_forward(cfg: PatchGANConfig, params, x) -> Tensor:
    """Raw patch scores, N×1×S×S with S = H / 2^layers."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    p = _as_tensors(params)
    if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"patchgan_forward: expected N×{cfg.in_channels}×H×W input, got {x.shape}")
    f = 2 ** cfg.layers
    if x.shape[2] % f or x.shape[3] % f:
        raise ShapeError(f"patchgan_forward: spatial extent {x.shape[2:]} not divisible by 2^layers={f}")
    for L in patchgan_layers(cfg):
        x = _apply(L, p, x)
    return x


def make_two_channel(original: np.ndarray, stylized: np.ndarray | None = None) -> np.ndarray:
    """Stack (original, stylized) into a 1×2×H×W array; a missing stylized image duplicates the original."""
    original = np.asarray(original, dtype=np.float32)
    if original.ndim != 2:
        raise ShapeError(f"make_two_channel: expected a 2-D image, got shape {original.shape}")
    if stylized is None:
        stylized = original
    stylized = np.asarray(stylized, dtype=np.float32)
    if stylized.shape != original.shape:
        raise ShapeError(f"make_two_channel: original {original.shape} vs stylized {stylized.shape}")
    return np.stack([original, stylized])[None]


def layer_param_count(L: Layer) -> int:
    return L.c_out * L.c_in * L.k * L.k + L.c_out + (2 * L.c_out if L.norm else 0)


def architecture_report(cfg, resolution: int = 64) -> str:
    """Plain-text layer table: kind, kernel, stride, channels, output shape, parameters."""
    if isinstance(cfg, UNetConfig):
        layers, title = unet_layers(cfg), f"U-Net {cfg}"
        sizes, s = {}, resolution
        for L in layers:
            if L.kind == "up":
                s *= 2
            elif L.stride == 2:
                s //= 2
            sizes[L.name] = s
    else:
        layers, title = patchgan_layers(cfg), f"PatchGAN {cfg}"
        sizes, s = {}, resolution
        for L in layers:
            s //= L.stride
            sizes[L.name] = s
    rows = [title, f"{'layer':<8} {'kind':<5} {'k':>2} {'s':>2} {'in':>4} {'out':>4} {'norm':>5} "
                   f"{'act':>6} {'output':>14} {'params':>8}"]
    total = 0
    for L in layers:
        n = layer_param_count(L)
        total += n
        shape = f"{L.c_out}x{sizes[L.name]}x{sizes[L.name]}"
        rows.append(f"{L.name:<8} {L.kind:<5} {L.k:>2} {L.stride:>2} {L.c_in:>4} {L.c_out:>4} "
                    f"{'yes' if L.norm else 'no':>5} {L.act:>6} {shape:>14} {n:>8}")
    rows.append(f"total parameters: {total}")
    return "\n".join(rows) + "\n"
