"""3-D U-Net: configuration, parameter layout, forward and backward passes.

Layout at ``width_scale=1``::

    enc0   conv in->16, conv 16->32        pool
    enc1   conv 32->32, conv 32->64        pool
    enc2   conv 64->64, conv 64->128       pool
    bottleneck conv 128->128, conv 128->256
    dec0   deconv 256->128, concat enc2 (128), conv 256->128
    dec1   deconv 128->64,  concat enc1 (64),  conv 128->64
    dec2   deconv 64->32,   concat enc0 (32),  conv 64->N   (logits, no ReLU)

Each expansion pair ``(a, b)`` is read as (deconvolution width, convolution
width).  Convolutions are 3x3x3 same-padded, deconvolutions 2x2x2 stride 2.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from . import layers as L

__all__ = ["UNetConfig", "LayerSpec", "layer_specs", "param_count", "init_weights",
           "unet_forward", "unet_backward"]


def _as_fraction(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, str):
        return Fraction(value)
    return Fraction(value).limit_denominator(1 << 16)


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    out_channels: int = 7
    contraction: tuple = ((16, 32), (32, 64), (64, 128))
    bottleneck: tuple = (128, 256)
    expansion: tuple = ((128, 128), (64, 64), (32, None))
    width_scale: Fraction = field(default=Fraction(1))

    def __post_init__(self):
        object.__setattr__(self, "width_scale", _as_fraction(self.width_scale))
        object.__setattr__(self, "contraction", tuple(tuple(p) for p in self.contraction))
        object.__setattr__(self, "bottleneck", tuple(self.bottleneck))
        object.__setattr__(self, "expansion", tuple(tuple(p) for p in self.expansion))
        if self.width_scale <= 0:
            raise ValueError("width_scale must be positive")
        if len(self.expansion) != len(self.contraction):
            raise ValueError("expansion and contraction paths need the same depth")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        for w in self._raw_widths():
            if w * self.width_scale < 1:
                raise ValueError(f"width {w} * width_scale {self.width_scale} < 1")

    def _raw_widths(self):
        for a, b in self.contraction:
            yield a
            yield b
        yield from self.bottleneck
        for a, b in self.expansion:
            yield a
            if b is not None:
                yield b

    def width(self, w: int) -> int:
        return max(1, int(round(w * self.width_scale)))

    @property
    def depth(self) -> int:
        return len(self.contraction)

    @property
    def divisor(self) -> int:
        return 2**self.depth

    def to_json(self) -> dict:
        d = asdict(self)
        d["width_scale"] = str(self.width_scale)
        return d

    @classmethod
    def from_json(cls, d: dict) -> UNetConfig:
        d = dict(d)
        d["contraction"] = tuple(tuple(p) for p in d["contraction"])
        d["expansion"] = tuple(tuple(p) for p in d["expansion"])
        d["bottleneck"] = tuple(d["bottleneck"])
        return cls(**d)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv" or "deconv"
    c_in: int
    c_out: int
    relu: bool

    @property
    def kernel_shape(self) -> tuple:
        if self.kind == "conv":
            return (self.c_out, self.c_in, 3, 3, 3)
        return (self.c_in, self.c_out, 2, 2, 2)

    @property
    def n_params(self) -> int:
        return int(np.prod(self.kernel_shape)) + self.c_out


def layer_specs(cfg: UNetConfig) -> list[LayerSpec]:
    specs = []
    c = cfg.in_channels
    skips = []
    for i, (a, b) in enumerate(cfg.contraction):
        a, b = cfg.width(a), cfg.width(b)
        specs.append(LayerSpec(f"enc{i}.conv1", "conv", c, a, True))
        specs.append(LayerSpec(f"enc{i}.conv2", "conv", a, b, True))
        skips.append(b)
        c = b
    a, b = (cfg.width(w) for w in cfg.bottleneck)
    specs.append(LayerSpec("bottleneck.conv1", "conv", c, a, True))
    specs.append(LayerSpec("bottleneck.conv2", "conv", a, b, True))
    c = b
    for i, (a, b) in enumerate(cfg.expansion):
        last = i == len(cfg.expansion) - 1
        up = cfg.width(a)
        out = cfg.out_channels if b is None else cfg.width(b)
        specs.append(LayerSpec(f"dec{i}.up", "deconv", c, up, False))
        specs.append(LayerSpec(f"dec{i}.conv", "conv", up + skips[-1 - i], out, not last))
        c = out
    return specs


def param_shapes(cfg: UNetConfig) -> dict[str, tuple]:
    shapes = {}
    for s in layer_specs(cfg):
        shapes[s.name + ".weight"] = s.kernel_shape
        shapes[s.name + ".bias"] = (s.c_out,)
    return shapes


def param_count(cfg: UNetConfig) -> int:
    return sum(s.n_params for s in layer_specs(cfg))


def init_weights(cfg: UNetConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    """He-normal kernels, zero biases, drawn in layer order from one seeded stream."""
    rng = np.random.default_rng(seed)
    params = {}
    for s in layer_specs(cfg):
        fan_in = s.c_in * 27 if s.kind == "conv" else s.c_in
        gain = 2.0 if s.relu else 1.0
        w = rng.standard_normal(s.kernel_shape) * np.sqrt(gain / fan_in)
        params[s.name + ".weight"] = w.astype(dtype)
        params[s.name + ".bias"] = np.zeros(s.c_out, dtype=dtype)
    return params


def _check_input(cfg: UNetConfig, x: np.ndarray):
    if x.ndim != 5:
        raise ValueError(f"input must be (batch, channels, z, y, x), got shape {x.shape}")
    if x.shape[1] != cfg.in_channels:
        raise ValueError(f"input has {x.shape[1]} channels, config expects {cfg.in_channels}")
    if any(d % cfg.divisor for d in x.shape[2:]):
        raise ValueError(f"spatial dims {x.shape[2:]} must be divisible by {cfg.divisor}")


def check_weights(cfg: UNetConfig, params: dict[str, np.ndarray]) -> None:
    expected = param_shapes(cfg)
    for name, shape in expected.items():
        if name not in params:
            raise ValueError(f"missing weight {name}")
        if tuple(params[name].shape) != shape:
            raise ValueError(f"weight {name} has shape {tuple(params[name].shape)}, expected {shape}")
    extra = set(params) - set(expected)
    if extra:
        raise ValueError(f"unexpected weights {sorted(extra)}")


def unet_forward(cfg: UNetConfig, params: dict[str, np.ndarray], x: np.ndarray,
                 keep_cache: bool = False):
    """Logits for input ``x``; with ``keep_cache`` also the tape for backward."""
    _check_input(cfg, x)
    check_weights(cfg, params)
    specs = {s.name: s for s in layer_specs(cfg)}
    tape = [] if keep_cache else None

    def conv(name, h):
        s = specs[name]
        out = L.conv3d(h, params[name + ".weight"], params[name + ".bias"])
        if s.relu:
            np.maximum(out, 0, out=out)
        if tape is not None:
            tape.append(("conv", name, h, out))
        return out

    h = x
    skips = []
    for i in range(cfg.depth):
        h = conv(f"enc{i}.conv1", h)
        h = conv(f"enc{i}.conv2", h)
        skips.append(h)
        h, idx = L.maxpool3d(h)
        if tape is not None:
            tape.append(("pool", idx))
    h = conv("bottleneck.conv1", h)
    h = conv("bottleneck.conv2", h)
    for i in range(cfg.depth):
        name = f"dec{i}.up"
        up = L.deconv3d(h, params[name + ".weight"], params[name + ".bias"])
        if tape is not None:
            tape.append(("deconv", name, h))
        skip = skips[-1 - i]
        if tape is None:
            skips[-1 - i] = None
        h = np.concatenate([up, skip], axis=1)
        del up
        if tape is not None:
            tape.append(("concat", specs[name].c_out))
        h = conv(f"dec{i}.conv", h)
    return (h, tape) if keep_cache else h


def unet_backward(cfg: UNetConfig, params: dict[str, np.ndarray], tape, dlogits: np.ndarray):
    """Parameter gradients (and input gradient under key ``"input"``)."""
    specs = {s.name: s for s in layer_specs(cfg)}
    grads: dict[str, np.ndarray] = {}
    g = dlogits
    pending_skip = []  # skip gradients waiting for their encoder level
    for entry in reversed(tape):
        kind = entry[0]
        if kind == "conv":
            _, name, h_in, h_out = entry
            if name.startswith("enc") and name.endswith("conv2"):
                g = g + pending_skip.pop()
            if specs[name].relu:
                g = g * (h_out > 0)
            dx, dw, db = L.conv3d_backward(g, h_in, params[name + ".weight"])
            grads[name + ".weight"], grads[name + ".bias"] = dw, db
            g = dx
        elif kind == "concat":
            n_up = entry[1]
            pending_skip.append(g[:, n_up:])
            g = g[:, :n_up]
        elif kind == "deconv":
            _, name, h_in = entry
            dx, dw, db = L.deconv3d_backward(g, h_in, params[name + ".weight"])
            grads[name + ".weight"], grads[name + ".bias"] = dw, db
            g = dx
        elif kind == "pool":
            g = L.maxpool3d_backward(g, entry[1])
    grads["input"] = g
    return grads
