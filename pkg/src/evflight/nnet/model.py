"""Seven-convolution network with a time-to-collision head and a polar impact head."""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import ELU, Conv2d, GridAvgPool, Layer, Linear, MaxPool2x2, ShapeError, log_softmax

N_THETA = 12
N_R = 4


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    c_out: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1


def _default_convs():
    return tuple(ConvSpec(c) for c in (32, 32, 64, 64, 96, 96, 128))


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 20
    input_hw: tuple = (240, 240)
    convs: tuple = field(default_factory=_default_convs)
    pool_after: tuple = (1, 3)      # conv indices followed by a 2x max pool
    pool_grid: int = 5              # spatial grid kept before the readouts
    head_hidden: int = 64
    tau_scale: float = 0.5          # seconds; tau is regressed as tau / tau_scale
    dtype: str = "float64"
    seed: int = 0
    zero_init_heads: bool = False
    input_gain: float = 1.0         # multiplies the [0, 1] input before the first convolution

    def __post_init__(self):
        convs = tuple(c if isinstance(c, ConvSpec) else ConvSpec(**c) for c in self.convs)
        object.__setattr__(self, "convs", convs)
        object.__setattr__(self, "input_hw", tuple(self.input_hw))
        object.__setattr__(self, "pool_after", tuple(self.pool_after))
        if len(convs) != 7 or len(self.pool_after) != 2:
            raise ValueError("architecture needs exactly 7 convolutions and 2 max pools")
        if self.tau_scale <= 0:
            raise ValueError("tau_scale must be positive")

    def to_json(self) -> str:
        d = asdict(self)
        d["convs"] = [asdict(c) for c in self.convs]
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        d["convs"] = tuple(ConvSpec(**c) for c in d["convs"])
        return cls(**d)

    @classmethod
    def desk(cls, in_channels: int = 20, tau_scale: float = 0.5, **kw) -> "ModelConfig":
        """60x60 profile used for the CPU-scale experiments."""
        return cls(in_channels=in_channels, input_hw=(60, 60), tau_scale=tau_scale, **kw)


class Model:
    def __init__(self, config: ModelConfig):
        self.config = config
        dt = np.dtype(config.dtype)
        rng = np.random.default_rng(config.seed)
        self.trunk: list[Layer] = []
        c, (h, w) = config.in_channels, config.input_hw
        for i, spec in enumerate(config.convs):
            conv = Conv2d(c, spec.c_out, spec.kernel, spec.stride, spec.padding, rng, dt, name=f"conv{i + 1}")
            h, w = conv.out_hw(h, w)
            self.trunk += [conv, ELU()]
            c = spec.c_out
            if i in config.pool_after:
                self.trunk.append(MaxPool2x2())
                h, w = h // 2, w // 2
        self.trunk[0].input_grad = False
        self.trunk.append(GridAvgPool(config.pool_grid))
        n_feat = c * config.pool_grid ** 2
        zero = config.zero_init_heads
        hid = config.head_hidden
        self.tau_head = [Linear(n_feat, hid, rng, dt, name="tau_fc1"), ELU(),
                         Linear(hid, 1, rng, dt, zero=zero, name="tau_out")]
        self.cls_head = [Linear(n_feat, hid, rng, dt, name="cls_fc1"), ELU(),
                         Linear(hid, N_THETA + N_R, rng, dt, zero=zero, name="cls_out")]
        self.feature_hw = (h, w)
        if h % config.pool_grid or w % config.pool_grid:
            raise ShapeError(f"final feature map {h}x{w} not divisible by pool grid {config.pool_grid}")

    @property
    def layers(self) -> list[Layer]:
        return self.trunk + self.tau_head + self.cls_head

    @property
    def params(self) -> list[np.ndarray]:
        return [p for l in self.layers for p in l.params]

    @property
    def grads(self) -> list[np.ndarray]:
        return [g for l in self.layers for g in l.grads]

    def forward(self, x: np.ndarray):
        """Return ``(tau_hat seconds (N,), theta logits (N, 12), r logits (N, 4))``."""
        cfg = self.config
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:] != (cfg.in_channels, *cfg.input_hw):
            raise ShapeError(f"input {x.shape[1:]} != configured {(cfg.in_channels, *cfg.input_hw)}")
        h = np.ascontiguousarray(np.asarray(x, dtype=cfg.dtype).transpose(0, 2, 3, 1))
        if cfg.input_gain != 1.0:
            h *= cfg.input_gain
        for layer in self.trunk:
            h = _checked(layer, layer.forward(h))
        t = h
        for layer in self.tau_head:
            t = _checked(layer, layer.forward(t))
        z = h
        for layer in self.cls_head:
            z = _checked(layer, layer.forward(z))
        return t[:, 0] * cfg.tau_scale, z[:, :N_THETA], z[:, N_THETA:]

    def backward(self, d_tau: np.ndarray, d_theta: np.ndarray, d_r: np.ndarray,
                 input_grad: bool = False) -> np.ndarray | None:
        """Back-propagate output gradients; fills every layer's ``grads``.

        With ``input_grad`` the gradient with respect to the ``(N, C, H, W)`` input is returned.
        """
        self.trunk[0].input_grad = input_grad
        dt = self.config.dtype
        g = (d_tau * self.config.tau_scale)[:, None].astype(dt)
        for layer in reversed(self.tau_head):
            g = layer.backward(g)
        gz = np.concatenate([d_theta, d_r], axis=1).astype(dt)
        for layer in reversed(self.cls_head):
            gz = layer.backward(gz)
        g = g + gz
        for layer in reversed(self.trunk):
            g = layer.backward(g)
        return g.transpose(0, 3, 1, 2) * self.config.input_gain if input_grad else None

    def predict(self, x: np.ndarray, batch: int = 64):
        """Forward in chunks; uint8 input is scaled to [0, 1]."""
        taus, th, rr = [], [], []
        for i in range(0, len(x), batch):
            xb = x[i:i + batch]
            if xb.dtype == np.uint8:
                xb = xb.astype(self.config.dtype) / 255.0
            t, a, b = self.forward(xb)
            taus.append(t)
            th.append(a)
            rr.append(b)
        if not taus:
            return np.zeros(0), np.zeros((0, N_THETA)), np.zeros((0, N_R))
        return np.concatenate(taus), np.concatenate(th), np.concatenate(rr)

    def n_params(self) -> int:
        return sum(p.size for p in self.params)


def _checked(layer: Layer, out: np.ndarray) -> np.ndarray:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"non-finite activation after layer {layer.name}")
    return out


@dataclass(frozen=True)
class LossWeights:
    ttc: float = 1.0
    theta: float = 1.0
    r: float = 1.0

    def __post_init__(self):
        if min(self.ttc, self.theta, self.r) < 0 or (self.ttc == self.theta == self.r == 0):
            raise ValueError("loss weights must be non-negative and not all zero")


@dataclass
class LossResult:
    total: float
    ttc: float
    theta: float
    r: float
    d_tau: np.ndarray
    d_theta: np.ndarray
    d_r: np.ndarray


def loss(outputs, tau, r_bin, theta_bin, weights: LossWeights = LossWeights(),
         tau_scale: float = 1.0) -> LossResult:
    """Weighted sum of the tau MSE (in units of ``tau_scale``) and the two cross-entropies.

    Gradients are with respect to the three model outputs, averaged over the batch.
    """
    tau_hat, z_theta, z_r = outputs
    tau = np.asarray(tau, float)
    r_bin = np.asarray(r_bin)
    theta_bin = np.asarray(theta_bin)
    n = len(tau_hat)
    if np.any((theta_bin < 0) | (theta_bin >= z_theta.shape[1])) or np.any((r_bin < 0) | (r_bin >= z_r.shape[1])):
        raise ValueError("bin label out of range")
    if np.any(tau < 0):
        raise ValueError("negative time to collision label")
    rows = np.arange(n)
    err = (tau_hat - tau) / tau_scale
    l_ttc = float(np.mean(err ** 2))
    lp_t = log_softmax(z_theta)
    lp_r = log_softmax(z_r)
    l_theta = float(-lp_t[rows, theta_bin].mean())
    l_r = float(-lp_r[rows, r_bin].mean())
    d_tau = weights.ttc * 2.0 * err / (n * tau_scale)
    d_theta = np.exp(lp_t)
    d_theta[rows, theta_bin] -= 1.0
    d_r = np.exp(lp_r)
    d_r[rows, r_bin] -= 1.0
    total = weights.ttc * l_ttc + weights.theta * l_theta + weights.r * l_r
    return LossResult(total, l_ttc, l_theta, l_r, d_tau,
                      d_theta * (weights.theta / n), d_r * (weights.r / n))


# --- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"EVNN"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sHI")


def save_model(model: Model, path: str | os.PathLike) -> None:
    cfg = model.config.to_json().encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(cfg)))
        fh.write(cfg)
        for p in model.params:
            fh.write(np.ascontiguousarray(p, "<f8").tobytes())


def load_model(path: str | os.PathLike) -> Model:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _CKPT_HEAD.size:
        raise ValueError(f"{path}: truncated checkpoint")
    magic, version, n = _CKPT_HEAD.unpack_from(buf)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise ValueError(f"{path}: not a version {CKPT_VERSION} checkpoint")
    off = _CKPT_HEAD.size
    model = Model(ModelConfig.from_json(buf[off:off + n].decode()))
    off += n
    for p in model.params:
        size = p.size * 8
        if len(buf) - off < size:
            raise ValueError(f"{path}: truncated parameters")
        p[...] = np.frombuffer(buf, "<f8", p.size, off).reshape(p.shape)
        off += size
    if off != len(buf):
        raise ValueError(f"{path}: trailing bytes")
    return model
