"""Adaptive transmission controller.

Maps a per-chunk importance pair (semantic content, channel redundancy) to a
per-depth transmission level in {0, 1, 2}: drop, send once, or send twice.
Each branch thresholds the scaled importance against the depth index, so the
two binary masks are prefix-shaped (shallow depths are never less protected
than deeper ones) and their sum never exceeds 2 * n_q.

A smooth surrogate of the threshold is provided for straight-through style
use: the forward value is always the hard mask, the surrogate carries the
sensitivity. Importance itself comes either from a small convolutional network
(loadable weights) or from a documented energy/loss-rate heuristic.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .framing import TransmitSet
from .codec import TokenColumn

WEIGHTS_MAGIC = b"CTL1"

SEMANTIC_BRANCH = 0
CHANNEL_BRANCH = 1


@dataclass(frozen=True)
class ControllerConfig:
    l_budget: int = 16
    tau: float = 20.0
    gamma: float = 0.0
    mode: str = "heuristic"  # heuristic | learned | fixed
    # heuristic parameters: i_s = sigmoid(kappa * (log-energy - theta)),
    # i_c = clamp(c0 + c1 * p)
    kappa: float = 2.0
    theta: float = 0.0
    c0: float = 0.1
    c1: float = 2.0

    def __post_init__(self):
        if not 1 <= self.l_budget <= 16:
            raise ValueError("l_budget must be in [1, 16]")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.mode not in ("heuristic", "learned", "fixed"):
            raise ValueError(f"unknown controller mode {self.mode!r}")


@dataclass(frozen=True)
class ImportancePair:
    i_s: float
    i_c: float

    def __post_init__(self):
        if not (0.0 <= self.i_s <= 1.0 and 0.0 <= self.i_c <= 1.0):
            raise ValueError(f"importance values must be in [0, 1], got ({self.i_s}, {self.i_c})")


@dataclass
class Mask:
    levels: np.ndarray  # (n_q,) int in {0, 1, 2}
    source: ImportancePair
    l_budget: int

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=np.int8)

    def level_sum(self) -> int:
        return int(self.levels.sum())


def step(j: int, i: float) -> int:
    """Hard threshold: depth j is switched on once the importance reaches it."""
    if j < 1:
        raise ValueError("depth index j must be >= 1")
    return 1 if j <= i else 0


def _log_cosh(x: float) -> float:
    # log(cosh(x)) = |x| + log1p(exp(-2|x|)) - log(2); never overflows
    ax = abs(x)
    return ax + math.log1p(math.exp(-2.0 * ax)) - math.log(2.0)


def soft_step(j: int, i: float, tau: float) -> float:
    """Smooth surrogate of the hard threshold, sharpness tau.

    Exactly 0.5 at i = j + 0.5 and saturating to 0/1 away from the j..j+1
    transition band. Stable for tau * |i - j| up to 1e4 and beyond.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    return (_log_cosh(tau * (i - j)) - _log_cosh(tau * (j + 1 - i))) / (2.0 * tau) + 0.5


def importance_to_mask(pair: ImportancePair, l_budget: int, n_q: int = 8) -> Mask:
    """Threshold both importance components per depth; levels are the sum."""
    if not 1 <= l_budget <= 16:
        raise ValueError("l_budget must be in [1, 16]")
    m_s = np.array([step(j, l_budget * pair.i_s) for j in range(1, n_q + 1)], dtype=np.int8)
    m_c = np.array([step(j, l_budget * pair.i_c) for j in range(1, n_q + 1)], dtype=np.int8)
    return Mask(levels=m_s + m_c, source=pair, l_budget=l_budget)


def ste_mask(pair: ImportancePair, l_budget: int, tau: float, n_q: int = 8) -> tuple[np.ndarray, Mask]:
    """Soft per-branch masks plus the hard forward mask.

    Returns (soft, mask): soft is a (2, n_q) array, row 0 the semantic branch
    and row 1 the redundancy branch, each entry the smooth surrogate of the
    corresponding hard bit. The forward mask is identical to
    importance_to_mask and never depends on tau.
    """
    soft = np.empty((2, n_q))
    for j in range(1, n_q + 1):
        soft[SEMANTIC_BRANCH, j - 1] = soft_step(j, l_budget * pair.i_s, tau)
        soft[CHANNEL_BRANCH, j - 1] = soft_step(j, l_budget * pair.i_c, tau)
    return soft, importance_to_mask(pair, l_budget, n_q)


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def log_energy(values: np.ndarray, eps: float = 1e-12) -> float:
    values = np.asarray(values, dtype=np.float64)
    return math.log(float((values ** 2).mean()) + eps)


def compute_importance(z: np.ndarray, p: float, weights: "ControllerWeights | None",
                       cfg: ControllerConfig) -> ImportancePair:
    """Importance pair from the frame feature and the loss-rate feedback."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("loss rate p must be in [0, 1]")
    if cfg.mode == "learned":
        if weights is None:
            raise ValueError("learned mode requires controller weights")
        i_s, i_c = weights.forward(np.asarray(z, dtype=np.float64), p)
        return ImportancePair(i_s=i_s, i_c=i_c)
    i_s = _sigmoid(cfg.kappa * (log_energy(z) - cfg.theta))
    i_c = min(max(cfg.c0 + cfg.c1 * p, 0.0), 1.0)
    return ImportancePair(i_s=i_s, i_c=i_c)


def apply_mask(column: TokenColumn, mask: Mask) -> TransmitSet:
    """Level 0 drops the token, 1 sends one copy, 2 adds a redundant copy."""
    if len(mask.levels) != len(column.tokens):
        raise ValueError("mask and token column lengths differ")
    levels = mask.levels
    return TransmitSet(
        frame_index=column.frame_index,
        tokens=column.tokens.copy(),
        present=levels >= 1,
        redundant=levels == 2,
    )


def bitrate_penalty(mask: Mask, gamma: float) -> float:
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    return gamma * mask.level_sum()


# --- learned controller ------------------------------------------------------


def snake(x: np.ndarray, a: float = 1.0) -> np.ndarray:
    """Snake activation: x + sin^2(a x) / a."""
    return x + np.sin(a * x) ** 2 / a


@dataclass
class ConvLayer:
    weight: np.ndarray  # (out_ch, in_ch, kernel)
    bias: np.ndarray    # (out_ch,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 3 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError("conv layer shapes are inconsistent")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ValueError("conv layer weights must be finite")

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Same-padded 1-D convolution over (in_ch, T)."""
        out_ch, in_ch, k = self.weight.shape
        if x.shape[0] != in_ch:
            raise ValueError(f"expected {in_ch} input channels, got {x.shape[0]}")
        t = x.shape[1]
        pad = k // 2
        xp = np.pad(x, ((0, 0), (pad, pad)))
        out = np.empty((out_ch, t))
        for o in range(out_ch):
            acc = np.full(t, self.bias[o])
            for c in range(in_ch):
                for off in range(k):
                    acc += self.weight[o, c, off] * xp[c, off:off + t]
            out[o] = acc
        return out


@dataclass
class ControllerWeights:
    """Semantic branch (kernel-3 convs with Snake) followed by a channel
    branch (kernel-1 convs) that fuses the loss-rate input; sigmoid output."""

    semantic: list[ConvLayer] = field(default_factory=list)
    channel: list[ConvLayer] = field(default_factory=list)

    def forward(self, z: np.ndarray, p: float) -> tuple[float, float]:
        x = z.reshape(-1, 1)  # (feature_dim, T=1)
        for layer in self.semantic:
            x = snake(layer.apply(x))
        if x.shape[0] != 1:
            raise ValueError("semantic branch must reduce to one channel")
        y = np.concatenate([x, np.full((1, x.shape[1]), p)], axis=0)
        for layer in self.channel[:-1]:
            y = snake(layer.apply(y))
        y = self.channel[-1].apply(y)
        if y.shape[0] != 2:
            raise ValueError("channel branch must output two channels")
        return _sigmoid(float(y[0, 0])), _sigmoid(float(y[1, 0]))


def default_weight_dims(feature_dim: int) -> list[tuple[int, int, int, int]]:
    """(branch, out_ch, in_ch, kernel) rows mirroring the 512->256->128->64->1
    reduction, scaled down proportionally for toy feature sizes."""
    dims = []
    ch = feature_dim
    for _ in range(4):
        nxt = max(1, ch // 2)
        dims.append((SEMANTIC_BRANCH, nxt, ch, 3))
        ch = nxt
    if ch != 1:
        dims[-1] = (SEMANTIC_BRANCH, 1, dims[-1][2], 3)
    dims.append((CHANNEL_BRANCH, 4, 2, 1))
    dims.append((CHANNEL_BRANCH, 2, 4, 1))
    return dims


def random_weights(feature_dim: int, seed: int, scale: float = 0.2) -> ControllerWeights:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    w = ControllerWeights()
    for branch, out_ch, in_ch, k in default_weight_dims(feature_dim):
        layer = ConvLayer(weight=scale * rng.standard_normal((out_ch, in_ch, k)),
                          bias=np.zeros(out_ch))
        (w.semantic if branch == SEMANTIC_BRANCH else w.channel).append(layer)
    return w


def zero_weights(feature_dim: int) -> ControllerWeights:
    w = ControllerWeights()
    for branch, out_ch, in_ch, k in default_weight_dims(feature_dim):
        layer = ConvLayer(weight=np.zeros((out_ch, in_ch, k)), bias=np.zeros(out_ch))
        (w.semantic if branch == SEMANTIC_BRANCH else w.channel).append(layer)
    return w


# Weights file ("CTL1"): magic, int32 layer count, then per layer an int32
# header [branch, out_ch, in_ch, kernel] followed by float32 weights
# (out x in x kernel, row-major) and float32 biases. Little-endian.


def save_weights(path, weights: ControllerWeights) -> None:
    layers = [(SEMANTIC_BRANCH, l) for l in weights.semantic] + [(CHANNEL_BRANCH, l) for l in weights.channel]
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<i", len(layers)))
        for branch, layer in layers:
            out_ch, in_ch, k = layer.weight.shape
            f.write(struct.pack("<4i", branch, out_ch, in_ch, k))
            f.write(layer.weight.astype("<f4").tobytes(order="C"))
            f.write(layer.bias.astype("<f4").tobytes(order="C"))


def load_weights(path) -> ControllerWeights:
    with open(path, "rb") as f:
        if f.read(4) != WEIGHTS_MAGIC:
            raise ValueError("bad controller weights magic")
        (n_layers,) = struct.unpack("<i", f.read(4))
        w = ControllerWeights()
        for _ in range(n_layers):
            branch, out_ch, in_ch, k = struct.unpack("<4i", f.read(16))
            raw = f.read(4 * out_ch * in_ch * k)
            weight = np.frombuffer(raw, dtype="<f4").reshape(out_ch, in_ch, k).astype(np.float64)
            bias = np.frombuffer(f.read(4 * out_ch), dtype="<f4").astype(np.float64)
            layer = ConvLayer(weight=weight, bias=bias)
            (w.semantic if branch == SEMANTIC_BRANCH else w.channel).append(layer)
    return w
