"""Toy residual vector quantizer over synthetic latent features.

Encoding follows the standard RVQ recursion: stage i quantizes the residual
left by stages 1..i-1 against its own codebook, and decoding sums the selected
codewords. Depth 1 is the semantic token; deeper stages refine it. Codebooks
are trained per depth with plain Lloyd iterations on the residuals.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

CODEBOOK_MAGIC = b"RVQ1"
FEATURE_MAGIC = b"FTR1"

LLOYD_MAX_ITER = 50
LLOYD_REL_TOL = 1e-6


@dataclass(frozen=True)
class CodecConfig:
    n_q: int = 8
    codebook_size: int = 2048
    feature_dim: int = 16
    frame_rate_hz: float = 12.5

    def __post_init__(self):
        if self.n_q < 1:
            raise ValueError(f"n_q must be >= 1, got {self.n_q}")
        if self.codebook_size < 2:
            raise ValueError(f"codebook_size must be >= 2, got {self.codebook_size}")
        if self.feature_dim < 1:
            raise ValueError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if self.frame_rate_hz <= 0:
            raise ValueError(f"frame_rate_hz must be > 0, got {self.frame_rate_hz}")

    @property
    def bits_per_token(self) -> int:
        # always derived from the configured codebook size
        return max(1, math.ceil(math.log2(self.codebook_size)))

    @property
    def frame_duration_s(self) -> float:
        return 1.0 / self.frame_rate_hz


@dataclass
class LatentFeature:
    values: np.ndarray  # shape (feature_dim,)
    frame_index: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("feature values must be a 1-D vector")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature values must be finite")
        if self.frame_index < 0:
            raise ValueError("frame_index must be non-negative")


@dataclass
class Codebook:
    depth: int  # 1-based
    vectors: np.ndarray  # shape (C, D)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.depth < 1:
            raise ValueError("codebook depth must be >= 1")
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 2:
            raise ValueError("codebook needs a (C, D) matrix with C >= 2")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("codebook vectors must be finite")

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class TokenColumn:
    frame_index: int
    tokens: np.ndarray = field(default_factory=lambda: np.zeros(8, dtype=np.int32))

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int32)


def _check_codebooks(codebooks: list[Codebook], dim: int) -> None:
    if not codebooks:
        raise ValueError("codebook list is empty")
    for i, cb in enumerate(codebooks, start=1):
        if cb.depth != i:
            raise ValueError(f"codebooks must be sorted by depth 1..N_Q; got depth {cb.depth} at position {i}")
        if cb.dim != dim:
            raise ValueError(f"codebook depth {cb.depth} has dim {cb.dim}, expected {dim}")


def _nearest(residuals: np.ndarray, vectors: np.ndarray, batch: int = 1024) -> np.ndarray:
    """Nearest codeword per row by squared Euclidean distance, lowest index on ties."""
    n = residuals.shape[0]
    out = np.empty(n, dtype=np.int32)
    for start in range(0, n, batch):
        chunk = residuals[start:start + batch]
        d2 = ((chunk[:, None, :] - vectors[None, :, :]) ** 2).sum(axis=-1)
        out[start:start + batch] = np.argmin(d2, axis=1)
    return out


def rvq_encode(z: LatentFeature, codebooks: list[Codebook]) -> TokenColumn:
    """Quantize one feature vector into a depth-ordered token column."""
    _check_codebooks(codebooks, z.values.shape[0])
    tokens = encode_array(z.values[None, :], codebooks)[0]
    return TokenColumn(frame_index=z.frame_index, tokens=tokens)


def encode_array(features: np.ndarray, codebooks: list[Codebook]) -> np.ndarray:
    """Vectorized encode of an (N, D) feature matrix to (N, n_q) token indices."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError("expected an (N, D) feature matrix")
    _check_codebooks(codebooks, features.shape[1])
    residual = features.copy()
    tokens = np.empty((features.shape[0], len(codebooks)), dtype=np.int32)
    for i, cb in enumerate(codebooks):
        idx = _nearest(residual, cb.vectors)
        tokens[:, i] = idx
        residual -= cb.vectors[idx]
    return tokens


def rvq_decode(tokens: TokenColumn, codebooks: list[Codebook], depth_limit: int) -> LatentFeature:
    """Sum the selected codewords for depths 1..depth_limit."""
    if not codebooks:
        raise ValueError("codebook list is empty")
    if not 1 <= depth_limit <= len(codebooks):
        raise ValueError(f"depth_limit must be in [1, {len(codebooks)}], got {depth_limit}")
    acc = np.zeros(codebooks[0].dim, dtype=np.float64)
    for cb, tok in zip(codebooks[:depth_limit], tokens.tokens[:depth_limit]):
        tok = int(tok)
        if not 0 <= tok < cb.size:
            raise ValueError(f"token index {tok} out of range for codebook of size {cb.size}")
        acc += cb.vectors[tok]
    return LatentFeature(values=acc, frame_index=tokens.frame_index)


def decode_depths(tokens: np.ndarray, codebooks: list[Codebook]) -> np.ndarray:
    """Decode a column from an arbitrary set of depths; entries < 0 are skipped."""
    acc = np.zeros(codebooks[0].dim, dtype=np.float64)
    for cb, tok in zip(codebooks, np.asarray(tokens)):
        if tok >= 0:
            acc += cb.vectors[int(tok)]
    return acc


def _lloyd(data: np.ndarray, k: int, rng: np.random.Generator, pin_zero: bool = False) -> np.ndarray:
    n = data.shape[0]
    if n < k:
        logger.warning("corpus (%d) smaller than codebook size (%d); sampling with replacement", n, k)
        centers = data[rng.choice(n, size=k, replace=True)].copy()
    else:
        centers = data[rng.choice(n, size=k, replace=False)].copy()
    if pin_zero:
        centers[0] = 0.0
    prev = np.inf
    for _ in range(LLOYD_MAX_ITER):
        idx = _nearest(data, centers)
        dist = float(((data - centers[idx]) ** 2).sum(axis=1).mean())
        if prev - dist <= LLOYD_REL_TOL * max(prev, 1e-30):
            break
        prev = dist
        for c in range(1 if pin_zero else 0, k):
            members = data[idx == c]
            if len(members):
                centers[c] = members.mean(axis=0)
            # empty cluster keeps its old center
    return centers


def train_codebooks(corpus, cfg: CodecConfig, seed: int) -> list[Codebook]:
    """Fit per-depth codebooks with Lloyd iterations on successive residuals.

    Codeword 0 of every depth past the first is pinned to the zero vector, so
    quantizing a residual can never increase its norm and per-frame
    reconstruction error is non-increasing in the decode depth.
    """
    data = as_array(corpus)
    if data.shape[0] == 0:
        raise ValueError("training corpus is empty")
    if data.shape[1] != cfg.feature_dim:
        raise ValueError(f"corpus dim {data.shape[1]} != configured feature_dim {cfg.feature_dim}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    residual = data.astype(np.float64).copy()
    codebooks = []
    for depth in range(1, cfg.n_q + 1):
        centers = _lloyd(residual, cfg.codebook_size, rng, pin_zero=depth > 1)
        cb = Codebook(depth=depth, vectors=centers)
        codebooks.append(cb)
        residual -= centers[_nearest(residual, centers)]
    return codebooks


def residual_energies(corpus, codebooks: list[Codebook]) -> np.ndarray:
    """Mean squared residual after each depth, measured on the given corpus."""
    data = as_array(corpus).astype(np.float64)
    residual = data.copy()
    energies = np.empty(len(codebooks))
    for i, cb in enumerate(codebooks):
        residual -= cb.vectors[_nearest(residual, cb.vectors)]
        energies[i] = float((residual ** 2).sum(axis=1).mean())
    return energies


def synth_features(
    n_frames: int,
    cfg: CodecConfig,
    seed: int,
    ar_coeff: float = 0.9,
    gate_duty: float = 0.5,
    gate_mean_run: float = 12.0,
    gate_floor: float = 0.05,
) -> list[LatentFeature]:
    """Seeded AR(1) Gaussian feature stream with an on/off energy gate.

    The gate is a two-state Markov envelope (mean "voiced" run of
    gate_mean_run frames, stationary duty cycle gate_duty); silent frames are
    scaled by gate_floor so frame energy varies with content.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    if not 0.0 < gate_duty < 1.0:
        raise ValueError("gate_duty must be in (0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    d = cfg.feature_dim

    noise = rng.standard_normal((n_frames, d))
    x = np.empty((n_frames, d))
    scale = math.sqrt(1.0 - ar_coeff ** 2)
    x[0] = noise[0]
    for t in range(1, n_frames):
        x[t] = ar_coeff * x[t - 1] + scale * noise[t]

    p_off = 1.0 / gate_mean_run
    p_on = gate_duty * p_off / (1.0 - gate_duty)
    u = rng.random(n_frames)
    gate = np.empty(n_frames, dtype=bool)
    gate[0] = u[0] < gate_duty
    for t in range(1, n_frames):
        gate[t] = (not gate[t - 1]) if u[t] < (p_off if gate[t - 1] else p_on) else gate[t - 1]
    x[~gate] *= gate_floor

    return [LatentFeature(values=x[t], frame_index=t) for t in range(n_frames)]


def as_array(corpus) -> np.ndarray:
    """Stack a feature corpus (list of LatentFeature or ndarray) into (N, D)."""
    if isinstance(corpus, np.ndarray):
        return corpus
    return np.stack([f.values for f in corpus])


# --- binary artifact formats -------------------------------------------------
#
# Codebooks ("RVQ1"): magic, then little-endian int32 header
# [n_q, codebook_size, feature_dim, bits_per_token, frame_rate_mhz], then one
# row-major float32 C x D matrix per depth. The frame rate is stored in
# millihertz so the header stays all-integer (12.5 Hz -> 12500).
#
# Feature corpora ("FTR1"): magic, int32 [n_frames, feature_dim], then the
# row-major float32 matrix.


def save_codebooks(path, cfg: CodecConfig, codebooks: list[Codebook]) -> None:
    with open(path, "wb") as f:
        f.write(CODEBOOK_MAGIC)
        f.write(struct.pack(
            "<5i",
            cfg.n_q,
            cfg.codebook_size,
            cfg.feature_dim,
            cfg.bits_per_token,
            round(cfg.frame_rate_hz * 1000),
        ))
        for cb in codebooks:
            f.write(cb.vectors.astype("<f4").tobytes(order="C"))


def load_codebooks(path) -> tuple[CodecConfig, list[Codebook]]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CODEBOOK_MAGIC:
            raise ValueError(f"bad codebook file magic {magic!r}")
        n_q, c, d, bits, rate_mhz = struct.unpack("<5i", f.read(20))
        cfg = CodecConfig(n_q=n_q, codebook_size=c, feature_dim=d, frame_rate_hz=rate_mhz / 1000.0)
        if bits != cfg.bits_per_token:
            raise ValueError(f"stored bits_per_token {bits} inconsistent with codebook size {c}")
        codebooks = []
        for depth in range(1, n_q + 1):
            raw = f.read(4 * c * d)
            if len(raw) != 4 * c * d:
                raise ValueError("truncated codebook file")
            vec = np.frombuffer(raw, dtype="<f4").reshape(c, d).astype(np.float64)
            codebooks.append(Codebook(depth=depth, vectors=vec))
    return cfg, codebooks


def save_features(path, features) -> None:
    data = as_array(features)
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<2i", data.shape[0], data.shape[1]))
        f.write(data.astype("<f4").tobytes(order="C"))


def load_features(path) -> list[LatentFeature]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FEATURE_MAGIC:
            raise ValueError(f"bad feature file magic {magic!r}")
        n, d = struct.unpack("<2i", f.read(8))
        raw = f.read(4 * n * d)
        if len(raw) != 4 * n * d:
            raise ValueError("truncated feature file")
        data = np.frombuffer(raw, dtype="<f4").reshape(n, d).astype(np.float64)
    return [LatentFeature(values=data[t], frame_index=t) for t in range(n)]
