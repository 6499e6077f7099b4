"""Causal packet loss concealment over token columns.

Missing tokens are filled frame by frame, depth by depth: received tokens
pass through untouched, erased ones are filled from a predictor's conditional
distribution given the reconstructed history and the current column's
shallower tokens (greedy argmax by default, lowest index on ties). The
predictor never sees anything at or after the frame being reconstructed.

The model-input layout mirrors the temporal-by-depth factorization used by
token language models: one stream per quantizer depth plus a text slot, with
acoustic streams delayed one step behind the semantic stream.

Token sentinels: ERASED marks a transmitted-but-lost slot, ABSENT a slot the
transmitter dropped, PAD the (unused here) text stream.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .codec import TokenColumn

ERASED = -1
ABSENT = -2
PAD = -3

COUNT_MODEL_MAGIC = b"CNT1"
TOKENS_MAGIC = b"TOK1"


def column_from_transmit(ts) -> np.ndarray:
    """Receiver-side token column: values where received, else sentinels."""
    col = np.full(ts.n_q, ABSENT, dtype=np.int32)
    got = ts.present & ~ts.erased
    col[got] = ts.tokens[got]
    col[ts.present & ts.erased] = ERASED
    return col


# --- model input mapping ------------------------------------------------------


def _columns_to_array(columns) -> np.ndarray:
    if isinstance(columns, np.ndarray):
        return columns.astype(np.int32)
    rows = []
    expected = None
    for col in columns:
        if isinstance(col, TokenColumn):
            if expected is not None and col.frame_index != expected:
                raise ValueError(f"out-of-order frame {col.frame_index}, expected {expected}")
            expected = col.frame_index + 1
            rows.append(col.tokens)
        else:
            rows.append(np.asarray(col, dtype=np.int32))
    return np.stack(rows).astype(np.int32)


def build_model_inputs(columns, include_flush: bool = True) -> np.ndarray:
    """Map token columns to per-step model input vectors.

    Output row n holds [text PAD, semantic token of frame n, acoustic tokens
    of frame n-1 (depths 2..n_q)]; the delayed slots of the first row are 0.
    With include_flush a trailing row carries the last frame's acoustic
    tokens so the mapping is invertible.
    """
    cols = _columns_to_array(columns)
    n, n_q = cols.shape
    rows = n + 1 if include_flush else n
    v = np.zeros((rows, n_q + 1), dtype=np.int32)
    v[:, 0] = PAD
    for t in range(rows):
        v[t, 1] = cols[t, 0] if t < n else 0
        if t >= 1:
            v[t, 2:n_q + 1] = cols[t - 1, 1:n_q]
    return v


def undo_model_inputs(inputs: np.ndarray, n_q: int) -> np.ndarray:
    """Inverse of build_model_inputs (requires the flush row)."""
    inputs = np.asarray(inputs)
    n = inputs.shape[0] - 1
    cols = np.zeros((n, n_q), dtype=np.int32)
    cols[:, 0] = inputs[:n, 1]
    cols[:, 1:n_q] = inputs[1:n + 1, 2:n_q + 1]
    return cols


# --- predictors ----------------------------------------------------------------


class RepeatLastPredictor:
    """One-hot on the most recent reconstructed value at the same depth."""

    def __init__(self, vocab: int):
        self.vocab = vocab

    def distribution(self, history: list[np.ndarray], prefix: np.ndarray, depth: int) -> np.ndarray:
        token = 0
        for col in reversed(history):
            if col[depth - 1] >= 0:
                token = int(col[depth - 1])
                break
        dist = np.zeros(self.vocab)
        dist[token] = 1.0
        return dist


def _fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


class CountModelPredictor:
    """Per-depth conditional counts with additive smoothing.

    The context holds up to `order` items: first the previous column's token
    at the same depth, then the current column's shallower tokens taken
    nearest-first. order=0 degenerates to a per-depth unigram. Special
    symbols stand in for "before the first frame" and "slot never sent".
    """

    def __init__(self, order: int, smoothing: float, vocab: int, n_q: int):
        if order < 0:
            raise ValueError("order must be >= 0")
        if smoothing <= 0:
            raise ValueError("smoothing must be > 0")
        self.order = order
        self.smoothing = float(smoothing)
        self.vocab = vocab
        self.n_q = n_q
        self.counts: dict[int, dict[int, int]] = {}
        self.totals: dict[int, int] = {}

    def _symbol(self, value: int) -> int:
        if value >= 0:
            return int(value)
        return self.vocab + 1  # absent / unknown slot

    def context_key(self, prev_token: int | None, prefix: np.ndarray, depth: int) -> int:
        items = []
        if self.order >= 1:
            items.append(self.vocab if prev_token is None else self._symbol(prev_token))
        for d in range(depth - 2, -1, -1):  # nearest shallower first
            if len(items) >= self.order:
                break
            items.append(self._symbol(int(prefix[d])))
        packed = struct.pack(f"<{len(items) + 1}i", depth, *items)
        return _fnv1a64(packed)

    def observe(self, prev_token: int | None, prefix: np.ndarray, depth: int, token: int) -> None:
        key = self.context_key(prev_token, prefix, depth)
        bucket = self.counts.setdefault(key, {})
        bucket[int(token)] = bucket.get(int(token), 0) + 1
        self.totals[key] = self.totals.get(key, 0) + 1

    def train(self, columns) -> None:
        cols = _columns_to_array(columns)
        if cols.shape[1] != self.n_q:
            raise ValueError(f"corpus has {cols.shape[1]} depths, model expects {self.n_q}")
        for n in range(cols.shape[0]):
            prev = cols[n - 1] if n > 0 else None
            for d in range(1, self.n_q + 1):
                prev_tok = None if prev is None else int(prev[d - 1])
                self.observe(prev_tok, cols[n, :d - 1], d, int(cols[n, d - 1]))

    def distribution(self, history: list[np.ndarray], prefix: np.ndarray, depth: int) -> np.ndarray:
        prev_tok = None if not history else int(history[-1][depth - 1])
        key = self.context_key(prev_tok, np.asarray(prefix), depth)
        dist = np.full(self.vocab, self.smoothing)
        for token, count in self.counts.get(key, {}).items():
            if token < self.vocab:
                dist[token] += count
        dist /= dist.sum()
        return dist


def repeat_last(vocab: int) -> RepeatLastPredictor:
    return RepeatLastPredictor(vocab)


def count_model(order: int, smoothing: float, vocab: int, n_q: int) -> CountModelPredictor:
    return CountModelPredictor(order=order, smoothing=smoothing, vocab=vocab, n_q=n_q)


def train_count_model(columns, order: int, smoothing: float, vocab: int, n_q: int) -> CountModelPredictor:
    model = CountModelPredictor(order=order, smoothing=smoothing, vocab=vocab, n_q=n_q)
    model.train(columns)
    return model


# --- concealment ----------------------------------------------------------------


@dataclass
class PredictorContext:
    """Causal reconstruction state: everything the predictor may look at."""

    predictor: object
    n_q: int
    temperature: float | None = None
    seed: int = 0
    history: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self._rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(self.seed)))


def predict_distribution(ctx: PredictorContext, prefix, depth: int) -> np.ndarray:
    """Normalized next-token distribution at the given depth (1-based)."""
    if not 1 <= depth <= ctx.n_q:
        raise ValueError(f"depth must be in [1, {ctx.n_q}]")
    dist = ctx.predictor.distribution(ctx.history, np.asarray(prefix), depth)
    return dist


def conceal_frame(ctx: PredictorContext, received: np.ndarray,
                  collect_distributions: list | None = None) -> np.ndarray:
    """Fill the erased slots of one column, shallow depths first.

    Received tokens pass through unchanged and filled tokens join the prefix
    for deeper predictions. Slots the transmitter never sent stay absent.
    When collect_distributions is a list it receives one (depth, distribution)
    pair per non-absent slot, evaluated before the slot's value enters the
    prefix (for cross-entropy scoring of the predictor).
    """
    col = np.asarray(received, dtype=np.int32).copy()
    if len(col) != ctx.n_q:
        raise ValueError(f"column has {len(col)} depths, expected {ctx.n_q}")
    for d in range(1, ctx.n_q + 1):
        if col[d - 1] == ABSENT:
            continue
        dist = None
        if col[d - 1] == ERASED or collect_distributions is not None:
            dist = predict_distribution(ctx, col[:d - 1], d)
        if collect_distributions is not None:
            collect_distributions.append((d, dist))
        if col[d - 1] == ERASED:
            if ctx.temperature is None:
                col[d - 1] = int(np.argmax(dist))  # first occurrence wins ties
            else:
                logits = np.log(np.maximum(dist, 1e-300)) / ctx.temperature
                w = np.exp(logits - logits.max())
                col[d - 1] = int(ctx._rng.choice(len(dist), p=w / w.sum()))
    ctx.history.append(col)
    return col


# --- low-rank adapter merge ------------------------------------------------------


@dataclass
class LoraAdapter:
    base: np.ndarray  # (d, h) frozen weights
    down: np.ndarray  # (d, r)
    up: np.ndarray    # (r, h)

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=np.float64)
        self.down = np.asarray(self.down, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)
        d, h = self.base.shape
        r = self.down.shape[1]
        if self.down.shape != (d, r) or self.up.shape != (r, h):
            raise ValueError("adapter shapes are not conformable with the base matrix")
        if r > min(d, h):
            raise ValueError(f"adapter rank {r} exceeds min(d, h) = {min(d, h)}")

    @property
    def rank(self) -> int:
        return self.down.shape[1]


def lora_merge(adapter: LoraAdapter) -> np.ndarray:
    """Merged weights: frozen base plus the low-rank update."""
    return adapter.base + adapter.down @ adapter.up


# --- binary artifact formats ------------------------------------------------------
#
# Count model ("CNT1"): magic, int32 [order, vocab, n_q], float64 smoothing,
# uint64 triple count, then (uint64 context-hash, uint32 token, uint64 count)
# triples. Token corpora ("TOK1"): magic, int32 n_q, then uint16 token indices
# in frame-major, depth-minor order. Little-endian throughout.


def save_count_model(path, model: CountModelPredictor) -> None:
    triples = []
    for key in sorted(model.counts):
        for token in sorted(model.counts[key]):
            triples.append((key, token, model.counts[key][token]))
    with open(path, "wb") as f:
        f.write(COUNT_MODEL_MAGIC)
        f.write(struct.pack("<3i", model.order, model.vocab, model.n_q))
        f.write(struct.pack("<d", model.smoothing))
        f.write(struct.pack("<Q", len(triples)))
        for key, token, count in triples:
            f.write(struct.pack("<QIQ", key, token, count))


def load_count_model(path) -> CountModelPredictor:
    with open(path, "rb") as f:
        if f.read(4) != COUNT_MODEL_MAGIC:
            raise ValueError("bad count model magic")
        order, vocab, n_q = struct.unpack("<3i", f.read(12))
        (smoothing,) = struct.unpack("<d", f.read(8))
        (n_triples,) = struct.unpack("<Q", f.read(8))
        model = CountModelPredictor(order=order, smoothing=smoothing, vocab=vocab, n_q=n_q)
        for _ in range(n_triples):
            key, token, count = struct.unpack("<QIQ", f.read(20))
            model.counts.setdefault(key, {})[token] = count
            model.totals[key] = model.totals.get(key, 0) + count
    return model


def save_tokens(path, columns) -> None:
    cols = _columns_to_array(columns)
    if cols.min() < 0 or cols.max() >= 1 << 16:
        raise ValueError("token corpus entries must fit uint16 and carry no sentinels")
    with open(path, "wb") as f:
        f.write(TOKENS_MAGIC)
        f.write(struct.pack("<i", cols.shape[1]))
        f.write(cols.astype("<u2").tobytes(order="C"))


def load_tokens(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(4) != TOKENS_MAGIC:
            raise ValueError("bad token corpus magic")
        (n_q,) = struct.unpack("<i", f.read(4))
        raw = f.read()
    if len(raw) % (2 * n_q):
        raise ValueError("token corpus length is not a whole number of frames")
    return np.frombuffer(raw, dtype="<u2").reshape(-1, n_q).astype(np.int32)
