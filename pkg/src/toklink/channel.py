"""Seeded erasure channels and receiver-side loss estimation.

Two loss models: independent per-unit loss, and a two-state Gilbert-Elliott
Markov chain for bursty loss (pure erasure defaults: Good never loses, Bad
always loses). Units may be packets or individual token copies. All channels
replay identically for a given seed; the Markov walk uses a counter-based
generator so streams can be re-stepped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .framing import FeedbackMessage, quantize_loss

GOOD, BAD = 0, 1


@dataclass(frozen=True)
class GEParams:
    p_gb: float           # Good -> Bad per step
    p_bg: float           # Bad -> Good per step
    loss_good: float = 0.0
    loss_bad: float = 1.0

    def __post_init__(self):
        for name in ("p_gb", "p_bg", "loss_good", "loss_bad"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a probability, got {v}")
        if self.p_gb + self.p_bg <= 0:
            raise ValueError("p_gb + p_bg must be > 0")

    @property
    def stationary_bad(self) -> float:
        return self.p_gb / (self.p_gb + self.p_bg)

    @property
    def mean_burst(self) -> float:
        return float("inf") if self.p_bg == 0 else 1.0 / self.p_bg

    @property
    def average_loss(self) -> float:
        pi_b = self.stationary_bad
        return (1.0 - pi_b) * self.loss_good + pi_b * self.loss_bad


def ge_params_from_target(p_target: float, mean_burst: float) -> GEParams:
    """Pure-erasure GE parameters with stationary loss exactly p_target and
    mean Bad sojourn mean_burst."""
    if not 0.0 <= p_target < 1.0:
        raise ValueError("p_target must be in [0, 1)")
    if mean_burst < 1.0:
        raise ValueError("mean_burst must be >= 1")
    p_bg = 1.0 / mean_burst
    p_gb = p_target * p_bg / (1.0 - p_target)
    if p_gb > 1.0:
        raise ValueError(f"infeasible: p_target {p_target} with mean_burst {mean_burst} needs p_gb > 1")
    return GEParams(p_gb=p_gb, p_bg=p_bg)


class GilbertElliottChannel:
    """Stateful two-state Markov erasure channel, one step per unit."""

    def __init__(self, params: GEParams, seed, start_state: str = "stationary"):
        self.params = params
        self.rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
        self.steps = 0
        if start_state == "good":
            self.state = GOOD
        elif start_state == "bad":
            self.state = BAD
        elif start_state == "stationary":
            self.state = BAD if self.rng.random() < params.stationary_bad else GOOD
        else:
            raise ValueError(f"unknown start_state {start_state!r}")

    def step(self) -> tuple[bool, int]:
        """Emit (lost, state) for the current unit, then advance the chain."""
        state = self.state
        p_loss = self.params.loss_bad if state == BAD else self.params.loss_good
        lost = bool(self.rng.random() < p_loss)
        flip = self.params.p_bg if state == BAD else self.params.p_gb
        if self.rng.random() < flip:
            self.state = GOOD if state == BAD else BAD
        self.steps += 1
        return lost, state


def uniform_loss(n_units: int, p: float, seed) -> np.ndarray:
    """Independent per-unit loss marks (True = lost)."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    return rng.random(n_units) < p


def ge_loss(n_units: int, params: GEParams, seed, start_state: str = "stationary") -> tuple[np.ndarray, np.ndarray]:
    """Loss marks plus the visited state per unit (for traces)."""
    chan = GilbertElliottChannel(params, seed, start_state)
    lost = np.empty(n_units, dtype=bool)
    states = np.empty(n_units, dtype=np.int8)
    for i in range(n_units):
        lost[i], states[i] = chan.step()
    return lost, states


def burst_lengths(lost: np.ndarray) -> np.ndarray:
    """Lengths of maximal runs of consecutive lost units."""
    lost = np.asarray(lost, dtype=bool)
    if not lost.any():
        return np.zeros(0, dtype=np.int64)
    padded = np.concatenate([[False], lost, [False]]).astype(np.int8)
    edges = np.diff(padded)
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return ends - starts


class LossEstimator:
    """Sliding-window packet loss estimate with periodic one-byte feedback.

    Observes one packet slot per packet interval; the estimate is
    missing/expected over the trailing window, quantized to 8 bits, and a
    feedback message is emitted once per period. An empty window holds the
    last estimate (initially 0).
    """

    def __init__(self, window_ms: float = 2000.0, period_ms: int = 100, packet_interval_ms: float = 160.0):
        if window_ms <= 0 or packet_interval_ms <= 0:
            raise ValueError("window and packet interval must be > 0")
        self.window = max(1, int(round(window_ms / packet_interval_ms)))
        self.period_ms = period_ms
        self.packet_interval_ms = packet_interval_ms
        self._history: list[bool] = []
        self._last_q = 0
        self._time_ms = 0.0
        self._next_emit_ms = float(period_ms)
        self.messages: list[FeedbackMessage] = []

    def observe(self, lost: bool) -> None:
        self._history.append(bool(lost))
        if len(self._history) > self.window:
            self._history.pop(0)
        self._time_ms += self.packet_interval_ms
        while self._time_ms >= self._next_emit_ms:
            self._last_q = quantize_loss(sum(self._history) / len(self._history))
            self.messages.append(FeedbackMessage(
                p_hat_q=self._last_q,
                emit_ms=int(self._next_emit_ms),
                period_ms=self.period_ms,
            ))
            self._next_emit_ms += self.period_ms

    def estimate(self) -> float:
        return self._last_q / 255.0


def estimate_loss(received_seq_nos, n_packets: int, window_ms: float = 2000.0,
                  period_ms: int = 100, packet_interval_ms: float = 160.0) -> tuple[float, list[FeedbackMessage]]:
    """Walk the packet timeline and produce the feedback message stream.

    Returns the final estimate and every emitted message. Packets are expected
    at a fixed cadence; a seq_no absent from received_seq_nos counts missing.
    """
    received = set(int(s) for s in received_seq_nos)
    est = LossEstimator(window_ms=window_ms, period_ms=period_ms, packet_interval_ms=packet_interval_ms)
    for seq in range(n_packets):
        est.observe(seq not in received)
    return est.estimate(), est.messages
