"""Evaluation objectives and analytical accounting.

Covers the token-level evaluation losses (cross-entropy reconstruction loss
with per-depth weights, plus a bitrate-penalized total), payload bitrate
arithmetic, the additive end-to-end latency model, and recovery statistics
comparing ground-truth, received, and concealed token streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict

REPORT_SCHEMA_VERSION = 1

CE_CAP_NATS = 30.0


@dataclass(frozen=True)
class LatencyProfile:
    t_context: float = 0.0       # duration of frames involved in coding (s)
    t_coder: float = 0.0         # codec compute (s)
    t_ra: float = 0.0            # adaptive controller compute (s)
    t_token: float = 0.0         # per-token prediction time (s)
    expected_tokens: float = 0.0
    t_transmit: float = 0.0

    def __post_init__(self):
        if min(self.t_context, self.t_coder, self.t_ra, self.t_token,
               self.expected_tokens, self.t_transmit) < 0:
            raise ValueError("latency components must be non-negative")


def latency_estimate(prof: LatencyProfile) -> float:
    """Additive end-to-end delay including the expected token-prediction time."""
    return (prof.t_context + prof.t_coder + prof.t_ra
            + prof.expected_tokens * prof.t_token + prof.t_transmit)


def payload_bitrate(masks, bits_per_token: int, frame_rate_hz: float) -> float:
    """Mean transmitted levels per frame times bits per token times frame rate."""
    sums = _level_sums(masks)
    if len(sums) == 0:
        return 0.0
    return float(np.mean(sums)) * bits_per_token * frame_rate_hz


def _level_sums(masks) -> np.ndarray:
    if isinstance(masks, np.ndarray):
        return masks.astype(np.float64)
    out = []
    for m in masks:
        out.append(m.level_sum() if hasattr(m, "level_sum") else float(m))
    return np.asarray(out, dtype=np.float64)


def cross_entropy(dist: np.ndarray, truth: int, cap: float = CE_CAP_NATS) -> tuple[float, bool]:
    """-log P(truth); capped (and flagged) when the truth has zero probability."""
    p = float(dist[truth])
    if p <= 0.0 or -math.log(p) > cap:
        return cap, True
    return -math.log(p), False


def recon_loss(distributions, truth: np.ndarray, lambdas, cap: float = CE_CAP_NATS) -> tuple[float, int]:
    """Weighted per-frame reconstruction cross-entropy.

    distributions[n][d] is the predicted distribution for frame n, depth d+1
    (None skips the term, e.g. a slot that was never transmitted); truth is
    the (N, n_q) token matrix. The text stream carries only padding here, so
    its term contributes 0 while keeping the loss shape. Returns (loss,
    number of capped zero-probability events).
    """
    truth = np.asarray(truth)
    n_frames, n_q = truth.shape
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if lambdas.shape != (n_q,) or np.any(lambdas <= 0):
        raise ValueError("lambdas must be positive, one per depth")
    if len(distributions) != n_frames:
        raise ValueError("distributions and truth lengths differ")
    norm = lambdas.sum()
    total = 0.0
    capped = 0
    for n in range(n_frames):
        frame_ce = 0.0  # text-stream CE: PAD-only stream contributes 0
        for d in range(n_q):
            dist = distributions[n][d]
            if dist is None:
                continue
            ce, was_capped = cross_entropy(dist, int(truth[n, d]), cap)
            capped += was_capped
            frame_ce += lambdas[d] * ce
        total += frame_ce / norm
    return total / n_frames if n_frames else 0.0, capped


def total_loss(recon: float, mask_level_sums, gamma: float) -> float:
    """Reconstruction loss plus the bitrate penalty (per-frame mean levels)."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    sums = _level_sums(mask_level_sums)
    if len(sums) == 0:
        return recon
    return recon + gamma * float(np.mean(sums))


def recovery_stats(truth: np.ndarray, present: np.ndarray, erased: np.ndarray,
                   concealed: np.ndarray) -> dict:
    """Token recovery statistics over aligned (N, n_q) streams.

    present marks slots the transmitter sent; erased marks sent slots lost in
    transit; concealed is the receiver's reconstruction. Rates: erasure =
    erased / sent; post-concealment error = wrong fills among erased slots;
    frame erasure = frames whose sent slots were all lost.
    """
    truth = np.asarray(truth)
    present = np.asarray(present, dtype=bool)
    erased = np.asarray(erased, dtype=bool)
    concealed = np.asarray(concealed)
    if not (truth.shape == present.shape == erased.shape == concealed.shape):
        raise ValueError("stream shapes differ")

    sent = int(present.sum())
    n_erased = int(erased.sum())
    wrong = (concealed != truth) & erased
    per_depth_sent = present.sum(axis=0)
    per_depth_erased = erased.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_depth_rate = np.where(per_depth_sent > 0, per_depth_erased / per_depth_sent, 0.0)
        per_depth_err = np.where(per_depth_erased > 0, wrong.sum(axis=0) / per_depth_erased, 0.0)

    frames_with_sent = present.any(axis=1)
    fully_lost = frames_with_sent & ~(present & ~erased).any(axis=1)

    return {
        "transmitted_slots": sent,
        "erased_slots": n_erased,
        "pre_concealment_erasure_rate": n_erased / sent if sent else 0.0,
        "post_concealment_token_error_rate": int(wrong.sum()) / n_erased if n_erased else 0.0,
        "frame_erasure_rate": int(fully_lost.sum()) / int(frames_with_sent.sum()) if frames_with_sent.any() else 0.0,
        "per_depth_erasure_rate": per_depth_rate.tolist(),
        "per_depth_error_rate": per_depth_err.tolist(),
    }


class ReportRow(BaseModel):
    """One grid cell of a run report; serialized to JSON and CSV."""

    model_config = ConfigDict(extra="forbid")

    schema_version: int = REPORT_SCHEMA_VERSION
    channel_model: str
    p_target: float
    predictor: str
    l_budget: int
    n_frames: int
    seed: int
    payload_bps: float
    wire_payload_bps: float
    total_bps: float
    mean_levels: float
    pre_concealment_erasure_rate: float
    post_concealment_token_error_rate: float
    frame_erasure_rate: float
    per_depth_erasure_rate: list[float]
    per_depth_error_rate: list[float]
    recon_cross_entropy: float
    recon_capped_events: int
    total_loss: float
    latency_s: float
    packets: int
    packets_lost: int
    feature_mse: float | None = None
