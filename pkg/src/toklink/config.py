"""Run configuration schema.

Config documents are validated before any run: unknown keys are rejected and
every field is typed and bounded. A parsed config re-emits to the same
document (round-trip stable), and reports embed the resolved config for
provenance.
"""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class CodecSection(StrictModel):
    n_q: int = Field(8, ge=1)
    codebook_size: int = Field(64, ge=2)
    feature_dim: int = Field(16, ge=1)
    frame_rate_hz: float = Field(12.5, gt=0)
    codebooks_path: Optional[str] = None  # trained RVQ1 artifact


class ControllerSection(StrictModel):
    mode: Literal["heuristic", "learned", "fixed"] = "heuristic"
    l_budget: int = Field(16, ge=1, le=16)
    tau: float = Field(20.0, gt=0)
    gamma: float = Field(0.0, ge=0)
    # heuristic importance parameters
    kappa: float = 2.0
    theta: float = 0.0
    c0: float = 0.1
    c1: float = 2.0
    weights_path: Optional[str] = None  # CTL1 artifact for learned mode
    # fixed mode pins the importance pair (and therefore the mask)
    fixed_i_s: float = Field(0.5, ge=0, le=1)
    fixed_i_c: float = Field(0.0, ge=0, le=1)


class FramingSection(StrictModel):
    frames_per_packet: int = Field(2, ge=1)
    header_bits: int = Field(320, ge=0)
    feedback_period_ms: int = Field(100, gt=0)
    even_base: Literal[0, 1] = 0
    count_descriptors_as_payload: bool = False


class ChannelSection(StrictModel):
    model: Literal["uniform", "ge"] = "uniform"
    p_target: float = Field(0.1, ge=0, le=1)
    grid: Optional[list[float]] = None  # overrides p_target with one row per value
    mean_burst: float = Field(4.0, ge=1)
    granularity: Literal["packet", "token"] = "packet"
    seed: Optional[int] = None  # overrides the run seed for the loss stream


class ConcealmentSection(StrictModel):
    predictor: Literal["repeat_last", "count_model"] = "repeat_last"
    order: int = Field(1, ge=0)
    smoothing: float = Field(0.1, gt=0)
    model_path: Optional[str] = None   # CNT1 artifact for count_model
    corpus_path: Optional[str] = None  # TOK1 training corpus for train-predictor
    temperature: Optional[float] = Field(None, gt=0)


class SourceSection(StrictModel):
    kind: Literal["codec", "hmm"] = "codec"
    # hmm source parameters
    vocab: int = Field(16, ge=2)
    n_states: int = Field(2, ge=1)
    stay_prob: float = Field(0.97, ge=0, le=1)
    emit_fidelity: float = Field(0.85, ge=0, le=1)
    # codec source parameters
    gate_duty: float = Field(0.5, gt=0, lt=1)
    gate_mean_run: float = Field(12.0, ge=1)
    ar_coeff: float = Field(0.9, ge=0, lt=1)


class LatencySection(StrictModel):
    t_context: Optional[float] = Field(None, ge=0)  # default: packet duration
    t_coder: float = Field(0.30, ge=0)
    t_ra: float = Field(0.0, ge=0)
    t_token: float = Field(0.0, ge=0)
    t_transmit: float = Field(0.0, ge=0)


class RunSection(StrictModel):
    n_frames: int = Field(1000, ge=1)
    seed: int = 0
    output_dir: str = "out"
    feedback: Literal["oracle", "estimated"] = "oracle"
    feedback_window_ms: float = Field(2000.0, gt=0)
    lambdas: Optional[list[float]] = None  # CE depth weights; default [100, 1, ...]
    write_traces: bool = True


class SweepSection(StrictModel):
    p: Optional[list[float]] = None
    l_budget: Optional[list[int]] = None
    predictor: Optional[list[Literal["repeat_last", "count_model"]]] = None
    importance: Optional[list[tuple[float, float]]] = None  # fixed (i_s, i_c) cells


class RunConfig(StrictModel):
    codec: CodecSection = CodecSection()
    controller: ControllerSection = ControllerSection()
    framing: FramingSection = FramingSection()
    channel: ChannelSection = ChannelSection()
    concealment: ConcealmentSection = ConcealmentSection()
    source: SourceSection = SourceSection()
    latency: LatencySection = LatencySection()
    run: RunSection = RunSection()
    sweep: Optional[SweepSection] = None

    def resolved_lambdas(self) -> list[float]:
        if self.run.lambdas is not None:
            if len(self.run.lambdas) != self.codec.n_q:
                raise ValueError("lambdas must have one weight per depth")
            return list(self.run.lambdas)
        return [100.0] + [1.0] * (self.codec.n_q - 1)
