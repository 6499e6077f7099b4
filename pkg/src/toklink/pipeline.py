"""End-to-end experiment pipeline.

Wires the modules into reproducible runs: synthesize -> encode -> importance
masks -> interleave -> packetize -> lossy channel -> depacketize -> conceal ->
metrics. Every stage draws from substreams of the master seed keyed by stage
name and grid-cell coordinates, so replays are byte-identical and adding grid
cells never perturbs existing ones.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import channel as chan
from . import codec, concealment, controller, framing, metrics, sources
from .config import RunConfig
from .seeds import derive_seed

PREDICTOR_IDS = {"repeat_last": 0, "count_model": 1}


def _codec_config(cfg: RunConfig) -> codec.CodecConfig:
    c = cfg.codec
    return codec.CodecConfig(n_q=c.n_q, codebook_size=c.codebook_size,
                             feature_dim=c.feature_dim, frame_rate_hz=c.frame_rate_hz)


def _framing_config(cfg: RunConfig, bits_per_token: int) -> framing.FramingConfig:
    f = cfg.framing
    return framing.FramingConfig(
        n_q=cfg.codec.n_q,
        bits_per_token=bits_per_token,
        frames_per_packet=f.frames_per_packet,
        even_base=f.even_base,
        header_bits=f.header_bits,
        feedback_period_ms=f.feedback_period_ms,
        count_descriptors_as_payload=f.count_descriptors_as_payload,
    )


def train_codec(cfg: RunConfig) -> dict:
    """Synthesize a corpus, fit per-depth codebooks, and emit the artifacts."""
    out = Path(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ccfg = _codec_config(cfg)
    src = cfg.source
    feats = codec.synth_features(
        cfg.run.n_frames, ccfg, derive_seed(cfg.run.seed, "train-corpus"),
        ar_coeff=src.ar_coeff, gate_duty=src.gate_duty, gate_mean_run=src.gate_mean_run,
    )
    books = codec.train_codebooks(feats, ccfg, derive_seed(cfg.run.seed, "train-kmeans"))
    tokens = codec.encode_array(codec.as_array(feats), books)
    energies = codec.residual_energies(feats, books)

    codebooks_path = out / "codebooks.rvq"
    features_path = out / "features.ftr"
    tokens_path = out / "tokens.tok"
    codec.save_codebooks(codebooks_path, ccfg, books)
    codec.save_features(features_path, feats)
    concealment.save_tokens(tokens_path, tokens)
    return {
        "codebooks_path": str(codebooks_path),
        "features_path": str(features_path),
        "tokens_path": str(tokens_path),
        "n_frames": cfg.run.n_frames,
        "residual_energies": [float(e) for e in energies],
    }


def train_predictor(cfg: RunConfig) -> dict:
    """Fit the count-model predictor on a token corpus and emit the artifact."""
    out = Path(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_q = cfg.codec.n_q
    if cfg.concealment.corpus_path:
        columns = concealment.load_tokens(cfg.concealment.corpus_path)
        if columns.shape[1] != n_q:
            raise ValueError(f"corpus has {columns.shape[1]} depths, config says {n_q}")
    elif cfg.source.kind == "hmm":
        columns = sources.hmm_token_source(
            cfg.run.n_frames, n_q, cfg.source.vocab,
            derive_seed(cfg.run.seed, "predictor-corpus"),
            n_states=cfg.source.n_states, stay_prob=cfg.source.stay_prob,
            emit_fidelity=cfg.source.emit_fidelity,
            structure_seed=derive_seed(cfg.run.seed, "source-structure"),
        )
    else:
        default = out / "tokens.tok"
        if not default.exists():
            raise FileNotFoundError(f"no training corpus: set concealment.corpus_path or run train-codec first ({default})")
        columns = concealment.load_tokens(default)
    vocab = cfg.source.vocab if cfg.source.kind == "hmm" else cfg.codec.codebook_size
    model = concealment.train_count_model(
        columns, order=cfg.concealment.order, smoothing=cfg.concealment.smoothing,
        vocab=vocab, n_q=n_q)
    model_path = out / "predictor.cnt"
    concealment.save_count_model(model_path, model)
    return {
        "model_path": str(model_path),
        "contexts": len(model.totals),
        "corpus_frames": int(columns.shape[0]),
        "vocab": vocab,
    }


@dataclass(frozen=True)
class CellSpec:
    p: float
    l_budget: int
    predictor: str
    importance: tuple[float, float] | None = None  # pins the mask when set

    def seed_key(self) -> tuple[int, ...]:
        imp = self.importance
        return (
            round(self.p * 1_000_000),
            self.l_budget,
            PREDICTOR_IDS[self.predictor],
            0 if imp is None else 1 + round(imp[0] * 1_000_000),
            0 if imp is None else 1 + round(imp[1] * 1_000_000),
        )


def _load_codec_artifacts(cfg: RunConfig):
    if not cfg.codec.codebooks_path:
        raise FileNotFoundError("codec source needs codec.codebooks_path (run train-codec first)")
    stored_cfg, books = codec.load_codebooks(cfg.codec.codebooks_path)
    want = _codec_config(cfg)
    if stored_cfg != want:
        raise ValueError(f"codec artifact mismatch: file built for {stored_cfg}, config says {want}")
    return stored_cfg, books


def _build_predictor(cfg: RunConfig, name: str, vocab: int):
    if name == "repeat_last":
        return concealment.repeat_last(vocab)
    if not cfg.concealment.model_path:
        raise FileNotFoundError("count_model needs concealment.model_path (run train-predictor first)")
    model = concealment.load_count_model(cfg.concealment.model_path)
    if model.vocab != vocab or model.n_q != cfg.codec.n_q:
        raise ValueError(f"predictor artifact mismatch: model is ({model.vocab} tokens, {model.n_q} depths), "
                         f"run needs ({vocab}, {cfg.codec.n_q})")
    return model


def _feedback_estimates(lost: np.ndarray, cfg: RunConfig, packet_interval_ms: float):
    """Per-frame loss estimate the controller sees: the latest feedback message
    that is at least one period old at the frame's packet send time."""
    est = chan.LossEstimator(window_ms=cfg.run.feedback_window_ms,
                             period_ms=cfg.framing.feedback_period_ms,
                             packet_interval_ms=packet_interval_ms)
    for is_lost in lost:
        est.observe(bool(is_lost))
    messages = est.messages
    fpp = cfg.framing.frames_per_packet

    def at_frame(t: int) -> float:
        send_ms = (t // fpp) * packet_interval_ms
        p_hat = 0.0
        for msg in messages:
            if msg.emit_ms + msg.period_ms <= send_ms:
                p_hat = msg.p_hat
            else:
                break
        return p_hat

    return at_frame


def _run_cell(cfg: RunConfig, cell: CellSpec) -> tuple[metrics.ReportRow, list[dict], list[dict]]:
    master = cfg.run.seed
    n = cfg.run.n_frames
    n_q = cfg.codec.n_q
    key = cell.seed_key()

    # --- source tokens -------------------------------------------------------
    features = None
    books = None
    if cfg.source.kind == "codec":
        ccfg, books = _load_codec_artifacts(cfg)
        src = cfg.source
        feats = codec.synth_features(
            n, ccfg, derive_seed(master, "features", *key),
            ar_coeff=src.ar_coeff, gate_duty=src.gate_duty, gate_mean_run=src.gate_mean_run)
        features = codec.as_array(feats)
        truth = codec.encode_array(features, books)
        vocab = ccfg.codebook_size
        bits = ccfg.bits_per_token
    else:
        truth = sources.hmm_token_source(
            n, n_q, cfg.source.vocab, derive_seed(master, "source", *key),
            n_states=cfg.source.n_states, stay_prob=cfg.source.stay_prob,
            emit_fidelity=cfg.source.emit_fidelity,
            structure_seed=derive_seed(master, "source-structure"))
        vocab = cfg.source.vocab
        bits = max(1, math.ceil(math.log2(vocab)))

    fcfg = _framing_config(cfg, bits)
    fpp = fcfg.frames_per_packet
    frame_rate = cfg.codec.frame_rate_hz
    n_packets = (n + fpp - 1) // fpp
    packet_interval_ms = fpp * 1000.0 / frame_rate

    # --- channel loss stream (packet granularity is drawn up front; the marks
    # depend only on the unit sequence, never on payload content) -------------
    chan_master = cfg.channel.seed if cfg.channel.seed is not None else master
    chan_seed = derive_seed(chan_master, "channel", *key)
    ge_params = None
    if cfg.channel.model == "ge":
        ge_params = chan.ge_params_from_target(cell.p, cfg.channel.mean_burst)

    packet_lost = None
    packet_states = None
    if cfg.channel.granularity == "packet":
        if cfg.channel.model == "uniform":
            packet_lost = chan.uniform_loss(n_packets, cell.p, chan_seed)
            packet_states = np.full(n_packets, -1, dtype=np.int8)
        else:
            packet_lost, packet_states = chan.ge_loss(n_packets, ge_params, chan_seed)

    # --- controller ----------------------------------------------------------
    if cfg.run.feedback == "estimated":
        if cfg.channel.granularity != "packet":
            raise ValueError("estimated feedback requires packet-granularity loss")
        p_at_frame = _feedback_estimates(packet_lost, cfg, packet_interval_ms)
    else:
        p_at_frame = lambda t: cell.p

    ctl = cfg.controller
    ctl_cfg = controller.ControllerConfig(
        l_budget=cell.l_budget, tau=ctl.tau, gamma=ctl.gamma, mode=ctl.mode,
        kappa=ctl.kappa, theta=ctl.theta, c0=ctl.c0, c1=ctl.c1)
    weights = None
    if cell.importance is None and ctl.mode == "learned":
        if not ctl.weights_path:
            raise FileNotFoundError("learned controller needs controller.weights_path")
        weights = controller.load_weights(ctl.weights_path)
    if cell.importance is None and ctl.mode in ("heuristic", "learned") and features is None:
        raise ValueError(f"{ctl.mode} importance needs codec features; use controller.mode=fixed "
                         "or a sweep importance grid with the hmm source")

    masks = []
    for t in range(n):
        if cell.importance is not None:
            pair = controller.ImportancePair(*cell.importance)
        elif ctl.mode == "fixed":
            pair = controller.ImportancePair(ctl.fixed_i_s, ctl.fixed_i_c)
        else:
            pair = controller.compute_importance(features[t], p_at_frame(t), weights, ctl_cfg)
        masks.append(controller.importance_to_mask(pair, cell.l_budget, n_q))

    # --- transmit ------------------------------------------------------------
    tx_sets = [controller.apply_mask(codec.TokenColumn(frame_index=t, tokens=truth[t]), masks[t])
               for t in range(n)]
    tx_present = np.stack([ts.present for ts in tx_sets])
    packets = framing.packetize(framing.interleave_stream(tx_sets, fcfg), fcfg)

    loss_rows: list[dict] = []
    if cfg.channel.granularity == "packet":
        for k, pkt in enumerate(packets):
            pkt.lost = bool(packet_lost[k])
            loss_rows.append({"unit_index": k, "state": int(packet_states[k]), "lost": int(pkt.lost)})
        n_lost_packets = int(packet_lost.sum())
    else:
        unit_counts = [(p.primary_tokens.size, p.piggyback_tokens.size) for p in packets]
        total_units = sum(a + b for a, b in unit_counts)
        if cfg.channel.model == "uniform":
            unit_lost = chan.uniform_loss(total_units, cell.p, chan_seed)
            unit_states = np.full(total_units, -1, dtype=np.int8)
        else:
            unit_lost, unit_states = chan.ge_loss(total_units, ge_params, chan_seed)
        pos = 0
        for pkt, (n_prim, n_pig) in zip(packets, unit_counts):
            pkt.primary_lost = unit_lost[pos:pos + n_prim]
            pkt.piggyback_lost = unit_lost[pos + n_prim:pos + n_prim + n_pig]
            pos += n_prim + n_pig
        loss_rows = [{"unit_index": i, "state": int(unit_states[i]), "lost": int(unit_lost[i])}
                     for i in range(total_units)]
        n_lost_packets = 0

    # --- receive, conceal ----------------------------------------------------
    rec_sets = framing.depacketize(packets, fcfg, n_frames=n)
    erased = np.stack([ts.erased for ts in rec_sets]) & tx_present

    predictor = _build_predictor(cfg, cell.predictor, vocab)
    ctx = concealment.PredictorContext(
        predictor=predictor, n_q=n_q, temperature=cfg.concealment.temperature,
        seed=derive_seed(master, "sampling", *key))
    concealed = np.empty((n, n_q), dtype=np.int32)
    dist_rows = []
    for t in range(n):
        collected: list = []
        concealed[t] = concealment.conceal_frame(
            ctx, concealment.column_from_transmit(rec_sets[t]), collect_distributions=collected)
        per_depth = [None] * n_q
        for d, dist in collected:
            if tx_present[t, d - 1]:
                per_depth[d - 1] = dist
        dist_rows.append(per_depth)

    # --- metrics ---------------------------------------------------------------
    stats = metrics.recovery_stats(truth, tx_present, erased, concealed)
    lambdas = cfg.resolved_lambdas()
    recon, capped = metrics.recon_loss(dist_rows, truth, lambdas)
    level_sums = np.array([m.level_sum() for m in masks], dtype=np.float64)
    payload_bps = metrics.payload_bitrate(level_sums, bits, frame_rate)
    wire_bits = sum(p.payload_bits(bits) + p.piggyback_bits(bits) for p in packets)
    if fcfg.count_descriptors_as_payload:
        wire_bits += sum(p.descriptor_bits() for p in packets)
    duration_s = n / frame_rate
    total_bps = framing.overhead_estimate(framing.OverheadProfile(
        r_payload=payload_bps, n_pkt=frame_rate / fpp,
        r_header=fcfg.header_bits, r_ctrl=fcfg.ctrl_bps))
    received_per_frame = (tx_present & ~erased).sum(axis=1).mean() if n else 0.0
    lat = cfg.latency
    latency_s = metrics.latency_estimate(metrics.LatencyProfile(
        t_context=lat.t_context if lat.t_context is not None else fpp / frame_rate,
        t_coder=lat.t_coder, t_ra=lat.t_ra, t_token=lat.t_token,
        expected_tokens=float(received_per_frame), t_transmit=lat.t_transmit))

    feature_mse = None
    if features is not None:
        err = 0.0
        for t in range(n):
            recon_vec = codec.decode_depths(concealed[t], books)
            err += float(((features[t] - recon_vec) ** 2).mean())
        feature_mse = err / n

    packet_rows = [{
        "seq_no": p.seq_no,
        "first_frame": p.first_frame_index,
        "n_frames": p.n_frames,
        "payload_bits": p.payload_bits(bits),
        "piggyback_bits": p.piggyback_bits(bits),
        "lost": int(p.lost),
    } for p in packets]

    row = metrics.ReportRow(
        channel_model=cfg.channel.model,
        p_target=cell.p,
        predictor=cell.predictor,
        l_budget=cell.l_budget,
        n_frames=n,
        seed=master,
        payload_bps=payload_bps,
        wire_payload_bps=wire_bits / duration_s,
        total_bps=total_bps,
        mean_levels=float(level_sums.mean()) if n else 0.0,
        pre_concealment_erasure_rate=stats["pre_concealment_erasure_rate"],
        post_concealment_token_error_rate=stats["post_concealment_token_error_rate"],
        frame_erasure_rate=stats["frame_erasure_rate"],
        per_depth_erasure_rate=stats["per_depth_erasure_rate"],
        per_depth_error_rate=stats["per_depth_error_rate"],
        recon_cross_entropy=recon,
        recon_capped_events=capped,
        total_loss=metrics.total_loss(recon, level_sums, ctl.gamma),
        latency_s=latency_s,
        packets=len(packets),
        packets_lost=n_lost_packets,
        feature_mse=feature_mse,
    )
    return row, packet_rows, loss_rows


def _cells_for_simulate(cfg: RunConfig) -> list[CellSpec]:
    ps = cfg.channel.grid if cfg.channel.grid is not None else [cfg.channel.p_target]
    return [CellSpec(p=p, l_budget=cfg.controller.l_budget, predictor=cfg.concealment.predictor)
            for p in ps]


def _cells_for_sweep(cfg: RunConfig) -> list[CellSpec]:
    sw = cfg.sweep
    if sw is None:
        return _cells_for_simulate(cfg)
    ps = sw.p if sw.p is not None else (cfg.channel.grid or [cfg.channel.p_target])
    ls = sw.l_budget if sw.l_budget is not None else [cfg.controller.l_budget]
    preds = sw.predictor if sw.predictor is not None else [cfg.concealment.predictor]
    imps = sw.importance if sw.importance is not None else [None]
    return [CellSpec(p=p, l_budget=l, predictor=pred, importance=imp)
            for imp in imps for pred in preds for l in ls for p in ps]


def simulate(cfg: RunConfig) -> dict:
    return _run_cells(cfg, _cells_for_simulate(cfg))


def sweep(cfg: RunConfig) -> dict:
    return _run_cells(cfg, _cells_for_sweep(cfg))


def _run_cells(cfg: RunConfig, cells: list[CellSpec]) -> dict:
    out = Path(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    packet_rows = []
    loss_rows = []
    for idx, cell in enumerate(cells):
        row, p_rows, l_rows = _run_cell(cfg, cell)
        rows.append(row)
        for r in p_rows:
            packet_rows.append({"cell": idx, "p": cell.p, **r})
        for r in l_rows:
            loss_rows.append({"cell": idx, "p": cell.p, **r})

    files = _write_reports(out, cfg, rows)
    if cfg.run.write_traces:
        files["packets_csv"] = str(_write_csv(out / "packets.csv", packet_rows))
        files["losses_csv"] = str(_write_csv(out / "losses.csv", loss_rows))
    return {"rows": [r.model_dump() for r in rows], "files": files}


def _write_reports(out: Path, cfg: RunConfig, rows) -> dict:
    report = {
        "schema_version": metrics.REPORT_SCHEMA_VERSION,
        "config": cfg.model_dump(),
        "rows": [r.model_dump() for r in rows],
    }
    json_path = out / "report.json"
    json_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    csv_path = _write_csv(out / "report.csv", [_flatten_row(r.model_dump()) for r in rows])
    return {"report_json": str(json_path), "report_csv": str(csv_path)}


def _flatten_row(row: dict) -> dict:
    flat = dict(row)
    for key in ("per_depth_erasure_rate", "per_depth_error_rate"):
        flat[key] = ";".join(f"{v:.6g}" for v in flat[key])
    return flat


def _write_csv(path: Path, rows: list[dict]) -> Path:
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    path.write_text(buf.getvalue())
    return path


def aggregate_reports(paths: list[str]) -> dict:
    """Merge rows from existing report.json files."""
    rows = []
    for p in paths:
        doc = json.loads(Path(p).read_text())
        if doc.get("schema_version") != metrics.REPORT_SCHEMA_VERSION:
            raise ValueError(f"{p}: unsupported report schema {doc.get('schema_version')}")
        rows.extend(doc["rows"])
    return {"rows": rows}


def render_table(rows: list[dict]) -> str:
    """Human-readable summary of report rows."""
    headers = ["channel", "p", "predictor", "L", "payload_bps", "total_bps", "erasure", "post_err", "recon_ce"]
    table = [headers]
    for r in rows:
        table.append([
            str(r["channel_model"]), f"{r['p_target']:.3f}", str(r["predictor"]), str(r["l_budget"]),
            f"{r['payload_bps']:.1f}", f"{r['total_bps']:.1f}",
            f"{r['pre_concealment_erasure_rate']:.4f}",
            f"{r['post_concealment_token_error_rate']:.4f}",
            f"{r['recon_cross_entropy']:.4f}",
        ])
    widths = [max(len(row[i]) for row in table) for i in range(len(headers))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in table]
    return "\n".join(lines)
