"""Acceptance suite: one test per release criterion, each printing a verdict
line. Run with `pytest tests/test_acceptance.py -s` to see the lines.
"""

import time

import numpy as np
import pytest

from toklink import channel, codec, concealment, controller, framing, metrics, pipeline, sources
from toklink.concealment import ERASED, PredictorContext
from toklink.config import RunConfig
from toklink.controller import ImportancePair
from toklink.framing import OverheadProfile
from toklink.metrics import LatencyProfile


def report(n, text):
    print(f"PASS criterion {n}: {text}")


def test_criterion_01_bitrate_identities():
    t0 = time.monotonic()
    full = metrics.payload_bitrate(np.full(1000, 8.0), 11, 12.5)
    half = metrics.payload_bitrate(np.full(1000, 4.0), 11, 12.5)
    assert full == 1100.0
    assert half == 550.0
    assert codec.CodecConfig(codebook_size=2048).bits_per_token == 11
    elapsed = time.monotonic() - t0
    assert elapsed < 1.0
    report(1, f"payload bitrate identities 1100/550 bps exact ({elapsed:.3f}s)")


def test_criterion_02_overhead_accounting():
    base = OverheadProfile(r_payload=0.0, n_pkt=6.25, r_header=320.0, r_ctrl=80.0)
    assert framing.overhead_estimate(base) == 2080.0
    low = framing.overhead_estimate(OverheadProfile(550.0, 6.25, 320.0, 80.0))
    high = framing.overhead_estimate(OverheadProfile(2060.0, 6.25, 320.0, 80.0))
    assert low == 2630.0 and high == 4140.0
    assert 2600.0 <= low and high <= 4200.0
    report(2, "overhead adds exactly 2080 bps; totals 2630/4140 bps inside the 2.6-4.2 kbps band")


def test_criterion_03_latency_model():
    high_ctx = metrics.latency_estimate(LatencyProfile(t_context=0.16, t_coder=0.30))
    low_ctx = metrics.latency_estimate(LatencyProfile(t_context=0.06, t_coder=0.00077))
    assert abs(high_ctx - 0.46) <= 0.005
    assert abs(low_ctx - 0.061) <= 0.005
    report(3, f"latency rows reproduced: {high_ctx:.3f}s and {low_ctx:.4f}s within 5 ms")


def test_criterion_04_step_soft_step_suite():
    t0 = time.monotonic()
    tau = 20.0
    # exact midpoint
    for j in range(1, 9):
        assert abs(controller.soft_step(j, j + 0.5, tau) - 0.5) < 1e-12
    # agreement at distance >= 0.5 from the transition band [j, j+1]
    worst = 0.0
    for j in range(1, 9):
        for i in np.linspace(-4.0, 20.0, 2401):
            if j - 0.5 < i < j + 1.5:
                continue
            worst = max(worst, abs(controller.soft_step(j, i, tau) - controller.step(j, i)))
    assert worst < 1e-3
    # monotone over a 1e4-point grid
    grid = np.linspace(-2.0, 12.0, 10_000)
    for j in (1, 4, 8):
        vals = [controller.soft_step(j, i, tau) for i in grid]
        assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))
    elapsed = time.monotonic() - t0
    assert elapsed < 1.0
    report(4, f"soft step: midpoint exact, max dev {worst:.2e} off-band, monotone ({elapsed:.3f}s)")


def test_criterion_05_mask_constraint_suite():
    rng = np.random.default_rng(123)
    n_q = 8
    for _ in range(100_000):
        pair = ImportancePair(rng.random(), rng.random())
        l_budget = int(rng.integers(1, 17))
        mask = controller.importance_to_mask(pair, l_budget, n_q)
        levels = mask.levels
        assert levels.sum() <= 2 * n_q
        assert ((levels >= 0) & (levels <= 2)).all()
        assert (np.diff(levels) <= 0).all()
    # exhaustive quantized grid
    checked = 0
    for l_budget in range(1, 17):
        for i_s in np.linspace(0.0, 1.0, 21):
            for i_c in np.linspace(0.0, 1.0, 21):
                levels = controller.importance_to_mask(ImportancePair(i_s, i_c), l_budget, n_q).levels
                assert levels.sum() <= 2 * n_q
                assert ((levels >= 0) & (levels <= 2)).all()
                assert (np.diff(levels) <= 0).all()
                checked += 1
    report(5, f"mask constraints hold on 100k random pairs and {checked} quantized grid points")


def test_criterion_06_framing_round_trip():
    t0 = time.monotonic()
    rng = np.random.default_rng(321)
    cfg = framing.FramingConfig(n_q=8, bits_per_token=11, frames_per_packet=2)

    def rand_set(i):
        present = rng.random(8) < 0.75
        return framing.TransmitSet(
            frame_index=i, tokens=rng.integers(0, 2048, 8).astype(np.int32),
            present=present, redundant=present & (rng.random(8) < 0.5))

    # involution on 5000 adjacent pairs (1e4 frames)
    for _ in range(5000):
        a, b = rand_set(0), rand_set(1)
        a2, b2 = framing.deinterleave(*framing.interleave(a, b))
        assert np.array_equal(a.tokens, a2.tokens) and np.array_equal(b.tokens, b2.tokens)
        assert np.array_equal(a.present, a2.present) and np.array_equal(b.present, b2.present)
        assert np.array_equal(a.redundant, a2.redundant) and np.array_equal(b.redundant, b2.redundant)

    # lossless round trip over a 1e4-frame stream, bit for bit
    frames = [rand_set(i) for i in range(10_000)]
    packets = framing.packetize(framing.interleave_stream(frames, cfg), cfg)
    wire = [p.to_bytes(cfg) for p in packets]
    reparsed = [framing.Packet.from_bytes(b, cfg) for b in wire]
    assert all(p.to_bytes(cfg) == b for p, b in zip(reparsed, wire))
    out = framing.depacketize(packets, cfg)
    for a, b in zip(frames, out):
        assert np.array_equal(a.present, b.present)
        assert np.array_equal(a.redundant, b.redundant)
        assert np.array_equal(a.tokens[a.present], b.tokens[b.present])
        assert not b.erased.any()

    # a level-2 token's copies never share a packet: killing any single packet
    # leaves every level-2 slot recoverable
    probe = framing.packetize(framing.interleave_stream(frames[:200], cfg), cfg)
    for k in range(len(probe) - 1):
        trial = framing.packetize(framing.interleave_stream(frames[:200], cfg), cfg)
        trial[k].lost = True
        for ts in framing.depacketize(trial, cfg):
            assert not (ts.erased & ts.redundant).any()
    elapsed = time.monotonic() - t0
    assert elapsed < 30.0
    report(6, f"framing involution + bit-exact round trip over 1e4 frames ({elapsed:.1f}s)")


def test_criterion_07_channel_calibration():
    t0 = time.monotonic()
    uni = channel.uniform_loss(1_000_000, 0.3, seed=777)
    assert abs(uni.mean() - 0.3) < 0.005
    params = channel.ge_params_from_target(0.3, 4.0)
    lost, _ = channel.ge_loss(1_000_000, params, seed=778)
    assert abs(lost.mean() - 0.3) < 0.005
    bursts = channel.burst_lengths(lost)
    assert abs(bursts.mean() - 4.0) < 0.2
    elapsed = time.monotonic() - t0
    assert elapsed < 30.0
    report(7, f"uniform loss {uni.mean():.4f}, GE loss {lost.mean():.4f}, "
              f"mean burst {bursts.mean():.2f} ({elapsed:.1f}s)")


def test_criterion_08_concealment_oracle():
    transition = np.array([[0.7, 0.2, 0.1], [0.15, 0.7, 0.15], [0.25, 0.25, 0.5]])
    corpus = sources.markov_token_source(5000, 2, transition, seed=42)
    model = concealment.train_count_model(corpus, order=1, smoothing=0.1, vocab=3, n_q=2)

    # brute-force conditional counts, keyed exactly like the model's context
    counts = {}
    for n in range(corpus.shape[0]):
        for d in (1, 2):
            prev = "BOS" if n == 0 else int(corpus[n - 1, d - 1])
            counts.setdefault((d, prev), np.zeros(3))[int(corpus[n, d - 1])] += 1
    worst = 0.0
    for prev_col in ([0, 0], [0, 1], [1, 0], [1, 2], [2, 1], [2, 2]):
        for d in (1, 2):
            got = model.distribution([np.array(prev_col, dtype=np.int32)], np.array([]), d)
            bucket = counts[(d, prev_col[d - 1])]
            want = (bucket + 0.1) / (bucket.sum() + 0.3)
            worst = max(worst, float(np.abs(got - want).max()))
    assert worst < 1e-9

    # strict causality: perturbing frames >= cut never changes earlier output
    rng = np.random.default_rng(7)
    stream = sources.markov_token_source(300, 2, transition, seed=43)
    received = stream.copy()
    received[rng.random(received.shape) < 0.3] = ERASED
    modified = received.copy()
    modified[150:] = rng.integers(0, 3, size=(150, 2))
    ctx_a = PredictorContext(predictor=model, n_q=2)
    ctx_b = PredictorContext(predictor=model, n_q=2)
    out_a = [concealment.conceal_frame(ctx_a, c.copy()) for c in received]
    out_b = [concealment.conceal_frame(ctx_b, c.copy()) for c in modified]
    assert all(np.array_equal(a, b) for a, b in zip(out_a[:150], out_b[:150]))
    report(8, f"count-model posterior matches brute force (max dev {worst:.1e}); causality replay clean")


@pytest.fixture(scope="module")
def hmm_predictor(tmp_path_factory):
    out = tmp_path_factory.mktemp("acc-predictor")
    cfg = RunConfig.model_validate({
        "codec": {"n_q": 8, "codebook_size": 16},
        "source": {"kind": "hmm", "vocab": 16},
        "concealment": {"predictor": "count_model", "order": 1, "smoothing": 0.1},
        "run": {"n_frames": 10_000, "seed": 42, "output_dir": str(out)},
    })
    return pipeline.train_predictor(cfg)["model_path"]


def test_criterion_09_system_level_trends(hmm_predictor, tmp_path):
    t0 = time.monotonic()
    base = {
        "codec": {"n_q": 8, "codebook_size": 16},
        "source": {"kind": "hmm", "vocab": 16},
        "controller": {"mode": "fixed", "fixed_i_s": 0.5, "fixed_i_c": 0.0},
        "run": {"n_frames": 10_000, "seed": 42, "write_traces": False, "output_dir": ""},
    }
    post_error = {}
    depth12 = {}
    for model in ("uniform", "ge"):
        # (a) concealment comparison at matched transmission
        for pred in ("repeat_last", "count_model"):
            doc = {**base, "channel": {"model": model, "p_target": 0.2},
                   "concealment": {"predictor": pred, "model_path": hmm_predictor}}
            doc["run"] = {**base["run"], "output_dir": str(tmp_path / f"{model}-{pred}")}
            row = pipeline.simulate(RunConfig.model_validate(doc))["rows"][0]
            post_error[(model, pred)] = row["post_concealment_token_error_rate"]
        assert post_error[(model, "count_model")] < post_error[(model, "repeat_last")]
        assert post_error[(model, "count_model")] < 1.0  # strictly better than leaving gaps

        # (b) UEP on/off at matched mean payload bitrate (both 8 levels/frame)
        payloads = {}
        for name, (i_s, i_c) in {"on": (6 / 16, 2 / 16), "off": (8 / 16, 0.0)}.items():
            doc = {**base, "channel": {"model": model, "p_target": 0.2},
                   "controller": {"mode": "fixed", "fixed_i_s": i_s, "fixed_i_c": i_c}}
            doc["run"] = {**base["run"], "output_dir": str(tmp_path / f"{model}-uep-{name}")}
            row = pipeline.simulate(RunConfig.model_validate(doc))["rows"][0]
            payloads[name] = row["payload_bps"]
            depth12[(model, name)] = row["per_depth_erasure_rate"][:2]
        assert payloads["on"] == payloads["off"]
        assert max(depth12[(model, "on")]) < min(depth12[(model, "off")])
    elapsed = time.monotonic() - t0
    assert elapsed < 120.0
    report(9, "at p=0.2 over 1e4 frames: count-model error "
              f"{post_error[('uniform', 'count_model')]:.3f} < repeat-last "
              f"{post_error[('uniform', 'repeat_last')]:.3f} (uniform), "
              f"{post_error[('ge', 'count_model')]:.3f} < {post_error[('ge', 'repeat_last')]:.3f} (GE); "
              f"UEP halves protected-depth erasure ({elapsed:.1f}s)")


def test_criterion_10_determinism(tmp_path):
    doc = {
        "codec": {"n_q": 8, "codebook_size": 32, "feature_dim": 8},
        "run": {"n_frames": 400, "seed": 2024, "output_dir": str(tmp_path / "det")},
        "channel": {"model": "ge", "p_target": 0.2},
    }
    outputs = []
    for _ in range(2):
        trained = pipeline.train_codec(RunConfig.model_validate(doc))
        sim_doc = {**doc, "codec": {**doc["codec"], "codebooks_path": trained["codebooks_path"]}}
        pipeline.simulate(RunConfig.model_validate(sim_doc))
        outputs.append({f.name: f.read_bytes() for f in sorted((tmp_path / "det").iterdir())})
    assert outputs[0] == outputs[1]
    report(10, f"replay of (config, seed) is byte-identical across {len(outputs[0])} artifact files")
