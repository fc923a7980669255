"""Acceptance criteria as runnable checks.

Each check returns a ``Result``; ``run_all`` is what ``omnistream check-all``
and ``tests/test_acceptance.py`` execute. Oracles here are written
separately from the code they check (reference loops, brute-force scans,
frozen published numbers).
"""

from __future__ import annotations

import contextlib
import io
import math
import tempfile
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .audio_frontend import SAMPLES_PER_TOKEN, AudioEncoder, mel_spectrogram, window_mask
from .code2wav import Code2Wav, RendererConfig
from .latency_sim import LatencyProfile, load_profiles, rtf, simulate_stream, EventKind
from .moe_core import MoEConfig, MoECore
from .pipeline import random_chunks
from .talker_stream import CodecFrame, Talker, TalkerConfig
from .tmrope import (
    Kind,
    ModalitySegment,
    PositionTriple,
    apply_rotary,
    assign_positions,
    build_angle_allocation,
)

# published first-packet totals (ms) and generation RTF, keyed by (modality, concurrency)
REPORTED_TOTAL_MS = {
    ("audio", 1): 234, ("video", 1): 547,
    ("audio", 4): 728, ("video", 4): 1517,
    ("audio", 6): 1172, ("video", 6): 2284,
}
REPORTED_RTF = {1: 0.47, 4: 0.56, 6: 0.66}
TOTAL_TOL_MS = 5.0
RTF_TOL = 0.03


@dataclass
class Result:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float
    budget_s: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.number}. {self.name} ({self.seconds:.2f}s / {self.budget_s:g}s): {self.detail}"


def _timed(number, name, budget_s, fn, *args) -> Result:
    t0 = time.perf_counter()
    try:
        ok, detail = fn(*args)
    except Exception as exc:  # a crash is a failed criterion, not a crashed harness
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    dt = time.perf_counter() - t0
    if dt >= budget_s:
        ok, detail = False, f"{detail}; over runtime budget"
    return Result(number, name, ok, detail, dt, budget_s)


# -- 1, 2: latency arithmetic ---------------------------------------------------

def check_reported_totals():
    from .cli import main

    worst, notes = 0.0, []
    for (modality, conc), expected in REPORTED_TOTAL_MS.items():
        out = io.StringIO()
        with contextlib.redirect_stdout(out), contextlib.redirect_stderr(io.StringIO()):
            code = main(["simulate", "--modality", modality, "--concurrency", str(conc), "--check"])
        summary = dict(l.split("=", 1) for l in out.getvalue().splitlines() if "=" in l)
        got = float(summary["first_packet_ms"])
        delta = got - expected
        worst = max(worst, abs(delta))
        notes.append(f"{modality}/{conc}={got:g}")
        if code != 0 or abs(delta) > TOTAL_TOL_MS:
            return False, f"{modality}/{conc}: {got} vs {expected} (exit {code})"
    return True, ", ".join(notes) + f"; max |delta| {worst:g} ms"


def check_rtf():
    profiles = load_profiles()
    notes = []
    for (modality, conc), p in sorted(profiles.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        value = rtf(p)
        if abs(value - REPORTED_RTF[conc]) > RTF_TOL:
            return False, f"{modality}/{conc}: rtf {value:.4f} vs {REPORTED_RTF[conc]}"
        if modality == "audio":
            notes.append(f"{conc}-conc {value:.3f} (reported {REPORTED_RTF[conc]})")
    return True, "; ".join(notes)


# -- 3: continuity -----------------------------------------------------------------

def _playback_gaps(rendered: list[float], first: float) -> int:
    # ideal consumer without stalls: frame k must exist by first + 80k
    return sum(1 for k, r in enumerate(rendered) if r > first + 80.0 * k + 1e-9)


def random_subunity_profile(rng: np.random.Generator) -> LatencyProfile:
    while True:
        p = LatencyProfile(
            modality="audio", concurrency=1,
            preproc_ms=rng.uniform(1, 300), thinker_ttft_ms=rng.uniform(1, 1500),
            talker_ttft_ms=rng.uniform(1, 800), mtp_per_token_ms=rng.uniform(0.1, 40),
            codec_per_code_ms=rng.uniform(0.1, 20), thinker_tps=rng.uniform(15, 300),
            talker_tps=rng.uniform(15, 300),
        )
        if rtf(p) < 1:
            return p


def check_continuity(n_profiles=200, n_frames=500, seed=3):
    rng = np.random.default_rng(seed)
    for i in range(n_profiles):
        p = random_subunity_profile(rng)
        tl = simulate_stream(p, n_frames)
        rendered = [e.time_ms for e in tl.of_kind(EventKind.FRAME_RENDERED)]
        if tl.underrun_count or _playback_gaps(rendered, tl.first_packet_ms):
            return False, f"profile {i} (rtf {rtf(p):.3f}) underran"
    slow = LatencyProfile("audio", 1, 72, 88, 57, 50, 50, 10, 10)
    tl = simulate_stream(slow, n_frames)
    if tl.underrun_count == 0:
        return False, f"rtf {rtf(slow):.2f} profile produced no underrun"
    return True, f"{n_profiles} sub-unity profiles clean; rtf {rtf(slow):.2f} profile: {tl.underrun_count} underruns"


# -- 4: TM-RoPE ----------------------------------------------------------------------

def random_segment(rng: np.random.Generator, allow_av: bool = True) -> ModalitySegment:
    kind = int(rng.integers(0, 5 if allow_av else 4))
    if kind == 0:
        return ModalitySegment.text(int(rng.integers(1, 6)))
    if kind == 1:
        return ModalitySegment.audio(int(rng.integers(1, 2000)))
    if kind == 2:
        return ModalitySegment.image(int(rng.integers(1, 5)), int(rng.integers(1, 5)))
    if kind == 3:
        n = int(rng.integers(1, 5))
        buckets = np.sort(rng.choice(40, size=n, replace=False))
        ts = [int(b) * 80 + int(rng.integers(0, 80)) for b in buckets]
        return ModalitySegment.video(ts, int(rng.integers(1, 4)), int(rng.integers(1, 4)))
    return ModalitySegment.audiovisual(random_segment_of(rng, Kind.AUDIO), random_segment_of(rng, Kind.VIDEO))


def random_segment_of(rng, kind: Kind) -> ModalitySegment:
    while True:
        seg = random_segment(rng, allow_av=False)
        if seg.kind is kind:
            return seg


def contiguity_violations(segments, triples, start_id: int) -> list[int]:
    """Brute-force scan: each segment's smallest ID is 1 + the largest earlier ID."""
    bad, offset, prev_max = [], 0, None
    for k, seg in enumerate(segments):
        ids = [v for p in triples[offset : offset + seg.token_count] for v in p]
        offset += seg.token_count
        expected = start_id if prev_max is None else prev_max + 1
        if min(ids) != expected:
            bad.append(k)
        prev_max = max(ids) if prev_max is None else max(prev_max, max(ids))
    if offset != len(triples):
        bad.append(-1)
    return bad


def reference_rope_1d(x: np.ndarray, position: int, theta: float) -> np.ndarray:
    d = x.shape[0]
    out = np.empty(d)
    for i in range(d // 2):
        a = position * theta ** (-2.0 * i / d)
        c, s = math.cos(a), math.sin(a)
        out[2 * i] = x[2 * i] * c - x[2 * i + 1] * s
        out[2 * i + 1] = x[2 * i] * s + x[2 * i + 1] * c
    return out


def check_tmrope(n_lists=1000, n_triples=200, seed=4):
    rng = np.random.default_rng(seed)
    for i in range(n_lists):
        segs = [random_segment(rng) for _ in range(int(rng.integers(1, 7)))]
        start = int(rng.integers(0, 50))
        triples = assign_positions(segs, start)
        if contiguity_violations(segs, triples, start):
            return False, f"contiguity broken on list {i}"

    text = assign_positions([ModalitySegment.text(50)])
    if any(not (p.t == p.h == p.w == i) for i, p in enumerate(text)):
        return False, "text triples not equal-component"
    alloc_1d = build_angle_allocation(128, (64, 0, 0), 10_000.0)
    for p in text:
        v = rng.standard_normal(128)
        if np.max(np.abs(apply_rotary(v, p, alloc_1d) - reference_rope_1d(v, p.t, 10_000.0))) > 1e-12:
            return False, f"text rotary differs from 1-D reference at {p.t}"

    for ms in range(1, 5000, 7):
        n = ModalitySegment.audio(ms).token_count
        if not (n * 80 >= ms > (n - 1) * 80):
            return False, f"audio rate law fails at {ms} ms"

    alloc = build_angle_allocation()
    worst_norm = worst_rel = 0.0
    for _ in range(n_triples):
        p = PositionTriple(*(int(v) for v in rng.integers(0, 5000, 3)))
        d = PositionTriple(*(int(v) for v in rng.integers(-2000, 2000, 3)))
        off = PositionTriple(*(int(v) for v in rng.integers(0, 3000, 3)))
        q, k = rng.standard_normal(128), rng.standard_normal(128)
        rq = apply_rotary(q, p, alloc)
        worst_norm = max(worst_norm, abs(np.linalg.norm(rq) / np.linalg.norm(q) - 1))
        p2 = PositionTriple(*(max(a + b, 0) for a, b in zip(p, d)))
        s1 = rq @ apply_rotary(k, p2, alloc)
        s2 = apply_rotary(q, PositionTriple(*(a + o for a, o in zip(p, off))), alloc) @ apply_rotary(
            k, PositionTriple(*(a + o for a, o in zip(p2, off))), alloc
        )
        worst_rel = max(worst_rel, abs(s1 - s2) / max(abs(s1), 1e-12))
    if worst_norm > 1e-9:
        return False, f"norm drift {worst_norm:.2e}"
    if worst_rel > 1e-6:
        return False, f"relative-position drift {worst_rel:.2e}"
    return True, (f"{n_lists} contiguity lists; norm drift {worst_norm:.1e}; "
                  f"relative drift {worst_rel:.1e} over {n_triples} triples")


# -- 5: streaming == offline ------------------------------------------------------

def _frontend_case(seed: int) -> float:
    rng = np.random.default_rng(seed)
    enc = AudioEncoder(d_model=64, seed=seed)
    x = rng.standard_normal(int(rng.integers(1, 40)) * SAMPLES_PER_TOKEN) * 0.3
    window = float(rng.uniform(1, 8))
    stream = enc.stream(window)
    parts = [stream.push(c) for c in random_chunks(rng, x, 6)]
    parts.append(stream.flush())
    return float(np.max(np.abs(np.vstack(parts) - enc.encode(x, window).tokens)))


def _moe_case(seed: int) -> float:
    rng = np.random.default_rng(seed)
    model = MoECore(MoEConfig(seed=seed, n_layers=int(rng.integers(1, 3))))
    n = int(rng.integers(8, 33))
    tokens = rng.integers(0, model.config.vocab_size, n)
    triples = assign_positions([ModalitySegment.text(n)])
    full, _ = model.prefill(tokens, triples)
    worst = 0.0
    for c in (1, 2, 3, 5, 8, n):
        h, cache = model.prefill_chunked(tokens, triples, c)
        worst = max(worst, float(np.max(np.abs(h - full))))
        assert len(cache) == n
    return worst


def _talker_case(seed: int, n_frames: int) -> bool:
    rng = np.random.default_rng(seed)
    talker = Talker(TalkerConfig(context_dim=16, seed=seed))
    ctx = rng.standard_normal((n_frames, 16))
    return list(talker.generate_stream(ctx, n_frames)) == talker.generate_offline(ctx, n_frames)


def _random_frames(rng, n, q=4, v=256) -> list[CodecFrame]:
    codes = rng.integers(0, v, (n, q))
    return [CodecFrame(i, int(c[0]), tuple(int(x) for x in c[1:])) for i, c in enumerate(codes)]


def _code2wav_case(seed: int) -> float:
    rng = np.random.default_rng(seed)
    r = Code2Wav(RendererConfig(seed=seed, receptive_frames=int(rng.integers(1, 20))))
    frames = _random_frames(rng, int(rng.integers(1, 65)))
    return float(np.max(np.abs(r.decode_stream(frames) - r.decode_offline(frames))))


def check_streaming_offline(n_seeds=20):
    seeds = range(n_seeds)
    fe = max(_frontend_case(s) for s in seeds)
    moe = max(_moe_case(s) for s in seeds)
    lengths = [64 if s == 0 else 1 + (s * 13) % 64 for s in seeds]
    talker_ok = all(_talker_case(s, n) for s, n in zip(seeds, lengths))
    c2w = max(_code2wav_case(s) for s in seeds)
    ok = fe <= 1e-6 and moe <= 1e-6 and talker_ok and c2w <= 1e-6
    return ok, (f"{n_seeds} seeds: frontend {fe:.1e}, moe {moe:.1e}, "
                f"talker {'token-exact' if talker_ok else 'MISMATCH'}, code2wav {c2w:.1e}")


# -- 6: rate laws -------------------------------------------------------------------

def check_rate_laws():
    x = np.random.default_rng(6).standard_normal(32_000) * 0.1
    mel = mel_spectrogram(x)
    tokens = AudioEncoder().encode(x, 4.0)
    frames = _random_frames(np.random.default_rng(6), 25)
    samples = Code2Wav().decode_offline(frames)
    ok = len(mel) == 200 and len(tokens) == 25 and samples.size == 48_000
    return ok, f"2 s -> {len(mel)} mel frames -> {len(tokens)} tokens; 25 frames -> {samples.size} samples"


# -- 7: determinism -----------------------------------------------------------------

def check_determinism():
    from .cli import main

    with tempfile.TemporaryDirectory() as tmp:
        dirs = [Path(tmp) / "a", Path(tmp) / "b"]
        for d in dirs:
            with contextlib.redirect_stdout(io.StringIO()):
                code = main(["demo", "--seed", "42", "--out-dir", str(d)])
            if code != 0:
                return False, f"demo exited {code}"
        names = ["demo.wav", "frames.csv", "positions.csv"]
        same = [(dirs[0] / n).read_bytes() == (dirs[1] / n).read_bytes() for n in names]
    return all(same), ", ".join(f"{n} {'identical' if s else 'DIFFERS'}" for n, s in zip(names, same))


# -- 8: causality ---------------------------------------------------------------------

def check_causality(n_trials=10):
    rng = np.random.default_rng(8)
    talker = Talker(TalkerConfig(context_dim=16))
    for _ in range(n_trials):
        n = int(rng.integers(4, 20))
        cut = int(rng.integers(1, n))
        ctx = rng.standard_normal((n, 16))
        base = list(talker.generate_stream(ctx, n))
        ctx2 = ctx.copy()
        ctx2[cut:] = rng.standard_normal((n - cut, 16)) * 5
        alt = list(talker.generate_stream(ctx2, n))
        if base[:cut] != alt[:cut]:
            return False, f"talker frame before {cut} changed by future context"

    r = Code2Wav()
    step = r.config.upsample_factor
    for _ in range(n_trials):
        frames = _random_frames(rng, int(rng.integers(2, 30)))
        j = int(rng.integers(0, len(frames)))
        alt = list(frames)
        f = alt[j]
        alt[j] = CodecFrame(f.index, (f.cb0 + 1) % 256, f.residuals)
        a, b = r.decode_offline(frames), r.decode_offline(alt)
        if np.any(a[: j * step] != b[: j * step]):
            return False, f"renderer samples before frame {j} changed"

    for n in range(1, 40):
        for w in (1, 2, 5, 13, 50, 100):
            m = window_mask(n, window_tokens=w).allowed
            if np.any(np.triu(m, 1)):
                return False, f"mask leaks future at n={n}, w={w}"
    enc = AudioEncoder(d_model=64)
    x = rng.standard_normal(12 * SAMPLES_PER_TOKEN) * 0.3
    base = enc.encode(x, 1.0).tokens
    y = x.copy()
    y[6 * SAMPLES_PER_TOKEN + 400 :] = rng.standard_normal(y.size - 6 * SAMPLES_PER_TOKEN - 400)
    alt = enc.encode(y, 1.0).tokens
    # tokens 0..5 only read samples < 6*1280 + 240
    if np.max(np.abs(base[:6] - alt[:6])) != 0.0:
        return False, "encoder token changed by future audio"
    return True, f"{n_trials} talker suffix mutations, {n_trials} renderer perturbations, mask sweep, encoder suffix"


CRITERIA = [
    (1, "Reported first-packet totals", 1.0, check_reported_totals),
    (2, "Generation RTF", 1.0, check_rtf),
    (3, "Playback continuity", 10.0, check_continuity),
    (4, "TM-RoPE suite", 30.0, check_tmrope),
    (5, "Streaming == offline oracles", 120.0, check_streaming_offline),
    (6, "Rate laws", 5.0, check_rate_laws),
    (7, "Determinism", 10.0, check_determinism),
    (8, "Causality suite", 60.0, check_causality),
]


def run_criterion(number: int) -> Result:
    num, name, budget, fn = next(c for c in CRITERIA if c[0] == number)
    return _timed(num, name, budget, fn)


def run_all(quick: bool = False) -> list[Result]:
    results = []
    for num, name, budget, fn in CRITERIA:
        if quick and num == 5:
            results.append(_timed(num, name + " (quick: 5 seeds)", budget, check_streaming_offline, 5))
        else:
            results.append(_timed(num, name, budget, fn))
    return results
