"""End-to-end toy run: frontend -> positions -> thinker -> talker -> renderer.

Every boundary is computed twice, streaming and offline, and the two must
agree; a mismatch raises ``BoundaryMismatch`` naming the boundary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import __version__
from .audio_frontend import SAMPLE_RATE, SAMPLES_PER_TOKEN, TOKEN_MS, AudioEncoder
from .code2wav import Code2Wav, RendererConfig, RenderState
from .latency_sim import StageTimer
from .moe_core import MoEConfig, MoECore
from .talker_stream import CodecFrame, Talker, TalkerConfig
from .tmrope import ModalitySegment, PositionTriple, assign_positions

TOL = 1e-6
PROMPT_TOKENS = 4


class BoundaryMismatch(AssertionError):
    def __init__(self, boundary: str, detail: str):
        super().__init__(f"streaming != offline at {boundary}: {detail}")
        self.boundary = boundary


@dataclass
class DemoResult:
    input_waveform: np.ndarray
    positions: list[PositionTriple]
    frames: list[CodecFrame]
    waveform: np.ndarray
    sample_rate: int
    manifest: dict


def duration_to_ms(duration_s: float) -> int:
    ms = duration_s * 1000.0
    if duration_s <= 0 or abs(ms - round(ms)) > 1e-6 or round(ms) % TOKEN_MS:
        raise ValueError(f"duration {duration_s} s is not a positive multiple of {TOKEN_MS} ms")
    return int(round(ms))


def synth_input(rng: np.random.Generator, n_samples: int) -> np.ndarray:
    t = np.arange(n_samples) / SAMPLE_RATE
    freqs = rng.uniform(120.0, 3000.0, 3)
    amps = rng.uniform(0.05, 0.25, 3)
    x = sum(a * np.sin(2 * np.pi * f * t) for a, f in zip(amps, freqs))
    return x + 0.01 * rng.standard_normal(n_samples)


def random_chunks(rng: np.random.Generator, x: np.ndarray, max_tokens: int = 4) -> list[np.ndarray]:
    """Split ``x`` (a whole number of tokens) at random token boundaries."""
    n_tok = x.size // SAMPLES_PER_TOKEN
    chunks, i = [], 0
    while i < n_tok:
        step = int(rng.integers(1, max_tokens + 1))
        chunks.append(x[i * SAMPLES_PER_TOKEN : min(n_tok, i + step) * SAMPLES_PER_TOKEN])
        i += step
    return chunks


def _check(boundary, a, b, tol=TOL):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise BoundaryMismatch(boundary, f"shape {a.shape} vs {b.shape}")
    err = float(np.max(np.abs(a - b))) if a.size else 0.0
    if err > tol:
        raise BoundaryMismatch(boundary, f"max abs diff {err:.3g} > {tol}")


def run_demo(seed: int = 0, duration_s: float = 2.0, window_s: float = 4.0,
             prefill_chunk: int = 8, timer: StageTimer | None = None) -> DemoResult:
    duration_ms = duration_to_ms(duration_s)
    timer = timer or StageTimer()
    rng = np.random.default_rng(seed)
    wave = synth_input(rng, duration_ms * SAMPLE_RATE // 1000)

    encoder = AudioEncoder()
    with timer.stage("preproc"):
        audio_stream = encoder.stream(window_s)
        parts = [audio_stream.push(c) for c in random_chunks(rng, wave)]
        parts.append(audio_stream.flush())
        audio_tokens = np.vstack(parts)
    _check("audio_frontend", audio_tokens, encoder.encode(wave, window_s).tokens)

    segments = [ModalitySegment.text(PROMPT_TOKENS), ModalitySegment.audio(duration_ms)]
    positions = assign_positions(segments)
    n_audio = len(audio_tokens)
    if n_audio != segments[1].token_count:
        raise BoundaryMismatch("tmrope", f"{n_audio} encoder tokens vs {segments[1].token_count} positions")

    thinker = MoECore(MoEConfig(d_model=encoder.d_model, seed=0))
    prompt = rng.integers(0, thinker.config.vocab_size, PROMPT_TOKENS)
    inputs = np.vstack([thinker.embed(prompt), audio_tokens])
    with timer.stage("thinker_prefill"):
        hidden, _ = thinker.prefill_chunked(inputs, positions, prefill_chunk)
    _check("moe_core", hidden, thinker.prefill(inputs, positions)[0])

    # the talker is conditioned on the audio positions' features only
    context = hidden[PROMPT_TOKENS:]
    talker = Talker(TalkerConfig(context_dim=encoder.d_model))
    renderer = Code2Wav(RendererConfig(n_codebooks=talker.config.n_codebooks,
                                       codebook_size=talker.config.codebook_size))
    frames, chunks = [], []
    state = talker.new_state()
    rstate = RenderState()
    for i in range(n_audio):
        with timer.stage("talker_token"):
            cb0, h = talker.talker_step(state, context[i])
        with timer.stage("mtp"):
            res = talker.mtp_predict(h, cb0, state.mtp)
        frame = CodecFrame(i, cb0, res)
        state.prev_codes = frame.codes
        state.frames_emitted += 1
        with timer.stage("codec"):
            out, rstate = renderer.decode_frame(frame, rstate)
        frames.append(frame)
        chunks.append(out)
    offline_frames = talker.generate_offline(context, n_audio)
    if frames != offline_frames:
        bad = next(i for i, (a, b) in enumerate(zip(frames, offline_frames)) if a != b)
        raise BoundaryMismatch("talker_stream", f"frame {bad} differs")
    waveform = np.concatenate(chunks)
    _check("code2wav", waveform, renderer.decode_offline(frames))

    manifest = make_manifest(
        "demo",
        seed=seed,
        duration_s=duration_s,
        window_s=window_s,
        prefill_chunk=prefill_chunk,
        configs={
            "encoder": {"d_model": encoder.d_model, "seed": 0xA07},
            "thinker": thinker.config.__dict__,
            "talker": {"n_codebooks": talker.config.n_codebooks,
                       "codebook_size": talker.config.codebook_size, "seed": talker.config.seed},
            "renderer": renderer.config.__dict__,
        },
    )
    return DemoResult(wave, positions, frames, waveform, renderer.config.sample_rate_hz, manifest)


def make_manifest(subcommand: str, **fields) -> dict:
    return {"subcommand": subcommand, "version": __version__, **fields}


def manifest_line(manifest: dict) -> str:
    return "manifest=" + json.dumps(manifest, sort_keys=True, separators=(",", ":"), default=_jsonable)


def _jsonable(o):
    if isinstance(o, tuple):
        return list(o)
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not serializable: {type(o)}")
