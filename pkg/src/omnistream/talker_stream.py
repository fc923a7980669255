"""Frame-by-frame multi-codebook speech token generation.

Per 80 ms frame the MoE backbone takes the summed codebook embeddings of the
previous frame plus that frame's context row, and a linear head picks the
codebook-0 token greedily. A small dense transformer (the MTP module) then
fills in codebooks 1..Q-1 autoregressively inside a fixed Q-slot cache.

The talker only sees audio/visual context rows and its own frame history.
"""

from __future__ import annotations

import csv
import io
import math
import queue
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .moe_core import KVCache, MoEConfig, MoECore
from .tmrope import PositionTriple

TALKER_SEED = 0x7A1


@dataclass(frozen=True)
class TalkerConfig:
    n_codebooks: int = 4
    codebook_size: int = 256
    context_dim: int = 256
    mtp_dim: int = 64
    backbone: MoEConfig = field(
        default_factory=lambda: MoEConfig(d_model=128, n_heads=1, head_dim=128, ffn_dim=128, seed=TALKER_SEED)
    )
    seed: int = TALKER_SEED

    def __post_init__(self):
        if not 1 <= self.n_codebooks <= 16:
            raise ValueError("n_codebooks must be in 1..16")
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")


@dataclass(frozen=True)
class CodecFrame:
    index: int
    cb0: int
    residuals: tuple[int, ...]

    @property
    def codes(self) -> tuple[int, ...]:
        return (self.cb0, *self.residuals)

    @property
    def n_codebooks(self) -> int:
        return 1 + len(self.residuals)


class MTPCache:
    """Preallocated Q-slot key/value buffer reused across frames."""

    def __init__(self, n_slots: int, dim: int):
        self.keys = np.zeros((n_slots, dim))
        self.values = np.zeros((n_slots, dim))
        self.length = 0
        self.max_length = 0

    @property
    def capacity(self) -> int:
        return self.keys.shape[0]

    def reset(self):
        self.length = 0

    def append(self, k, v):
        if self.length >= self.capacity:
            raise RuntimeError("MTP cache overflow")
        self.keys[self.length] = k
        self.values[self.length] = v
        self.length += 1
        self.max_length = max(self.max_length, self.length)


@dataclass
class TalkerState:
    cache: KVCache
    mtp: MTPCache
    start_len: int
    next_pos: int
    prev_codes: tuple[int, ...] | None = None
    frames_emitted: int = 0


class Talker:
    def __init__(self, config: TalkerConfig | None = None):
        self.config = cfg = config or TalkerConfig()
        self.backbone = MoECore(cfg.backbone)
        d = cfg.backbone.d_model
        q, v, m = cfg.n_codebooks, cfg.codebook_size, cfg.mtp_dim
        rng = np.random.default_rng(cfg.seed)
        self.codebook_emb = rng.normal(0, 1 / math.sqrt(q), (q, v, d))
        self.bos = rng.normal(0, 1, d)
        self.ctx_proj = rng.normal(0, 1 / math.sqrt(cfg.context_dim), (cfg.context_dim, d))
        self.head = rng.normal(0, 1 / math.sqrt(d), (d, v))
        # MTP: one causal dense attention layer + MLP, one output head per residual codebook
        self.mtp_in = rng.normal(0, 1 / math.sqrt(d), (d, m))
        self.mtp_emb = rng.normal(0, 1, (q, v, m))
        s = 1 / math.sqrt(m)
        self.mtp_wq, self.mtp_wk, self.mtp_wv, self.mtp_wo = (rng.normal(0, s, (m, m)) for _ in range(4))
        self.mtp_ff1 = rng.normal(0, s, (m, 2 * m))
        self.mtp_ff2 = rng.normal(0, 1 / math.sqrt(2 * m), (2 * m, m))
        self.mtp_heads = rng.normal(0, s, (max(q - 1, 0), m, v))

    # -- state ----------------------------------------------------------------

    def new_state(self, prompt=None, prompt_triples: Sequence[PositionTriple] | None = None) -> TalkerState:
        """Fresh state, optionally prefilled with context rows as a prompt."""
        cache = KVCache.empty(self.config.backbone)
        next_pos = 0
        if prompt is not None and len(prompt):
            rows = np.asarray(prompt, dtype=np.float64) @ self.ctx_proj
            if prompt_triples is None:
                prompt_triples = [PositionTriple(i, i, i) for i in range(len(rows))]
            self.backbone.extend(cache, rows, prompt_triples)
            next_pos = 1 + max(max(p) for p in prompt_triples)
        return TalkerState(cache, MTPCache(self.config.n_codebooks, self.config.mtp_dim), len(cache), next_pos)

    # -- backbone -------------------------------------------------------------

    def frame_input(self, prev_codes: tuple[int, ...] | None, context_row) -> np.ndarray:
        if prev_codes is None:
            x = self.bos.copy()
        else:
            x = sum(self.codebook_emb[q, c] for q, c in enumerate(prev_codes))
        if context_row is not None:
            row = np.asarray(context_row, dtype=np.float64)
            if row.shape != (self.config.context_dim,):
                raise ValueError(f"context rows must have {self.config.context_dim} features")
            x = x + row @ self.ctx_proj
        return x

    def cb0_from_hidden(self, hidden) -> int:
        return int(np.argmax(hidden @ self.head))

    def talker_step(self, state: TalkerState, context_row) -> tuple[int, np.ndarray]:
        """Advance the backbone one frame; returns (codebook-0 token, backbone hidden)."""
        x = self.frame_input(state.prev_codes, context_row)
        p = state.next_pos
        hidden, _ = self.backbone.decode_step(state.cache, x, PositionTriple(p, p, p))
        state.next_pos += 1
        return self.cb0_from_hidden(hidden), hidden

    # -- MTP ------------------------------------------------------------------

    def _mtp_layer(self, x, cache: MTPCache):
        k, v, q = x @ self.mtp_wk, x @ self.mtp_wv, x @ self.mtp_wq
        cache.append(k, v)
        keys, vals = cache.keys[: cache.length], cache.values[: cache.length]
        s = keys @ q / math.sqrt(self.config.mtp_dim)
        w = np.exp(s - s.max())
        h = x + ((w / w.sum()) @ vals) @ self.mtp_wo
        return h + np.tanh(h @ self.mtp_ff1) @ self.mtp_ff2

    def mtp_predict(self, backbone_hidden, cb0: int, cache: MTPCache | None = None,
                    return_logits: bool = False):
        """Residual codebooks 1..Q-1 for one frame, in exactly Q-1 fixed steps."""
        q = self.config.n_codebooks
        if q == 1:
            return ((), []) if return_logits else ()
        cache = cache or MTPCache(q, self.config.mtp_dim)
        cache.reset()
        codes, logits = [int(cb0)], []
        cond = np.asarray(backbone_hidden, dtype=np.float64) @ self.mtp_in
        for j in range(1, q):
            x = self.mtp_emb[j - 1, codes[-1]]
            if j == 1:
                x = x + cond
            h = self._mtp_layer(x, cache)
            logits.append(h @ self.mtp_heads[j - 1])
            codes.append(int(np.argmax(logits[-1])))
        return (tuple(codes[1:]), logits) if return_logits else tuple(codes[1:])

    # -- generation -----------------------------------------------------------

    def next_frame(self, state: TalkerState, context_row) -> CodecFrame:
        cb0, hidden = self.talker_step(state, context_row)
        residuals = self.mtp_predict(hidden, cb0, state.mtp)
        frame = CodecFrame(state.frames_emitted, cb0, residuals)
        state.prev_codes = frame.codes
        state.frames_emitted += 1
        return frame

    def generate_stream(self, context, n_frames: int, state: TalkerState | None = None) -> Iterator[CodecFrame]:
        """Yield frames one at a time; frame i is complete before frame i+1 starts.

        Row i of ``context`` conditions frame i; frames past the end of
        ``context`` get no context row.
        """
        if n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        state = state or self.new_state()
        ctx = _context_rows(context)
        for i in range(n_frames):
            yield self.next_frame(state, ctx[i] if i < len(ctx) else None)

    def generate_offline(self, context, n_frames: int) -> list[CodecFrame]:
        """Reference loop that re-runs the whole backbone prefix every frame (no KV cache)."""
        if n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        ctx = _context_rows(context)
        inputs, frames, prev = [], [], None
        for i in range(n_frames):
            inputs.append(self.frame_input(prev, ctx[i] if i < len(ctx) else None))
            triples = [PositionTriple(t, t, t) for t in range(len(inputs))]
            hidden, _ = self.backbone.prefill(np.vstack(inputs), triples)
            cb0 = self.cb0_from_hidden(hidden[-1])
            frame = CodecFrame(i, cb0, self.mtp_predict(hidden[-1], cb0))
            frames.append(frame)
            prev = frame.codes
        return frames


def _context_rows(context) -> np.ndarray:
    if context is None:
        return np.zeros((0, 0))
    ctx = np.asarray(context, dtype=np.float64)
    return ctx.reshape(-1, ctx.shape[-1]) if ctx.size else np.zeros((0, 0))


def stream_through_queue(
    frames: Iterator[CodecFrame],
    consume: Callable[[CodecFrame], None],
    maxsize: int = 1,
) -> list[CodecFrame]:
    """Producer thread pushes frames into a bounded queue; ``consume`` runs here.

    A slow consumer blocks the producer (backpressure) without reordering.
    Returns the frames in the order they were consumed.
    """
    q: queue.Queue = queue.Queue(maxsize=maxsize)
    done = object()
    errors: list[BaseException] = []

    def produce():
        try:
            for f in frames:
                q.put(f)
        except BaseException as exc:  # surfaced in the consumer thread
            errors.append(exc)
        finally:
            q.put(done)

    worker = threading.Thread(target=produce, daemon=True)
    worker.start()
    seen = []
    while (item := q.get()) is not done:
        consume(item)
        seen.append(item)
    worker.join()
    if errors:
        raise errors[0]
    return seen


def timed_stream(
    frames: Iterator[CodecFrame], produce_ms: float, consume_ms: float
) -> Iterator[tuple[float, CodecFrame]]:
    """Attach virtual handoff times to a frame stream (rendezvous handoff).

    The producer needs ``produce_ms`` per frame and cannot start the next
    frame until the consumer has taken the current one; the consumer needs
    ``consume_ms`` per frame. A slow consumer only delays timestamps.
    """
    start, last_take = 0.0, None
    for f in frames:
        done = start + produce_ms
        take = done if last_take is None else max(done, last_take + consume_ms)
        yield take, f
        start = last_take = take


def frames_to_csv(frames: Sequence[CodecFrame], header_comment: str | None = None) -> str:
    if not frames:
        raise ValueError("no frames")
    q = frames[0].n_codebooks
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame", "cb0", *(f"r{j}" for j in range(1, q))])
    for f in frames:
        w.writerow([f.index, *f.codes])
    return buf.getvalue()


def frames_from_csv(text: str) -> list[CodecFrame]:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    rows = list(csv.reader(lines))
    if not rows or rows[0][:2] != ["frame", "cb0"]:
        raise ValueError("frame CSV must start with a 'frame,cb0,...' header")
    out = []
    for r in rows[1:]:
        vals = [int(v) for v in r]
        out.append(CodecFrame(vals[0], vals[1], tuple(vals[2:])))
    return out
