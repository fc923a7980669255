"""Causal ConvNet renderer: one codec frame in, 80 ms of waveform out.

Frame embeddings (sum of per-codebook tables) pass through two causal
convolutions at frame rate whose combined left context is
``receptive_frames`` frames, then through non-overlapping transposed
convolutions (8x8x6x5 = 1920 at 24 kHz) and a tanh clamp. Nothing looks at
future frames, so the streaming renderer only keeps a ring buffer of recent
embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .talker_stream import CodecFrame

RENDER_SEED = int.from_bytes(b"C2W", "big")
FRAME_SECONDS = 0.08


def _factorize(n: int) -> tuple[int, ...]:
    """Split the upsample factor into stages by taking the largest divisor <= 8 each time."""
    stages, rest = [], n
    while rest > 1:
        step = next((d for d in range(8, 1, -1) if rest % d == 0), rest)
        stages.append(step)
        rest //= step
    return tuple(stages) or (1,)


@dataclass(frozen=True)
class RendererConfig:
    sample_rate_hz: int = 24_000
    receptive_frames: int = 16
    n_codebooks: int = 4
    codebook_size: int = 256
    channels: int = 64
    linear: bool = False  # identity activations, no biases, no clamp
    seed: int = RENDER_SEED
    stages: tuple[int, ...] = field(default=())

    def __post_init__(self):
        factor = self.sample_rate_hz * FRAME_SECONDS
        if abs(factor - round(factor)) > 1e-9 or round(factor) < 1:
            raise ValueError(f"{self.sample_rate_hz} Hz does not give an integral 80 ms frame")
        if self.receptive_frames < 1:
            raise ValueError("receptive_frames must be >= 1")
        if not self.stages:
            object.__setattr__(self, "stages", _factorize(self.upsample_factor))
        if math.prod(self.stages) != self.upsample_factor:
            raise ValueError("upsample stages must multiply to the upsample factor")

    @property
    def upsample_factor(self) -> int:
        return int(round(self.sample_rate_hz * FRAME_SECONDS))

    @property
    def kernels(self) -> tuple[int, int]:
        # two causal convs with (k1 - 1) + (k2 - 1) + 1 == receptive_frames
        k1 = (self.receptive_frames + 1) // 2
        return k1, self.receptive_frames + 1 - k1


@dataclass(frozen=True)
class RenderState:
    buffer: tuple[np.ndarray, ...] = ()
    frames_rendered: int = 0


class Code2Wav:
    def __init__(self, config: RendererConfig | None = None):
        self.config = cfg = config or RendererConfig()
        rng = np.random.default_rng(cfg.seed)
        c = cfg.channels
        k1, k2 = cfg.kernels
        self.codebook_emb = rng.normal(0, 1 / math.sqrt(cfg.n_codebooks), (cfg.n_codebooks, cfg.codebook_size, c))
        self.conv1 = rng.normal(0, 1 / math.sqrt(k1 * c), (k1, c, c))
        self.conv2 = rng.normal(0, 1 / math.sqrt(k2 * c), (k2, c, c))
        self.b1 = np.zeros(c) if cfg.linear else rng.normal(0, 0.1, c)
        self.b2 = np.zeros(c) if cfg.linear else rng.normal(0, 0.1, c)
        self.up = []
        ch = c
        for i, s in enumerate(cfg.stages):
            out_ch = 1 if i == len(cfg.stages) - 1 else max(ch // 2, 4)
            w = rng.normal(0, 1 / math.sqrt(ch), (ch, s, out_ch))
            b = np.zeros(out_ch) if cfg.linear else rng.normal(0, 0.05, out_ch)
            self.up.append((w, b))
            ch = out_ch

    def _act(self, x):
        return x if self.config.linear else np.where(x > 0, x, 0.1 * x)

    def embed(self, frames: Sequence[CodecFrame]) -> np.ndarray:
        c = self.config
        out = np.zeros((len(frames), c.channels))
        for i, f in enumerate(frames):
            if f.n_codebooks != c.n_codebooks:
                raise ValueError(f"frame {f.index} has {f.n_codebooks} codebooks, expected {c.n_codebooks}")
            for q, code in enumerate(f.codes):
                if not 0 <= code < c.codebook_size:
                    raise ValueError(f"code {code} outside [0, {c.codebook_size})")
                out[i] += self.codebook_emb[q, code]
        return out

    @staticmethod
    def _causal_conv(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
        k = w.shape[0]
        padded = np.vstack([np.zeros((k - 1, x.shape[1])), x])
        out = np.tile(b, (x.shape[0], 1))
        for j in range(k):
            # tap j reads the input k-1-j frames back
            out = out + padded[j : j + x.shape[0]] @ w[j]
        return out

    def _frame_features(self, emb: np.ndarray) -> np.ndarray:
        h = self._act(self._causal_conv(emb, self.conv1, self.b1))
        return self._act(self._causal_conv(h, self.conv2, self.b2))

    def _upsample(self, feats: np.ndarray) -> np.ndarray:
        """(n, C) -> (n, upsample_factor) pre-clamp samples; frames never mix here."""
        x = feats[:, None, :]  # (n, length, ch)
        for i, (w, b) in enumerate(self.up):
            x = np.einsum("nlc,cso->nlso", x, w) + b
            x = x.reshape(x.shape[0], -1, w.shape[2])
            if i < len(self.up) - 1:
                x = self._act(x)
        return x[..., 0]

    def render_embeddings(self, emb: np.ndarray) -> np.ndarray:
        """Pre-clamp samples, shape (n_frames * upsample_factor,)."""
        if emb.shape[0] == 0:
            return np.zeros(0)
        return self._upsample(self._frame_features(emb)).reshape(-1)

    def _clamp(self, x):
        return x if self.config.linear else np.tanh(x)

    def decode_offline(self, frames: Sequence[CodecFrame]) -> np.ndarray:
        return self._clamp(self.render_embeddings(self.embed(frames)))

    def decode_frame(self, frame: CodecFrame, state: RenderState) -> tuple[np.ndarray, RenderState]:
        """Render one frame from the left-context ring buffer. ``state`` is not modified."""
        if frame.index != state.frames_rendered:
            raise ValueError(f"expected frame {state.frames_rendered}, got frame {frame.index}")
        emb = self.embed([frame])[0]
        buf = (*state.buffer, emb)[-self.config.receptive_frames :]
        window = np.vstack(buf)
        samples = self._clamp(self._upsample(self._frame_features(window)[-1:]).reshape(-1))
        return samples, RenderState(buf, state.frames_rendered + 1)

    def decode_stream(self, frames) -> np.ndarray:
        state = RenderState()
        parts = []
        for f in frames:
            out, state = self.decode_frame(f, state)
            parts.append(out)
        return np.concatenate(parts) if parts else np.zeros(0)
