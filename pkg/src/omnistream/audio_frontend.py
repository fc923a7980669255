"""Audio encoder geometry: 16 kHz -> 128-bin log-mel (25 ms / 10 ms) -> 12.5 Hz tokens.

Frames are left-aligned with no centering, so frame k reads samples
``[160k, 160k + 400)``. The frame count is padded up to a multiple of 8 by
zero-padding the waveform, which makes the 8x grouping exact: every token
covers 8 frames = 1280 samples = 80 ms. The toy encoder is two bias-free
strided convolutions (4x then 2x) followed by one causal self-attention layer
restricted to a left window of 1-8 s.
"""

from __future__ import annotations

import io
import math
import struct
import wave
from collections import deque
from dataclasses import dataclass
from typing import Iterable

import numpy as np

SAMPLE_RATE = 16_000
N_MELS = 128
WINDOW_SAMPLES = 400  # 25 ms
HOP_SAMPLES = 160  # 10 ms
N_FFT = 512
FRAMES_PER_TOKEN = 8
SAMPLES_PER_TOKEN = FRAMES_PER_TOKEN * HOP_SAMPLES  # 1280 = 80 ms
TOKEN_RATE_HZ = 12.5
TOKEN_MS = 80
LOG_FLOOR = 1e-10
ENCODER_SEED = 0xA07


@dataclass(frozen=True)
class MelFrameBlock:
    frames: np.ndarray  # (F, 128)
    num_samples: int  # before padding
    hop_ms: int = 10
    window_ms: int = 25
    sample_rate_hz: int = SAMPLE_RATE

    @property
    def bins(self) -> int:
        return self.frames.shape[1]

    def __len__(self):
        return self.frames.shape[0]


@dataclass(frozen=True)
class EncoderTokenBlock:
    tokens: np.ndarray  # (N, d)
    token_rate_hz: float = TOKEN_RATE_HZ
    span_ms: int = TOKEN_MS

    def __len__(self):
        return self.tokens.shape[0]

    def to_bytes(self) -> bytes:
        n, d = self.tokens.shape
        return struct.pack("<II", n, d) + self.tokens.astype("<f4").tobytes(order="C")

    @classmethod
    def from_bytes(cls, blob: bytes) -> "EncoderTokenBlock":
        n, d = struct.unpack_from("<II", blob)
        data = np.frombuffer(blob, dtype="<f4", offset=8, count=n * d)
        return cls(data.reshape(n, d).astype(np.float64))


@dataclass(frozen=True)
class WindowMask:
    allowed: np.ndarray  # (n, n) bool
    window_tokens: int


def raw_frame_count(num_samples: int) -> int:
    if num_samples <= WINDOW_SAMPLES:
        return 1
    return 1 + (num_samples - WINDOW_SAMPLES) // HOP_SAMPLES


def padded_frame_count(num_samples: int) -> int:
    return FRAMES_PER_TOKEN * math.ceil(raw_frame_count(num_samples) / FRAMES_PER_TOKEN)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular HTK-scale filters, shape (n_mels, n_fft // 2 + 1)."""
    fft_freqs = np.linspace(0.0, sr / 2, n_fft // 2 + 1)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(0.0), _hz_to_mel(sr / 2), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (fft_freqs - lower) / (center - lower)
    down = (upper - fft_freqs) / (upper - center)
    return np.maximum(0.0, np.minimum(up, down))


_WINDOW = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(WINDOW_SAMPLES) / WINDOW_SAMPLES)
_FBANK = mel_filterbank()


def _log_mel_frames(frames: np.ndarray) -> np.ndarray:
    spec = np.abs(np.fft.rfft(frames * _WINDOW, n=N_FFT, axis=-1)) ** 2
    return np.log10(np.maximum(spec @ _FBANK.T, LOG_FLOOR))


def _check_waveform(waveform) -> np.ndarray:
    x = np.asarray(waveform, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("empty waveform")
    if not np.all(np.isfinite(x)):
        raise ValueError("waveform contains non-finite samples")
    return x


def mel_spectrogram(waveform, pad_to_tokens: bool = True) -> MelFrameBlock:
    """Log10 mel power frames. Silence maps to ``log10(LOG_FLOOR)`` = -10.

    With ``pad_to_tokens`` (the default) the waveform is zero-padded so the
    frame count is a multiple of 8.
    """
    x = _check_waveform(waveform)
    n_frames = padded_frame_count(x.size) if pad_to_tokens else raw_frame_count(x.size)
    need = WINDOW_SAMPLES + (n_frames - 1) * HOP_SAMPLES
    if x.size < need:
        x = np.concatenate([x, np.zeros(need - x.size)])
    idx = np.arange(n_frames)[:, None] * HOP_SAMPLES + np.arange(WINDOW_SAMPLES)[None, :]
    return MelFrameBlock(_log_mel_frames(x[idx]), num_samples=int(np.asarray(waveform).size))


def window_tokens_for(window_s: float, unsafe_window: bool = False) -> int:
    if not unsafe_window and not 1.0 <= window_s <= 8.0:
        raise ValueError(f"window of {window_s} s is outside [1, 8] s")
    # half-up rounding: 1 s -> 12.5 -> 13 tokens
    return max(1, int(math.floor(window_s * TOKEN_RATE_HZ + 0.5)))


def window_mask(
    n_tokens: int,
    window_s: float | None = None,
    *,
    window_tokens: int | None = None,
    unsafe_window: bool = False,
) -> WindowMask:
    """Causal left-window mask: (i, j) allowed iff 0 <= i - j < window."""
    if n_tokens < 1:
        raise ValueError("n_tokens must be >= 1")
    if (window_s is None) == (window_tokens is None):
        raise ValueError("give exactly one of window_s or window_tokens")
    if window_tokens is None:
        window_tokens = window_tokens_for(window_s, unsafe_window)
    elif window_tokens < 1:
        raise ValueError("window_tokens must be >= 1")
    i = np.arange(n_tokens)
    diff = i[:, None] - i[None, :]
    return WindowMask((diff >= 0) & (diff < window_tokens), int(window_tokens))


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x**3)))


def _rms_norm(x, eps=1e-6):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)


class AudioEncoder:
    """Toy encoder with fixed seeded weights."""

    def __init__(self, d_model: int = 256, seed: int = ENCODER_SEED):
        rng = np.random.default_rng(seed)
        self.d_model = d_model
        hidden = d_model
        self.conv1 = rng.normal(0, 1 / math.sqrt(4 * N_MELS), (4 * N_MELS, hidden))
        self.conv2 = rng.normal(0, 1 / math.sqrt(2 * hidden), (2 * hidden, d_model))
        s = 1 / math.sqrt(d_model)
        self.wq, self.wk, self.wv, self.wo = (rng.normal(0, s, (d_model, d_model)) for _ in range(4))

    def downsample(self, mel: MelFrameBlock | np.ndarray) -> np.ndarray:
        """Conv stages only: (F, 128) -> (ceil(F/8), d). Missing frames are zeros."""
        frames = mel.frames if isinstance(mel, MelFrameBlock) else np.asarray(mel, dtype=np.float64)
        if frames.shape[0] < 1:
            raise ValueError("need at least one mel frame")
        n = math.ceil(frames.shape[0] / FRAMES_PER_TOKEN)
        pad = n * FRAMES_PER_TOKEN - frames.shape[0]
        if pad:
            frames = np.vstack([frames, np.zeros((pad, frames.shape[1]))])
        h = _gelu(frames.reshape(n * 2, 4 * frames.shape[1]) @ self.conv1)
        return _gelu(h.reshape(n, -1) @ self.conv2)

    def _project(self, x):
        x = _rms_norm(x)
        return x @ self.wq, x @ self.wk, x @ self.wv

    def attend(self, x: np.ndarray, mask: WindowMask) -> np.ndarray:
        q, k, v = self._project(x)
        scores = (q @ k.T) / math.sqrt(self.d_model)
        scores = np.where(mask.allowed, scores, -np.inf)
        scores -= scores.max(axis=1, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=1, keepdims=True)
        return x + (p @ v) @ self.wo

    def encode(self, waveform, window_s: float = 4.0, unsafe_window: bool = False) -> EncoderTokenBlock:
        x = self.downsample(mel_spectrogram(waveform))
        mask = window_mask(x.shape[0], window_s, unsafe_window=unsafe_window)
        return EncoderTokenBlock(self.attend(x, mask))

    def stream(self, window_s: float = 4.0, unsafe_window: bool = False) -> "StreamingEncoder":
        return StreamingEncoder(self, window_tokens_for(window_s, unsafe_window))


def downsample_tokens(mel: MelFrameBlock, encoder: AudioEncoder | None = None) -> EncoderTokenBlock:
    return EncoderTokenBlock((encoder or AudioEncoder()).downsample(mel))


class StreamingEncoder:
    """Chunk-by-chunk encoder; results match ``AudioEncoder.encode`` on the concatenation.

    Chunks must be whole tokens (multiples of 1280 samples). A frame's window
    reaches 240 samples past its token, so the last token of each chunk is
    held until the next chunk (or ``flush``) supplies that lookahead.
    """

    def __init__(self, encoder: AudioEncoder, window_tokens: int):
        self.encoder = encoder
        self.window_tokens = window_tokens
        self._pending = np.zeros(0)  # samples not yet consumed by a finished token
        self._keys: deque = deque(maxlen=window_tokens)
        self._values: deque = deque(maxlen=window_tokens)
        self._seen = 0
        self.tokens_emitted = 0
        self._closed = False

    @property
    def cache_len(self) -> int:
        return len(self._keys)

    def push(self, chunk) -> np.ndarray:
        if self._closed:
            raise RuntimeError("stream already flushed")
        x = np.asarray(chunk, dtype=np.float64).reshape(-1)
        if x.size == 0 or x.size % SAMPLES_PER_TOKEN:
            raise ValueError(
                f"chunk of {x.size} samples is not a positive multiple of {SAMPLES_PER_TOKEN}"
            )
        _check_waveform(x)
        self._seen += x.size
        self._pending = np.concatenate([self._pending, x])
        lookahead = WINDOW_SAMPLES - HOP_SAMPLES
        ready = (self._pending.size - lookahead) // SAMPLES_PER_TOKEN
        return self._emit(ready)

    def flush(self) -> np.ndarray:
        if self._closed:
            return np.zeros((0, self.encoder.d_model))
        self._closed = True
        if self._seen == 0:
            raise ValueError("empty waveform")
        remaining = padded_frame_count(self._seen) // FRAMES_PER_TOKEN - self.tokens_emitted
        need = remaining * SAMPLES_PER_TOKEN + WINDOW_SAMPLES - HOP_SAMPLES
        if self._pending.size < need:
            self._pending = np.concatenate([self._pending, np.zeros(need - self._pending.size)])
        return self._emit(remaining)

    def _emit(self, n_tokens: int) -> np.ndarray:
        if n_tokens <= 0:
            return np.zeros((0, self.encoder.d_model))
        n_frames = n_tokens * FRAMES_PER_TOKEN
        idx = np.arange(n_frames)[:, None] * HOP_SAMPLES + np.arange(WINDOW_SAMPLES)[None, :]
        feats = self.encoder.downsample(_log_mel_frames(self._pending[idx]))
        self._pending = self._pending[n_tokens * SAMPLES_PER_TOKEN :]
        out = []
        enc = self.encoder
        for row in feats:
            q, k, v = enc._project(row[None, :])
            self._keys.append(k[0])
            self._values.append(v[0])
            keys, vals = np.array(self._keys), np.array(self._values)
            s = (q[0] @ keys.T) / math.sqrt(enc.d_model)
            p = np.exp(s - s.max())
            p /= p.sum()
            out.append(row + (p @ vals) @ enc.wo)
        self.tokens_emitted += n_tokens
        return np.array(out)


def encode_streaming(
    chunks: Iterable, window_s: float = 4.0, encoder: AudioEncoder | None = None
) -> EncoderTokenBlock:
    stream = (encoder or AudioEncoder()).stream(window_s)
    parts = [stream.push(c) for c in chunks]
    parts.append(stream.flush())
    return EncoderTokenBlock(np.vstack(parts))


def read_wav(path) -> np.ndarray:
    """16-bit PCM mono 16 kHz WAV -> float samples in [-1, 1)."""
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1 or wf.getsampwidth() != 2:
            raise ValueError("expected 16-bit mono PCM")
        if wf.getframerate() != SAMPLE_RATE:
            raise ValueError(f"expected {SAMPLE_RATE} Hz, got {wf.getframerate()} (no resampling)")
        data = wf.readframes(wf.getnframes())
    return np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0


def write_wav(path, samples, sample_rate: int, comment: str | None = None) -> None:
    """Write 16-bit PCM mono, optionally with a LIST/INFO ICMT comment chunk."""
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32767.0), -32768, 32767)
    data = pcm.astype("<i2").tobytes()
    buf = io.BytesIO()
    fmt = struct.pack("<HHIIHH", 1, 1, sample_rate, sample_rate * 2, 2, 16)
    chunks = [b"fmt " + struct.pack("<I", len(fmt)) + fmt]
    if comment:
        text = comment.encode("utf-8") + b"\0"
        if len(text) % 2:
            text += b"\0"
        info = b"INFO" + b"ICMT" + struct.pack("<I", len(text)) + text
        chunks.append(b"LIST" + struct.pack("<I", len(info)) + info)
    chunks.append(b"data" + struct.pack("<I", len(data)) + data + (b"\0" if len(data) % 2 else b""))
    body = b"WAVE" + b"".join(chunks)
    buf.write(b"RIFF" + struct.pack("<I", len(body)) + body)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())
