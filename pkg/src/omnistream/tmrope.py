"""Time-aligned multimodal rotary positions.

Every token gets a (temporal, height, width) position triple. Text and audio
use one shared ID on all three axes; images hold the temporal ID fixed and
spread rows/cols over height/width; video frames additionally advance the
temporal ID with their timestamps at 80 ms per unit. Segments are numbered
contiguously: each segment starts at one plus the largest ID used so far.

The rotary half splits the head's rotation pairs between the three axes
(24/20/20 for a 128-wide head) in an interleaved T,H,W cycle.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

MS_PER_TEMPORAL_ID = 80
DEFAULT_SPLIT = (24, 20, 20)
DEFAULT_THETA = 1_000_000.0


class PositionTriple(NamedTuple):
    t: int
    h: int
    w: int


class Kind(enum.Enum):
    TEXT = "text"
    AUDIO = "audio"
    IMAGE = "image"
    VIDEO = "video"
    AUDIOVISUAL = "audiovisual"


class Axis(enum.IntEnum):
    T = 0
    H = 1
    W = 2


@dataclass(frozen=True)
class ModalitySegment:
    """A contiguous run of tokens from one modality.

    Use the ``text``/``audio``/``image``/``video``/``audiovisual``
    constructors rather than filling the fields by hand.
    """

    kind: Kind
    token_count: int
    duration_ms: int | None = None
    rows: int | None = None
    cols: int | None = None
    timestamps_ms: tuple[int, ...] = ()
    children: tuple["ModalitySegment", ...] = field(default=())

    def __post_init__(self):
        # a frameless video is only meaningful as an audiovisual child
        if self.token_count < 1 and self.kind is not Kind.VIDEO:
            raise ValueError(f"{self.kind.value} segment needs at least one token")
        if self.kind is Kind.AUDIO:
            if self.duration_ms is None or self.duration_ms <= 0:
                raise ValueError("audio duration_ms must be positive")
            expected = math.ceil(self.duration_ms / MS_PER_TEMPORAL_ID)
            if self.token_count != expected:
                raise ValueError(
                    f"audio of {self.duration_ms} ms has {expected} tokens, got {self.token_count}"
                )
        elif self.kind is Kind.IMAGE:
            if self.rows is None or self.cols is None or self.rows < 1 or self.cols < 1:
                raise ValueError("image needs positive rows and cols")
            if self.rows * self.cols != self.token_count:
                raise ValueError(
                    f"image grid {self.rows}x{self.cols} does not match {self.token_count} tokens"
                )
        elif self.kind is Kind.VIDEO:
            ts = self.timestamps_ms
            if self.rows is None or self.cols is None or self.rows < 1 or self.cols < 1:
                raise ValueError("video needs positive rows and cols")
            if any(t < 0 for t in ts):
                raise ValueError("video timestamps must be non-negative")
            if any(b <= a for a, b in zip(ts, ts[1:])):
                raise ValueError("video timestamps must be strictly increasing")
            if len(ts) * self.rows * self.cols != self.token_count:
                raise ValueError("video token_count must equal frames * rows * cols")
        elif self.kind is Kind.AUDIOVISUAL:
            if len(self.children) != 2:
                raise ValueError("audiovisual segment needs one audio and one video child")
            audio, video = self.children
            if audio.kind is not Kind.AUDIO or video.kind is not Kind.VIDEO:
                raise ValueError("audiovisual children must be (audio, video)")
            if self.token_count != audio.token_count + video.token_count:
                raise ValueError("audiovisual token_count must equal the children's total")

    @classmethod
    def text(cls, n: int) -> "ModalitySegment":
        return cls(Kind.TEXT, n)

    @classmethod
    def audio(cls, duration_ms: int) -> "ModalitySegment":
        if duration_ms <= 0:
            raise ValueError("audio duration_ms must be positive")
        return cls(Kind.AUDIO, math.ceil(duration_ms / MS_PER_TEMPORAL_ID), duration_ms=duration_ms)

    @classmethod
    def image(cls, rows: int, cols: int) -> "ModalitySegment":
        return cls(Kind.IMAGE, rows * cols, rows=rows, cols=cols)

    @classmethod
    def video(cls, timestamps_ms: Sequence[int], rows: int, cols: int) -> "ModalitySegment":
        ts = tuple(int(t) for t in timestamps_ms)
        return cls(Kind.VIDEO, len(ts) * rows * cols, rows=rows, cols=cols, timestamps_ms=ts)

    @classmethod
    def audiovisual(cls, audio: "ModalitySegment", video: "ModalitySegment") -> "ModalitySegment":
        return cls(Kind.AUDIOVISUAL, audio.token_count + video.token_count, children=(audio, video))


@dataclass(frozen=True)
class AVToken:
    """One token of a merged audiovisual stream."""

    modality: Kind
    index: int  # position inside its own child segment
    pos: PositionTriple


def _grid(base: int, t: int, rows: int, cols: int) -> list[PositionTriple]:
    return [PositionTriple(t, base + r, base + c) for r in range(rows) for c in range(cols)]


def _video_triples(seg: ModalitySegment, base: int) -> list[PositionTriple]:
    out = []
    last_t = None
    for ts in seg.timestamps_ms:
        t = base + ts // MS_PER_TEMPORAL_ID
        if t == last_t:
            raise ValueError(
                f"video frames at {ts} ms collide on temporal id {t} (one id spans 80 ms)"
            )
        last_t = t
        out.extend(_grid(base, t, seg.rows, seg.cols))
    return out


def align_audiovisual(audio: ModalitySegment, video: ModalitySegment, base: int) -> list[AVToken]:
    """Merge an audio and a video child on a shared absolute-time axis.

    Both children start at time 0 = ``base``. Order is (t, audio before video,
    h, w); no fixed-length chunking is applied.
    """
    if base < 0:
        raise ValueError("base must be non-negative")
    if audio.kind is not Kind.AUDIO or video.kind is not Kind.VIDEO:
        raise ValueError("align_audiovisual expects an audio and a video segment")
    tokens = [
        AVToken(Kind.AUDIO, i, PositionTriple(base + i, base + i, base + i))
        for i in range(audio.token_count)
    ]
    tokens += [AVToken(Kind.VIDEO, i, p) for i, p in enumerate(_video_triples(video, base))]
    rank = {Kind.AUDIO: 0, Kind.VIDEO: 1}
    return sorted(tokens, key=lambda tok: (tok.pos.t, rank[tok.modality], tok.pos.h, tok.pos.w))


def _segment_triples(seg: ModalitySegment, base: int) -> list[PositionTriple]:
    if seg.kind in (Kind.TEXT, Kind.AUDIO):
        return [PositionTriple(base + i, base + i, base + i) for i in range(seg.token_count)]
    if seg.kind is Kind.IMAGE:
        return _grid(base, base, seg.rows, seg.cols)
    if seg.kind is Kind.VIDEO:
        return _video_triples(seg, base)
    audio, video = seg.children
    return [tok.pos for tok in align_audiovisual(audio, video, base)]


def assign_positions(segments: Sequence[ModalitySegment], start_id: int = 0) -> list[PositionTriple]:
    """Position triples for every token of ``segments``, in input order."""
    if not segments:
        raise ValueError("segment list is empty")
    if start_id < 0:
        raise ValueError("start_id must be non-negative")
    out: list[PositionTriple] = []
    base = start_id
    for seg in segments:
        if seg.token_count < 1:
            raise ValueError(f"{seg.kind.value} segment has no tokens")
        triples = _segment_triples(seg, base)
        out.extend(triples)
        base = 1 + max(max(p) for p in out)
    return out


@dataclass(frozen=True)
class AngleAllocation:
    head_dim: int
    axis_of_pair: tuple[Axis | None, ...]
    base_theta: float

    @property
    def frequencies(self) -> np.ndarray:
        i = np.arange(self.head_dim // 2, dtype=np.float64)
        return self.base_theta ** (-2.0 * i / self.head_dim)

    def counts(self) -> tuple[int, int, int]:
        return tuple(sum(1 for a in self.axis_of_pair if a is ax) for ax in Axis)


def build_angle_allocation(
    head_dim: int = 128,
    split: tuple[int, int, int] = DEFAULT_SPLIT,
    base_theta: float = DEFAULT_THETA,
    strict: bool = False,
) -> AngleAllocation:
    """Assign rotation pairs to axes by cycling T,H,W and skipping spent axes.

    With (24, 20, 20) over 64 pairs this yields T,H,W x20 followed by four T
    pairs at the lowest frequencies. Pairs beyond ``sum(split)`` stay
    unrotated.
    """
    if head_dim <= 0 or head_dim % 2:
        raise ValueError("head_dim must be a positive even integer")
    if base_theta <= 0:
        raise ValueError("base_theta must be positive")
    if len(split) != 3 or any(s < 0 for s in split):
        raise ValueError("split must be three non-negative integers")
    n_pairs = head_dim // 2
    if sum(split) > n_pairs:
        raise ValueError(f"split {tuple(split)} needs {sum(split)} pairs, head has {n_pairs}")
    if strict and sum(split) == 0:
        raise ValueError("empty angle split")

    remaining = list(split)
    axes: list[Axis | None] = []
    cursor = 0
    while len(axes) < sum(split):
        if remaining[cursor]:
            axes.append(Axis(cursor))
            remaining[cursor] -= 1
        cursor = (cursor + 1) % 3
    axes.extend([None] * (n_pairs - len(axes)))
    return AngleAllocation(head_dim, tuple(axes), float(base_theta))


def _angle_table(positions: np.ndarray, alloc: AngleAllocation) -> np.ndarray:
    # positions: (n, 3) -> angles (n, head_dim/2)
    axis_idx = np.array([-1 if a is None else int(a) for a in alloc.axis_of_pair])
    picked = np.where(axis_idx >= 0, positions[:, np.maximum(axis_idx, 0)], 0)
    return picked.astype(np.float64) * alloc.frequencies


def rotate(x: np.ndarray, positions, alloc: AngleAllocation) -> np.ndarray:
    """Apply the rotation to rows of ``x`` (..., n, head_dim) at ``positions`` (n, 3).

    Channels (2i, 2i+1) form pair i.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != alloc.head_dim:
        raise ValueError(f"vector length {x.shape[-1]} != head_dim {alloc.head_dim}")
    pos = np.asarray(positions, dtype=np.int64).reshape(-1, 3)
    ang = _angle_table(pos, alloc)
    cos, sin = np.cos(ang), np.sin(ang)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def apply_rotary(vector, pos: PositionTriple, alloc: AngleAllocation) -> np.ndarray:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.ndim != 1 or vector.shape[0] != alloc.head_dim:
        raise ValueError(f"expected a vector of length {alloc.head_dim}, got shape {vector.shape}")
    return rotate(vector[None, :], [tuple(pos)], alloc)[0]


def parse_segments(text: str) -> list[ModalitySegment]:
    """Parse the line-oriented segment format used by ``rope-dump``.

    One segment per line (``|`` also separates segments)::

        text 3
        audio 960
        image 2x2
        video 0,80,160 2x2
        audiovisual 960 0,500 2x2
    """
    segments = []
    for raw in text.replace("|", "\n").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        word, *args = line.split()
        word = word.lower()
        try:
            if word == "text" and len(args) == 1:
                segments.append(ModalitySegment.text(int(args[0])))
            elif word == "audio" and len(args) == 1:
                segments.append(ModalitySegment.audio(int(args[0])))
            elif word == "image" and len(args) == 1:
                segments.append(ModalitySegment.image(*_grid_spec(args[0])))
            elif word == "video" and len(args) == 2:
                segments.append(ModalitySegment.video(_int_list(args[0]), *_grid_spec(args[1])))
            elif word == "audiovisual" and len(args) == 3:
                segments.append(
                    ModalitySegment.audiovisual(
                        ModalitySegment.audio(int(args[0])),
                        ModalitySegment.video(_int_list(args[1]), *_grid_spec(args[2])),
                    )
                )
            else:
                raise ValueError("unrecognised segment")
        except ValueError as exc:
            raise ValueError(f"bad segment line {raw.strip()!r}: {exc}") from None
    return segments


def _grid_spec(s: str) -> tuple[int, int]:
    r, c = s.lower().split("x")
    return int(r), int(c)


def _int_list(s: str) -> list[int]:
    return [int(v) for v in s.split(",") if v]
