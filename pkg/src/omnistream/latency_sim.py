"""Event-driven model of the streaming speech critical path.

No model math runs here. A ``LatencyProfile`` holds per-stage costs for one
(modality, concurrency) setting, and ``simulate_stream`` lays out the events
of one utterance on a virtual clock:

    preprocessing -> thinker prefill -> talker prefill
    -> per frame: talker token -> MTP residuals -> codec render

Playback starts at the first rendered frame and consumes 80 ms of audio per
80 ms of wall time; a frame that is not rendered when the previous one
finishes playing is an underrun (playback stalls until it arrives).
"""

from __future__ import annotations

import csv
import enum
import io
import json
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

FRAME_MS = 80.0
STAGES = ("preproc_ms", "thinker_ttft_ms", "talker_ttft_ms", "mtp_per_token_ms", "codec_per_code_ms")
DEFAULT_PROFILE_PATH = Path(__file__).with_name("profiles") / "table2.json"


@dataclass(frozen=True)
class LatencyProfile:
    modality: str
    concurrency: int
    preproc_ms: float
    thinker_ttft_ms: float
    talker_ttft_ms: float
    mtp_per_token_ms: float
    codec_per_code_ms: float
    thinker_tps: float
    talker_tps: float
    reported_total_ms: float | None = None
    reported_rtf: float | None = None

    def __post_init__(self):
        for name in (*STAGES, "thinker_tps", "talker_tps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")

    @property
    def key(self) -> tuple[str, int]:
        return self.modality, self.concurrency

    def stage_costs(self) -> dict[str, float]:
        return {s: getattr(self, s) for s in STAGES}


def load_profiles(path=DEFAULT_PROFILE_PATH) -> dict[tuple[str, int], LatencyProfile]:
    with open(path) as fh:
        doc = json.load(fh)
    out = {}
    for entry in doc["profiles"]:
        p = LatencyProfile(**{k: v for k, v in entry.items() if k in LatencyProfile.__dataclass_fields__})
        out[p.key] = p
    return out


def first_packet_latency(profile: LatencyProfile) -> float:
    """Sequential stage sum: nothing can start before its predecessor finishes."""
    return (
        profile.preproc_ms
        + profile.thinker_ttft_ms
        + profile.talker_ttft_ms
        + profile.mtp_per_token_ms
        + profile.codec_per_code_ms
    )


def frame_period_ms(profile: LatencyProfile) -> float:
    return (
        1000.0 / profile.thinker_tps
        + 1000.0 / profile.talker_tps
        + profile.mtp_per_token_ms
        + profile.codec_per_code_ms
    )


def rtf(profile: LatencyProfile) -> float:
    return frame_period_ms(profile) / FRAME_MS


class EventKind(enum.Enum):
    CHUNK_PREFILLED = "ChunkPrefilled"
    THINKER_TOKEN = "ThinkerToken"
    TALKER_TOKEN = "TalkerToken"
    MTP_DONE = "MtpDone"
    FRAME_RENDERED = "FrameRendered"
    PLAYBACK_CONSUMED = "PlaybackConsumed"


@dataclass(frozen=True)
class StreamEvent:
    time_ms: float
    kind: EventKind
    payload: int
    stage: str = ""


@dataclass
class Timeline:
    profile: LatencyProfile
    events: list[StreamEvent]
    first_packet_ms: float
    rtf: float
    underrun_count: int
    stall_ms: float = 0.0
    asynchronous: bool = False
    n_chunks: int = 1

    def of_kind(self, kind: EventKind) -> list[StreamEvent]:
        return [e for e in self.events if e.kind is kind]


def simulate_stream(
    profile: LatencyProfile,
    n_frames: int,
    asynchronous: bool = False,
    n_chunks: int = 1,
) -> Timeline:
    """Lay out one utterance on a virtual clock starting at end of user input.

    The input is prefilled in ``n_chunks`` chunks, each costing the thinker
    and talker TTFT. Sequentially the talker starts after the thinker has
    prefilled everything; asynchronously talker chunk k runs as soon as
    thinker chunk k is done, overlapping thinker chunk k+1.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    if n_chunks < 1:
        raise ValueError("n_chunks must be >= 1")
    p = profile
    seq = 0
    pending: list[tuple[float, int, StreamEvent]] = []

    def emit(t, kind, payload, stage=""):
        nonlocal seq
        pending.append((t, seq, StreamEvent(t, kind, payload, stage)))
        seq += 1

    clock = p.preproc_ms
    thinker_done = []
    for k in range(n_chunks):
        clock += p.thinker_ttft_ms
        thinker_done.append(clock)
        emit(clock, EventKind.CHUNK_PREFILLED, k, "thinker")
    talker_free = p.preproc_ms if asynchronous else thinker_done[-1]
    for k in range(n_chunks):
        start = max(talker_free, thinker_done[k]) if asynchronous else talker_free
        talker_free = start + p.talker_ttft_ms
        emit(talker_free, EventKind.CHUNK_PREFILLED, k, "talker")

    # first frame: the prefill chain ends with the first tokens
    emit(thinker_done[-1], EventKind.THINKER_TOKEN, 0)
    t = talker_free
    rendered = []
    for i in range(n_frames):
        if i:
            t += 1000.0 / p.thinker_tps
            emit(t, EventKind.THINKER_TOKEN, i)
            t += 1000.0 / p.talker_tps
        emit(t, EventKind.TALKER_TOKEN, i)
        t += p.mtp_per_token_ms
        emit(t, EventKind.MTP_DONE, i)
        t += p.codec_per_code_ms
        emit(t, EventKind.FRAME_RENDERED, i)
        rendered.append(t)

    first = rendered[0]
    underruns, stall = 0, 0.0
    play_start = first
    emit(play_start, EventKind.PLAYBACK_CONSUMED, 0)
    for i in range(1, n_frames):
        due = play_start + FRAME_MS  # previous frame finishes playing
        if rendered[i] > due:
            underruns += 1
            stall += rendered[i] - due
        play_start = max(due, rendered[i])
        emit(play_start, EventKind.PLAYBACK_CONSUMED, i)

    events = [e for _, _, e in sorted(pending, key=lambda x: (x[0], x[1]))]
    measured = (rendered[-1] - rendered[0]) / (n_frames - 1) / FRAME_MS if n_frames > 1 else rtf(p)
    return Timeline(p, events, first, measured, underruns, stall, asynchronous, n_chunks)


@dataclass(frozen=True)
class StageBreakdown:
    stages: dict[str, float]
    first_packet_ms: float

    @property
    def total(self) -> float:
        return sum(self.stages.values())


def critical_path(timeline: Timeline) -> StageBreakdown:
    """Attribute the first-packet time to the five sequential stages.

    Stage spans are read off the event times, so overlapping prefill shows up
    as a shorter talker span.
    """
    ev = timeline.events
    first = lambda kind, stage="", payload=0: next(  # noqa: E731
        e.time_ms for e in ev if e.kind is kind and e.payload == payload and e.stage == stage
    )
    pre = timeline.profile.preproc_ms
    thinker_end = first(EventKind.CHUNK_PREFILLED, "thinker", timeline.n_chunks - 1)
    talker_end = first(EventKind.CHUNK_PREFILLED, "talker", timeline.n_chunks - 1)
    mtp_end = first(EventKind.MTP_DONE)
    render_end = first(EventKind.FRAME_RENDERED)
    stages = {
        "preproc_ms": pre,
        "thinker_ttft_ms": thinker_end - pre,
        "talker_ttft_ms": talker_end - thinker_end,
        "mtp_per_token_ms": mtp_end - talker_end,
        "codec_per_code_ms": render_end - mtp_end,
    }
    return StageBreakdown(stages, timeline.first_packet_ms)


def report(timeline: Timeline) -> dict:
    """Summary dict; compares against the profile's reported values when present."""
    p = timeline.profile
    bd = critical_path(timeline)
    out = {
        "modality": p.modality,
        "concurrency": p.concurrency,
        "n_frames": len(timeline.of_kind(EventKind.FRAME_RENDERED)),
        "asynchronous": timeline.asynchronous,
        **{k: round(v, 6) for k, v in bd.stages.items()},
        "first_packet_ms": round(timeline.first_packet_ms, 6),
        "rtf": round(rtf(p), 6),
        "measured_rtf": round(timeline.rtf, 6),
        "underrun_count": timeline.underrun_count,
    }
    if p.reported_total_ms is not None:
        out["reported_total_ms"] = p.reported_total_ms
        out["total_delta_ms"] = round(timeline.first_packet_ms - p.reported_total_ms, 6)
    if p.reported_rtf is not None:
        out["reported_rtf"] = p.reported_rtf
        out["rtf_delta"] = round(rtf(p) - p.reported_rtf, 6)
    return out


def report_csv(rows: list[dict], comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    keys = list(rows[0])
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def check_against_reported(profile: LatencyProfile, total_tol_ms: float = 5.0, rtf_tol: float = 0.03) -> list[str]:
    """Tolerance failures vs the profile's reported numbers (empty list = pass)."""
    failures = []
    if profile.reported_total_ms is not None:
        d = first_packet_latency(profile) - profile.reported_total_ms
        if abs(d) > total_tol_ms:
            failures.append(f"first_packet_ms off by {d:+.3f} ms (tol {total_tol_ms})")
    if profile.reported_rtf is not None:
        d = rtf(profile) - profile.reported_rtf
        if abs(d) > rtf_tol:
            failures.append(f"rtf off by {d:+.4f} (tol {rtf_tol})")
    return failures


@dataclass
class StageTimer:
    """Wall-clock instrumentation hook for the toy pipeline.

    Times accumulate per stage name; per-token stages record one sample per
    call so means can be turned into a profile.
    """

    totals: dict[str, list[float]] = field(default_factory=dict)

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.totals.setdefault(name, []).append((time.perf_counter() - t0) * 1000.0)

    def mean(self, name: str) -> float:
        v = self.totals.get(name, [])
        return sum(v) / len(v) if v else 0.0

    def to_profile(self, modality: str = "audio", concurrency: int = 1) -> LatencyProfile:
        tiny = 1e-6
        talker_ms = max(self.mean("talker_token"), tiny)
        thinker_ms = max(self.mean("thinker_token"), tiny)
        return LatencyProfile(
            modality=modality,
            concurrency=concurrency,
            preproc_ms=max(sum(self.totals.get("preproc", [])), tiny),
            thinker_ttft_ms=max(sum(self.totals.get("thinker_prefill", [])), tiny),
            talker_ttft_ms=max(sum(self.totals.get("talker_prefill", [])) + talker_ms, tiny),
            mtp_per_token_ms=max(self.mean("mtp"), tiny),
            codec_per_code_ms=max(self.mean("codec"), tiny),
            thinker_tps=1000.0 / thinker_ms,
            talker_tps=1000.0 / talker_ms,
        )


def profile_dict(p: LatencyProfile) -> dict:
    return asdict(p)
