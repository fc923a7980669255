import dataclasses
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omnistream.latency_sim import (
    STAGES,
    EventKind,
    LatencyProfile,
    StageTimer,
    check_against_reported,
    critical_path,
    first_packet_latency,
    load_profiles,
    report,
    rtf,
    simulate_stream,
)

# stage rows and totals as published (ms; tokens/s)
REPORTED = {
    ("audio", 1): ((72, 88, 57, 14, 3), (75, 140), 234, 0.47),
    ("video", 1): ((160, 160, 210, 14, 3), (75, 140), 547, 0.47),
    ("audio", 4): ((94, 468, 145, 16, 5), (63, 125), 728, 0.56),
    ("video", 4): ((180, 866, 450, 16, 5), (63, 125), 1517, 0.56),
    ("audio", 6): ((100, 673, 376, 18, 5), (53, 110), 1172, 0.66),
    ("video", 6): ((200, 1330, 734, 18, 5), (53, 110), 2284, 0.66),
}


def profile(stages, tps=(75, 140), modality="audio", conc=1):
    return LatencyProfile(modality, conc, *stages, *tps)


@pytest.fixture(scope="module")
def profiles():
    return load_profiles()


def test_bundled_file_matches_published_rows(profiles):
    assert set(profiles) == set(REPORTED)
    for key, (stages, tps, total, r) in REPORTED.items():
        p = profiles[key]
        assert tuple(getattr(p, s) for s in STAGES) == stages
        assert (p.thinker_tps, p.talker_tps) == tps
        assert (p.reported_total_ms, p.reported_rtf) == (total, r)


@pytest.mark.parametrize(
    "stages,expected",
    [((72, 88, 57, 14, 3), 234), ((160, 160, 210, 14, 3), 547), ((94, 468, 145, 16, 5), 728)],
)
def test_first_packet_examples(stages, expected):
    assert first_packet_latency(profile(stages)) == expected


def test_video_six_concurrency_residual(profiles):
    p = profiles[("video", 6)]
    assert first_packet_latency(p) == 2287
    assert first_packet_latency(p) - p.reported_total_ms == 3


@pytest.mark.parametrize("key", list(REPORTED))
def test_totals_within_tolerance(profiles, key):
    assert abs(first_packet_latency(profiles[key]) - REPORTED[key][2]) <= 5
    assert check_against_reported(profiles[key]) == []


def test_rtf_examples():
    one = profile((72, 88, 57, 14, 3), (75, 140))
    assert abs(rtf(one) - 0.468) < 5e-4
    assert round(rtf(one), 2) == 0.47
    four = profile((94, 468, 145, 16, 5), (63, 125))
    assert abs(rtf(four) - 0.561) < 5e-4
    assert abs(rtf(four) - 0.56) <= 0.01


def test_rtf_six_concurrency_within_003(profiles):
    value = rtf(profiles[("audio", 6)])
    assert abs(value - 0.637) < 5e-4
    assert abs(value - 0.66) <= 0.03


def test_rtf_limit():
    p = profile((1, 1, 1, 1e-12, 1e-12), (1e15, 1e15))
    assert rtf(p) < 1e-10


def test_tolerance_failures_reported():
    p = dataclasses.replace(profile((72, 88, 57, 14, 3)), reported_total_ms=200, reported_rtf=0.3)
    assert len(check_against_reported(p)) == 2


def test_profile_validation():
    with pytest.raises(ValueError):
        profile((0, 88, 57, 14, 3))
    with pytest.raises(ValueError):
        profile((72, 88, 57, 14, 3), (0, 140))


def test_single_frame_first_packet(profiles):
    for p in profiles.values():
        assert simulate_stream(p, 1).first_packet_ms == first_packet_latency(p)


def test_audio_one_concurrency_100_frames(profiles):
    tl = simulate_stream(profiles[("audio", 1)], 100)
    assert tl.underrun_count == 0
    assert abs(tl.rtf - rtf(profiles[("audio", 1)])) < 1e-12


def playback_oracle(rendered, first):
    """Discrete-event playback: buffer level just before each 80 ms consume tick."""
    underruns, play_at = 0, first
    for k, r in enumerate(rendered):
        buffered = sum(1 for t in rendered if t <= play_at) - k
        if buffered <= 0:
            underruns += 1
            play_at = r
        play_at += 80.0
    return underruns


def test_slow_profile_underruns():
    p = profile((72, 88, 57, 50, 50), (10, 10))
    assert rtf(p) > 1
    tl = simulate_stream(p, 50)
    rendered = [e.time_ms for e in tl.of_kind(EventKind.FRAME_RENDERED)]
    assert tl.underrun_count > 0
    assert tl.underrun_count == playback_oracle(rendered, tl.first_packet_ms)


@pytest.mark.parametrize("key", list(REPORTED))
def test_critical_path_reproduces_rows(profiles, key):
    bd = critical_path(simulate_stream(profiles[key], 5))
    assert tuple(bd.stages.values()) == REPORTED[key][0]
    assert bd.total == bd.first_packet_ms


def test_events_ordered(profiles):
    tl = simulate_stream(profiles[("video", 4)], 30)
    times = [e.time_ms for e in tl.events]
    assert times == sorted(times)
    by = {k: {e.payload: e.time_ms for e in tl.of_kind(k)} for k in EventKind}
    for i in range(30):
        assert by[EventKind.TALKER_TOKEN][i] < by[EventKind.MTP_DONE][i] < by[EventKind.FRAME_RENDERED][i]
    assert tl.of_kind(EventKind.FRAME_RENDERED)[0].time_ms == tl.first_packet_ms


def test_async_prefill_overlaps(profiles):
    p = profiles[("audio", 4)]
    seq = simulate_stream(p, 1, asynchronous=False, n_chunks=4)
    asy = simulate_stream(p, 1, asynchronous=True, n_chunks=4)
    assert asy.first_packet_ms < seq.first_packet_ms
    # talker ttft (145) < thinker ttft (468): only the last talker chunk stays on the path
    assert asy.first_packet_ms == p.preproc_ms + 4 * p.thinker_ttft_ms + p.talker_ttft_ms + 16 + 5
    assert seq.first_packet_ms == p.preproc_ms + 4 * (p.thinker_ttft_ms + p.talker_ttft_ms) + 16 + 5
    assert critical_path(asy).total == asy.first_packet_ms
    single = simulate_stream(p, 1, asynchronous=True)
    assert single.first_packet_ms == first_packet_latency(p)


costs = st.floats(0.1, 500, allow_nan=False)
rates = st.floats(5, 1000, allow_nan=False)


@st.composite
def any_profile(draw):
    return LatencyProfile("audio", 1, *(draw(costs) for _ in range(5)), draw(rates), draw(rates))


@settings(max_examples=200, deadline=None)
@given(p=any_profile())
def test_sum_law(p):
    assert first_packet_latency(p) == sum(p.stage_costs().values())
    assert critical_path(simulate_stream(p, 2)).total == pytest.approx(first_packet_latency(p), abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(p=any_profile(), stage=st.sampled_from(STAGES), bump=st.floats(0, 100))
def test_monotone_in_stage_costs(p, stage, bump):
    worse = dataclasses.replace(p, **{stage: getattr(p, stage) + bump})
    assert first_packet_latency(worse) >= first_packet_latency(p)
    assert simulate_stream(worse, 1).first_packet_ms >= simulate_stream(p, 1).first_packet_ms


@settings(max_examples=100, deadline=None)
@given(p=any_profile(), n=st.integers(1, 300))
def test_subunity_never_underruns(p, n):
    if rtf(p) < 1:
        assert simulate_stream(p, n).underrun_count == 0


def test_report_flags_deltas(profiles):
    out = report(simulate_stream(profiles[("video", 6)], 1))
    assert out["first_packet_ms"] == 2287
    assert out["total_delta_ms"] == 3
    assert out["rtf_delta"] == pytest.approx(rtf(profiles[("video", 6)]) - 0.66, abs=1e-6)


def test_stage_timer_builds_profile():
    timer = StageTimer()
    for name in ("preproc", "thinker_prefill", "talker_prefill", "talker_token", "mtp", "codec"):
        with timer.stage(name):
            time.sleep(0.001)
    p = timer.to_profile()
    assert p.preproc_ms >= 1.0 and p.talker_tps > 0
    assert simulate_stream(p, 3).first_packet_ms == pytest.approx(first_packet_latency(p))
