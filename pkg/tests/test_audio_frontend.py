import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omnistream.audio_frontend import (
    HOP_SAMPLES,
    LOG_FLOOR,
    SAMPLES_PER_TOKEN,
    WINDOW_SAMPLES,
    AudioEncoder,
    EncoderTokenBlock,
    MelFrameBlock,
    downsample_tokens,
    encode_streaming,
    mel_spectrogram,
    padded_frame_count,
    raw_frame_count,
    read_wav,
    window_mask,
    window_tokens_for,
    write_wav,
)


@pytest.fixture(scope="module")
def encoder():
    return AudioEncoder(d_model=64)


def count_windows(n_samples):
    # brute force: left-aligned windows that fit, at least one
    return max(1, sum(1 for k in range(n_samples) if k * HOP_SAMPLES + WINDOW_SAMPLES <= n_samples))


@pytest.mark.parametrize("n", [1, 399, 400, 401, 559, 560, 1280, 32000, 32001, 47999])
def test_frame_count_law(n):
    assert raw_frame_count(n) == count_windows(n)
    assert padded_frame_count(n) % 8 == 0
    assert 0 <= padded_frame_count(n) - raw_frame_count(n) < 8


def test_two_seconds_gives_200_frames(rng):
    x = rng.standard_normal(32000)
    assert raw_frame_count(32000) == 198
    mel = mel_spectrogram(x)
    assert mel.frames.shape == (200, 128)


def test_single_window():
    assert len(mel_spectrogram(np.ones(400), pad_to_tokens=False)) == 1


def test_silence_hits_log_floor():
    mel = mel_spectrogram(np.zeros(5000))
    assert np.all(mel.frames == np.log10(LOG_FLOOR))


def test_mel_deterministic(rng):
    x = rng.standard_normal(7000)
    np.testing.assert_array_equal(mel_spectrogram(x).frames, mel_spectrogram(x.copy()).frames)


def test_tone_lands_in_expected_bins():
    t = np.arange(16000) / 16000
    mel = mel_spectrogram(np.sin(2 * np.pi * 440 * t)).frames
    assert mel.shape[1] == 128
    peak = np.argmax(mel[10])
    low = np.argmax(mel_spectrogram(np.sin(2 * np.pi * 4000 * t)).frames[10])
    assert peak < low


@pytest.mark.parametrize("bad", [np.zeros(0), np.array([0.0, np.nan]), np.array([np.inf])])
def test_mel_rejects_bad_input(bad):
    with pytest.raises(ValueError):
        mel_spectrogram(bad)


def test_downsample_counts(encoder, rng):
    assert len(downsample_tokens(MelFrameBlock(rng.standard_normal((200, 128)), 0), encoder)) == 25
    assert len(downsample_tokens(MelFrameBlock(rng.standard_normal((8, 128)), 0), encoder)) == 1


def test_ninth_frame_starts_a_zero_padded_token(encoder, rng):
    frames = rng.standard_normal((9, 128))
    toks = encoder.downsample(frames)
    assert toks.shape[0] == 2
    np.testing.assert_allclose(toks[0], encoder.downsample(frames[:8])[0], atol=1e-12)
    padded = np.vstack([frames[8:], np.zeros((7, 128))])
    np.testing.assert_allclose(toks[1], encoder.downsample(padded)[0], atol=1e-12)


def test_token_depends_only_on_its_frames(encoder, rng):
    frames = rng.standard_normal((32, 128))
    base = encoder.downsample(frames)
    frames[8:16] += 1.0
    moved = encoder.downsample(frames)
    changed = [i for i in range(4) if not np.array_equal(base[i], moved[i])]
    assert changed == [1]


def test_window_rounding():
    assert window_tokens_for(1.0) == 13
    assert window_tokens_for(8.0) == 100
    assert window_tokens_for(4.0) == 50
    with pytest.raises(ValueError):
        window_tokens_for(0.5)
    with pytest.raises(ValueError):
        window_tokens_for(9.0)
    assert window_tokens_for(0.04, unsafe_window=True) == 1


def test_full_window_is_lower_triangle():
    m = window_mask(4, 8.0)
    np.testing.assert_array_equal(m.allowed, np.tril(np.ones((4, 4), bool)))


def test_banded_window():
    m = window_mask(4, window_tokens=2).allowed
    for i in range(4):
        assert set(np.flatnonzero(m[i])) == {j for j in (i - 1, i) if 0 <= j < 4}


def test_one_second_window_row_sums():
    m = window_mask(100, 1.0)
    expected = [sum(1 for j in range(100) if j <= i and i - j < 13) for i in range(100)]
    assert m.window_tokens == 13
    assert list(m.allowed.sum(axis=1)) == expected


@pytest.mark.parametrize("n", [1, 2, 7, 30])
@pytest.mark.parametrize("w", [1, 3, 13, 100])
def test_mask_never_sees_future(n, w):
    assert not np.any(np.triu(window_mask(n, window_tokens=w).allowed, 1))


def test_mask_requires_tokens():
    with pytest.raises(ValueError):
        window_mask(0, 1.0)


def test_single_chunk_equals_offline(encoder, rng):
    x = rng.standard_normal(6 * SAMPLES_PER_TOKEN)
    np.testing.assert_allclose(encode_streaming([x], 2.0, encoder).tokens, encoder.encode(x, 2.0).tokens, atol=1e-6)


def test_single_token_chunks(encoder, rng):
    x = rng.standard_normal(32000) * 0.2
    chunks = np.split(x, 25)
    assert all(c.size == SAMPLES_PER_TOKEN for c in chunks)
    stream = encode_streaming(chunks, 1.0, encoder)
    offline = encoder.encode(x, 1.0)
    assert len(offline) == 25
    np.testing.assert_allclose(stream.tokens, offline.tokens, atol=1e-6)


def test_cache_bounded_by_window(encoder, rng):
    stream = encoder.stream(1.0)
    for _ in range(40):
        stream.push(rng.standard_normal(SAMPLES_PER_TOKEN))
        assert stream.cache_len <= 13
    stream.flush()
    assert stream.cache_len <= 13
    assert stream.tokens_emitted == 40


def test_streaming_emits_with_one_token_lag(encoder, rng):
    stream = encoder.stream(4.0)
    assert stream.push(rng.standard_normal(SAMPLES_PER_TOKEN)).shape[0] == 0
    assert stream.push(rng.standard_normal(2 * SAMPLES_PER_TOKEN)).shape[0] == 2
    assert stream.flush().shape[0] == 1


@pytest.mark.parametrize("size", [640, 1000, 0, 1281])
def test_misaligned_chunks_rejected(encoder, size):
    with pytest.raises(ValueError):
        encoder.stream(4.0).push(np.zeros(size))


@settings(max_examples=30, deadline=None)
@given(
    sizes=st.lists(st.integers(1, 5), min_size=1, max_size=12),
    window=st.floats(1.0, 8.0),
    seed=st.integers(0, 2**32 - 1),
)
def test_streaming_equals_offline(encoder, sizes, window, seed):
    r = np.random.default_rng(seed)
    chunks = [r.standard_normal(s * SAMPLES_PER_TOKEN) * 0.3 for s in sizes]
    stream = encode_streaming(chunks, window, encoder).tokens
    offline = encoder.encode(np.concatenate(chunks), window).tokens
    assert stream.shape == offline.shape == (sum(sizes), 64)
    assert np.max(np.abs(stream - offline)) <= 1e-6


def test_token_block_roundtrip(rng):
    block = EncoderTokenBlock(rng.standard_normal((5, 3)))
    blob = block.to_bytes()
    assert blob[:8] == (5).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert len(blob) == 8 + 5 * 3 * 4
    np.testing.assert_allclose(EncoderTokenBlock.from_bytes(blob).tokens, block.tokens, rtol=1e-6)


def test_wav_roundtrip(tmp_path, rng):
    x = np.clip(rng.standard_normal(16000) * 0.2, -1, 1)
    write_wav(tmp_path / "a.wav", x, 16000, comment="hello")
    y = read_wav(tmp_path / "a.wav")
    assert y.shape == x.shape
    assert np.max(np.abs(x - y)) < 1.0 / 16000


def test_wav_rate_checked(tmp_path):
    write_wav(tmp_path / "b.wav", np.zeros(100), 24000)
    with pytest.raises(ValueError, match="no resampling"):
        read_wav(tmp_path / "b.wav")
