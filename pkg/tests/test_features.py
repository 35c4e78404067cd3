import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tsdnet.features import (EPS, AudioClip, MixtureFeatureConfig, ReferenceFeatureConfig,
                             WavFormatError, load_wav, log_mel, mel_filterbank, mfcc_from_log_mel,
                             mixture_features, reference_features, resample, stft_magnitude, write_wav)


def _wav_bytes(frames: np.ndarray, rate: int, tag: int, bits: int) -> bytes:
    channels = 1 if frames.ndim == 1 else frames.shape[1]
    if tag == 3:
        payload = frames.astype("<f4").tobytes()
    elif bits == 16:
        payload = frames.astype("<i2").tobytes()
    elif bits == 24:
        ints = frames.astype(np.int32).reshape(-1)
        payload = b"".join(int(v & 0xFFFFFF).to_bytes(3, "little") for v in ints)
    align = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, rate, rate * align, align, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", len(body)) + body


def test_load_silence(tmp_path):
    p = tmp_path / "s.wav"
    p.write_bytes(_wav_bytes(np.zeros(44100, dtype=np.int16), 44100, 1, 16))
    clip = load_wav(p)
    assert clip.sample_rate == 44100
    assert len(clip.samples) == 44100
    assert not clip.samples.any()


def test_load_full_scale_square(tmp_path):
    x = np.tile(np.array([32767, -32768], dtype=np.int16), 500)
    p = tmp_path / "sq.wav"
    p.write_bytes(_wav_bytes(x, 16000, 1, 16))
    s = load_wav(p).samples
    assert np.max(np.abs(s)) <= 1.0
    assert s.min() == -1.0


def test_stereo_antiphase_downmixes_to_zero(tmp_path):
    a = (np.random.default_rng(0).uniform(-1, 1, 1000) * 20000).astype(np.int16)
    p = tmp_path / "st.wav"
    p.write_bytes(_wav_bytes(np.stack([a, -a], axis=1), 8000, 1, 16))
    assert not load_wav(p).samples.any()


def test_24bit_and_float(tmp_path):
    x = np.array([0, 1 << 22, -(1 << 22), (1 << 23) - 1, -(1 << 23)])
    p = tmp_path / "a.wav"
    p.write_bytes(_wav_bytes(x, 8000, 1, 24))
    np.testing.assert_allclose(load_wav(p).samples, x / float(1 << 23))
    f = np.array([0.25, -0.5, 1.0], dtype=np.float32)
    p.write_bytes(_wav_bytes(f, 8000, 3, 32))
    np.testing.assert_allclose(load_wav(p).samples, f)


def test_format_errors_name_chunk(tmp_path):
    p = tmp_path / "bad.wav"
    p.write_bytes(b"JUNKxxxxWAVE")
    with pytest.raises(WavFormatError, match="RIFF"):
        load_wav(p)
    good = _wav_bytes(np.zeros(10, dtype=np.int16), 8000, 1, 16)
    p.write_bytes(good.replace(struct.pack("<HH", 1, 1), struct.pack("<HH", 2, 1), 1))  # ADPCM tag
    with pytest.raises(WavFormatError, match="fmt"):
        load_wav(p)
    p.write_bytes(good[: good.index(b"data")])
    with pytest.raises(WavFormatError, match="data"):
        load_wav(p)
    with pytest.raises(WavFormatError):
        load_wav(tmp_path / "missing.wav")


def test_write_read_roundtrip(tmp_path):
    x = np.random.default_rng(1).uniform(-0.9, 0.9, 2205)
    write_wav(tmp_path / "r.wav", AudioClip(x, 22050))
    back = load_wav(tmp_path / "r.wav")
    assert back.sample_rate == 22050
    np.testing.assert_allclose(back.samples, x, atol=0.5 / 32768 + 1e-12)


def test_resample_identity_and_length():
    x = np.random.default_rng(0).standard_normal(44100)
    clip = AudioClip(x, 44100)
    assert resample(clip, 44100) is clip
    down = resample(clip, 22050)
    assert down.sample_rate == 22050
    assert abs(len(down.samples) - 22050) <= 1


def test_resample_keeps_sine_frequency_and_energy():
    sr = 44100
    t = np.arange(sr) / sr
    clip = AudioClip(np.sin(2 * np.pi * 1000 * t), sr)
    down = resample(clip, 22050)
    spectrum = np.abs(np.fft.rfft(down.samples))
    peak_hz = np.argmax(spectrum) * 22050 / len(down.samples)
    assert abs(peak_hz - 1000) <= 1.0
    e_in = np.mean(clip.samples[2000:-2000] ** 2)
    e_out = np.mean(down.samples[1000:-1000] ** 2)
    assert abs(e_out / e_in - 1) < 0.01


def test_stft_zero_and_shape():
    m = stft_magnitude(AudioClip(np.zeros(4000), 8000), 256, 64)
    assert m.shape == (1 + 4000 // 64, 129)
    assert not m.any()


def test_stft_bin_centre_sine():
    n, sr, k = 512, 8000, 40
    t = np.arange(8000) / sr
    m = stft_magnitude(AudioClip(np.sin(2 * np.pi * k * sr / n * t), sr), n, 128)
    frame = m[m.shape[0] // 2]
    assert np.argmax(frame) == k
    others = np.delete(frame, [k - 1, k, k + 1])
    assert frame[k] >= 10 * others.max()


def test_stft_mixture_frame_count():
    # centred convention: 1 + len // hop
    clip = AudioClip(np.zeros(220500), 22050)
    assert stft_magnitude(clip, 2048, 441).shape == (501, 1025)


def test_stft_too_short():
    with pytest.raises(ValueError):
        stft_magnitude(AudioClip(np.zeros(100), 8000), 2048, 441)


def test_mixture_features_shape_and_rate():
    clip = AudioClip(np.random.default_rng(0).standard_normal(441000) * 0.1, 44100)
    fm = mixture_features(clip)
    assert fm.shape == (500, 64)
    assert fm.frames_per_second == 50.0
    assert fm.kind == "log-mel"


def test_mixture_features_silence_and_noise():
    silent = mixture_features(AudioClip(np.zeros(22050), 22050)).values
    assert np.all(silent == np.log(EPS))
    noise = mixture_features(AudioClip(np.random.default_rng(0).standard_normal(22050) * 0.01, 22050)).values
    assert np.all(noise.mean(axis=1) > silent.mean(axis=1))


def test_reference_features_shape():
    fm = reference_features(AudioClip(np.random.default_rng(0).standard_normal(4 * 44100), 44100))
    assert fm.shape == (883, 84)
    assert fm.kind == "logmel+mfcc"


def test_reference_features_silence():
    v = reference_features(AudioClip(np.zeros(22050), 22050)).values
    assert np.all(v[:, :64] == np.log(EPS))
    mf = v[:, 64:]
    assert np.allclose(mf[:, 0], np.sqrt(64) * np.log(EPS))
    assert np.allclose(mf[:, 1:], 0.0, atol=1e-9)


def test_reference_concatenation_order():
    cfg = ReferenceFeatureConfig()
    clip = AudioClip(np.random.default_rng(3).standard_normal(30000), 22050)
    v = reference_features(clip, cfg).values
    lm = log_mel(clip, cfg.sample_rate, cfg.window_size, cfg.hop_size, cfg.n_mels)
    np.testing.assert_array_equal(v[:, :64], lm)
    np.testing.assert_array_equal(v[:, 64:], mfcc_from_log_mel(lm, 20))


def test_determinism():
    clip = AudioClip(np.random.default_rng(5).standard_normal(50000), 22050)
    a = mixture_features(clip).values
    b = mixture_features(clip).values
    assert a.tobytes() == b.tobytes()


def test_mel_filterbank_properties():
    for sr, n_fft in [(22050, 2048), (44100, 400)]:
        fb = mel_filterbank(sr, n_fft, 64)
        assert fb.shape == (64, n_fft // 2 + 1)
        assert (fb >= 0).all()
        assert (fb.sum(axis=1) > 0).all()
        assert (fb @ np.ones(fb.shape[1]) > 0).all()


@settings(max_examples=15, deadline=None)
@given(k=st.integers(1, 6), seed=st.integers(0, 2**16))
def test_time_shift_covariance(k, seed):
    cfg = MixtureFeatureConfig()
    x = np.random.default_rng(seed).standard_normal(22050 * 2)
    shift = k * cfg.hop_size
    a = log_mel(AudioClip(x, 22050), 22050, cfg.window_size, cfg.hop_size, cfg.n_mels)
    b = log_mel(AudioClip(np.concatenate([np.zeros(shift), x]), 22050), 22050, cfg.window_size,
                cfg.hop_size, cfg.n_mels)
    interior = slice(10, a.shape[0] - 10)
    np.testing.assert_allclose(b[k:][interior], a[interior], atol=1e-6)


def test_clip_validation():
    with pytest.raises(ValueError):
        AudioClip(np.array([np.nan]), 8000)
    with pytest.raises(ValueError):
        AudioClip(np.zeros(3), 0)
