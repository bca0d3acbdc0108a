"""Mel front end, Griffin-Lim fallback, and WAV I/O."""

import numpy as np
import pytest

from flowmac import dsp
from flowmac.config import CodecConfig
from flowmac.trainer import single_tone_item

CFG = CodecConfig()


def tone(freq, seconds=2.0, rate=24000, amp=0.5):
    t = np.arange(int(seconds * rate)) / rate
    return dsp.AudioBuffer(amp * np.sin(2 * np.pi * freq * t), rate)


class TestTypes:
    def test_audio_buffer_rejects_nonfinite(self):
        with pytest.raises(dsp.AudioFormatError):
            dsp.AudioBuffer(np.array([0.0, np.nan]), 24000)

    def test_audio_buffer_rejects_bad_rate(self):
        with pytest.raises(dsp.AudioFormatError):
            dsp.AudioBuffer(np.zeros(10), 0)

    def test_duration(self):
        assert tone(440.0, seconds=1.5).duration == pytest.approx(1.5)

    def test_norm_stats_positive_std(self):
        with pytest.raises(ValueError, match="positive"):
            dsp.NormStats(np.zeros(4), np.zeros(4))

    def test_norm_stats_identity(self):
        s = dsp.NormStats.identity(8)
        assert np.array_equal(s.mean, np.zeros(8))
        assert np.array_equal(s.std, np.ones(8))

    def test_mel_frames_must_be_2d_finite(self):
        with pytest.raises(ValueError, match="2-d"):
            dsp.MelFrameSequence(np.zeros(5))
        with pytest.raises(ValueError):
            dsp.MelFrameSequence(np.full((2, 3), np.inf))


class TestMelScale:
    def test_htk_anchor(self):
        # 2595 * log10(1 + 1000/700), straight from the mel definition
        assert dsp.hz_to_mel(1000.0) == pytest.approx(2595.0 * np.log10(1 + 1000.0 / 700.0))

    def test_roundtrip(self):
        f = np.linspace(0, 12000, 50)
        assert np.allclose(dsp.mel_to_hz(dsp.hz_to_mel(f)), f, atol=1e-8)

    def test_monotone(self):
        m = dsp.hz_to_mel(np.linspace(0, 12000, 100))
        assert np.all(np.diff(m) > 0)

    def test_filterbank_shape_and_peaks(self):
        fb = dsp.mel_filterbank(CFG)
        assert fb.shape == (CFG.n_mels, CFG.n_fft // 2 + 1)
        # triangle apex rarely lands exactly on an FFT bin
        assert 0.9 < fb.max() <= 1.0
        assert np.all(fb >= 0)
        # every band must respond to something
        assert np.all(fb.sum(axis=1) > 0)

    def test_band_centers_cover_range(self):
        centers = dsp.mel_band_centers(CFG)
        assert len(centers) == CFG.n_mels
        assert centers[0] > CFG.fmin
        assert centers[-1] < CFG.fmax
        assert np.all(np.diff(centers) > 0)


class TestAnalysis:
    def test_frame_count_is_floor_div(self):
        assert dsp.frame_count(24000, CFG) == 46
        assert dsp.frame_count(48000, CFG) == 93
        assert dsp.frame_count(512 * 7 + 511, CFG) == 7

    def test_stft_shape(self):
        mag = dsp.stft_magnitude(np.random.default_rng(0).normal(size=24000), CFG)
        assert mag.shape == (46, CFG.n_fft // 2 + 1)
        assert np.all(mag >= 0)

    def test_stft_too_short(self):
        with pytest.raises(dsp.AudioFormatError, match="shorter than one window"):
            dsp.stft_magnitude(np.zeros(100), CFG)

    def test_silence_hits_log_floor_exactly(self):
        lm = dsp.log_mel(dsp.AudioBuffer(np.zeros(24000), 24000), CFG)
        assert np.all(lm == np.log(CFG.log_floor))

    def test_tone_lands_in_nearest_band(self):
        centers = dsp.mel_band_centers(CFG)
        for freq in (440.0, 1000.0, 3000.0):
            lm = dsp.log_mel(tone(freq), CFG)
            hot = int(np.argmax(lm.mean(axis=0)))
            expect = int(np.argmin(np.abs(centers - freq)))
            assert abs(hot - expect) <= 1, f"{freq} Hz: band {hot} vs {expect}"

    def test_sample_rate_mismatch_mentions_resampling(self):
        with pytest.raises(dsp.AudioFormatError, match="resample"):
            dsp.log_mel(dsp.AudioBuffer(np.zeros(16000), 16000), CFG)

    def test_empty_audio(self):
        with pytest.raises(dsp.AudioFormatError, match="empty"):
            dsp.log_mel(dsp.AudioBuffer(np.zeros(0), 24000), CFG)

    def test_mel_analyze_normalizes(self):
        audio = tone(1000.0)
        lm = dsp.log_mel(audio, CFG)
        stats = dsp.compute_norm_stats([lm])
        mel = dsp.mel_analyze(audio, CFG, stats)
        assert mel.config_hash == CFG.hash()
        assert abs(mel.frames.mean()) < 1e-9
        back = dsp.denormalize(mel, stats)
        assert np.allclose(back, lm, atol=1e-10)

    def test_norm_stats_population_convention(self):
        rng = np.random.default_rng(0)
        mats = [rng.normal(3.0, 2.0, (50, 4)), rng.normal(3.0, 2.0, (30, 4))]
        stats = dsp.compute_norm_stats(mats)
        stacked = np.concatenate(mats)
        assert np.allclose(stats.mean, stacked.mean(axis=0))
        assert np.allclose(stats.std, stacked.std(axis=0))  # ddof=0

    def test_norm_stats_floor_and_empty(self):
        stats = dsp.compute_norm_stats([np.ones((10, 3))])
        assert np.all(stats.std == 1e-5)
        with pytest.raises(ValueError, match="empty"):
            dsp.compute_norm_stats([])


class TestSynthesis:
    def _analyzed(self, freq=440.0):
        audio = tone(freq)
        stats = dsp.compute_norm_stats([dsp.log_mel(audio, CFG)])
        return audio, dsp.mel_analyze(audio, CFG, stats), stats

    def test_griffin_lim_converges(self):
        audio, mel, stats = self._analyzed()
        target = dsp.stft_magnitude(audio.samples, CFG)
        scs = [
            dsp.spectral_convergence(target, dsp.mel_to_audio_fallback(mel, CFG, stats, iters=i), CFG)
            for i in (1, 8, 32)
        ]
        assert scs[0] > scs[1] > scs[2]

    def test_output_peak_limited(self):
        _, mel, stats = self._analyzed()
        out = dsp.mel_to_audio_fallback(mel, CFG, stats, iters=4)
        assert np.max(np.abs(out.samples)) <= 0.99 + 1e-12

    def test_tone_frequency_survives_roundtrip(self):
        audio, mel, stats = self._analyzed(440.0)
        out = dsp.mel_to_audio_fallback(mel, CFG, stats, iters=32)
        spec = np.abs(np.fft.rfft(out.samples))
        peak = np.fft.rfftfreq(len(out.samples), 1 / 24000)[np.argmax(spec)]
        centers = dsp.mel_band_centers(CFG)
        band_of = lambda f: int(np.argmin(np.abs(centers - f)))
        assert abs(band_of(peak) - band_of(440.0)) <= 1

    def test_silence_roundtrip_is_quiet(self):
        stats = dsp.NormStats(np.full(CFG.n_mels, np.log(CFG.log_floor)), np.ones(CFG.n_mels))
        mel = dsp.MelFrameSequence(np.zeros((46, CFG.n_mels)))
        out = dsp.mel_to_audio_fallback(mel, CFG, stats, iters=2)
        assert np.sqrt(np.mean(out.samples**2)) < 1e-5

    def test_iters_validation(self):
        _, mel, stats = self._analyzed()
        with pytest.raises(ValueError, match="iters"):
            dsp.mel_to_audio_fallback(mel, CFG, stats, iters=0)

    def test_output_length_matches_frames(self):
        _, mel, stats = self._analyzed()
        out = dsp.mel_to_audio_fallback(mel, CFG, stats, iters=1)
        assert len(out.samples) == mel.n_frames * CFG.hop


class TestWavIO:
    def test_int16_roundtrip(self, tmp_path):
        audio = tone(440.0, seconds=0.5)
        dsp.write_wav(tmp_path / "a.wav", audio)
        back = dsp.read_wav(tmp_path / "a.wav")
        assert back.sample_rate == 24000
        assert np.max(np.abs(back.samples - audio.samples)) < 1e-4

    def test_float32_roundtrip(self, tmp_path):
        audio = tone(440.0, seconds=0.5)
        dsp.write_wav(tmp_path / "a.wav", audio, fmt="float32")
        back = dsp.read_wav(tmp_path / "a.wav")
        assert np.max(np.abs(back.samples - audio.samples)) < 1e-6

    def test_stereo_downmix_warns(self, tmp_path):
        from scipy.io import wavfile

        stereo = np.zeros((1000, 2), dtype=np.int16)
        stereo[:, 0] = 1000
        wavfile.write(tmp_path / "s.wav", 24000, stereo)
        with pytest.warns(UserWarning, match="downmix"):
            back = dsp.read_wav(tmp_path / "s.wav")
        assert back.samples.ndim == 1

    def test_unsupported_dtype(self, tmp_path):
        from scipy.io import wavfile

        wavfile.write(tmp_path / "u.wav", 24000, np.zeros(1000, dtype=np.uint8))
        with pytest.raises(dsp.AudioFormatError):
            dsp.read_wav(tmp_path / "u.wav")

    def test_resample_preserves_pitch(self):
        audio = single_tone_item(440.0, seconds=1.0, sample_rate=8000)
        up = dsp.resample_linear(audio, 24000)
        assert up.sample_rate == 24000
        assert len(up.samples) == pytest.approx(3 * len(audio.samples), abs=3)
        spec = np.abs(np.fft.rfft(up.samples))
        peak = np.fft.rfftfreq(len(up.samples), 1 / 24000)[np.argmax(spec)]
        assert peak == pytest.approx(440.0, abs=2.0)

    def test_resample_same_rate_is_identity(self):
        audio = tone(440.0, seconds=0.25)
        same = dsp.resample_linear(audio, 24000)
        assert np.array_equal(same.samples, audio.samples)
