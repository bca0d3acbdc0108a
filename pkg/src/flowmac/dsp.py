"""Audio <-> mel-spectrogram conversion and the phase-reconstruction fallback.

Analysis pipeline: Hann-window STFT (reflection-padded, T = len // hop
frames) -> magnitude -> 128-band HTK mel filterbank over 0-12 kHz ->
log with floor -> per-band normalization by dataset statistics.

The inverse path (for audible output in place of a neural vocoder)
de-normalizes, inverts the filterbank by clamped pseudo-inverse, and runs
Griffin-Lim phase reconstruction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

from .config import CodecConfig


class AudioFormatError(ValueError):
    pass


@dataclass
class AudioBuffer:
    """Mono PCM samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise AudioFormatError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise AudioFormatError("audio contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class NormStats:
    """Per-mel-band normalization factors computed offline over a corpus."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise ValueError("NormStats.std must be strictly positive")

    @classmethod
    def identity(cls, n_mels: int) -> "NormStats":
        return cls(np.zeros(n_mels), np.ones(n_mels))


@dataclass
class MelFrameSequence:
    """Normalized log-mel frames [T x n_mels], bound to the producing config."""

    frames: np.ndarray
    config_hash: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2:
            raise ValueError(f"mel frames must be 2-d, got shape {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("mel frames contain non-finite values")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def hann_window(n: int) -> np.ndarray:
    # Periodic Hann, the STFT convention.
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(config: CodecConfig) -> np.ndarray:
    """Triangular HTK-mel filterbank, rows [n_mels x n_fft//2+1], peak 1."""
    n_bins = config.n_fft // 2 + 1
    bin_freqs = np.arange(n_bins) * config.sample_rate / config.n_fft
    mel_pts = np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    fb = np.zeros((config.n_mels, n_bins))
    for i in range(config.n_mels):
        lo, center, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        up = (bin_freqs - lo) / (center - lo)
        down = (hi - bin_freqs) / (hi - center)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    return fb


def mel_band_centers(config: CodecConfig) -> np.ndarray:
    """Center frequency (Hz) of each filterbank band."""
    mel_pts = np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_mels + 2)
    return mel_to_hz(mel_pts[1:-1])


def frame_count(n_samples: int, config: CodecConfig) -> int:
    return n_samples // config.hop


def stft_magnitude(samples: np.ndarray, config: CodecConfig) -> np.ndarray:
    """Magnitude STFT with reflection center padding; exactly len//hop frames."""
    n = len(samples)
    if n < config.n_fft:
        raise AudioFormatError(f"audio of {n} samples is shorter than one window ({config.n_fft})")
    t = frame_count(n, config)
    half = config.n_fft // 2
    padded = np.pad(samples, half, mode="reflect")
    window = hann_window(config.n_fft)
    starts = np.arange(t) * config.hop
    idx = starts[:, None] + np.arange(config.n_fft)[None, :]
    frames = padded[idx] * window
    return np.abs(np.fft.rfft(frames, axis=-1))


def log_mel(audio: AudioBuffer, config: CodecConfig) -> np.ndarray:
    """Un-normalized log-mel matrix [T x n_mels]."""
    if audio.sample_rate != config.sample_rate:
        raise AudioFormatError(
            f"expected {config.sample_rate} Hz input, got {audio.sample_rate} Hz; resample first"
        )
    if len(audio.samples) == 0:
        raise AudioFormatError("empty audio")
    mag = stft_magnitude(audio.samples, config)
    melspec = mag @ mel_filterbank(config).T
    return np.log(np.maximum(melspec, config.log_floor))


def mel_analyze(audio: AudioBuffer, config: CodecConfig, stats: NormStats) -> MelFrameSequence:
    """Normalized log-mel frames for the codec."""
    lm = log_mel(audio, config)
    frames = (lm - stats.mean) / stats.std
    return MelFrameSequence(frames, config.hash())


def compute_norm_stats(corpus: list[MelFrameSequence] | list[np.ndarray], std_floor: float = 1e-5) -> NormStats:
    """Per-band mean/std (population convention) over un-normalized log-mel frames."""
    if not corpus:
        raise ValueError("empty corpus")
    mats = [c.frames if isinstance(c, MelFrameSequence) else np.asarray(c) for c in corpus]
    stacked = np.concatenate(mats, axis=0)
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), std_floor)
    return NormStats(mean, std)


def denormalize(mel: MelFrameSequence, stats: NormStats) -> np.ndarray:
    return mel.frames * stats.std + stats.mean


def _istft(spec: np.ndarray, phase: np.ndarray, config: CodecConfig, n_samples: int) -> np.ndarray:
    """Overlap-add inverse of stft_magnitude's framing."""
    window = hann_window(config.n_fft)
    frames = np.fft.irfft(spec * np.exp(1j * phase), n=config.n_fft, axis=-1) * window
    half = config.n_fft // 2
    total = n_samples + 2 * half
    out = np.zeros(total)
    wsum = np.zeros(total)
    w2 = window * window
    for k in range(frames.shape[0]):
        s = k * config.hop
        out[s : s + config.n_fft] += frames[k]
        wsum[s : s + config.n_fft] += w2
    out /= np.maximum(wsum, 1e-10)
    return out[half : half + n_samples]


def griffin_lim(mag: np.ndarray, config: CodecConfig, iters: int, n_samples: int) -> np.ndarray:
    """Phase reconstruction from a magnitude spectrogram (zero phase init)."""
    phase = np.zeros_like(mag)
    x = _istft(mag, phase, config, n_samples)
    for _ in range(max(0, iters - 1)):
        spec = np.fft.rfft(
            np.pad(x, config.n_fft // 2, mode="reflect")[
                np.arange(mag.shape[0])[:, None] * config.hop + np.arange(config.n_fft)[None, :]
            ]
            * hann_window(config.n_fft),
            axis=-1,
        )
        phase = np.angle(spec)
        x = _istft(mag, phase, config, n_samples)
    return x


def mel_to_audio_fallback(
    mel: MelFrameSequence,
    config: CodecConfig,
    stats: NormStats,
    iters: int = 32,
) -> AudioBuffer:
    """Invert mel back to a waveform: de-normalize, undo the log, pseudo-invert
    the filterbank (clamped at zero), Griffin-Lim, peak-limit to 0.99."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    mel_mag = np.exp(denormalize(mel, stats))
    fb = mel_filterbank(config)
    spec = np.maximum(mel_mag @ np.linalg.pinv(fb).T, 0.0)
    n_samples = mel.n_frames * config.hop
    x = griffin_lim(spec, config, iters, n_samples)
    peak = np.max(np.abs(x)) if x.size else 0.0
    if peak > 0.99:
        x = x * (0.99 / peak)
    return AudioBuffer(x, config.sample_rate)


def spectral_convergence(target_mag: np.ndarray, audio: AudioBuffer, config: CodecConfig) -> float:
    """Relative Frobenius error between a target magnitude and a signal's STFT."""
    mag = stft_magnitude(audio.samples, config)
    t = min(mag.shape[0], target_mag.shape[0])
    num = np.linalg.norm(mag[:t] - target_mag[:t])
    return float(num / max(np.linalg.norm(target_mag[:t]), 1e-12))


def resample_linear(audio: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Linear-interpolation resampler (quality beyond this is out of scope)."""
    if audio.sample_rate == target_rate:
        return audio
    n_out = int(round(len(audio.samples) * target_rate / audio.sample_rate))
    t_in = np.arange(len(audio.samples)) / audio.sample_rate
    t_out = np.arange(n_out) / target_rate
    return AudioBuffer(np.interp(t_out, t_in, audio.samples), target_rate)


def read_wav(path) -> AudioBuffer:
    """Read a mono WAV (16-bit PCM or 32-bit float); stereo is downmixed."""
    rate, data = wavfile.read(path)
    if data.ndim == 2:
        warnings.warn(f"{path}: downmixing {data.shape[1]} channels to mono")
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise AudioFormatError(f"{path}: unsupported WAV sample format {data.dtype}")
    return AudioBuffer(samples, int(rate))


def write_wav(path, audio: AudioBuffer, fmt: str = "int16") -> None:
    """Write mono WAV as 16-bit PCM ("int16") or 32-bit float ("float32")."""
    x = np.clip(audio.samples, -1.0, 1.0)
    if fmt == "int16":
        wavfile.write(path, audio.sample_rate, (x * 32767.0).astype(np.int16))
    elif fmt == "float32":
        wavfile.write(path, audio.sample_rate, x.astype(np.float32))
    else:
        raise ValueError(f"unsupported WAV format {fmt!r}")
