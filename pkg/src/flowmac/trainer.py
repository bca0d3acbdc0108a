"""Joint training of encoder, quantizer, decoder, and vector field on the
composite objective

    L = lambda_p * L_prior + lambda_v * L_q + L_CFM

where L_prior is MSE + MAE between the decoded quantized mel and the input
mel (both in the normalized domain), L_q is the quantizer loss, and L_CFM is
the flow-matching regression.  A synthetic sinusoid corpus stands in for a
speech/music dataset at desk scale.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import dsp
from .bitstream import unpack
from .cfm import PathConfig, cfm_loss, sample_path, sample_timestep_logit_normal
from .config import CodecConfig
from .model import MelDecoder, MelEncoder, UNetField
from .numerics import Adam, Tape, Tensor, clip_global_norm, default_dtype, ops, set_default_dtype
from .pipeline import Codec
from .quantizer import Codebooks, RVQConfig, perplexity, rvq_train_step
from .sampler import SamplerConfig


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    segment_seconds: float = 2.0
    batch_size: int = 8
    steps: int = 2000
    lambda_p: float = 0.01
    lambda_v: float = 0.25
    p_g: float = 0.2
    sigma_min: float = 1e-4
    grad_clip: float = 1.0
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        if min(self.lr, self.segment_seconds, self.batch_size, self.steps) <= 0:
            raise ValueError("lr, segment_seconds, batch_size, steps must be positive")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision}")


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    item_count: int = 24
    min_seconds: float = 2.0
    max_seconds: float = 4.0
    min_tones: int = 1
    max_tones: int = 5
    freq_lo: float = 80.0
    freq_hi: float = 8000.0
    noise_prob: float = 0.5
    envelope_prob: float = 0.5
    peak: float = 0.9
    sample_rate: int = 24000
    seed: int = 0


def generate_synthetic_corpus(spec: SyntheticDatasetSpec) -> list[dsp.AudioBuffer]:
    """Deterministic toy corpus: sums of sinusoids with optional noise floor
    and amplitude envelope, peak-normalized to spec.peak.

    Frequencies are drawn log-uniformly so the corpus covers the mel axis
    evenly rather than piling up in the top octaves."""
    rng = np.random.default_rng(spec.seed)
    items = []
    for _ in range(spec.item_count):
        seconds = rng.uniform(spec.min_seconds, spec.max_seconds)
        n = int(round(seconds * spec.sample_rate))
        t = np.arange(n) / spec.sample_rate
        x = np.zeros(n)
        for _ in range(rng.integers(spec.min_tones, spec.max_tones + 1)):
            freq = float(np.exp(rng.uniform(np.log(spec.freq_lo), np.log(spec.freq_hi))))
            amp = rng.uniform(0.1, 1.0)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            x += amp * np.sin(2.0 * np.pi * freq * t + phase)
        if rng.random() < spec.noise_prob:
            x += rng.uniform(0.001, 0.02) * rng.standard_normal(n)
        if rng.random() < spec.envelope_prob:
            cycles = rng.uniform(0.25, 2.0)
            x *= 0.55 + 0.45 * np.sin(2.0 * np.pi * cycles * t / seconds)
        peak = np.max(np.abs(x))
        if peak > 0:
            x *= spec.peak / peak
        items.append(dsp.AudioBuffer(x, spec.sample_rate))
    return items


def single_tone_item(freq: float, seconds: float = 2.0, sample_rate: int = 24000) -> dsp.AudioBuffer:
    t = np.arange(int(seconds * sample_rate)) / sample_rate
    return dsp.AudioBuffer(0.6 * np.sin(2.0 * np.pi * freq * t), sample_rate)


@dataclass
class LossReport:
    step: int
    l_prior: float
    l_q: float
    l_cfm: float
    total: float
    grad_norm: float = 0.0
    active_stages: int = 0


def total_loss(l_prior, l_q, l_cfm, lambda_p: float, lambda_v: float):
    """The composite objective; works on floats and Tensors alike."""
    return lambda_p * l_prior + lambda_v * l_q + l_cfm


class TrainerState:
    """Everything the loop mutates: networks, quantizer, optimizer, rng."""

    def __init__(self, codec_config: CodecConfig, train_config: TrainConfig):
        set_default_dtype(train_config.precision)
        self.codec_config = codec_config
        self.train_config = train_config
        self.rng = np.random.default_rng(train_config.seed)
        self.encoder = MelEncoder(codec_config, self.rng)
        self.decoder = MelDecoder(codec_config, self.rng)
        self.field = UNetField(codec_config, self.rng)
        self.books = Codebooks(RVQConfig.from_codec(codec_config), self.rng)
        self.stats = dsp.NormStats.identity(codec_config.n_mels)
        params = {}
        params.update(self.encoder.parameters("encoder"))
        params.update(self.decoder.parameters("decoder"))
        params.update(self.field.parameters("field"))
        params.update(self.books.parameters("quantizer"))
        self.params = params
        self.optimizer = Adam(params, lr=train_config.lr)
        self.step = 0

    def codec(self) -> Codec:
        return Codec(self.codec_config, self.encoder, self.decoder, self.field, self.books, self.stats)

    def save(self, path) -> None:
        self.codec().save(path, {"step": self.step, "precision": self.train_config.precision})


def compute_losses(state: TrainerState, batch: np.ndarray, quantizer_update: bool):
    """Forward pass of one batch [B x T x n_mels]; returns Tensor losses.

    Draw order from state.rng is fixed: quantizer stage count, (k-means init
    on the first update), dropout masks inside the networks, timestep z,
    path noise x0, CFG dropout mask.
    """
    cfg = state.train_config
    rng = state.rng
    x_in = Tensor(batch.astype(default_dtype()))

    active = int(rng.integers(1, state.books.config.stages + 1))
    z = state.encoder(x_in)
    q, l_q = rvq_train_step(z, state.books, rng, active_stages=active, update=quantizer_update)
    c_hat = state.decoder(q)

    diff = c_hat - x_in
    l_prior = (diff * diff).mean() + ops.abs_(diff).mean()

    t = sample_timestep_logit_normal(rng, size=batch.shape[0])
    path = sample_path(batch, t, rng, PathConfig(cfg.sigma_min))
    keep = (rng.random(batch.shape[0]) >= cfg.p_g).astype(default_dtype())
    cond = c_hat * Tensor(keep.reshape(-1, 1, 1))
    v = state.field(Tensor(path.x_t.astype(default_dtype())), t, cond)
    l_cfm = cfm_loss(v, path)

    total = total_loss(l_prior, l_q, l_cfm, cfg.lambda_p, cfg.lambda_v)
    return total, l_prior, l_q, l_cfm, active


def train_step(state: TrainerState, batch: np.ndarray) -> LossReport:
    """One optimization step; raises TrainingDiverged on non-finite loss."""
    cfg = state.train_config
    with Tape() as tape:
        total, l_prior, l_q, l_cfm, active = compute_losses(state, batch, quantizer_update=True)
        values = (float(l_prior.data), float(l_q.data), float(l_cfm.data), float(total.data))
        if not all(np.isfinite(values)):
            raise TrainingDiverged(
                f"non-finite loss at step {state.step}: "
                f"L_prior={values[0]}, L_q={values[1]}, L_CFM={values[2]}, total={values[3]}"
            )
        tape.backward(total)
    grad_norm = clip_global_norm(state.params, cfg.grad_clip)
    state.optimizer.step()
    state.optimizer.zero_grad()
    state.step += 1
    return LossReport(state.step, values[0], values[1], values[2], values[3], grad_norm, active)


class SegmentSampler:
    """Precomputed normalized mel matrices; draws random fixed-length windows."""

    def __init__(self, corpus: list[dsp.AudioBuffer], config: CodecConfig, train_config: TrainConfig):
        log_mels = [dsp.log_mel(a, config) for a in corpus]
        self.stats = dsp.compute_norm_stats(log_mels)
        self.mels = [(m - self.stats.mean) / self.stats.std for m in log_mels]
        self.t_seg = int(train_config.segment_seconds * config.frame_rate)
        short = [i for i, m in enumerate(self.mels) if m.shape[0] < self.t_seg]
        if short:
            raise ValueError(f"items {short} are shorter than one {self.t_seg}-frame segment")

    def draw(self, rng: np.random.Generator, batch_size: int) -> np.ndarray:
        batch = np.empty((batch_size, self.t_seg, self.mels[0].shape[1]))
        for b in range(batch_size):
            item = self.mels[rng.integers(len(self.mels))]
            start = rng.integers(item.shape[0] - self.t_seg + 1)
            batch[b] = item[start : start + self.t_seg]
        return batch


def train(
    codec_config: CodecConfig,
    train_config: TrainConfig,
    corpus: list[dsp.AudioBuffer],
    loss_csv_path=None,
    log_every: int = 100,
    progress=None,
) -> tuple[TrainerState, list[LossReport]]:
    """Run the full loop; returns final state and the per-step loss history."""
    state = TrainerState(codec_config, train_config)
    sampler = SegmentSampler(corpus, codec_config, train_config)
    state.stats = sampler.stats
    reports = []
    for _ in range(train_config.steps):
        batch = sampler.draw(state.rng, train_config.batch_size)
        report = train_step(state, batch)
        reports.append(report)
        if progress is not None and report.step % log_every == 0:
            progress(report)
    if loss_csv_path is not None:
        write_loss_csv(loss_csv_path, reports)
    return state, reports


def write_loss_csv(path, reports: list[LossReport]) -> None:
    """Full-precision loss curve; byte-stable for a fixed seed and precision."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "L_prior", "L_q", "L_CFM", "total"])
        for r in reports:
            w.writerow([r.step, repr(r.l_prior), repr(r.l_q), repr(r.l_cfm), repr(r.total)])


def read_loss_csv(path) -> list[LossReport]:
    with open(path) as f:
        rows = list(csv.DictReader(f))
    return [
        LossReport(int(r["step"]), float(r["L_prior"]), float(r["L_q"]), float(r["L_CFM"]), float(r["total"]))
        for r in rows
    ]


def log_spectral_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over frames of the per-frame RMS difference of log spectra."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    t = min(a.shape[0], b.shape[0])
    if t == 0:
        return 0.0
    return float(np.mean(np.sqrt(np.mean((a[:t] - b[:t]) ** 2, axis=1))))


@dataclass
class MetricsReport:
    lsd_per_item: list[float] = field(default_factory=list)
    mean_lsd: float = 0.0
    stage_perplexity: list[float] = field(default_factory=list)
    mean_rtf: float = 0.0
    nfe: int = 0


def evaluate(
    codec: Codec,
    corpus: list[dsp.AudioBuffer],
    sampler_cfg: SamplerConfig | None = None,
    single_step: bool = False,
    gl_iters: int = 32,
) -> MetricsReport:
    """Round-trip every item through the codec; objective quality metrics.

    LSD compares the input's un-normalized log-mel to the generated one.
    RTF covers the full decode path: code unpacking through sampling and
    waveform synthesis.
    """
    if sampler_cfg is None:
        sampler_cfg = SamplerConfig(
            steps=codec.config.ode_steps,
            cfg_factor=codec.config.cfg_factor,
            cfg_enabled=codec.config.cfg_enabled,
        )
    report = MetricsReport(nfe=0)
    all_codes = []
    rtfs = []
    for audio in corpus:
        mel = dsp.mel_analyze(audio, codec.config, codec.stats)
        stream = codec.encode_mel_frames(mel)

        t0 = time.perf_counter()
        codes, _ = unpack(stream)
        condition = codec.decoded_condition(codes)
        gen, nfe = codec.sample_mel(condition, sampler_cfg, single_step)
        dsp.mel_to_audio_fallback(gen, codec.config, codec.stats, iters=gl_iters)
        dt = time.perf_counter() - t0
        rtfs.append(dt / audio.duration)
        report.nfe = nfe
        all_codes.append(codes.indices)

        ref = dsp.denormalize(mel, codec.stats)
        out = dsp.denormalize(gen, codec.stats)
        report.lsd_per_item.append(log_spectral_distance(ref, out))
    report.mean_lsd = float(np.mean(report.lsd_per_item)) if report.lsd_per_item else 0.0
    stacked = np.concatenate(all_codes, axis=0) if all_codes else np.zeros((0, 1), dtype=int)
    report.stage_perplexity = [
        perplexity(stacked[:, s], codec.config.codebook_size) for s in range(stacked.shape[1])
    ]
    report.mean_rtf = float(np.mean(rtfs)) if rtfs else 0.0
    return report
