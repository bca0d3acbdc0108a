"""The assembled codec: audio -> mel -> latent -> codes -> .fmac and back.

A Codec bundles the trained networks, quantizer state, normalization stats,
and config.  Decode runs the CFM sampler on the decoded-mel condition and
falls back to Griffin-Lim for waveform synthesis.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import dsp
from .bitstream import EncodedStream, pack, unpack
from .config import CodecConfig, config_from_dict
from .model import MelDecoder, MelEncoder, UNetField
from .numerics import Tensor, default_dtype, load_checkpoint, no_grad, save_checkpoint
from .quantizer import Codebooks, CodeGrid, RVQConfig, rvq_decode, rvq_encode
from .sampler import SamplerConfig, euler_integrate, single_step_sample


@dataclass
class DecodeInfo:
    nfe: int
    rtf: float
    audio_seconds: float
    decode_seconds: float


class Codec:
    def __init__(
        self,
        config: CodecConfig,
        encoder: MelEncoder,
        decoder: MelDecoder,
        field: UNetField,
        books: Codebooks,
        stats: dsp.NormStats,
    ):
        self.config = config
        self.encoder = encoder
        self.decoder = decoder
        self.field = field
        self.books = books
        self.stats = stats

    @classmethod
    def fresh(cls, config: CodecConfig, seed: int = 0) -> "Codec":
        """Random-init codec (useful as the untrained baseline)."""
        rng = np.random.default_rng(seed)
        return cls(
            config,
            MelEncoder(config, rng),
            MelDecoder(config, rng),
            UNetField(config, rng),
            Codebooks(RVQConfig.from_codec(config), rng),
            dsp.NormStats.identity(config.n_mels),
        )

    def eval_mode(self) -> "Codec":
        self.encoder.eval()
        self.decoder.eval()
        self.field.eval()
        return self

    # -- analysis side -------------------------------------------------

    def encode_audio(self, audio: dsp.AudioBuffer, active_stages: int | None = None) -> EncodedStream:
        mel = dsp.mel_analyze(audio, self.config, self.stats)
        return self.encode_mel_frames(mel, active_stages)

    def encode_mel_frames(self, mel: dsp.MelFrameSequence, active_stages: int | None = None) -> EncodedStream:
        self.eval_mode()
        with no_grad():
            z = self.encoder(Tensor(mel.frames[None].astype(default_dtype())))
        latent = z.data[0]
        codes = rvq_encode(latent, self.books, active_stages)
        return pack(codes, self.config)

    # -- synthesis side ------------------------------------------------

    def decoded_condition(self, codes: CodeGrid) -> dsp.MelFrameSequence:
        """codes -> quantized latent -> mel decoder output (the condition c)."""
        self.eval_mode()
        latent_q = rvq_decode(codes, self.books)
        with no_grad():
            c = self.decoder(Tensor(latent_q[None].astype(default_dtype())))
        return dsp.MelFrameSequence(c.data[0].astype(np.float64), self.config.hash())

    def sample_mel(
        self, condition: dsp.MelFrameSequence, sampler: SamplerConfig, single_step: bool = False
    ) -> tuple[dsp.MelFrameSequence, int]:
        """Integrate the learned field from noise to a normalized mel."""
        self.eval_mode()
        t_frames = condition.n_frames
        cond = condition.frames.astype(default_dtype())

        def field_fn(x, t, c):
            with no_grad():
                xt = Tensor(x[None].astype(default_dtype()))
                ct = None if c is None else Tensor(c[None])
                return self.field(xt, float(t), ct).data[0].astype(np.float64)

        rng = np.random.default_rng(sampler.seed)
        x0 = rng.standard_normal((t_frames, self.config.n_mels))
        if single_step:
            result = single_step_sample(field_fn, x0, cond)
        else:
            result = euler_integrate(field_fn, x0, cond, sampler)
        mel = dsp.MelFrameSequence(result.x, self.config.hash())
        return mel, result.nfe

    def decode_stream(
        self,
        stream: EncodedStream,
        sampler: SamplerConfig | None = None,
        single_step: bool = False,
        griffin_lim_iters: int = 32,
    ) -> tuple[dsp.AudioBuffer, DecodeInfo]:
        """Full decode: unpack -> RVQ decode -> mel decoder -> CFM -> waveform."""
        if sampler is None:
            sampler = SamplerConfig(
                steps=self.config.ode_steps,
                cfg_factor=self.config.cfg_factor,
                cfg_enabled=self.config.cfg_enabled,
            )
        self.check_stream_compatible(stream.header)
        t0 = time.perf_counter()
        codes, _ = unpack(stream)
        condition = self.decoded_condition(codes)
        mel, nfe = self.sample_mel(condition, sampler, single_step)
        audio = dsp.mel_to_audio_fallback(mel, self.config, self.stats, iters=griffin_lim_iters)
        dt = time.perf_counter() - t0
        dur = max(audio.duration, 1e-12)
        return audio, DecodeInfo(nfe=nfe, rtf=dt / dur, audio_seconds=dur, decode_seconds=dt)

    def check_stream_compatible(self, header) -> None:
        """Raise with the differing fields when a stream doesn't match this codec."""
        mismatches = []
        for field_name, ours in (
            ("sample_rate", self.config.sample_rate),
            ("hop", self.config.hop),
            ("n_mels", self.config.n_mels),
            ("codebook_bits", self.config.codebook_bits),
        ):
            theirs = getattr(header, field_name)
            if theirs != ours:
                mismatches.append(f"{field_name}: stream {theirs} != model {ours}")
        if header.stages > self.config.stages:
            mismatches.append(f"stages: stream {header.stages} > model {self.config.stages}")
        if mismatches:
            raise StreamConfigMismatch("; ".join(mismatches))

    # -- persistence ---------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {name: p.data for name, p in self.encoder.parameters("encoder").items()}
        arrays.update({name: p.data for name, p in self.decoder.parameters("decoder").items()})
        arrays.update({name: p.data for name, p in self.field.parameters("field").items()})
        arrays.update(self.books.state_arrays("quantizer"))
        arrays["norm.mean"] = self.stats.mean
        arrays["norm.std"] = self.stats.std
        return arrays

    def save(self, path, extra_metadata: dict | None = None) -> None:
        metadata = {"config": self.config.to_dict(), "config_hash": self.config.hash()}
        if extra_metadata:
            metadata.update(extra_metadata)
        save_checkpoint(path, self.state_arrays(), metadata)

    @classmethod
    def load(cls, path) -> tuple["Codec", dict]:
        arrays, metadata = load_checkpoint(path)
        config = config_from_dict(metadata["config"])
        codec = cls.fresh(config)
        codec.encoder.load_parameters(arrays, "encoder")
        codec.decoder.load_parameters(arrays, "decoder")
        codec.field.load_parameters(arrays, "field")
        codec.books.load_state(arrays, "quantizer")
        codec.stats = dsp.NormStats(arrays["norm.mean"], arrays["norm.std"])
        return codec, metadata


class StreamConfigMismatch(ValueError):
    pass
