"""Structural codec configuration shared by every stage of the pipeline.

The bitstream header pins down the fields a decoder must agree on; the
config hash embedded in checkpoints catches everything else.  Values load
from a human-readable TOML file; flags may override individual fields.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


@dataclass(frozen=True)
class CodecConfig:
    # mel front end
    sample_rate: int = 24000
    n_fft: int = 2048
    hop: int = 512
    n_mels: int = 128
    fmin: float = 0.0
    fmax: float = 12000.0
    log_floor: float = 1e-5

    # residual quantizer
    stages: int = 8
    codebook_size: int = 256
    proj_dim: int = 16
    commitment_beta: float = 0.25

    # encoder/decoder transformers
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    n_blocks: int = 6
    dropout_p: float = 0.1

    # vector-field U-Net
    unet_channels: tuple[int, ...] = (128, 256)
    time_embed_dim: int = 64
    groupnorm_groups: int = 8

    # sampler defaults
    ode_steps: int = 32
    cfg_factor: float = 1.0
    cfg_enabled: bool = True

    @property
    def latent_dim(self) -> int:
        return self.n_mels

    @property
    def frame_rate(self) -> float:
        # 24000/512 = 46.875 exactly; rate arithmetic must use this, not 47.
        return self.sample_rate / self.hop

    @property
    def codebook_bits(self) -> int:
        bits = self.codebook_size.bit_length() - 1
        if 2**bits != self.codebook_size:
            raise ValueError(f"codebook_size {self.codebook_size} is not a power of two")
        return bits

    def to_dict(self) -> dict:
        d = asdict(self)
        d["unet_channels"] = list(d["unet_channels"])
        return d

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def with_overrides(self, **kwargs) -> "CodecConfig":
        return replace(self, **kwargs)


def load_config(path) -> tuple[CodecConfig, dict]:
    """Read a TOML config file; returns (codec config, remaining sections).

    Unknown keys in the [codec] section are an error so that typos do not
    silently fall back to defaults.
    """
    with open(path, "rb") as f:
        data = tomllib.load(f)
    codec_kw = dict(data.pop("codec", {}))
    if "unet_channels" in codec_kw:
        codec_kw["unet_channels"] = tuple(codec_kw["unet_channels"])
    valid = set(CodecConfig.__dataclass_fields__)
    unknown = set(codec_kw) - valid
    if unknown:
        raise ValueError(f"unknown [codec] keys in {path}: {sorted(unknown)}")
    return CodecConfig(**codec_kw), data


def config_from_dict(d: dict) -> CodecConfig:
    kw = dict(d)
    if "unet_channels" in kw:
        kw["unet_channels"] = tuple(kw["unet_channels"])
    return CodecConfig(**kw)
