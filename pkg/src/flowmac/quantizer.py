"""Residual vector quantizer with projection to a small code space.

The 128-d latent is projected down to 16 dimensions, quantized by a cascade
of codebooks (each stage quantizes the previous stage's residual), then
projected back up.  Gradients pass the discrete step via the straight-through
estimator; codebooks learn by exponential moving averages of their assigned
residuals, with k-means++ initialization and dead-code reseeding.  Dropping
trailing stages scales the bit rate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import CodecConfig
from .numerics import Tensor, default_dtype, ops


@dataclass(frozen=True)
class RVQConfig:
    stages: int = 8
    codebook_size: int = 256
    latent_dim: int = 128
    proj_dim: int = 16
    commitment_beta: float = 0.25
    ema_decay: float = 0.99
    dead_code_steps: int = 200

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        bits = int(np.log2(self.codebook_size))
        if 2**bits != self.codebook_size:
            raise ValueError(f"codebook_size {self.codebook_size} is not a power of two")

    @property
    def codebook_bits(self) -> int:
        return int(np.log2(self.codebook_size))

    @classmethod
    def from_codec(cls, cfg: CodecConfig) -> "RVQConfig":
        return cls(
            stages=cfg.stages,
            codebook_size=cfg.codebook_size,
            latent_dim=cfg.n_mels,
            proj_dim=cfg.proj_dim,
            commitment_beta=cfg.commitment_beta,
        )


class Codebooks:
    """Per-stage codebooks plus the shared down/up projections.

    The projections are trained by backprop; the codebook tables themselves
    are EMA state updated outside the optimizer.
    """

    def __init__(self, config: RVQConfig, rng: np.random.Generator):
        self.config = config
        scale = 1.0 / np.sqrt(config.latent_dim)
        self.down = Tensor(
            rng.uniform(-scale, scale, (config.latent_dim, config.proj_dim)).astype(default_dtype()),
            requires_grad=True,
        )
        pscale = 1.0 / np.sqrt(config.proj_dim)
        self.up = Tensor(
            rng.uniform(-pscale, pscale, (config.proj_dim, config.latent_dim)).astype(default_dtype()),
            requires_grad=True,
        )
        self.tables = rng.normal(0.0, 0.1, (config.stages, config.codebook_size, config.proj_dim))
        # EMA accumulators start at zero: the first update lands each codeword
        # exactly on its assigned-cluster mean.
        self.ema_counts = np.zeros((config.stages, config.codebook_size))
        self.ema_sums = np.zeros((config.stages, config.codebook_size, config.proj_dim))
        self.unused_steps = np.zeros((config.stages, config.codebook_size), dtype=np.int64)
        self.initialized = False

    def parameters(self, prefix: str = "quantizer") -> dict[str, Tensor]:
        return {f"{prefix}.down": self.down, f"{prefix}.up": self.up}

    def state_arrays(self, prefix: str = "quantizer") -> dict[str, np.ndarray]:
        """Everything that must be checkpointed, including EMA state."""
        return {
            f"{prefix}.down": self.down.data,
            f"{prefix}.up": self.up.data,
            f"{prefix}.tables": self.tables,
            f"{prefix}.ema_counts": self.ema_counts,
            f"{prefix}.ema_sums": self.ema_sums,
        }

    def load_state(self, arrays: dict[str, np.ndarray], prefix: str = "quantizer") -> None:
        self.down.data[...] = arrays[f"{prefix}.down"]
        self.up.data[...] = arrays[f"{prefix}.up"]
        self.tables = np.asarray(arrays[f"{prefix}.tables"], dtype=np.float64)
        self.ema_counts = np.asarray(arrays[f"{prefix}.ema_counts"], dtype=np.float64)
        self.ema_sums = np.asarray(arrays[f"{prefix}.ema_sums"], dtype=np.float64)
        self.initialized = True


@dataclass
class CodeGrid:
    """Stage indices per frame, [T x stages]."""

    indices: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices)
        if self.indices.ndim != 2:
            raise ValueError(f"indices must be [T x stages], got shape {self.indices.shape}")
        if self.indices.size and self.indices.min() < 0:
            raise ValueError("negative code index")

    @property
    def n_frames(self) -> int:
        return self.indices.shape[0]

    @property
    def n_stages(self) -> int:
        return self.indices.shape[1]


def _nearest(residual: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Index of the nearest codeword per row; ties go to the lowest index."""
    # argmin of ||r - c||^2 = ||c||^2 - 2 r.c, row-wise; np.argmin takes the
    # first minimum, which is the tie rule.
    d2 = np.sum(table**2, axis=1)[None, :] - 2.0 * (residual @ table.T)
    return np.argmin(d2, axis=1)


def rvq_encode(latent, books: Codebooks, active_stages: int | None = None) -> CodeGrid:
    """Quantize a latent [T x 128] (numpy or Tensor) to stage indices."""
    cfg = books.config
    if active_stages is None:
        active_stages = cfg.stages
    if not 1 <= active_stages <= cfg.stages:
        raise ValueError(f"active_stages {active_stages} outside 1..{cfg.stages}")
    z = latent.data if isinstance(latent, Tensor) else np.asarray(latent)
    z = z.astype(np.float64)
    residual = z @ books.down.data.astype(np.float64)
    indices = np.empty((z.shape[0], active_stages), dtype=np.int64)
    for s in range(active_stages):
        idx = _nearest(residual, books.tables[s])
        indices[:, s] = idx
        residual = residual - books.tables[s][idx]
    return CodeGrid(indices)


def rvq_decode(codes: CodeGrid, books: Codebooks) -> np.ndarray:
    """Sum the selected codewords over available stages and project up."""
    cfg = books.config
    if codes.n_stages > cfg.stages:
        raise ValueError(f"stream has {codes.n_stages} stages, model has {cfg.stages}")
    if codes.indices.size and codes.indices.max() >= cfg.codebook_size:
        raise ValueError(
            f"code index {codes.indices.max()} out of range for codebook size {cfg.codebook_size}"
        )
    acc = np.zeros((codes.n_frames, cfg.proj_dim))
    for s in range(codes.n_stages):
        acc += books.tables[s][codes.indices[:, s]]
    return acc @ books.up.data.astype(np.float64)


def _kmeans_pp_init(books: Codebooks, projected: np.ndarray, rng: np.random.Generator) -> None:
    """Seed every stage's codebook from the first batch, k-means++ style."""
    cfg = books.config
    residual = projected.copy()
    for s in range(cfg.stages):
        pts = residual
        n = pts.shape[0]
        chosen = np.empty(cfg.codebook_size, dtype=np.int64)
        chosen[0] = rng.integers(n)
        d2 = np.sum((pts - pts[chosen[0]]) ** 2, axis=1)
        for k in range(1, cfg.codebook_size):
            total = d2.sum()
            if total <= 0:
                chosen[k] = rng.integers(n)
            else:
                chosen[k] = rng.choice(n, p=d2 / total)
            d2 = np.minimum(d2, np.sum((pts - pts[chosen[k]]) ** 2, axis=1))
        books.tables[s] = pts[chosen]
        idx = _nearest(residual, books.tables[s])
        residual = residual - books.tables[s][idx]
    books.initialized = True


def _ema_update(books: Codebooks, stage: int, residual: np.ndarray, idx: np.ndarray) -> None:
    cfg = books.config
    k = cfg.codebook_size
    counts = np.bincount(idx, minlength=k).astype(np.float64)
    sums = np.zeros((k, cfg.proj_dim))
    np.add.at(sums, idx, residual)
    d = cfg.ema_decay
    books.ema_counts[stage] = d * books.ema_counts[stage] + (1 - d) * counts
    books.ema_sums[stage] = d * books.ema_sums[stage] + (1 - d) * sums
    used = counts > 0
    denom = np.maximum(books.ema_counts[stage], 1e-12)
    books.tables[stage][used] = books.ema_sums[stage][used] / denom[used, None]
    books.unused_steps[stage][used] = 0
    books.unused_steps[stage][~used] += 1


def _reseed_dead_codes(books: Codebooks, stage: int, residual: np.ndarray, rng) -> None:
    cfg = books.config
    dead = books.unused_steps[stage] >= cfg.dead_code_steps
    if not np.any(dead):
        return
    picks = rng.integers(residual.shape[0], size=int(dead.sum()))
    books.tables[stage][dead] = residual[picks]
    books.ema_counts[stage][dead] = 0.0
    books.ema_sums[stage][dead] = 0.0
    books.unused_steps[stage][dead] = 0


def rvq_train_step(
    latent: Tensor,
    books: Codebooks,
    rng: np.random.Generator,
    active_stages: int | None = None,
    update: bool = True,
):
    """Differentiable quantization pass for training.

    Returns (quantized, L_q) where quantized = latent + sg(q - latent) carries
    the straight-through gradient and L_q is the codebook + commitment loss
    averaged over frames, summed over stages.  With update=True the codebook
    tables advance one EMA step (and are k-means++ seeded on the first call).
    """
    cfg = books.config
    if active_stages is None:
        active_stages = cfg.stages
    flat = latent if latent.ndim == 2 else ops.reshape(latent, (-1, latent.shape[-1]))
    projected = flat @ books.down

    pdata = projected.data.astype(np.float64)
    if update and not books.initialized:
        _kmeans_pp_init(books, pdata, rng)

    # Stage s sees residual r_s and picks codeword e_s; both halves of the
    # stage loss have the value ||r_s - e_s||^2.  The codebook half is a
    # constant here (tables train by EMA, not backprop); the commitment half
    # r_s - sg(e_s) = projected - sg(partial sum through s) carries gradient
    # into the encoder.
    residual = pdata
    partial = np.zeros_like(pdata)
    codebook_term = 0.0
    commit_sum = None
    for s in range(active_stages):
        idx = _nearest(residual, books.tables[s])
        chosen = books.tables[s][idx]
        codebook_term += float(np.mean(np.sum((residual - chosen) ** 2, axis=1)))
        if update:
            _reseed_dead_codes(books, s, residual, rng)
            _ema_update(books, s, residual, idx)
        residual = residual - chosen
        partial = partial + chosen
        commit = projected - Tensor(partial.astype(projected.dtype))
        term = (commit * commit).sum(axis=-1).mean()
        commit_sum = term if commit_sum is None else commit_sum + term

    l_q = cfg.commitment_beta * commit_sum + Tensor(
        np.asarray(codebook_term, dtype=projected.dtype)
    )

    offset = Tensor((partial - pdata).astype(projected.dtype))
    quantized_low = projected + offset
    quantized = quantized_low @ books.up
    if latent.ndim != 2:
        quantized = ops.reshape(quantized, latent.shape)
    return quantized, l_q


def bits_per_second(config: RVQConfig, active_stages: int, frame_rate: float) -> float:
    return active_stages * config.codebook_bits * frame_rate


def perplexity(indices: np.ndarray, codebook_size: int) -> float:
    """exp(entropy) of the empirical code distribution; max = codebook_size."""
    counts = np.bincount(np.asarray(indices).ravel(), minlength=codebook_size)
    p = counts / max(counts.sum(), 1)
    nz = p[p > 0]
    return float(np.exp(-np.sum(nz * np.log(nz))))
