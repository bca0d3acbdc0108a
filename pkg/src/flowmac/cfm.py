"""Conditional flow matching: the Gaussian probability path, its optimal
transport target field, the regression loss, logit-normal timestep sampling,
and classifier-free-guidance condition dropout.

Path definition: mu_t(x1) = t*x1 and sigma_t = 1 - (1 - sigma_min)*t, so a
draw is x_t = sigma_t*x0 + t*x1 with x0 ~ N(0, I).  Differentiating along t
gives the target u_t = x1 - (1 - sigma_min)*x0, which equals
(x1 - (1 - sigma_min)*x) / (1 - (1 - sigma_min)*t) evaluated at x = x_t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import MelFrameSequence
from .numerics import Tensor


@dataclass(frozen=True)
class PathConfig:
    sigma_min: float = 1e-4

    def __post_init__(self):
        if not 0.0 <= self.sigma_min < 1.0:
            raise ValueError(f"sigma_min must be in [0, 1), got {self.sigma_min}")


@dataclass
class PathSample:
    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    u_target: np.ndarray


@dataclass(frozen=True)
class CFGTrainConfig:
    p_g: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.p_g <= 1.0:
            raise ValueError(f"p_g must be in [0, 1], got {self.p_g}")


def sample_path(
    x1: np.ndarray,
    t,
    rng: np.random.Generator,
    path: PathConfig = PathConfig(),
) -> PathSample:
    """Draw x0 ~ N(0, I) and form the path point and target at time t.

    t may be a scalar (shared) or one value per leading-axis element of x1.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ValueError("t must lie in [0, 1]")
    if t_arr.ndim > 0:
        t_b = t_arr.reshape(t_arr.shape + (1,) * (x1.ndim - t_arr.ndim))
    else:
        t_b = t_arr
    x0 = rng.standard_normal(x1.shape)
    sigma_t = 1.0 - (1.0 - path.sigma_min) * t_b
    x_t = sigma_t * x0 + t_b * x1
    u = x1 - (1.0 - path.sigma_min) * x0
    return PathSample(x0=x0, x1=x1, t=t_arr, x_t=x_t, u_target=u)


def ot_vector_field(x, x1, t, sigma_min: float) -> np.ndarray:
    """u_t(x | x1) = (x1 - (1 - sigma_min)*x) / (1 - (1 - sigma_min)*t)."""
    x = np.asarray(x, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    denom = 1.0 - (1.0 - sigma_min) * float(t)
    if denom <= 1e-12:
        raise ZeroDivisionError(
            f"path variance vanished at t={t} with sigma_min={sigma_min}"
        )
    return (x1 - (1.0 - sigma_min) * x) / denom


def cfm_loss(v_pred: Tensor, sample: PathSample) -> Tensor:
    """Mean squared error against the path's target field."""
    if v_pred.shape != sample.u_target.shape:
        raise ValueError(f"shape mismatch: {v_pred.shape} vs {sample.u_target.shape}")
    diff = v_pred - Tensor(sample.u_target.astype(v_pred.dtype))
    return (diff * diff).mean()


def sample_timestep_logit_normal(
    rng: np.random.Generator, m: float = 0.0, s: float = 1.0, size=None
):
    """t = sigmoid(z), z ~ N(m, s^2); never exactly 0 or 1."""
    if s <= 0:
        raise ValueError(f"s must be positive, got {s}")
    z = rng.normal(m, s, size=size)
    t = 1.0 / (1.0 + np.exp(-z))
    return np.clip(t, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))


def apply_cfg_dropout(
    c: MelFrameSequence, p_g: float, rng: np.random.Generator
) -> MelFrameSequence | None:
    """Return None (the unconditional marker) with probability p_g, else c."""
    if not 0.0 <= p_g <= 1.0:
        raise ValueError(f"p_g must be in [0, 1], got {p_g}")
    if rng.random() < p_g:
        return None
    return c
