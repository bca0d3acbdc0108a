"""2-D sanity harness: train a tiny field on a known target distribution.

Exercises the cfm + sampler machinery end to end without any audio in the
loop; the gating check for changes to numerics, cfm, model, or sampler.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .cfm import PathConfig, cfm_loss, sample_path, sample_timestep_logit_normal
from .model import Linear, Module, ModuleList, time_embed
from .numerics import Adam, Tape, Tensor, default_dtype, no_grad, ops
from .sampler import SamplerConfig, euler_integrate

KINDS = ("single-gaussian", "two-gaussian-mixture")


class ToyDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class ToyTarget:
    """Mixture of axis-aligned 2-D Gaussians."""

    kind: str
    means: tuple
    stds: tuple
    weights: tuple

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        k = {"single-gaussian": 1, "two-gaussian-mixture": 2}[self.kind]
        if not (len(self.means) == len(self.stds) == len(self.weights) == k):
            raise ValueError(f"{self.kind} needs exactly {k} component(s)")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {sum(self.weights)}")
        if any(s <= 0 for comp in self.stds for s in np.atleast_1d(comp)):
            raise ValueError("stds must be positive")

    @classmethod
    def single(cls, mean=(3.0, 3.0), std=(0.5, 0.5)) -> "ToyTarget":
        return cls("single-gaussian", (tuple(mean),), (tuple(std),), (1.0,))

    @classmethod
    def mixture(cls, means, stds, weights=(0.5, 0.5)) -> "ToyTarget":
        return cls(
            "two-gaussian-mixture",
            tuple(tuple(m) for m in means),
            tuple(tuple(s) for s in stds),
            tuple(weights),
        )

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        comps = rng.choice(len(self.weights), size=n, p=np.asarray(self.weights))
        means = np.asarray(self.means, dtype=np.float64)[comps]
        stds = np.asarray(self.stds, dtype=np.float64)[comps]
        return means + stds * rng.standard_normal((n, 2))

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Closed-form per-dimension mean and std of the mixture."""
        w = np.asarray(self.weights)[:, None]
        mu = np.asarray(self.means, dtype=np.float64)
        sd = np.asarray(self.stds, dtype=np.float64)
        mean = (w * mu).sum(axis=0)
        second = (w * (sd**2 + mu**2)).sum(axis=0)
        return mean, np.sqrt(second - mean**2)


class ToyField(Module):
    """3 hidden layers of width 64; time embedding concatenated to the input."""

    def __init__(self, rng: np.random.Generator, hidden: int = 64, t_dim: int = 16):
        super().__init__()
        self.t_dim = t_dim
        self.layers = ModuleList(
            [
                Linear(2 + t_dim, hidden, rng),
                Linear(hidden, hidden, rng),
                Linear(hidden, hidden, rng),
            ]
        )
        self.out = Linear(hidden, 2, rng)

    def forward(self, x: Tensor, t) -> Tensor:
        temb = time_embed(t, self.t_dim)
        if temb.ndim == 1:
            temb = np.broadcast_to(temb, (x.shape[0], self.t_dim))
        h = ops.concat([x, Tensor(temb.astype(x.data.dtype))], axis=-1)
        for layer in self.layers:
            h = ops.mish(layer(h))
        return self.out(h)

    __call__ = forward


@dataclass
class ToyReport:
    target_mean: np.ndarray
    target_std: np.ndarray
    sample_mean: np.ndarray
    sample_std: np.ndarray
    mean_error: float
    std_error: float
    nfe: int
    losses: list = field(default_factory=list)
    samples: np.ndarray | None = None


def run_toy_benchmark(
    target: ToyTarget,
    train_steps: int = 5000,
    sample_count: int = 10000,
    sampler_cfg: SamplerConfig | None = None,
    batch_size: int = 128,
    lr: float = 1e-3,
    sigma_min: float = 1e-4,
    seed: int = 0,
    csv_path=None,
    scatter_path=None,
) -> ToyReport:
    """Train on the CFM objective against the target, then sample and compare
    empirical moments to the closed-form ones."""
    if sampler_cfg is None:
        sampler_cfg = SamplerConfig(steps=32, cfg_enabled=False, seed=seed + 1)
    rng = np.random.default_rng(seed)
    net = ToyField(rng)
    params = net.parameters("toy")
    optimizer = Adam(params, lr=lr)
    path_cfg = PathConfig(sigma_min)

    losses = []
    for step in range(train_steps):
        x1 = target.sample(rng, batch_size)
        t = sample_timestep_logit_normal(rng, size=batch_size)
        path = sample_path(x1, t, rng, path_cfg)
        with Tape() as tape:
            v = net(Tensor(path.x_t.astype(default_dtype())), t)
            loss = cfm_loss(v, path)
            value = float(loss.data)
            if not np.isfinite(value):
                trace = ", ".join(f"{v:.4f}" for v in losses[-10:])
                raise ToyDivergence(f"non-finite loss at step {step} (recent: {trace})")
            tape.backward(loss)
        optimizer.step()
        optimizer.zero_grad()
        losses.append(value)

    def field_fn(x, t, c):
        with no_grad():
            return net(Tensor(x.astype(default_dtype())), float(t)).data.astype(np.float64)

    noise_rng = np.random.default_rng(sampler_cfg.seed)
    x0 = noise_rng.standard_normal((sample_count, 2))
    result = euler_integrate(field_fn, x0, None, sampler_cfg)

    target_mean, target_std = target.moments()
    sample_mean = result.x.mean(axis=0)
    sample_std = result.x.std(axis=0)
    report = ToyReport(
        target_mean=target_mean,
        target_std=target_std,
        sample_mean=sample_mean,
        sample_std=sample_std,
        mean_error=float(np.max(np.abs(sample_mean - target_mean))),
        std_error=float(np.max(np.abs(sample_std - target_std))),
        nfe=result.nfe,
        losses=losses,
        samples=result.x,
    )
    if csv_path is not None:
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["train_step", "loss"])
            for i, v in enumerate(losses, start=1):
                w.writerow([i, repr(v)])
    if scatter_path is not None:
        _write_scatter(scatter_path, target, report)
    return report


def _write_scatter(path, target: ToyTarget, report: ToyReport) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise ValueError("scatter output requires matplotlib, which is not installed")
    fig, ax = plt.subplots(figsize=(5, 5))
    pts = report.samples
    ax.scatter(pts[:, 0], pts[:, 1], s=2, alpha=0.2, label="samples")
    for mu, sd in zip(target.means, target.stds):
        ax.scatter([mu[0]], [mu[1]], marker="x", color="red", s=80)
        circle = plt.Circle(mu, 2.0 * float(np.mean(sd)), fill=False, color="red", linewidth=1)
        ax.add_patch(circle)
    ax.set_title(f"{target.kind}: mean err {report.mean_error:.3f}, std err {report.std_error:.3f}")
    ax.set_aspect("equal")
    ax.legend(loc="upper left")
    fig.savefig(path, dpi=110)
    plt.close(fig)
