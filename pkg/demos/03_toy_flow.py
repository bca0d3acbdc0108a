"""Flow matching on a 2-D toy target, no audio involved.

Trains the small benchmark field on a two-Gaussian mixture and samples it
with the Euler integrator, writing a loss CSV and a scatter image.
"""

from flowmac.sampler import SamplerConfig
from flowmac.toybench import ToyTarget, run_toy_benchmark

target = ToyTarget.mixture(
    means=((-2.0, 0.0), (2.0, 0.0)),
    stds=((0.4, 0.4), (0.4, 0.4)),
    weights=(0.5, 0.5),
)

report = run_toy_benchmark(
    target,
    train_steps=2000,
    sample_count=5000,
    sampler_cfg=SamplerConfig(steps=32, cfg_enabled=False, seed=1),
    seed=0,
    csv_path="demo_toy_loss.csv",
    scatter_path="demo_toy_scatter.png",
)

print(f"loss: {report.losses[0]:.3f} -> {report.losses[-1]:.3f} over {len(report.losses)} steps")
print(f"target mean {report.target_mean} std {report.target_std}")
print(f"sample mean {report.sample_mean.round(3)} std {report.sample_std.round(3)}")
print(f"moment errors: mean {report.mean_error:.3f}, std {report.std_error:.3f} (NFE {report.nfe})")
print("wrote demo_toy_loss.csv and demo_toy_scatter.png")
