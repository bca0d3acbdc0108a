"""Shared fixtures: the expensive session-scoped training runs live here."""

import time

import numpy as np
import pytest
from hypothesis import settings

from flowmac.config import CodecConfig
from flowmac.numerics import default_dtype, set_default_dtype
from flowmac.pipeline import Codec
from flowmac.trainer import (
    SyntheticDatasetSpec,
    TrainConfig,
    generate_synthetic_corpus,
    single_tone_item,
    train,
)

settings.register_profile("suite", deadline=None, max_examples=50)
settings.load_profile("suite")


@pytest.fixture(autouse=True)
def _dtype_guard():
    """Training helpers flip the process-wide default dtype; undo per test."""
    before = default_dtype()
    yield
    set_default_dtype(before)


# A small but complete codec used by CLI and pipeline tests; every component
# is present, just narrow.
MINI_CODEC = CodecConfig(
    sample_rate=8000,
    n_fft=256,
    hop=200,
    n_mels=32,
    fmax=4000.0,
    stages=4,
    codebook_size=16,
    proj_dim=4,
    d_model=32,
    n_heads=2,
    d_ff=64,
    n_blocks=1,
    unet_channels=(16, 32),
    time_embed_dim=16,
    groupnorm_groups=4,
    ode_steps=4,
)

MINI_TRAIN = TrainConfig(steps=8, batch_size=2, segment_seconds=0.8, seed=3)

MINI_DATA = SyntheticDatasetSpec(
    item_count=3, min_seconds=1.2, max_seconds=1.6, freq_lo=80.0, freq_hi=3500.0, sample_rate=8000, seed=7
)


@pytest.fixture(scope="session")
def mini_checkpoint(tmp_path_factory):
    """Short training run on the small codec; returns the checkpoint path."""
    before = default_dtype()
    corpus = generate_synthetic_corpus(MINI_DATA)
    state, _ = train(MINI_CODEC, MINI_TRAIN, corpus)
    path = tmp_path_factory.mktemp("mini") / "mini.npz"
    state.save(path)
    set_default_dtype(before)
    return path


@pytest.fixture(scope="session")
def mini_tone_wav(tmp_path_factory):
    from flowmac import dsp

    path = tmp_path_factory.mktemp("wav") / "tone440.wav"
    dsp.write_wav(path, single_tone_item(440.0, seconds=1.0, sample_rate=8000))
    return path


@pytest.fixture(scope="session")
def trained_run():
    """The full 2000-step desk-scale run shared by the end-to-end criteria."""
    before = default_dtype()
    codec_config = CodecConfig()
    train_config = TrainConfig()  # contractual defaults: 2000 steps, batch 8
    corpus = generate_synthetic_corpus(SyntheticDatasetSpec())

    def progress(r):
        print(f"  [train] step {r.step}: total={r.total:.4f}")

    t0 = time.perf_counter()
    state, reports = train(codec_config, train_config, corpus, log_every=200, progress=progress)
    seconds = time.perf_counter() - t0
    set_default_dtype(before)
    return {"state": state, "reports": reports, "corpus": corpus, "train_seconds": seconds}


@pytest.fixture(scope="session")
def trained_codec(trained_run):
    return trained_run["state"].codec().eval_mode()


@pytest.fixture(scope="session")
def random_codec():
    return Codec.fresh(CodecConfig(), seed=99).eval_mode()


@pytest.fixture(scope="session")
def heldout_tones():
    """Single sinusoids never seen verbatim during training."""
    return [single_tone_item(f, seconds=2.0) for f in (220.0, 440.0, 1000.0, 3000.0)]


def rng_for(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)
