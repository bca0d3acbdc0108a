"""Residual vector quantizer: greedy assignment, EMA learning, straight-through."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from flowmac.numerics import Tensor, set_default_dtype
from flowmac.quantizer import (
    CodeGrid,
    Codebooks,
    RVQConfig,
    bits_per_second,
    perplexity,
    rvq_decode,
    rvq_encode,
    rvq_train_step,
)

TOY = RVQConfig(stages=2, codebook_size=4, latent_dim=4, proj_dim=2)


def toy_books() -> Codebooks:
    """Hand-built fixture where quantization is exact on chosen points.

    down keeps the first two latent dims, up puts them back; stage 0 is a
    coarse grid, stage 1 a fine one, so greedy assignment recovers both
    indices exactly for any coarse+fine combination.
    """
    books = Codebooks(TOY, np.random.default_rng(0))
    books.down.data[...] = np.eye(4, 2)
    books.up.data[...] = np.eye(2, 4)
    books.tables[0] = np.array([[10.0, 10.0], [10.0, -10.0], [-10.0, 10.0], [-10.0, -10.0]])
    books.tables[1] = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
    books.initialized = True
    return books


def toy_latent(coarse, fine, books):
    low = books.tables[0][list(coarse)] + books.tables[1][list(fine)]
    return np.concatenate([low, np.zeros((len(coarse), 2))], axis=1)


class TestConfig:
    def test_from_codec_defaults(self):
        from flowmac.config import CodecConfig

        rq = RVQConfig.from_codec(CodecConfig())
        assert (rq.stages, rq.codebook_size, rq.latent_dim, rq.proj_dim) == (8, 256, 128, 16)
        assert rq.codebook_bits == 8

    def test_validation(self):
        with pytest.raises(ValueError, match="stages"):
            RVQConfig(stages=0)
        with pytest.raises(ValueError, match="power of two"):
            RVQConfig(codebook_size=100)

    def test_rates(self):
        rq = RVQConfig()
        assert bits_per_second(rq, 8, 46.875) == 3000.0
        assert bits_per_second(rq, 4, 46.875) == 1500.0
        assert bits_per_second(rq, 1, 46.875) == 375.0


class TestToyFixture:
    def test_exact_recovery_and_reconstruction(self):
        books = toy_books()
        coarse, fine = [0, 3, 1, 2], [2, 1, 3, 0]
        latent = toy_latent(coarse, fine, books)
        codes = rvq_encode(latent, books)
        assert codes.indices[:, 0].tolist() == coarse
        assert codes.indices[:, 1].tolist() == fine
        recon = rvq_decode(codes, books)
        assert np.allclose(recon[:, :2], latent[:, :2], atol=1e-12)

    def test_index_idempotence(self):
        # decode then re-encode returns the same indices
        books = toy_books()
        latent = toy_latent([0, 1, 2, 3], [3, 2, 1, 0], books)
        codes = rvq_encode(latent, books)
        again = rvq_encode(rvq_decode(codes, books), books)
        assert np.array_equal(codes.indices, again.indices)

    def test_tie_breaks_to_lowest_index(self):
        books = toy_books()
        # (10, 0) is equidistant from rows 0 and 1 of the coarse table
        latent = np.array([[10.0, 0.0, 0.0, 0.0]])
        codes = rvq_encode(latent, books)
        assert codes.indices[0, 0] == 0

    def test_on_codeword_loss_is_zero(self):
        # needs a zero fine codeword so every stage's residual vanishes
        set_default_dtype(np.float64)
        books = toy_books()
        books.tables[1] = np.array([[0.0, 0.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
        latent = Tensor(toy_latent([0, 1, 2, 3], [0, 0, 0, 0], books))
        _, l_q = rvq_train_step(latent, books, np.random.default_rng(0), update=False)
        assert float(l_q.data) < 1e-20

    def test_truncation_is_prefix(self):
        books = toy_books()
        latent = toy_latent([0, 3, 1], [2, 0, 1], books)
        full = rvq_encode(latent, books, active_stages=2)
        one = rvq_encode(latent, books, active_stages=1)
        assert np.array_equal(one.indices, full.indices[:, :1])


class TestEncodeDecodeContracts:
    def test_active_stages_validation(self):
        books = toy_books()
        with pytest.raises(ValueError, match="active_stages"):
            rvq_encode(np.zeros((3, 4)), books, active_stages=0)
        with pytest.raises(ValueError, match="active_stages"):
            rvq_encode(np.zeros((3, 4)), books, active_stages=3)

    def test_decode_rejects_extra_stages(self):
        books = toy_books()
        with pytest.raises(ValueError, match="stages"):
            rvq_decode(CodeGrid(np.zeros((3, 5), dtype=np.int64)), books)

    def test_decode_rejects_out_of_range_index(self):
        books = toy_books()
        with pytest.raises(ValueError, match="out of range"):
            rvq_decode(CodeGrid(np.array([[0, 9]])), books)

    def test_code_grid_validation(self):
        with pytest.raises(ValueError, match="T x stages"):
            CodeGrid(np.zeros(5, dtype=np.int64))
        with pytest.raises(ValueError, match="negative"):
            CodeGrid(np.array([[-1, 0]]))

    def test_state_roundtrip(self):
        rng = np.random.default_rng(1)
        cfg = RVQConfig(stages=3, codebook_size=8, latent_dim=6, proj_dim=3)
        a = Codebooks(cfg, np.random.default_rng(2))
        latent = rng.normal(size=(40, 6))
        rvq_train_step(Tensor(latent), a, np.random.default_rng(3))
        b = Codebooks(cfg, np.random.default_rng(4))
        b.load_state({k: v.copy() for k, v in a.state_arrays().items()})
        probe = rng.normal(size=(10, 6))
        assert np.array_equal(rvq_encode(probe, a).indices, rvq_encode(probe, b).indices)
        assert np.array_equal(rvq_decode(rvq_encode(probe, a), a), rvq_decode(rvq_encode(probe, b), b))


class TestTraining:
    def test_kmeans_memorizes_small_batch(self):
        # fewer points than codewords: every point becomes a codeword, loss 0
        set_default_dtype(np.float64)
        cfg = RVQConfig(stages=2, codebook_size=16, latent_dim=4, proj_dim=2)
        books = Codebooks(cfg, np.random.default_rng(0))
        latent = Tensor(np.random.default_rng(1).normal(size=(8, 4)))
        _, l_q = rvq_train_step(latent, books, np.random.default_rng(2))
        assert float(l_q.data) < 1e-18

    def test_first_ema_update_is_cluster_mean(self):
        set_default_dtype(np.float64)
        cfg = RVQConfig(stages=1, codebook_size=2, latent_dim=2, proj_dim=2)
        books = Codebooks(cfg, np.random.default_rng(0))
        books.down.data[...] = np.eye(2)
        books.up.data[...] = np.eye(2)
        books.tables[0] = np.array([[-5.0, 0.0], [5.0, 0.0]])
        books.initialized = True
        pts = np.array([[-4.0, 1.0], [-6.0, -1.0], [4.0, 2.0], [6.0, 0.0], [5.0, 1.0]])
        rvq_train_step(Tensor(pts), books, np.random.default_rng(1))
        assert np.allclose(books.tables[0][0], pts[:2].mean(axis=0), atol=1e-12)
        assert np.allclose(books.tables[0][1], pts[2:].mean(axis=0), atol=1e-12)

    def test_ema_converges_to_stationary_means(self):
        set_default_dtype(np.float64)
        cfg = RVQConfig(stages=1, codebook_size=2, latent_dim=2, proj_dim=2)
        books = Codebooks(cfg, np.random.default_rng(0))
        books.down.data[...] = np.eye(2)
        books.up.data[...] = np.eye(2)
        books.tables[0] = np.array([[-5.0, 0.0], [5.0, 0.0]])
        books.initialized = True
        rng = np.random.default_rng(7)
        left = rng.normal((-5, 0), 0.3, size=(100, 2))
        right = rng.normal((5, 0), 0.3, size=(100, 2))
        pts = Tensor(np.concatenate([left, right]))
        for _ in range(600):
            rvq_train_step(pts, books, rng)
        assert np.allclose(books.tables[0][0], left.mean(axis=0), atol=1e-3)
        assert np.allclose(books.tables[0][1], right.mean(axis=0), atol=1e-3)

    def test_dead_codes_reseed_near_data(self):
        set_default_dtype(np.float64)
        cfg = RVQConfig(stages=1, codebook_size=4, latent_dim=2, proj_dim=2, dead_code_steps=3)
        books = Codebooks(cfg, np.random.default_rng(0))
        books.down.data[...] = np.eye(2)
        books.up.data[...] = np.eye(2)
        books.tables[0] = np.array([[0.0, 0.0], [1.0, 1.0], [1e6, 1e6], [-1e6, 1e6]])
        books.initialized = True
        pts = Tensor(np.random.default_rng(1).normal(0.5, 0.5, size=(50, 2)))
        for _ in range(5):
            rvq_train_step(pts, books, np.random.default_rng(2))
        assert np.abs(books.tables[0]).max() < 100.0
        assert np.all(books.unused_steps[0] < cfg.dead_code_steps)

    def test_loss_matches_independent_oracle(self):
        set_default_dtype(np.float64)
        cfg = RVQConfig(stages=3, codebook_size=8, latent_dim=6, proj_dim=3)
        books = Codebooks(cfg, np.random.default_rng(5))
        latent = np.random.default_rng(6).normal(size=(30, 6))
        rvq_train_step(Tensor(latent), books, np.random.default_rng(7))  # seed codebooks

        _, l_q = rvq_train_step(Tensor(latent), books, np.random.default_rng(8), update=False)

        # second route: plain numpy greedy RVQ over frozen tables
        p = latent @ books.down.data
        residual = p.copy()
        stage_sq = []
        for s in range(cfg.stages):
            d2 = np.sum((residual[:, None, :] - books.tables[s][None]) ** 2, axis=2)
            idx = np.argmin(d2, axis=1)
            chosen = books.tables[s][idx]
            stage_sq.append(np.mean(np.sum((residual - chosen) ** 2, axis=1)))
            residual = residual - chosen
        want = (1.0 + cfg.commitment_beta) * sum(stage_sq)
        assert float(l_q.data) == pytest.approx(want, rel=1e-10)

    def test_more_stages_reduce_projected_error(self):
        set_default_dtype(np.float64)
        cfg = RVQConfig(stages=4, codebook_size=16, latent_dim=8, proj_dim=4)
        books = Codebooks(cfg, np.random.default_rng(0))
        latent = np.random.default_rng(1).normal(size=(500, 8))
        rvq_train_step(Tensor(latent), books, np.random.default_rng(2))
        p = latent @ books.down.data
        errs = []
        for k in range(1, 5):
            codes = rvq_encode(latent, books, active_stages=k)
            q = sum(books.tables[s][codes.indices[:, s]] for s in range(k))
            errs.append(np.sqrt(np.mean((p - q) ** 2)))
        assert errs[0] > errs[1] > errs[2] > errs[3]

    def test_straight_through_gradient(self):
        # d quantized / d latent must behave as if quantization were identity:
        # grad of sum(quantized) is ones @ up^T @ down^T; L_q adds the
        # commitment pull beta * 2 (p - q_s) per stage through down.
        set_default_dtype(np.float64)
        cfg = RVQConfig(stages=2, codebook_size=4, latent_dim=4, proj_dim=2)
        books = Codebooks(cfg, np.random.default_rng(3))
        latent_np = np.random.default_rng(4).normal(size=(6, 4))
        rvq_train_step(Tensor(latent_np), books, np.random.default_rng(5))

        from flowmac.numerics import Tape

        latent = Tensor(latent_np, requires_grad=True)
        with Tape() as tape:
            quantized, l_q = rvq_train_step(latent, books, np.random.default_rng(6), update=False)
            total = quantized.sum() + l_q
            tape.backward(total)

        p = latent_np @ books.down.data
        residual = p.copy()
        partials = []
        acc = np.zeros_like(p)
        for s in range(cfg.stages):
            d2 = np.sum((residual[:, None, :] - books.tables[s][None]) ** 2, axis=2)
            idx = np.argmin(d2, axis=1)
            residual = residual - books.tables[s][idx]
            acc = acc + books.tables[s][idx]
            partials.append(acc.copy())
        g_q = np.ones((6, 4)) @ books.up.data.T @ books.down.data.T
        g_commit = np.zeros_like(p)
        for part in partials:
            g_commit += cfg.commitment_beta * 2.0 * (p - part) / p.shape[0]
        want = g_q + g_commit @ books.down.data.T
        assert np.allclose(latent.grad, want, rtol=1e-8, atol=1e-10)

    def test_unused_steps_not_checkpointed_is_fresh(self):
        # reseed counters restart at zero after load_state
        cfg = RVQConfig(stages=1, codebook_size=4, latent_dim=2, proj_dim=2)
        a = Codebooks(cfg, np.random.default_rng(0))
        rvq_train_step(Tensor(np.random.default_rng(1).normal(size=(20, 2))), a, np.random.default_rng(2))
        b = Codebooks(cfg, np.random.default_rng(3))
        b.load_state(a.state_arrays())
        assert np.all(b.unused_steps == 0)


class TestPerplexity:
    def test_uniform_is_maximal(self):
        idx = np.repeat(np.arange(16), 10)
        assert perplexity(idx, 16) == pytest.approx(16.0)

    def test_constant_is_one(self):
        assert perplexity(np.zeros(100, dtype=np.int64), 16) == pytest.approx(1.0)

    def test_empty_is_one(self):
        assert perplexity(np.zeros(0, dtype=np.int64), 16) == pytest.approx(1.0)


@given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.integers(1, 4))
def test_encode_fuzz_index_ranges(seed, frames, stages):
    rng = np.random.default_rng(seed)
    cfg = RVQConfig(stages=4, codebook_size=8, latent_dim=6, proj_dim=3)
    books = Codebooks(cfg, np.random.default_rng(0))
    latent = rng.normal(scale=3.0, size=(frames, 6))
    codes = rvq_encode(latent, books, active_stages=stages)
    assert codes.indices.shape == (frames, stages)
    assert codes.indices.min() >= 0 and codes.indices.max() < 8
    # prefix property: truncated encode equals truncated full encode
    full = rvq_encode(latent, books)
    assert np.array_equal(codes.indices, full.indices[:, :stages])
    recon = rvq_decode(codes, books)
    assert recon.shape == (frames, 6)
    assert np.all(np.isfinite(recon))
