"""Network building blocks: activations, embeddings, transformer stacks, U-Net."""

import numpy as np
import pytest

from flowmac import model
from flowmac.config import CodecConfig
from flowmac.dsp import MelFrameSequence
from flowmac.numerics import Tensor, ops

from conftest import MINI_CODEC


def rng(seed=0):
    return np.random.default_rng(seed)


class TestActivations:
    def test_mish_oracle(self):
        x = np.linspace(-4, 4, 41)
        got = model.mish(Tensor(x)).data
        want = x * np.tanh(np.log1p(np.exp(x)))
        assert np.allclose(got, want, atol=1e-7)

    def test_snakebeta_oracle(self):
        x = np.linspace(-2, 2, 11)[None, :].repeat(3, axis=0)
        a = Tensor(np.full(11, 1.3))
        b = Tensor(np.full(11, 0.7))
        got = model.snakebeta(Tensor(x), a, b).data
        want = x + np.sin(1.3 * x) ** 2 / (0.7 + 1e-9)
        assert np.allclose(got, want, atol=1e-6)

    def test_snakebeta_beta_controls_amplitude(self):
        x = Tensor(np.linspace(-3, 3, 50))
        small = model.snakebeta(x, Tensor(np.ones(50)), Tensor(np.full(50, 10.0))).data
        large = model.snakebeta(x, Tensor(np.ones(50)), Tensor(np.full(50, 0.1))).data
        dev_small = np.abs(small - x.data).max()
        dev_large = np.abs(large - x.data).max()
        assert dev_large > 5 * dev_small


class TestEmbeddings:
    def test_time_embed_matches_formula(self):
        dim = 16
        emb = model.time_embed(0.37, dim)
        half = dim // 2
        freqs = 10000.0 ** (-np.arange(half) / (half - 1))
        ang = 0.37 * 1000.0 * freqs
        assert np.allclose(emb, np.concatenate([np.sin(ang), np.cos(ang)]))

    def test_time_embed_shapes(self):
        assert model.time_embed(0.5, 8).shape == (8,)
        assert model.time_embed(np.array([0.1, 0.9]), 8).shape == (2, 8)

    def test_time_embed_validation(self):
        with pytest.raises(ValueError, match="even"):
            model.time_embed(0.5, 7)
        with pytest.raises(ValueError, match=">= 4"):
            model.time_embed(0.5, 2)

    def test_time_embed_distinguishes_times(self):
        a = model.time_embed(0.2, 32)
        b = model.time_embed(0.8, 32)
        assert np.linalg.norm(a - b) > 0.5

    def test_positions_interleave_sin_cos(self):
        pe = model.sinusoidal_positions(10, 8)
        assert pe.shape == (10, 8)
        assert np.allclose(pe[0, 0::2], 0.0)
        assert np.allclose(pe[0, 1::2], 1.0)
        # rows are distinct
        assert np.linalg.norm(pe[3] - pe[7]) > 0.1


class TestModuleProtocol:
    def test_nested_parameter_names(self):
        m = model.TimeMLP(8, 4, rng())
        names = set(m.parameters())
        assert names == {"lin1.w", "lin1.b", "lin2.w", "lin2.b"}

    def test_count_parameters_linear(self):
        assert model.count_parameters(model.Linear(3, 5, rng())) == 20

    def test_train_eval_recursive(self):
        stack = model.MelEncoder(MINI_CODEC, rng())
        stack.eval()
        assert not stack.blocks[0].training
        stack.train()
        assert stack.blocks[0].training

    def test_load_parameters_roundtrip(self):
        a = model.TimeMLP(8, 4, rng(1))
        b = model.TimeMLP(8, 4, rng(2))
        b.load_parameters({k: v.data.copy() for k, v in a.parameters().items()})
        for k, v in a.parameters().items():
            assert np.array_equal(v.data, b.parameters()[k].data)

    def test_load_parameters_missing_key(self):
        m = model.TimeMLP(8, 4, rng())
        with pytest.raises(KeyError, match="missing"):
            m.load_parameters({"lin1.w": np.zeros((8, 4))})

    def test_load_parameters_shape_mismatch(self):
        m = model.TimeMLP(8, 4, rng())
        arrays = {k: v.data.copy() for k, v in m.parameters().items()}
        arrays["lin2.b"] = np.zeros(7)
        with pytest.raises(ValueError, match="shape"):
            m.load_parameters(arrays)


class TestNormalizationLayers:
    def test_layer_norm_statistics(self):
        ln = model.LayerNorm(16)
        x = Tensor(rng(3).normal(2.0, 3.0, (4, 9, 16)))
        y = ln(x).data
        assert np.allclose(y.mean(axis=-1), 0.0, atol=1e-6)
        assert np.allclose(y.std(axis=-1), 1.0, atol=1e-3)

    def test_group_norm_statistics(self):
        gn = model.GroupNorm(8, 4)
        x = Tensor(rng(4).normal(-1.0, 2.0, (2, 20, 8)))
        y = gn(x).data
        grouped = y.reshape(2, 20, 4, 2)
        # per (batch, group): statistics over time x group-channels
        m = grouped.transpose(0, 2, 1, 3).reshape(2, 4, -1)
        assert np.allclose(m.mean(axis=-1), 0.0, atol=1e-6)
        assert np.allclose(m.std(axis=-1), 1.0, atol=1e-3)

    def test_dropout_train_vs_eval(self):
        d = model.Dropout(0.5, rng(0))
        x = Tensor(np.ones((64, 64)))
        d.eval()
        assert np.array_equal(d(x).data, x.data)
        d.train()
        y = d(x).data
        kept = y != 0
        assert 0.3 < kept.mean() < 0.7
        assert np.allclose(y[kept], 2.0)  # inverted scaling 1/(1-p)


class TestTransformerStack:
    def test_frozen_parameter_counts(self):
        cfg = CodecConfig()
        assert model.count_parameters(model.MelEncoder(cfg, rng(1))) == 1222912
        assert model.count_parameters(model.MelDecoder(cfg, rng(2))) == 1222912
        assert model.count_parameters(model.UNetField(cfg, rng(3))) == 2077184

    def test_shape_contract(self):
        enc = model.MelEncoder(MINI_CODEC, rng()).eval()
        out = enc(Tensor(rng(1).normal(size=(2, 12, 32))))
        assert out.shape == (2, 12, 32)
        with pytest.raises(ValueError, match="expected"):
            enc(Tensor(np.zeros((2, 12, 16))))

    def test_eval_is_deterministic_train_is_not(self):
        enc = model.MelEncoder(MINI_CODEC, rng(5))
        x = Tensor(rng(6).normal(size=(1, 10, 32)))
        enc.eval()
        assert np.array_equal(enc(x).data, enc(x).data)
        enc.train()
        assert not np.array_equal(enc(x).data, enc(x).data)

    def test_position_sensitivity(self):
        # with additive PE, permuting input frames must not just permute outputs
        enc = model.MelEncoder(MINI_CODEC, rng(7)).eval()
        x = rng(8).normal(size=(1, 10, 32))
        perm = x[:, ::-1].copy()
        y = enc(Tensor(x)).data
        y_perm = enc(Tensor(perm)).data
        assert not np.allclose(y[:, ::-1], y_perm, atol=1e-4)

    def test_encode_decode_mel_shapes(self):
        enc = model.MelEncoder(MINI_CODEC, rng(9)).eval()
        dec = model.MelDecoder(MINI_CODEC, rng(10)).eval()
        mel = MelFrameSequence(rng(11).normal(size=(14, 32)))
        latent = model.encode_mel(mel, enc)
        assert latent.shape == (14, 32)
        back = model.decode_mel(latent, dec)
        assert back.frames.shape == (14, 32)

    def test_encode_mel_band_mismatch(self):
        enc = model.MelEncoder(MINI_CODEC, rng(12))
        with pytest.raises(ValueError, match="mel bands"):
            model.encode_mel(MelFrameSequence(np.zeros((5, 16))), enc)


class TestConvBlocks:
    def test_conv1d_shape_arithmetic(self):
        conv = model.Conv1d(4, 6, 3, rng(), stride=1, padding=1)
        y = conv(Tensor(np.zeros((2, 10, 4))))
        assert y.shape == (2, 10, 6)
        strided = model.Conv1d(4, 6, 4, rng(), stride=2, padding=1)
        assert strided(Tensor(np.zeros((2, 10, 4)))).shape == (2, 5, 6)

    def test_down_up_sample_time_axis(self):
        down = model.Downsample(4, 8, rng(1))
        up = model.Upsample(8, 4, rng(2))
        x = Tensor(rng(3).normal(size=(1, 12, 4)))
        d = down(x)
        assert d.shape == (1, 6, 8)
        u = up(d)
        assert u.shape == (1, 12, 4)

    def test_resblock_identity_skip_shape(self):
        block = model.ResBlock1D(8, 8, 16, 4, rng(4))
        temb = Tensor(rng(5).normal(size=(2, 16)))
        y = block(Tensor(rng(6).normal(size=(2, 10, 8))), temb)
        assert y.shape == (2, 10, 8)
        assert block.skip is None

    def test_resblock_projected_skip(self):
        block = model.ResBlock1D(4, 8, 16, 4, rng(7))
        assert block.skip is not None


class TestUNetField:
    def _unet(self, seed=20):
        return model.UNetField(MINI_CODEC, rng(seed)).eval()

    def test_output_matches_input_shape(self):
        unet = self._unet()
        for t_len in (8, 9, 13):  # odd lengths exercise the pad-crop path
            x = Tensor(rng(t_len).normal(size=(2, t_len, 32)))
            y = unet(x, 0.5, None)
            assert y.shape == (2, t_len, 32)

    def test_none_condition_equals_zeros(self):
        unet = self._unet()
        x = Tensor(rng(30).normal(size=(1, 10, 32)))
        y_none = unet(x, 0.3, None).data
        y_zero = unet(x, 0.3, Tensor(np.zeros((1, 10, 32)))).data
        assert np.array_equal(y_none, y_zero)

    def test_time_sensitivity(self):
        unet = self._unet()
        x = Tensor(rng(31).normal(size=(1, 10, 32)))
        a = unet(x, 0.1, None).data
        b = unet(x, 0.9, None).data
        assert np.abs(a - b).max() > 1e-4

    def test_condition_sensitivity(self):
        unet = self._unet()
        x = Tensor(rng(32).normal(size=(1, 10, 32)))
        c = Tensor(rng(33).normal(size=(1, 10, 32)))
        assert np.abs(unet(x, 0.5, c).data - unet(x, 0.5, None).data).max() > 1e-4

    def test_condition_shape_mismatch(self):
        unet = self._unet()
        x = Tensor(np.zeros((1, 10, 32)))
        with pytest.raises(ValueError, match="condition shape"):
            unet(x, 0.5, Tensor(np.zeros((1, 9, 32))))

    def test_field_forward_single_sequence(self):
        unet = self._unet()
        x = Tensor(rng(34).normal(size=(10, 32)))
        y = model.field_forward(x, 0.5, None, unet)
        assert y.shape == (10, 32)
        cond = MelFrameSequence(rng(35).normal(size=(10, 32)))
        y_c = model.field_forward(x, 0.5, cond, unet)
        assert y_c.shape == (10, 32)
        with pytest.raises(ValueError, match="frames"):
            model.field_forward(x, 0.5, MelFrameSequence(np.zeros((9, 32))), unet)

    def test_vector_t_batches(self):
        unet = self._unet()
        x = Tensor(rng(36).normal(size=(2, 8, 32)))
        y_vec = unet(x, np.array([0.1, 0.9]), None).data
        y0 = unet(x[0:1], 0.1, None).data
        y1 = unet(x[1:2], 0.9, None).data
        assert np.allclose(y_vec[0], y0[0], atol=1e-6)
        assert np.allclose(y_vec[1], y1[0], atol=1e-6)
