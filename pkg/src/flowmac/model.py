"""The three networks: transformer mel encoder, transformer mel decoder, and
the U-Net vector-field estimator with sinusoidal time embedding.

Everything is built from the registered autodiff primitives, so every forward
here is differentiable end to end.  Networks operate on batched [B x T x C]
tensors internally; thin wrappers expose the single-sequence contracts.
"""

from __future__ import annotations

import numpy as np

from .config import CodecConfig
from .dsp import MelFrameSequence
from .numerics import Tensor, default_dtype, ops


def mish(x: Tensor) -> Tensor:
    return ops.mish(x)


def snakebeta(x: Tensor, alpha: Tensor, beta: Tensor) -> Tensor:
    """x + (1/(beta+eps)) * sin^2(alpha*x), per-channel alpha and beta."""
    s = ops.sin(x * alpha)
    return x + s * s / (beta + 1e-9)


def time_embed(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of t in [0,1] on positions t*1000; rows [*, dim]."""
    if dim % 2 != 0:
        raise ValueError(f"time embedding dim must be even, got {dim}")
    half = dim // 2
    if half < 2:
        raise ValueError("time embedding dim must be >= 4")
    pos = np.atleast_1d(np.asarray(t, dtype=np.float64)) * 1000.0
    freqs = 10000.0 ** (-np.arange(half) / (half - 1))
    ang = pos[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    if np.ndim(t) == 0:
        return emb[0]
    return emb


def sinusoidal_positions(n: int, dim: int) -> np.ndarray:
    """Additive positional encoding table [n x dim]."""
    half = dim // 2
    pos = np.arange(n, dtype=np.float64)
    freqs = 10000.0 ** (-np.arange(half) / half)
    ang = pos[:, None] * freqs[None, :]
    pe = np.zeros((n, dim))
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang)
    return pe


class Module:
    """Minimal parameter container with named-parameter collection."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for name, p in self._params.items():
            out[f"{prefix}.{name}" if prefix else name] = p
        for name, child in self._children.items():
            sub = f"{prefix}.{name}" if prefix else name
            out.update(child.parameters(sub))
        return out

    def train(self):
        object.__setattr__(self, "training", True)
        for child in self._children.values():
            child.train()
        return self

    def eval(self):
        object.__setattr__(self, "training", False)
        for child in self._children.values():
            child.eval()
        return self

    def load_parameters(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        """Overwrite parameter values from a checkpoint namespace."""
        params = self.parameters(prefix)
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint missing parameters: {sorted(missing)[:4]}...")
        for name, p in params.items():
            a = np.asarray(arrays[name], dtype=p.dtype)
            if a.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {a.shape} != model shape {p.shape}")
            p.data[...] = a


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        self.items = list(modules)
        for i, m in enumerate(self.items):
            self._children[str(i)] = m

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, i):
        return self.items[i]


def _param(rng: np.random.Generator, shape, scale: float) -> Tensor:
    data = rng.uniform(-scale, scale, size=shape).astype(default_dtype())
    return Tensor(data, requires_grad=True)


def _zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=default_dtype()), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.w = _param(rng, (d_in, d_out), 1.0 / np.sqrt(d_in))
        self.b = _zeros_param((d_out,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.w
        return y + self.b if self.b is not None else y

    __call__ = forward


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gamma = Tensor(np.ones(dim, dtype=default_dtype()), requires_grad=True)
        self.beta = _zeros_param((dim,))

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x) * self.gamma + self.beta

    __call__ = forward


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.groups = groups
        self.gamma = Tensor(np.ones(channels, dtype=default_dtype()), requires_grad=True)
        self.beta = _zeros_param((channels,))

    def forward(self, x: Tensor) -> Tensor:
        return ops.group_norm(x, self.groups) * self.gamma + self.beta

    __call__ = forward


class Dropout(Module):
    """Inverted dropout; identity in eval mode. Draws from the shared rng."""

    def __init__(self, p: float, rng: np.random.Generator):
        super().__init__()
        self.p = p
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.p == 0.0:
            return x
        keep = (self.rng.random(x.shape) >= self.p).astype(default_dtype())
        mask = Tensor(keep / (1.0 - self.p))
        return ops.dropout_mask_apply(x, mask)

    __call__ = forward


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(d_model, d_model, rng)
        self.wv = Linear(d_model, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)

    def forward(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        h, dh = self.n_heads, self.d_head

        def split(y):
            return ops.transpose(ops.reshape(y, (b, t, h, dh)), (0, 2, 1, 3))

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        scores = (q @ ops.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        ctx = ops.softmax(scores) @ v
        merged = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        return self.wo(merged)

    __call__ = forward


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator, activation: str = "mish"):
        super().__init__()
        if activation not in ("mish", "snakebeta"):
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self.lin1 = Linear(d_model, d_ff, rng)
        self.lin2 = Linear(d_ff, d_model, rng)
        if activation == "snakebeta":
            self.alpha = Tensor(np.ones(d_ff, dtype=default_dtype()), requires_grad=True)
            self.beta = Tensor(np.ones(d_ff, dtype=default_dtype()), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        h = self.lin1(x)
        if self.activation == "mish":
            h = mish(h)
        else:
            h = snakebeta(h, self.alpha, self.beta)
        return self.lin2(h)

    __call__ = forward


class TransformerBlock(Module):
    """Pre-norm block: x + Drop(MHA(LN(x))), then x + Drop(FF(LN(x)))."""

    def __init__(self, d_model, n_heads, d_ff, dropout_p, rng, activation="mish"):
        super().__init__()
        self.ln1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, rng)
        self.drop1 = Dropout(dropout_p, rng)
        self.ln2 = LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff, rng, activation)
        self.drop2 = Dropout(dropout_p, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.drop1(self.attn(self.ln1(x)))
        return x + self.drop2(self.ff(self.ln2(x)))

    __call__ = forward


class TransformerStack(Module):
    """Shared body of the mel encoder and decoder: input projection (a 1x1
    convolution is a per-frame linear map), additive sinusoidal positions,
    N pre-norm blocks, final norm and projection."""

    def __init__(self, cfg: CodecConfig, rng: np.random.Generator):
        super().__init__()
        d = cfg.d_model
        self.n_mels = cfg.n_mels
        self.in_proj = Linear(cfg.n_mels, d, rng)
        self.blocks = ModuleList(
            TransformerBlock(d, cfg.n_heads, cfg.d_ff, cfg.dropout_p, rng)
            for _ in range(cfg.n_blocks)
        )
        self.ln_out = LayerNorm(d)
        self.out_proj = Linear(d, cfg.n_mels, rng)
        self._pe_cache: dict[int, np.ndarray] = {}

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.n_mels:
            raise ValueError(f"expected [B x T x {self.n_mels}] input, got {x.shape}")
        t = x.shape[1]
        if t not in self._pe_cache:
            self._pe_cache[t] = sinusoidal_positions(t, self.in_proj.w.shape[1]).astype(
                default_dtype()
            )
        h = self.in_proj(x) + Tensor(self._pe_cache[t])
        for block in self.blocks:
            h = block(h)
        return self.out_proj(self.ln_out(h))

    __call__ = forward


class MelEncoder(TransformerStack):
    pass


class MelDecoder(TransformerStack):
    pass


def encode_mel(mel: MelFrameSequence, encoder: MelEncoder) -> Tensor:
    """Latent [T x 128] for one normalized mel sequence."""
    frames = np.asarray(mel.frames, dtype=default_dtype())
    if frames.shape[1] != encoder.n_mels:
        raise ValueError(f"expected {encoder.n_mels} mel bands, got {frames.shape[1]}")
    out = encoder(Tensor(frames[None]))
    return ops.reshape(out, (frames.shape[0], encoder.n_mels))


def decode_mel(latent_q: Tensor, decoder: MelDecoder) -> MelFrameSequence:
    """Decoded quantized mel (the condition c) as a plain frame sequence."""
    x = latent_q if latent_q.ndim == 3 else ops.reshape(latent_q, (1,) + latent_q.shape)
    out = decoder(x)
    return MelFrameSequence(out.data.reshape(-1, decoder.n_mels).astype(np.float64))


class TimeMLP(Module):
    def __init__(self, embed_dim: int, out_dim: int, rng: np.random.Generator):
        super().__init__()
        self.lin1 = Linear(embed_dim, out_dim, rng)
        self.lin2 = Linear(out_dim, out_dim, rng)

    def forward(self, emb: Tensor) -> Tensor:
        return self.lin2(mish(self.lin1(emb)))

    __call__ = forward


class Conv1d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.w = _param(rng, (kernel, c_in, c_out), 1.0 / np.sqrt(kernel * c_in))
        self.b = _zeros_param((c_out,))

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv1d(x, self.w, stride=self.stride, padding=self.padding) + self.b

    __call__ = forward


class ResBlock1D(Module):
    """conv-GN-Mish twice with the time embedding added between, plus skip."""

    def __init__(self, c_in, c_out, temb_dim, groups, rng):
        super().__init__()
        self.conv1 = Conv1d(c_in, c_out, 3, rng, padding=1)
        self.gn1 = GroupNorm(c_out, groups)
        self.temb_proj = Linear(temb_dim, c_out, rng)
        self.conv2 = Conv1d(c_out, c_out, 3, rng, padding=1)
        self.gn2 = GroupNorm(c_out, groups)
        self.skip = Linear(c_in, c_out, rng, bias=False) if c_in != c_out else None

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = mish(self.gn1(self.conv1(x)))
        b, c = temb.shape[0], h.shape[-1]
        h = h + ops.reshape(self.temb_proj(temb), (b, 1, c))
        h = mish(self.gn2(self.conv2(h)))
        return h + (self.skip(x) if self.skip is not None else x)

    __call__ = forward


class Downsample(Module):
    def __init__(self, c_in, c_out, rng):
        super().__init__()
        self.conv = Conv1d(c_in, c_out, 4, rng, stride=2, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)

    __call__ = forward


class Upsample(Module):
    """Nearest-neighbor x2 in time (as a fixed matmul) followed by a conv."""

    def __init__(self, c_in, c_out, rng):
        super().__init__()
        self.conv = Conv1d(c_in, c_out, 3, rng, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        t = x.shape[1]
        rep = np.repeat(np.eye(t, dtype=default_dtype()), 2, axis=1)
        wide = ops.transpose(ops.transpose(x, (0, 2, 1)) @ Tensor(rep), (0, 2, 1))
        return self.conv(wide)

    __call__ = forward


class UNetField(Module):
    """v_t(x; theta): condition concatenated on channels, two resolution
    levels of residual conv + transformer blocks, time embedding per block."""

    def __init__(self, cfg: CodecConfig, rng: np.random.Generator):
        super().__init__()
        c0, c1 = cfg.unet_channels
        d = cfg.n_mels
        g = cfg.groupnorm_groups
        self.n_mels = d
        self.time_dim = cfg.time_embed_dim
        self.time_mlp = TimeMLP(cfg.time_embed_dim, c1, rng)
        self.in_conv = Conv1d(2 * d, c0, 3, rng, padding=1)
        # the field is a regression net; dropout would only add target noise
        self.down_res = ResBlock1D(c0, c0, c1, g, rng)
        self.down_tr = TransformerBlock(c0, cfg.n_heads, 2 * c0, 0.0, rng, "snakebeta")
        self.down = Downsample(c0, c1, rng)
        self.mid_res = ResBlock1D(c1, c1, c1, g, rng)
        self.mid_tr = TransformerBlock(c1, cfg.n_heads, 2 * c1, 0.0, rng, "snakebeta")
        self.up = Upsample(c1, c0, rng)
        self.up_res = ResBlock1D(2 * c0, c0, c1, g, rng)
        self.up_tr = TransformerBlock(c0, cfg.n_heads, 2 * c0, 0.0, rng, "snakebeta")
        self.final_conv = Conv1d(c0, c0, 3, rng, padding=1)
        self.final_gn = GroupNorm(c0, g)
        self.final_proj = Linear(c0, d, rng)

    def forward(self, x: Tensor, t, c: Tensor | None) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.n_mels:
            raise ValueError(f"expected [B x T x {self.n_mels}] state, got {x.shape}")
        b, t_len, _ = x.shape
        if c is None:
            c = Tensor(np.zeros(x.shape, dtype=x.dtype))
        elif c.shape != x.shape:
            raise ValueError(f"condition shape {c.shape} != state shape {x.shape}")
        t_vec = np.full(b, t, dtype=np.float64) if np.ndim(t) == 0 else np.asarray(t)
        temb = self.time_mlp(Tensor(time_embed(t_vec, self.time_dim).astype(default_dtype())))

        h = self.in_conv(ops.concat([x, c], axis=-1))
        if t_len % 2 == 1:
            pad = Tensor(np.zeros((b, 1, h.shape[-1]), dtype=h.dtype))
            h = ops.concat([h, pad], axis=1)
        h0 = self.down_tr(self.down_res(h, temb))
        hm = self.mid_tr(self.mid_res(self.down(h0), temb))
        hu = self.up(hm)
        h = self.up_tr(self.up_res(ops.concat([hu, h0], axis=-1), temb))
        h = self.final_proj(mish(self.final_gn(self.final_conv(h))))
        if h.shape[1] != t_len:
            h = h[:, :t_len, :]
        return h

    __call__ = forward


def field_forward(x: Tensor, t: float, c: MelFrameSequence | None, unet: UNetField) -> Tensor:
    """Single-sequence vector-field evaluation; c=None is the unconditional branch."""
    x3 = x if x.ndim == 3 else ops.reshape(x, (1,) + x.shape)
    cond = None
    if c is not None:
        frames = np.asarray(c.frames, dtype=default_dtype())
        if frames.shape[0] != x3.shape[1]:
            raise ValueError(f"condition has {frames.shape[0]} frames, state has {x3.shape[1]}")
        cond = Tensor(frames[None])
    out = unet(x3, float(t), cond)
    return out if x.ndim == 3 else ops.reshape(out, x.shape)


def count_parameters(module: Module) -> int:
    return int(sum(p.size for p in module.parameters().values()))
