"""Residual quantization and the scalable bitstream.

Random latents go through the 8-stage quantizer; the demo shows the error
shrinking stage by stage, then packs the indices into a .fmac stream and
truncates it to half rate without touching the model.
"""

import numpy as np

from flowmac.bitstream import pack, read_stream, truncate, unpack, write_stream
from flowmac.config import CodecConfig
from flowmac.quantizer import Codebooks, RVQConfig, rvq_decode, rvq_encode, rvq_train_step
from flowmac.numerics import Tensor

config = CodecConfig()
rng = np.random.default_rng(0)
books = Codebooks(RVQConfig.from_codec(config), rng)

# enough frames that 256 codewords cannot simply memorize the data
latent = rng.standard_normal((2000, config.latent_dim))
# a few EMA updates so the codebooks sit on the data
for _ in range(50):
    rvq_train_step(Tensor(latent), books, rng)

# quantization happens in the projected 16-d space; measure the error there
# (the 128-d projections are trained by backprop in the full codec, not here)
projected = latent @ books.down.data
for stages in range(1, config.stages + 1):
    codes = rvq_encode(latent, books, active_stages=stages)
    q_low = books.tables[np.arange(stages)[:, None], codes.indices.T].sum(axis=0)
    err = np.sqrt(np.mean((q_low - projected) ** 2))
    bps = stages * config.codebook_bits * config.frame_rate
    print(f"stages={stages}: projected rmse {err:.4f}  rate {bps:7.1f} bps")

codes = rvq_encode(latent[:93], books)
stream = pack(codes, config)
write_stream("demo_latent.fmac", stream)
print(f"\npacked {codes.n_frames} frames -> {stream.header.payload_bytes} byte payload "
      f"({stream.header.bits_per_second} bps)")

half = truncate(read_stream("demo_latent.fmac"), keep_stages=4)
codes_half, _ = unpack(half)
assert np.array_equal(codes_half.indices, codes.indices[:, :4])
print(f"truncated to 4 stages: {half.header.payload_bytes} byte payload "
      f"({half.header.bits_per_second} bps); indices match the first 4 columns")
