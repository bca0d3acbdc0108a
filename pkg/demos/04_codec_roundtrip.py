"""End-to-end codec round trip on a freshly trained toy checkpoint.

Trains briefly on the synthetic corpus, then runs the full pipeline:
WAV -> mel -> encoder -> RVQ -> .fmac -> RVQ decode -> mel decoder ->
flow sampling -> Griffin-Lim -> WAV, at both 3000 and 1500 bps.

A 200-step checkpoint is a demo, not a product; expect a rough tone.
"""

from flowmac.bitstream import truncate, write_stream
from flowmac.config import CodecConfig
from flowmac.sampler import SamplerConfig
from flowmac.trainer import SyntheticDatasetSpec, TrainConfig, generate_synthetic_corpus, train, single_tone_item
from flowmac import dsp

codec_config = CodecConfig()
train_config = TrainConfig(steps=200, batch_size=4, seed=0)
corpus = generate_synthetic_corpus(SyntheticDatasetSpec(item_count=8))

print(f"training {train_config.steps} steps on {len(corpus)} synthetic items...")
state, reports = train(codec_config, train_config, corpus,
                       progress=lambda r: print(f"  step {r.step}: total {r.total:.3f}"),
                       log_every=50)
codec = state.codec().eval_mode()

tone = single_tone_item(440.0, seconds=1.5)
stream = codec.encode_audio(tone)
write_stream("demo_tone.fmac", stream)
print(f"\nencoded 440 Hz tone: {stream.header.payload_bytes} byte payload, "
      f"{stream.header.bits_per_second} bps")

sampler = SamplerConfig(steps=32, cfg_factor=1.0, cfg_enabled=True, seed=0)
audio, info = codec.decode_stream(stream, sampler)
dsp.write_wav("demo_tone_3000bps.wav", audio)
print(f"decoded at 3000 bps: NFE {info.nfe}, RTF {info.rtf:.2f}")

half = truncate(stream, keep_stages=4)
audio_half, info_half = codec.decode_stream(half, sampler)
dsp.write_wav("demo_tone_1500bps.wav", audio_half)
print(f"decoded at 1500 bps: NFE {info_half.nfe}, RTF {info_half.rtf:.2f}")

audio_lc, info_lc = codec.decode_stream(stream, sampler, single_step=True)
dsp.write_wav("demo_tone_lc.wav", audio_lc)
print(f"decoded in low-complexity mode: NFE {info_lc.nfe}, RTF {info_lc.rtf:.2f}")
print("wrote demo_tone_3000bps.wav, demo_tone_1500bps.wav, demo_tone_lc.wav")
