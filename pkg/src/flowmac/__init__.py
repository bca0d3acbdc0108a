"""FlowMAC: a desk-scale flow-matching mel spectrogram codec.

Subpackages cover the autodiff numerics, mel front end, encoder/decoder
and vector-field networks, residual vector quantizer, flow-matching
objective, Euler sampler, bit-exact stream format, and training loop.
"""

__version__ = "0.1.0"
