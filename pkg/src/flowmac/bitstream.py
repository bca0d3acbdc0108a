"""Bit-exact serialization of code grids: the .fmac stream format.

Layout (all multi-byte integers little-endian):

    offset  size  field
    0       4     magic "FMAC"
    4       1     version (1)
    5       4     sample_rate
    9       2     hop
    11      1     n_mels
    12      1     stages
    13      1     codebook_bits
    14      4     frame_count
    18      1     flags (reserved, 0)
    19      ...   payload

The payload packs each frame's stage indices in order (frame-major,
stage-minor), each index as `codebook_bits` bits, big-endian within bytes,
zero-padded to a byte boundary.  Truncating a stream to fewer stages is pure
bit manipulation; no model is involved.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .config import CodecConfig
from .quantizer import CodeGrid

MAGIC = b"FMAC"
VERSION = 1
_HEADER = struct.Struct("<4sBIHBBBIB")
HEADER_SIZE = _HEADER.size  # 19 bytes


class StreamFormatError(ValueError):
    pass


@dataclass(frozen=True)
class StreamHeader:
    sample_rate: int
    hop: int
    n_mels: int
    stages: int
    codebook_bits: int
    frame_count: int
    flags: int = 0
    version: int = VERSION

    def __post_init__(self):
        if self.codebook_bits < 1 or self.codebook_bits > 8:
            raise StreamFormatError(
                f"v1 streams carry 1..8 bits per stage, got {self.codebook_bits}"
            )
        if self.stages * self.codebook_bits > 64:
            raise StreamFormatError(
                f"{self.stages} stages x {self.codebook_bits} bits exceeds 64 bits per frame"
            )
        if self.stages < 1:
            raise StreamFormatError("stages must be >= 1")

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop

    @property
    def duration_seconds(self) -> float:
        return self.frame_count * self.hop / self.sample_rate

    @property
    def bits_per_second(self) -> float:
        return self.stages * self.codebook_bits * self.frame_rate

    @property
    def payload_bytes(self) -> int:
        return (self.frame_count * self.stages * self.codebook_bits + 7) // 8

    def to_bytes(self) -> bytes:
        return _HEADER.pack(
            MAGIC,
            self.version,
            self.sample_rate,
            self.hop,
            self.n_mels,
            self.stages,
            self.codebook_bits,
            self.frame_count,
            self.flags,
        )

    @classmethod
    def from_bytes(cls, raw: bytes) -> "StreamHeader":
        if len(raw) < HEADER_SIZE:
            raise StreamFormatError(f"header needs {HEADER_SIZE} bytes, got {len(raw)}")
        magic, version, sr, hop, n_mels, stages, bits, frames, flags = _HEADER.unpack(
            raw[:HEADER_SIZE]
        )
        if magic != MAGIC:
            raise StreamFormatError("not a FlowMAC stream")
        if version != VERSION:
            raise StreamFormatError(f"unsupported stream version {version}")
        return cls(
            sample_rate=sr,
            hop=hop,
            n_mels=n_mels,
            stages=stages,
            codebook_bits=bits,
            frame_count=frames,
            flags=flags,
            version=version,
        )


@dataclass(frozen=True)
class EncodedStream:
    header: StreamHeader
    payload: bytes

    def __post_init__(self):
        expected = self.header.payload_bytes
        if len(self.payload) != expected:
            raise StreamFormatError(
                f"payload is {len(self.payload)} bytes, header implies {expected}"
            )

    def to_bytes(self) -> bytes:
        return self.header.to_bytes() + self.payload


def _pack_indices(indices: np.ndarray, bits: int) -> bytes:
    if indices.size == 0:
        return b""
    flat = indices.ravel().astype(np.uint8)  # frame-major, stage-minor (C order)
    all_bits = np.unpackbits(flat[:, None], axis=1)[:, 8 - bits :]
    return np.packbits(all_bits.ravel()).tobytes()


def _unpack_indices(payload: bytes, frame_count: int, stages: int, bits: int) -> np.ndarray:
    n = frame_count * stages
    if n == 0:
        return np.zeros((frame_count, stages), dtype=np.int64)
    raw = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))[: n * bits]
    weights = 1 << np.arange(bits - 1, -1, -1)
    return (raw.reshape(n, bits) @ weights).astype(np.int64).reshape(frame_count, stages)


def pack(codes: CodeGrid, config: CodecConfig) -> EncodedStream:
    """Serialize a code grid against the encoder's structural constants."""
    bits = config.codebook_bits
    if codes.indices.size and codes.indices.max() >= (1 << bits):
        raise StreamFormatError(
            f"index {codes.indices.max()} does not fit in {bits} bits"
        )
    header = StreamHeader(
        sample_rate=config.sample_rate,
        hop=config.hop,
        n_mels=config.n_mels,
        stages=codes.n_stages,
        codebook_bits=bits,
        frame_count=codes.n_frames,
    )
    return EncodedStream(header, _pack_indices(codes.indices, bits))


def unpack(stream: EncodedStream) -> tuple[CodeGrid, CodecConfig]:
    """Exact inverse of pack; the returned config carries the header's
    structural fields over desk-scale defaults for everything else."""
    h = stream.header
    indices = _unpack_indices(stream.payload, h.frame_count, h.stages, h.codebook_bits)
    config = CodecConfig().with_overrides(
        sample_rate=h.sample_rate,
        hop=h.hop,
        n_mels=h.n_mels,
        stages=h.stages,
        codebook_size=1 << h.codebook_bits,
    )
    return CodeGrid(indices), config


def truncate(stream: EncodedStream, keep_stages: int) -> EncodedStream:
    """Drop trailing quantizer stages; halving 8 to 4 halves the bit rate."""
    h = stream.header
    if not 1 <= keep_stages <= h.stages:
        raise ValueError(f"keep_stages {keep_stages} outside 1..{h.stages}")
    if keep_stages == h.stages:
        return stream
    indices = _unpack_indices(stream.payload, h.frame_count, h.stages, h.codebook_bits)
    kept = indices[:, :keep_stages]
    header = StreamHeader(
        sample_rate=h.sample_rate,
        hop=h.hop,
        n_mels=h.n_mels,
        stages=keep_stages,
        codebook_bits=h.codebook_bits,
        frame_count=h.frame_count,
        flags=h.flags,
    )
    return EncodedStream(header, _pack_indices(kept, h.codebook_bits))


def write_stream(path, stream: EncodedStream) -> None:
    with open(path, "wb") as f:
        f.write(stream.to_bytes())


def read_stream(path) -> EncodedStream:
    with open(path, "rb") as f:
        raw = f.read()
    header = StreamHeader.from_bytes(raw)
    payload = raw[HEADER_SIZE:]
    expected = header.payload_bytes
    if len(payload) != expected:
        raise StreamFormatError(
            f"truncated payload: expected {expected} bytes, found {len(payload)}"
        )
    return EncodedStream(header, payload)


def stage_histograms(stream: EncodedStream) -> np.ndarray:
    """Index histogram per stage, [stages x 2^bits]."""
    h = stream.header
    indices = _unpack_indices(stream.payload, h.frame_count, h.stages, h.codebook_bits)
    size = 1 << h.codebook_bits
    return np.stack([np.bincount(indices[:, s], minlength=size) for s in range(h.stages)])
