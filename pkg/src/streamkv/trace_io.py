"""KVTR: a flat little-endian binary format for per-frame, per-layer KV blocks.

Layout::

    offset  size  field
    0       4     magic b"KVTR"
    4       4     version (u32, = 1)
    8       24    num_layers, num_heads, head_dim,
                  tokens_per_frame, grid_rows, grid_cols (u32 each)
    32      8     num_frames (u64)
    40      4     reserved (u32, written as 0)
    44      ...   frames

Each frame holds, for every layer in order, the key block then the value
block, each ``H * p * D`` float32 values in ``[head][token][dim]`` order.
"""

from __future__ import annotations

import os
import struct
from dataclasses import astuple, dataclass
from typing import Iterable, Iterator

import numpy as np

from .cache_engine import FrameKV
from .errors import DimensionError, TraceCorruptionError, TraceFormatError, TraceVersionError
from .kvcore import FrameGeometry, ModelDims

MAGIC = b"KVTR"
VERSION = 1
_HEADER = struct.Struct("<4sI6IQI")
HEADER_SIZE = _HEADER.size  # 44
_F32 = np.dtype("<f4")


@dataclass(frozen=True)
class TraceHeader:
    num_layers: int
    num_heads: int
    head_dim: int
    tokens_per_frame: int
    grid_rows: int
    grid_cols: int
    num_frames: int
    version: int = VERSION

    def __post_init__(self) -> None:
        for name in ("num_layers", "num_heads", "head_dim", "tokens_per_frame", "grid_rows", "grid_cols"):
            value = getattr(self, name)
            if not 0 < value < 2**32:
                raise TraceFormatError(f"header field {name}={value} is not a positive u32")
        if not 0 <= self.num_frames < 2**64:
            raise TraceFormatError(f"num_frames={self.num_frames} does not fit in u64")
        if self.grid_rows * self.grid_cols != self.tokens_per_frame:
            raise TraceFormatError(
                f"grid {self.grid_rows}x{self.grid_cols} does not hold "
                f"{self.tokens_per_frame} tokens"
            )

    @classmethod
    def for_stream(cls, geometry: FrameGeometry, dims: ModelDims, num_frames: int) -> "TraceHeader":
        return cls(
            dims.num_layers,
            dims.num_heads,
            dims.head_dim,
            geometry.p,
            geometry.grid_rows,
            geometry.grid_cols,
            num_frames,
        )

    @property
    def geometry(self) -> FrameGeometry:
        return FrameGeometry(self.tokens_per_frame, self.grid_rows, self.grid_cols)

    @property
    def dims(self) -> ModelDims:
        return ModelDims(self.num_layers, self.num_heads, self.head_dim)

    @property
    def block_shape(self) -> tuple[int, int, int, int]:
        return (self.num_layers, self.num_heads, self.tokens_per_frame, self.head_dim)

    @property
    def frame_bytes(self) -> int:
        return 2 * self.num_layers * self.num_heads * self.tokens_per_frame * self.head_dim * 4

    @property
    def total_bytes(self) -> int:
        return HEADER_SIZE + self.num_frames * self.frame_bytes

    def pack(self) -> bytes:
        fields = astuple(self)
        return _HEADER.pack(MAGIC, self.version, *fields[:6], fields[6], 0)


def _frame_bytes(frame: FrameKV, header: TraceHeader) -> bytes:
    shape = header.block_shape
    keys = np.asarray(frame.keys)
    values = np.asarray(frame.values)
    if keys.shape != shape or values.shape != shape:
        raise DimensionError(
            f"frame blocks {keys.shape}/{values.shape} do not match header shape {shape}"
        )
    # interleave per layer: K block then V block
    both = np.stack([keys, values], axis=1).astype(_F32, copy=False)
    return np.ascontiguousarray(both).tobytes()


def write_trace(path: str | os.PathLike, header: TraceHeader, frames: Iterable[FrameKV]) -> int:
    """Write ``header`` and ``frames``; returns the number of bytes written.

    Frames are streamed to disk one at a time. Supplying a different number of
    frames than ``header.num_frames`` raises and leaves no file behind.
    """
    written = 0
    count = 0
    try:
        with open(path, "wb") as fh:
            written += fh.write(header.pack())
            for frame in frames:
                if count == header.num_frames:
                    raise DimensionError(f"more frames than the {header.num_frames} in the header")
                written += fh.write(_frame_bytes(frame, header))
                count += 1
        if count != header.num_frames:
            raise DimensionError(f"header declares {header.num_frames} frames, got {count}")
    except BaseException:
        try:
            os.remove(path)
        except OSError:
            pass
        raise
    return written


def _parse_header(raw: bytes) -> TraceHeader:
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise TraceFormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < HEADER_SIZE:
        raise TraceCorruptionError(
            f"header truncated: expected {HEADER_SIZE} bytes, found {len(raw)}"
        )
    magic, version, *dims, num_frames, _reserved = _HEADER.unpack(raw)
    if version != VERSION:
        raise TraceVersionError(f"unsupported KVTR version {version}; this reader handles {VERSION}")
    return TraceHeader(*dims, num_frames, version=version)


def read_header(path: str | os.PathLike) -> TraceHeader:
    """Parse and fully validate the header, including the file length."""
    with open(path, "rb") as fh:
        header = _parse_header(fh.read(HEADER_SIZE))
        fh.seek(0, os.SEEK_END)
        actual = fh.tell()
    if actual != header.total_bytes:
        raise TraceCorruptionError(
            f"trace length mismatch: header implies {header.total_bytes} bytes, file has {actual}"
        )
    return header


def _iter_frames(path: str | os.PathLike, header: TraceHeader) -> Iterator[FrameKV]:
    shape = (header.num_layers, 2) + header.block_shape[1:]
    with open(path, "rb") as fh:
        fh.seek(HEADER_SIZE)
        for t in range(header.num_frames):
            raw = fh.read(header.frame_bytes)
            if len(raw) != header.frame_bytes:
                expected = header.total_bytes
                actual = HEADER_SIZE + t * header.frame_bytes + len(raw)
                raise TraceCorruptionError(
                    f"frame {t} truncated: expected {expected} bytes in total, found {actual}"
                )
            block = np.frombuffer(raw, dtype=_F32).reshape(shape)
            yield FrameKV(block[:, 0].astype(np.float32), block[:, 1].astype(np.float32))


def read_trace(path: str | os.PathLike) -> tuple[TraceHeader, Iterator[FrameKV]]:
    """Validate the trace and return its header plus a lazy frame iterator.

    Only one frame is held in memory at a time.
    """
    header = read_header(path)
    return header, _iter_frames(path, header)
