"""RKV1 binary trace format.

Layout (all little-endian)::

    header:  magic b"RKV1", version u32 = 1, L, H, d_k, d_v, P, n_frames (u32 each)
    frame:   frame_id u32, then for l in 0..L, for h in 0..H:
             K block  P*d_k float32
             V block  P*d_v float32
             Q block  P*d_k float32
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator, List, Tuple, Union

import numpy as np

from .attention import FrameQueries
from .kvcache import FrameKV

MAGIC = b"RKV1"
VERSION = 1
_HEADER = struct.Struct("<4s7I")
_FRAME_ID = struct.Struct("<I")
HEADER_BYTES = _HEADER.size

PathLike = Union[str, os.PathLike]


class TraceFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TraceHeader:
    L: int
    H: int
    d_k: int
    d_v: int
    P: int
    n_frames: int
    version: int = VERSION

    def pack(self) -> bytes:
        return _HEADER.pack(MAGIC, self.version, self.L, self.H, self.d_k, self.d_v, self.P,
                            self.n_frames)

    @classmethod
    def unpack(cls, raw: bytes) -> "TraceHeader":
        if len(raw) < _HEADER.size:
            raise TraceFormatError("unrecognized trace: header too short")
        magic, version, L, H, d_k, d_v, P, n = _HEADER.unpack(raw[:_HEADER.size])
        if magic != MAGIC or version != VERSION:
            raise TraceFormatError(f"unrecognized trace: magic={magic!r} version={version}")
        return cls(L, H, d_k, d_v, P, n, version)

    @classmethod
    def for_spec(cls, spec) -> "TraceHeader":
        return cls(spec.L, spec.H, spec.d_k, spec.d_v, spec.P, spec.n_frames)

    def slot_dtype(self) -> np.dtype:
        return np.dtype([("k", "<f4", (self.P, self.d_k)),
                         ("v", "<f4", (self.P, self.d_v)),
                         ("q", "<f4", (self.P, self.d_k))])

    @property
    def frame_bytes(self) -> int:
        return _FRAME_ID.size + self.L * self.H * self.slot_dtype().itemsize


Frame = Tuple[FrameKV, FrameQueries]


def _encode_frame(header: TraceHeader, frame: FrameKV, queries: FrameQueries) -> bytes:
    shape = (header.L, header.H, header.P)
    if frame.keys.shape != shape + (header.d_k,) or frame.values.shape != shape + (header.d_v,) \
            or queries.queries.shape != shape + (header.d_k,):
        raise ValueError(f"frame {frame.frame_id} is inconsistent with header {header}")
    rec = np.empty((header.L, header.H), dtype=header.slot_dtype())
    rec["k"] = frame.keys
    rec["v"] = frame.values
    rec["q"] = queries.queries
    return _FRAME_ID.pack(frame.frame_id) + rec.tobytes()


def write_trace(path: PathLike, header: TraceHeader, frames: Iterable[Frame]) -> int:
    """Write ``header`` then every frame; returns the number of frames written."""
    count = 0
    with open(path, "wb") as fh:
        fh.write(header.pack())
        for frame, queries in frames:
            fh.write(_encode_frame(header, frame, queries))
            count += 1
    if count != header.n_frames:
        raise ValueError(f"header declares {header.n_frames} frames but {count} were written")
    return count


def read_header(fh: BinaryIO) -> TraceHeader:
    return TraceHeader.unpack(fh.read(_HEADER.size))


def _iter_frames(fh: BinaryIO, header: TraceHeader) -> Iterator[Frame]:
    dt = header.slot_dtype()
    size = header.frame_bytes
    for f in range(header.n_frames):
        raw = fh.read(size)
        if len(raw) < size:
            raise TraceFormatError(f"short read at frame {f}")
        (frame_id,) = _FRAME_ID.unpack_from(raw)
        rec = np.frombuffer(raw, dtype=dt, offset=_FRAME_ID.size).reshape(header.L, header.H)
        yield (FrameKV(frame_id, rec["k"].astype(np.float32), rec["v"].astype(np.float32)),
               FrameQueries(frame_id, rec["q"].astype(np.float32)))


def iter_trace(path: PathLike) -> Tuple[TraceHeader, Iterator[Frame]]:
    """Open a trace for streaming replay; frames are decoded lazily."""
    fh = open(path, "rb")
    try:
        header = read_header(fh)
    except Exception:
        fh.close()
        raise

    def frames() -> Iterator[Frame]:
        with fh:
            yield from _iter_frames(fh, header)

    return header, frames()


def read_trace(path: PathLike) -> Tuple[TraceHeader, List[Frame]]:
    with open(path, "rb") as fh:
        header = read_header(fh)
        return header, list(_iter_frames(fh, header))
