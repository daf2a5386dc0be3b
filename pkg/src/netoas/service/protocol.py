"""Wire format for the frame-streaming WebSocket.

Binary FRAME message layout, client to server:

    magic  2 bytes  0x4E 0x45 ("NE")
    seq    u32 LE
    width  u16 LE
    height u16 LE
    format u8       1 = RGB8
    payload         width * height * 3 bytes, row major RGB

Everything else on the socket is JSON text.
"""

from __future__ import annotations

import struct

import numpy as np

from ..imaging import Frame

FRAME_MAGIC = b"NE"
FORMAT_RGB8 = 1
_HEADER = struct.Struct("<IHHB")
HEADER_SIZE = len(FRAME_MAGIC) + _HEADER.size  # 11 bytes


class ProtocolError(ValueError):
    """Malformed FRAME message."""


def encode_frame(pixels: np.ndarray, seq: int) -> bytes:
    """Build one binary FRAME message from an (h, w, 3) uint8 array."""
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise ValueError("expected (h, w, 3) uint8 pixels")
    h, w = pixels.shape[:2]
    header = FRAME_MAGIC + _HEADER.pack(seq, w, h, FORMAT_RGB8)
    return header + np.ascontiguousarray(pixels).tobytes()


def decode_frame(data: bytes, fps: float) -> Frame:
    """Parse one binary FRAME message; fps supplies the timestamp."""
    if len(data) < HEADER_SIZE:
        raise ProtocolError(f"message of {len(data)} bytes is shorter than "
                            f"the {HEADER_SIZE}-byte header")
    if data[:2] != FRAME_MAGIC:
        raise ProtocolError(f"bad magic {data[:2]!r}")
    seq, width, height, fmt = _HEADER.unpack_from(data, 2)
    if fmt != FORMAT_RGB8:
        raise ProtocolError(f"unsupported pixel format {fmt}")
    expected = HEADER_SIZE + width * height * 3
    if len(data) != expected:
        raise ProtocolError(f"expected {expected} bytes for {width}x{height} "
                            f"RGB8, got {len(data)}")
    pixels = np.frombuffer(data, dtype=np.uint8, offset=HEADER_SIZE)
    pixels = pixels.reshape(height, width, 3).copy()
    return Frame(pixels, seq=seq, timestamp_ms=(seq - 1) * 1000.0 / fps)
