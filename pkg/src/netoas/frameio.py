"""Frame import/export: binary PPM (P6) files and uncompressed Y4M streams.

A directory of zero-padded numbered PPMs is a valid stream. Y4M is plain
YUV4MPEG2 with 4:2:0 chroma, converted to/from RGB with BT.601 studio-swing
coefficients. No compressed codecs.
"""

from __future__ import annotations

import io
import os
import re
from typing import Iterable, Iterator

import numpy as np

from .imaging import Frame

_NUMBERED_PPM = re.compile(r"^.*?(\d+)\.ppm$")


def _read_token(fh: io.BufferedReader) -> bytes:
    """One whitespace-delimited PPM header token, skipping # comments."""
    tok = b""
    while True:
        ch = fh.read(1)
        if not ch:
            raise ValueError("truncated PPM header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Load a binary P6 PPM as an (h, w, 3) uint8 array."""
    with open(path, "rb") as fh:
        magic = _read_token(fh)
        if magic != b"P6":
            raise ValueError(f"{path}: not a P6 PPM (magic {magic!r})")
        width = int(_read_token(fh))
        height = int(_read_token(fh))
        maxval = int(_read_token(fh))
        if maxval != 255:
            raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
        data = fh.read(width * height * 3)
        if len(data) != width * height * 3:
            raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(bytearray(data), dtype=np.uint8).reshape(height, width, 3)


def write_ppm(path: str | os.PathLike, pixels: np.ndarray) -> None:
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def iter_ppm_dir(path: str | os.PathLike, fps: float) -> Iterator[Frame]:
    """Frames from numbered .ppm files in a directory, in numeric order."""
    entries = []
    for name in os.listdir(path):
        m = _NUMBERED_PPM.match(name)
        if m:
            entries.append((int(m.group(1)), name))
    entries.sort()
    for seq, (_, name) in enumerate(entries, start=1):
        px = read_ppm(os.path.join(path, name))
        yield Frame(px, seq=seq, timestamp_ms=(seq - 1) * 1000.0 / fps)


# BT.601 studio swing: Y in [16, 235], Cb/Cr in [16, 240].
def _yuv420_to_rgb(y: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    u_full = u.repeat(2, axis=0).repeat(2, axis=1)[: y.shape[0], : y.shape[1]]
    v_full = v.repeat(2, axis=0).repeat(2, axis=1)[: y.shape[0], : y.shape[1]]
    yf = y.astype(np.float32) - 16.0
    uf = u_full.astype(np.float32) - 128.0
    vf = v_full.astype(np.float32) - 128.0
    r = 1.164 * yf + 1.596 * vf
    g = 1.164 * yf - 0.392 * uf - 0.813 * vf
    b = 1.164 * yf + 2.017 * uf
    rgb = np.stack([r, g, b], axis=2)
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def _rgb_to_yuv420(pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rgb = pixels.astype(np.float32)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 16.0 + (65.481 * r + 128.553 * g + 24.966 * b) / 255.0
    u = 128.0 + (-37.797 * r - 74.203 * g + 112.0 * b) / 255.0
    v = 128.0 + (112.0 * r - 93.786 * g - 18.214 * b) / 255.0
    h, w = y.shape
    # pad odd dimensions before 2x2 chroma averaging
    if h % 2 or w % 2:
        u = np.pad(u, ((0, h % 2), (0, w % 2)), mode="edge")
        v = np.pad(v, ((0, h % 2), (0, w % 2)), mode="edge")
    u_sub = u.reshape(u.shape[0] // 2, 2, u.shape[1] // 2, 2).mean(axis=(1, 3))
    v_sub = v.reshape(v.shape[0] // 2, 2, v.shape[1] // 2, 2).mean(axis=(1, 3))
    to8 = lambda a: np.clip(np.rint(a), 0, 255).astype(np.uint8)
    return to8(y), to8(u_sub), to8(v_sub)


def read_y4m(path: str | os.PathLike) -> tuple[float, Iterator[Frame]]:
    """Open a YUV4MPEG2 (C420) stream; returns (fps, frame iterator)."""
    fh = open(path, "rb")
    header = fh.readline().decode("ascii", "replace").strip()
    if not header.startswith("YUV4MPEG2"):
        fh.close()
        raise ValueError(f"{path}: not a YUV4MPEG2 stream")
    width = height = 0
    fps = 25.0
    for tag in header.split()[1:]:
        if tag.startswith("W"):
            width = int(tag[1:])
        elif tag.startswith("H"):
            height = int(tag[1:])
        elif tag.startswith("F"):
            num, den = tag[1:].split(":")
            fps = float(num) / float(den)
        elif tag.startswith("C") and not tag[1:].startswith("420"):
            fh.close()
            raise ValueError(f"{path}: only 4:2:0 chroma supported, got {tag}")
    if width <= 0 or height <= 0:
        fh.close()
        raise ValueError(f"{path}: missing frame dimensions in header")

    def frames() -> Iterator[Frame]:
        y_size = width * height
        c_size = ((width + 1) // 2) * ((height + 1) // 2)
        seq = 0
        try:
            while True:
                line = fh.readline()
                if not line:
                    return
                if not line.startswith(b"FRAME"):
                    raise ValueError(f"{path}: bad frame marker {line[:16]!r}")
                raw = fh.read(y_size + 2 * c_size)
                if len(raw) != y_size + 2 * c_size:
                    raise ValueError(f"{path}: truncated frame payload")
                y = np.frombuffer(raw, np.uint8, y_size).reshape(height, width)
                u = np.frombuffer(raw, np.uint8, c_size, y_size).reshape(
                    (height + 1) // 2, (width + 1) // 2)
                v = np.frombuffer(raw, np.uint8, c_size, y_size + c_size).reshape(
                    (height + 1) // 2, (width + 1) // 2)
                seq += 1
                yield Frame(_yuv420_to_rgb(y, u, v), seq=seq,
                            timestamp_ms=(seq - 1) * 1000.0 / fps)
        finally:
            fh.close()

    return fps, frames()


def write_y4m(path: str | os.PathLike, frames: Iterable[np.ndarray], fps: int) -> None:
    with open(path, "wb") as fh:
        header_written = False
        for px in frames:
            if not header_written:
                h, w = px.shape[:2]
                fh.write(f"YUV4MPEG2 W{w} H{h} F{fps}:1 Ip A1:1 C420jpeg\n".encode())
                header_written = True
            y, u, v = _rgb_to_yuv420(px)
            fh.write(b"FRAME\n")
            fh.write(y.tobytes())
            fh.write(u.tobytes())
            fh.write(v.tobytes())


def open_stream(path: str | os.PathLike, fps: float = 50.0) -> tuple[float, Iterator[Frame]]:
    """Dispatch a frame source: a directory of PPMs or a .y4m file.

    ``fps`` is used for PPM directories (they carry no rate); Y4M streams
    carry their own rate in the header.
    """
    if os.path.isdir(path):
        return fps, iter_ppm_dir(path, fps)
    if str(path).endswith(".y4m"):
        return read_y4m(path)
    if str(path).endswith(".ppm"):
        def single() -> Iterator[Frame]:
            yield Frame(read_ppm(path), seq=1, timestamp_ms=0.0)
        return fps, single()
    raise ValueError(f"unsupported frame source: {path}")
