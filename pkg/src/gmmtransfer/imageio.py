"""PNG / binary PPM decoding and PNG encoding for 8-bit RGB buffers.

Only what the pipeline needs is supported: every PNG color type and bit
depth (alpha dropped, grayscale replicated, 16-bit rounded down to 8-bit),
Adam7 interlacing, and P6 PPM with maxval 255. Output is always an 8-bit
RGB PNG written with a fixed filter and compression level, so the same
buffer always produces the same bytes.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import CorruptImage, UnsupportedFormat

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
MAX_PIXELS = 1 << 26

# (x0, y0, dx, dy) for the seven Adam7 passes
_ADAM7 = (
    (0, 0, 8, 8),
    (4, 0, 8, 8),
    (0, 4, 4, 8),
    (2, 0, 4, 4),
    (0, 2, 2, 4),
    (1, 0, 2, 2),
    (0, 1, 1, 2),
)

_CHANNELS = {0: 1, 2: 3, 3: 1, 4: 2, 6: 4}
_ALLOWED_DEPTHS = {
    0: (1, 2, 4, 8, 16),
    2: (8, 16),
    3: (1, 2, 4, 8),
    4: (8, 16),
    6: (8, 16),
}


@dataclass(frozen=True, eq=False)
class RgbImage:
    """Row-major interleaved 8-bit RGB image.

    ``data`` is a read-only ``uint8`` array of shape ``(height, width, 3)``.
    """

    width: int
    height: int
    data: np.ndarray

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image dimensions must be positive, got {self.width}x{self.height}")
        arr = np.ascontiguousarray(self.data, dtype=np.uint8)
        if arr.size != 3 * self.width * self.height:
            raise ValueError(
                f"expected {3 * self.width * self.height} samples, got {arr.size}"
            )
        arr = arr.reshape(self.height, self.width, 3).copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_bytes(cls, width: int, height: int, buf: bytes) -> "RgbImage":
        return cls(width, height, np.frombuffer(buf, dtype=np.uint8))

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "RgbImage":
        arr = np.asarray(arr)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected an (H, W, 3) array, got shape {arr.shape}")
        return cls(arr.shape[1], arr.shape[0], arr)

    def tobytes(self) -> bytes:
        return self.data.tobytes()

    def __eq__(self, other):
        if not isinstance(other, RgbImage):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.data, other.data)
        )

    def __repr__(self):
        return f"RgbImage(width={self.width}, height={self.height})"


@dataclass(frozen=True, eq=False)
class PlanarF64Image:
    """Planar float image, ``planes`` has shape ``(channels, height, width)``."""

    width: int
    height: int
    planes: np.ndarray

    def __post_init__(self):
        planes = np.asarray(self.planes, dtype=np.float64)
        if planes.ndim != 3 or planes.shape[1:] != (self.height, self.width):
            raise ValueError(
                f"planes shape {planes.shape} does not match {self.width}x{self.height}"
            )
        if not np.all(np.isfinite(planes)):
            raise ValueError("planar image contains non-finite values")
        object.__setattr__(self, "planes", planes)

    @property
    def channels(self) -> int:
        return self.planes.shape[0]

    def pixels(self) -> np.ndarray:
        """Return an ``(M, channels)`` copy with pixels in row-major order."""
        return self.planes.reshape(self.channels, -1).T.copy()

    @classmethod
    def from_pixels(cls, pixels: np.ndarray, width: int, height: int) -> "PlanarF64Image":
        pixels = np.asarray(pixels, dtype=np.float64)
        return cls(width, height, pixels.T.reshape(-1, height, width).copy())


def load_image(path: str | os.PathLike) -> RgbImage:
    """Decode a PNG or P6 PPM file into an :class:`RgbImage`.

    Raises:
        FileNotFoundError: ``path`` does not exist.
        UnsupportedFormat: the file is not PNG or P6 PPM with maxval 255.
        CorruptImage: the payload cannot be decoded.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw.startswith(PNG_SIGNATURE):
        return _decode_png(raw)
    if raw[:2] == b"P6":
        return _decode_ppm(raw)
    raise UnsupportedFormat(f"{os.fspath(path)}: not a PNG or binary PPM file")


def save_image(img: RgbImage, path: str | os.PathLike) -> None:
    """Write ``img`` as an 8-bit RGB PNG. OSError propagates on I/O failure."""
    with open(path, "wb") as fh:
        fh.write(encode_png(img))


def encode_png(img: RgbImage) -> bytes:
    rows = img.data.reshape(img.height, img.width * 3)
    # Sub filter on every row: deterministic and cheap to vectorise.
    filtered = rows.copy()
    filtered[:, 3:] = rows[:, 3:] - rows[:, :-3]
    payload = np.empty((img.height, img.width * 3 + 1), dtype=np.uint8)
    payload[:, 0] = 1
    payload[:, 1:] = filtered
    ihdr = struct.pack(">IIBBBBB", img.width, img.height, 8, 2, 0, 0, 0)
    return b"".join(
        [
            PNG_SIGNATURE,
            _chunk(b"IHDR", ihdr),
            _chunk(b"IDAT", zlib.compress(payload.tobytes(), 9)),
            _chunk(b"IEND", b""),
        ]
    )


def _chunk(tag: bytes, data: bytes) -> bytes:
    crc = zlib.crc32(tag + data) & 0xFFFFFFFF
    return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", crc)


def _check_size(width: int, height: int) -> None:
    if width < 1 or height < 1:
        raise CorruptImage(f"invalid dimensions {width}x{height}")
    if width * height > MAX_PIXELS:
        raise CorruptImage(f"image of {width}x{height} pixels exceeds the 2^26 pixel limit")


# -- PPM ---------------------------------------------------------------------


def _decode_ppm(raw: bytes) -> RgbImage:
    tokens = []
    pos = 2
    n = len(raw)
    while len(tokens) < 3:
        while pos < n and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos : pos + 1] == b"#":
            while pos < n and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not raw[pos : pos + 1].isspace() and raw[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise CorruptImage("truncated PPM header")
        tokens.append(raw[start:pos])
    if pos >= n or not raw[pos : pos + 1].isspace():
        raise CorruptImage("PPM header not terminated by whitespace")
    pos += 1
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise CorruptImage(f"malformed PPM header: {exc}") from None
    if maxval != 255:
        raise UnsupportedFormat(f"PPM maxval {maxval} not supported (only 255)")
    _check_size(width, height)
    need = 3 * width * height
    payload = raw[pos : pos + need]
    if len(payload) != need:
        raise CorruptImage(f"PPM payload has {len(payload)} bytes, expected {need}")
    return RgbImage.from_bytes(width, height, payload)


# -- PNG ---------------------------------------------------------------------


def _read_chunks(raw: bytes):
    pos = len(PNG_SIGNATURE)
    while True:
        if pos + 8 > len(raw):
            raise CorruptImage("PNG stream ended before IEND")
        length, tag = struct.unpack(">I4s", raw[pos : pos + 8])
        data = raw[pos + 8 : pos + 8 + length]
        crc_bytes = raw[pos + 8 + length : pos + 12 + length]
        if len(data) != length or len(crc_bytes) != 4:
            raise CorruptImage(f"truncated {tag!r} chunk")
        if zlib.crc32(tag + data) & 0xFFFFFFFF != struct.unpack(">I", crc_bytes)[0]:
            raise CorruptImage(f"CRC mismatch in {tag!r} chunk")
        yield tag, data
        if tag == b"IEND":
            return
        pos += 12 + length


def _decode_png(raw: bytes) -> RgbImage:
    header = None
    palette = None
    idat = []
    for tag, data in _read_chunks(raw):
        if tag == b"IHDR":
            if len(data) != 13:
                raise CorruptImage("bad IHDR length")
            header = struct.unpack(">IIBBBBB", data)
        elif tag == b"PLTE":
            if len(data) % 3:
                raise CorruptImage("PLTE length not a multiple of 3")
            palette = np.frombuffer(data, dtype=np.uint8).reshape(-1, 3)
        elif tag == b"IDAT":
            idat.append(data)
    if header is None:
        raise CorruptImage("missing IHDR chunk")
    width, height, depth, ctype, compression, filter_method, interlace = header
    _check_size(width, height)
    if ctype not in _CHANNELS or depth not in _ALLOWED_DEPTHS[ctype]:
        raise CorruptImage(f"invalid color type {ctype} / bit depth {depth}")
    if compression != 0 or filter_method != 0 or interlace not in (0, 1):
        raise CorruptImage("unknown compression, filter or interlace method")
    if ctype == 3 and palette is None:
        raise CorruptImage("palette image without PLTE chunk")
    try:
        stream = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise CorruptImage(f"zlib stream error: {exc}") from None

    channels = _CHANNELS[ctype]
    bits_pp = channels * depth
    bpp = max(1, bits_pp // 8)

    if interlace == 0:
        samples, used = _decode_pass(stream, 0, width, height, channels, depth, bpp)
        pos = used
    else:
        samples = np.zeros((height, width, channels), dtype=np.uint16)
        pos = 0
        for x0, y0, dx, dy in _ADAM7:
            pw = (width - x0 + dx - 1) // dx
            ph = (height - y0 + dy - 1) // dy
            if pw <= 0 or ph <= 0:
                continue
            sub, used = _decode_pass(stream[pos:], 0, pw, ph, channels, depth, bpp)
            samples[y0::dy, x0::dx] = sub
            pos += used
    if pos > len(stream):
        raise CorruptImage("image data shorter than declared dimensions")

    rgb = _to_rgb8(samples, ctype, depth, palette)
    return RgbImage(width, height, rgb)


def _decode_pass(stream, offset, width, height, channels, depth, bpp):
    stride = (width * channels * depth + 7) // 8
    need = height * (stride + 1)
    block = stream[offset : offset + need]
    if len(block) != need:
        raise CorruptImage("image data shorter than declared dimensions")
    rows = np.frombuffer(block, dtype=np.uint8).reshape(height, stride + 1)
    out = np.zeros((height, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.uint8)
    for y in range(height):
        ftype = int(rows[y, 0])
        line = rows[y, 1:]
        out[y] = _unfilter(ftype, line, prev, bpp)
        prev = out[y]
    return _unpack(out, width, channels, depth), need


def _unfilter(ftype, line, prev, bpp):
    if ftype == 0:
        return line
    if ftype == 2:
        return line + prev
    n = line.shape[0]
    if ftype == 1:
        # running sum per byte lane, uint8 arithmetic wraps mod 256
        pad = (-n) % bpp
        lanes = np.concatenate([line, np.zeros(pad, np.uint8)]).reshape(-1, bpp)
        return np.cumsum(lanes, axis=0, dtype=np.uint8).reshape(-1)[:n]
    if ftype not in (3, 4):
        raise CorruptImage(f"unknown filter type {ftype}")
    cur = [0] * n
    raw = line.tolist()
    up = prev.tolist()
    if ftype == 3:
        for i in range(n):
            left = cur[i - bpp] if i >= bpp else 0
            cur[i] = (raw[i] + ((left + up[i]) >> 1)) & 0xFF
    else:
        for i in range(n):
            a = cur[i - bpp] if i >= bpp else 0
            b = up[i]
            c = up[i - bpp] if i >= bpp else 0
            p = a + b - c
            pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
            if pa <= pb and pa <= pc:
                pred = a
            elif pb <= pc:
                pred = b
            else:
                pred = c
            cur[i] = (raw[i] + pred) & 0xFF
    return np.array(cur, dtype=np.uint8)


def _unpack(rows, width, channels, depth):
    height = rows.shape[0]
    if depth == 8:
        return rows[:, : width * channels].reshape(height, width, channels).astype(np.uint16)
    if depth == 16:
        hi = rows[:, 0 : 2 * width * channels : 2].astype(np.uint16)
        lo = rows[:, 1 : 2 * width * channels : 2].astype(np.uint16)
        return ((hi << 8) | lo).reshape(height, width, channels)
    bits = np.unpackbits(rows, axis=1)[:, : width * channels * depth]
    bits = bits.reshape(height, width * channels, depth)
    weights = (1 << np.arange(depth - 1, -1, -1)).astype(np.uint16)
    vals = (bits.astype(np.uint16) * weights).sum(axis=2, dtype=np.uint16)
    return vals.reshape(height, width, channels)


def _to_rgb8(samples, ctype, depth, palette):
    if ctype == 3:
        idx = samples[..., 0]
        if idx.max(initial=0) >= palette.shape[0]:
            raise CorruptImage("palette index out of range")
        return palette[idx]
    if depth == 16:
        scaled = (samples.astype(np.uint32) * 255 + 32767) // 65535
    elif depth < 8:
        top = (1 << depth) - 1
        scaled = (samples.astype(np.uint32) * 255 + top // 2) // top
    else:
        scaled = samples
    scaled = scaled.astype(np.uint8)
    if ctype in (0, 4):
        return np.repeat(scaled[..., :1], 3, axis=2)
    return scaled[..., :3]
