"""Multi-channel raster container, the HCDR file format, normalization and resampling.

Arrays are held in memory as ``(height, width, channels)`` float32. On disk the
payload is band-sequential (channel-major, row-major within a band).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"HCDR"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class RasterError(ValueError):
    """Raised for malformed raster files or inconsistent raster data."""


@dataclass(frozen=True)
class Raster:
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise RasterError(f"raster data must be HxW or HxWxC, got shape {arr.shape}")
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class NormalizedRaster(Raster):
    """Raster mapped channel-wise onto [-1, 1].

    ``ch_min``/``ch_max`` hold the affine map per channel; ``constant`` flags
    channels that had max == min and were set to zero.
    """

    ch_min: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ch_max: np.ndarray = field(default_factory=lambda: np.zeros(0))
    constant: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def denormalize(self) -> Raster:
        return denormalize(self)


def _band_sequential(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(arr, (2, 0, 1)))


def to_bytes(r: Raster) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, r.height, r.width, r.channels)
    return header + _band_sequential(r.data).astype("<f4").tobytes()


def from_bytes(buf: bytes) -> Raster:
    if len(buf) < _HEADER.size:
        raise RasterError(f"truncated header at byte offset {len(buf)}")
    magic, version, h, w, c = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise RasterError(f"bad magic {magic!r} at byte offset 0")
    if version != VERSION:
        raise RasterError(f"unsupported version {version} at byte offset 4")
    if h == 0 or w == 0 or c == 0:
        raise RasterError(f"zero dimension in header ({h}x{w}x{c}) at byte offset 8")
    expected = _HEADER.size + 4 * h * w * c
    if len(buf) != expected:
        raise RasterError(
            f"payload length mismatch: header declares {h}x{w}x{c} "
            f"({expected} bytes) but file has {len(buf)} bytes; "
            f"mismatch at byte offset {min(len(buf), expected)}"
        )
    flat = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size)
    bad = np.flatnonzero(~np.isfinite(flat))
    if bad.size:
        raise RasterError(f"non-finite value at byte offset {_HEADER.size + 4 * int(bad[0])}")
    return Raster(np.transpose(flat.reshape(c, h, w), (1, 2, 0)))


def save(r: Raster, path) -> None:
    Path(path).write_bytes(to_bytes(r))


def load(path) -> Raster:
    """Load an HCDR raster, or an 8-bit grayscale/RGB PNG mapped to [0, 1]."""
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] == MAGIC:
        return from_bytes(buf)
    if buf[:8] == b"\x89PNG\r\n\x1a\n":
        return load_png(path)
    raise RasterError(f"unrecognised file signature {buf[:4]!r} at byte offset 0")


def load_png(path) -> Raster:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "RGB", "1", "P", "RGBA", "LA"):
            raise RasterError(f"unsupported PNG mode {im.mode}")
        if im.mode in ("1", "P"):
            im = im.convert("L" if im.mode == "1" else "RGB")
        elif im.mode == "RGBA":
            im = im.convert("RGB")
        elif im.mode == "LA":
            im = im.convert("L")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return Raster(arr)


def save_png(r: Raster | np.ndarray, path, channels: tuple[int, ...] | None = None,
             value_range: tuple[float, float] | None = None) -> None:
    """Write a visualisation PNG.

    ``channels`` picks one band (grayscale) or a false-colour triple. Values are
    linearly stretched from ``value_range`` (default: data min/max) to 0..255.
    Boolean and uint8 arrays are written without stretching.
    """
    from PIL import Image

    arr = r.data if isinstance(r, Raster) else np.asarray(r)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if channels is None:
        channels = (0, 1, 2) if arr.shape[2] >= 3 else (0,)
    if len(channels) not in (1, 3):
        raise RasterError("PNG export takes one channel or a channel triple")
    sel = arr[:, :, list(channels)]
    if sel.dtype == np.bool_:
        out = sel.astype(np.uint8) * 255
    elif sel.dtype == np.uint8:
        out = sel
    else:
        lo, hi = value_range if value_range is not None else (float(sel.min()), float(sel.max()))
        scale = 255.0 / (hi - lo) if hi > lo else 0.0
        out = np.clip(np.rint((sel - lo) * scale), 0, 255).astype(np.uint8)
    if out.shape[2] == 1:
        out = out[:, :, 0]
    Image.fromarray(out).save(path, format="PNG")


def normalize(r: Raster) -> NormalizedRaster:
    x = r.data.astype(np.float64)
    lo = x.min(axis=(0, 1))
    hi = x.max(axis=(0, 1))
    constant = hi <= lo
    span = np.where(constant, 1.0, hi - lo)
    out = 2.0 * (x - lo) / span - 1.0
    out[:, :, constant] = 0.0
    return NormalizedRaster(np.clip(out, -1.0, 1.0), ch_min=lo, ch_max=hi, constant=constant)


def denormalize(n: NormalizedRaster) -> Raster:
    x = n.data.astype(np.float64)
    out = (x + 1.0) / 2.0 * (n.ch_max - n.ch_min) + n.ch_min
    out[:, :, n.constant] = n.ch_min[n.constant]
    return Raster(out)


def _rewrap(r: Raster, data: np.ndarray) -> Raster:
    if isinstance(r, NormalizedRaster):
        return NormalizedRaster(data, ch_min=r.ch_min, ch_max=r.ch_max, constant=r.constant)
    return Raster(data)


def downsample2(r: Raster) -> Raster:
    """2x2 block mean; trailing odd rows/columns average over the partial block."""
    if r.height < 2 or r.width < 2:
        raise RasterError("downsample2 needs height and width >= 2")
    x = r.data.astype(np.float64)
    h, w, _ = x.shape
    oh, ow = -(-h // 2), -(-w // 2)
    rows = np.add.reduceat(x, np.arange(0, h, 2), axis=0)
    sums = np.add.reduceat(rows, np.arange(0, w, 2), axis=1)
    nr = np.minimum(2, h - 2 * np.arange(oh))
    nc = np.minimum(2, w - 2 * np.arange(ow))
    return _rewrap(r, sums / (nr[:, None] * nc[None, :])[:, :, None])


def _interp_axis(n_src: int, n_dst: int):
    if n_src == 1:
        z = np.zeros(n_dst, dtype=np.intp)
        return z, z, np.zeros(n_dst)
    pos = np.arange(n_dst) * ((n_src - 1) / (n_dst - 1)) if n_dst > 1 else np.zeros(1)
    i0 = np.minimum(np.floor(pos).astype(np.intp), n_src - 2)
    return i0, i0 + 1, pos - i0


def upsample_bilinear(r: Raster, target_h: int, target_w: int) -> Raster:
    """Corner-aligned bilinear interpolation to a size at least the source size."""
    if target_h < r.height or target_w < r.width:
        raise RasterError("upsample_bilinear target must not be smaller than the source")
    x = r.data.astype(np.float64)
    r0, r1, fr = _interp_axis(r.height, target_h)
    c0, c1, fc = _interp_axis(r.width, target_w)
    fr = fr[:, None, None]
    fc = fc[None, :, None]
    top = x[r0][:, c0] * (1 - fc) + x[r0][:, c1] * fc
    bot = x[r1][:, c0] * (1 - fc) + x[r1][:, c1] * fc
    out = top * (1 - fr) + bot * fr
    lo, hi = x.min(axis=(0, 1)), x.max(axis=(0, 1))
    return _rewrap(r, np.clip(out, lo, hi))
