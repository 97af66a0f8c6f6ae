"""HDR/LDR image types, Radiance RGBE and PFM I/O, exposure simulation and culling."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

# Rec. 709 luma weights, used everywhere a scalar luminance is needed.
LUM_R, LUM_G, LUM_B = 0.2126, 0.7152, 0.0722

_RADIANCE_MAGIC = b"#?RADIANCE"
_RADIANCE_FORMAT = "32-bit_rle_rgbe"


class HdrIoError(Exception):
    """Base class for HDR container read/write failures."""


class MalformedHeaderError(HdrIoError):
    pass


class TruncatedScanlineError(HdrIoError):
    pass


class UnsupportedFormatError(HdrIoError):
    pass


class DegenerateImageError(Exception):
    """Raised when an operation needs dynamic range the image does not have."""


@dataclass(frozen=True)
class HdrImage:
    """Linear, scene-referred RGB raster (relative radiance, float32)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.ascontiguousarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected HxWx3 pixels, got shape {self.pixels.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("empty image")
        if not np.all(np.isfinite(px)):
            raise ValueError("HDR pixels must be finite")
        if px.min() < 0:
            raise ValueError("HDR pixels must be nonnegative")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def luminance(self) -> np.ndarray:
        return luminance(self.pixels)


@dataclass(frozen=True)
class LdrImage:
    """8-bit display-referred RGB raster with codes in [0, 255]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected HxWx3 pixels, got shape {self.pixels.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("empty image")
        if px.dtype != np.uint8:
            if not np.issubdtype(px.dtype, np.integer):
                raise ValueError("LDR pixels must be integer codes")
            if px.min() < 0 or px.max() > 255:
                raise ValueError("LDR codes must lie in [0, 255]")
            px = px.astype(np.uint8)
        object.__setattr__(self, "pixels", np.ascontiguousarray(px))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class ExposureMask:
    """Boolean maps of fully over- and fully under-exposed pixels.

    `over` marks pixels that are exactly (255,255,255), `under` exactly (0,0,0);
    the two sets are disjoint by construction.
    """

    over: np.ndarray
    under: np.ndarray

    def __post_init__(self):
        over = np.asarray(self.over, dtype=bool)
        under = np.asarray(self.under, dtype=bool)
        if over.shape != under.shape or over.ndim != 2:
            raise ValueError("over/under must be equal-shaped HxW boolean maps")
        if np.any(over & under):
            raise ValueError("over and under masks must be disjoint")
        object.__setattr__(self, "over", over)
        object.__setattr__(self, "under", under)

    def hallucinated(self) -> np.ndarray:
        return self.over | self.under


def luminance(pixels: np.ndarray) -> np.ndarray:
    px = np.asarray(pixels, dtype=np.float64)
    return LUM_R * px[..., 0] + LUM_G * px[..., 1] + LUM_B * px[..., 2]


def quantize_codes(values: np.ndarray) -> np.ndarray:
    """Map [0,1] reals to 8-bit codes, rounding half away from zero."""
    return np.floor(np.asarray(values) * 255.0 + 0.5).astype(np.uint8)


# ---------------------------------------------------------------------------
# Radiance RGBE codec
#
# Shared-exponent encoding: a pixel is four bytes (rm, gm, bm, e) decoding to
# channel = (mantissa + 0.5) / 256 * 2**(e - 128), with e == 0 meaning black.
# Written files use flat scanlines; reading accepts flat and new-style RLE.
# ---------------------------------------------------------------------------


def rgbe_decode(rgbe: np.ndarray) -> np.ndarray:
    """Decode (..., 4) uint8 RGBE samples to linear float32 RGB."""
    rgbe = np.asarray(rgbe, dtype=np.uint8)
    e = rgbe[..., 3].astype(np.int32)
    scale = np.ldexp(1.0, e - 136)  # 2**(e-128) / 256, exact in float64
    rgb = (rgbe[..., :3].astype(np.float64) + 0.5) * scale[..., None]
    rgb[e == 0] = 0.0
    return rgb.astype(np.float32)


def rgbe_encode(rgb: np.ndarray) -> np.ndarray:
    """Encode linear RGB to (..., 4) uint8 RGBE with a shared exponent."""
    rgb = np.asarray(rgb, dtype=np.float64)
    v = rgb.max(axis=-1)
    _, e = np.frexp(v)
    if np.any(e + 128 > 255):
        raise ValueError("radiance value too large for RGBE encoding")
    black = (v <= 0) | (e + 128 < 1)
    e = np.where(black, 0, e)
    scale = np.ldexp(1.0, -e + 8)  # 256 * 2**-e
    mant = np.floor(rgb * scale[..., None])
    out = np.empty(rgb.shape[:-1] + (4,), dtype=np.uint8)
    out[..., :3] = np.clip(mant, 0, 255)
    out[..., 3] = np.where(black, 0, e + 128)
    out[black, :3] = 0
    return out


def _read_header_line(f) -> bytes:
    line = bytearray()
    while True:
        c = f.read(1)
        if not c:
            raise MalformedHeaderError("unexpected end of file in header")
        if c == b"\n":
            return bytes(line)
        line += c
        if len(line) > 4096:
            raise MalformedHeaderError("header line too long")


def _read_radiance(f) -> HdrImage:
    magic = _read_header_line(f)
    if not magic.startswith(_RADIANCE_MAGIC):
        raise MalformedHeaderError(f"bad magic {magic!r}")
    fmt = None
    while True:
        line = _read_header_line(f)
        if line == b"":
            break
        if line.startswith(b"#"):
            continue
        if line.startswith(b"FORMAT="):
            fmt = line[len(b"FORMAT=") :].decode("ascii", "replace").strip()
    if fmt is not None and fmt != _RADIANCE_FORMAT:
        raise UnsupportedFormatError(f"unsupported FORMAT {fmt!r}")
    res = _read_header_line(f).decode("ascii", "replace").split()
    if len(res) != 4 or res[0] != "-Y" or res[2] != "+X":
        raise UnsupportedFormatError(f"unsupported resolution line {res!r}")
    try:
        height, width = int(res[1]), int(res[3])
    except ValueError as exc:
        raise MalformedHeaderError(f"bad resolution line {res!r}") from exc
    if height < 1 or width < 1:
        raise MalformedHeaderError("non-positive image dimensions")

    rows = np.empty((height, width, 4), dtype=np.uint8)
    for y in range(height):
        rows[y] = _read_rgbe_scanline(f, width)
    return HdrImage(rgbe_decode(rows))


def _read_rgbe_scanline(f, width: int) -> np.ndarray:
    head = f.read(4)
    if len(head) < 4:
        raise TruncatedScanlineError("missing scanline data")
    if (
        8 <= width <= 32767
        and head[0] == 2
        and head[1] == 2
        and (head[2] << 8 | head[3]) == width
    ):
        # New-style RLE: four separately run-length-coded component streams.
        line = np.empty((4, width), dtype=np.uint8)
        for comp in range(4):
            pos = 0
            while pos < width:
                c = f.read(1)
                if not c:
                    raise TruncatedScanlineError("RLE stream ended early")
                count = c[0]
                if count > 128:  # run of a repeated byte
                    count -= 128
                    value = f.read(1)
                    if not value or pos + count > width:
                        raise TruncatedScanlineError("bad RLE run")
                    line[comp, pos : pos + count] = value[0]
                else:  # literal span
                    if count == 0 or pos + count > width:
                        raise TruncatedScanlineError("bad RLE literal")
                    data = f.read(count)
                    if len(data) < count:
                        raise TruncatedScanlineError("RLE literal ended early")
                    line[comp, pos : pos + count] = np.frombuffer(data, np.uint8)
                pos += count
        return line.T
    # Flat scanline; the four bytes already read are the first pixel.
    rest = f.read(4 * width - 4)
    if len(rest) < 4 * width - 4:
        raise TruncatedScanlineError("flat scanline ended early")
    return np.frombuffer(head + rest, np.uint8).reshape(width, 4)


def _write_radiance(img: HdrImage, f) -> None:
    f.write(_RADIANCE_MAGIC + b"\n")
    f.write(f"FORMAT={_RADIANCE_FORMAT}\n".encode("ascii"))
    f.write(b"\n")
    f.write(f"-Y {img.height} +X {img.width}\n".encode("ascii"))
    f.write(rgbe_encode(img.pixels).tobytes())


# ---------------------------------------------------------------------------
# PFM (color, "PF")
# ---------------------------------------------------------------------------


def _read_pfm_token(f) -> bytes:
    tok = bytearray()
    while True:
        c = f.read(1)
        if not c:
            raise MalformedHeaderError("unexpected end of file in PFM header")
        if c in b" \t\r\n":
            if tok:
                return bytes(tok)
            continue
        tok += c


def _read_pfm(f) -> HdrImage:
    kind = _read_pfm_token(f)
    if kind == b"Pf":
        raise UnsupportedFormatError("grayscale PFM is not supported")
    if kind != b"PF":
        raise MalformedHeaderError(f"bad PFM identifier {kind!r}")
    try:
        width = int(_read_pfm_token(f))
        height = int(_read_pfm_token(f))
        scale = float(_read_pfm_token(f))
    except ValueError as exc:
        raise MalformedHeaderError("bad PFM dimensions or scale") from exc
    if width < 1 or height < 1 or scale == 0:
        raise MalformedHeaderError("bad PFM dimensions or scale")
    dtype = "<f4" if scale < 0 else ">f4"
    data = f.read(width * height * 3 * 4)
    if len(data) < width * height * 3 * 4:
        raise TruncatedScanlineError("PFM payload ended early")
    px = np.frombuffer(data, dtype).reshape(height, width, 3)
    return HdrImage(np.flipud(px).astype(np.float32))  # PFM rows are bottom-up


def _write_pfm(img: HdrImage, f) -> None:
    f.write(f"PF\n{img.width} {img.height}\n-1.0\n".encode("ascii"))
    f.write(np.flipud(img.pixels).astype("<f4").tobytes())


def read_hdr(path) -> HdrImage:
    """Read a linear HDR image from a Radiance (.hdr) or color PFM file.

    The container is sniffed from the file contents, not the extension.
    """
    with open(path, "rb") as f:
        sniff = f.read(2)
        f.seek(0)
        if sniff == b"#?":
            return _read_radiance(f)
        if sniff in (b"PF", b"Pf"):
            return _read_pfm(f)
        raise UnsupportedFormatError(f"unrecognized container in {os.fspath(path)!r}")


def write_hdr(img: HdrImage, path) -> None:
    """Write an HDR image; the container is chosen by extension (.hdr/.pic or .pfm)."""
    ext = os.path.splitext(os.fspath(path))[1].lower()
    with open(path, "wb") as f:
        if ext in (".hdr", ".pic", ".rgbe"):
            _write_radiance(img, f)
        elif ext == ".pfm":
            _write_pfm(img, f)
        else:
            raise UnsupportedFormatError(f"cannot choose container for {ext!r}")


# ---------------------------------------------------------------------------
# Exposure simulation and culling
# ---------------------------------------------------------------------------


def exposure_ldr(img: HdrImage, stops: float = 0.0, gamma: float = 2.2) -> LdrImage:
    """Simulate an 8-bit exposure: scale by 2**stops, gamma-encode, quantize."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    encoded = np.clip(np.power((2.0**stops) * img.pixels.astype(np.float64), 1.0 / gamma), 0.0, 1.0)
    return LdrImage(quantize_codes(encoded))


def optimal_stops(
    img: HdrImage,
    gamma: float = 2.2,
    search: tuple[float, float, float] = (-20.0, 20.0, 0.25),
) -> float:
    """Grid-search the exposure that maximizes the count of well-exposed pixels.

    A pixel counts as well exposed when every channel code lies strictly inside
    (0, 255). Ties resolve to the lowest exposure.
    """
    lo, hi, step = search
    best_stops, best_count = lo, -1
    for stops in np.arange(lo, hi + step / 2, step):
        codes = exposure_ldr(img, stops=float(stops), gamma=gamma).pixels
        count = int(np.all((codes > 0) & (codes < 255), axis=2).sum())
        if count > best_count:
            best_stops, best_count = float(stops), count
    return best_stops


def culling(img: HdrImage, fraction: float = 0.10, gamma: float = 2.2) -> LdrImage:
    """Clip away the top and bottom luminance fraction and re-expose to 8 bits.

    Thresholds are linear-interpolated percentiles of Rec. 709 luminance and are
    shared across channels, so clipping does not shift hue the way per-channel
    percentiles would. The clipped values are rescaled to [0,1], gamma-encoded
    and quantized, which saturates roughly `fraction` of the pixels at each end.
    """
    if not 0.0 < fraction < 0.5:
        raise ValueError("fraction must lie in (0, 0.5)")
    lum = luminance(img.pixels)
    lo, hi = np.percentile(lum, [fraction * 100.0, (1.0 - fraction) * 100.0])
    if not hi > lo:
        raise DegenerateImageError("luminance percentiles collapsed; image has no usable range")
    scaled = (np.clip(img.pixels.astype(np.float64), lo, hi) - lo) / (hi - lo)
    return LdrImage(quantize_codes(np.power(scaled, 1.0 / gamma)))


def make_mask(ldr: LdrImage) -> ExposureMask:
    """Mark pixels that are exactly (255,255,255) as over and (0,0,0) as under."""
    over = np.all(ldr.pixels == 255, axis=2)
    under = np.all(ldr.pixels == 0, axis=2)
    return ExposureMask(over=over, under=under)
