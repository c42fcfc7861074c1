"""Image utilities: color transforms, tone mapping, PNG/PFM I/O, resampling.

All in-memory images are numpy arrays of shape (H, W, C) or (H, W).
Linear radiance images are float arrays with values >= 0; display images
are float arrays in [0, 1] (tone-mapped + sRGB encoded).
"""

from __future__ import annotations

import struct
import zlib

import numpy as np
from PIL import Image

# Rec.709 luma weights, applied to display-space RGB.
LUMA_WEIGHTS = (0.2126, 0.7152, 0.0722)

_SRGB_CUT = 0.0031308
_SRGB_A = 1.055
_SRGB_G = 1.0 / 2.4


def srgb_encode(x):
    x = np.asarray(x)
    lo = 12.92 * x
    hi = _SRGB_A * np.power(np.maximum(x, _SRGB_CUT), _SRGB_G) - 0.055
    return np.where(x <= _SRGB_CUT, lo, hi)


def srgb_decode(x):
    x = np.asarray(x)
    lo = x / 12.92
    hi = np.power((np.maximum(x, 0.04045) + 0.055) / _SRGB_A, 2.4)
    return np.where(x <= 0.04045, lo, hi)


def srgb_encode_grad(x):
    """d srgb_encode / dx, piecewise like the encode itself."""
    x = np.asarray(x)
    hi = _SRGB_A * _SRGB_G * np.power(np.maximum(x, _SRGB_CUT), _SRGB_G - 1.0)
    return np.where(x <= _SRGB_CUT, np.asarray(12.92, dtype=x.dtype), hi)


def tonemap(x):
    """Reinhard x/(1+x), maps [0, inf) into [0, 1)."""
    x = np.maximum(np.asarray(x), 0.0)
    return x / (1.0 + x)


def tonemap_grad(x):
    x = np.maximum(np.asarray(x), 0.0)
    d = 1.0 + x
    return 1.0 / (d * d)


def to_display(linear):
    """Linear HDR radiance -> display image in [0, 1]."""
    return srgb_encode(tonemap(linear))


def to_display_grad(linear):
    """Derivative of to_display with respect to the linear input."""
    return srgb_encode_grad(tonemap(linear)) * tonemap_grad(linear)


def luminance(rgb):
    w = np.asarray(LUMA_WEIGHTS, dtype=rgb.dtype)
    return rgb @ w


def psnr(a, b, mask=None, peak=1.0):
    """PSNR in dB between two images; optional boolean pixel mask."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = (a - b) ** 2
    if mask is not None:
        d = d[mask]
    mse = float(np.mean(d))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def bilinear_resize(img, out_h, out_w):
    """Resize (H, W[, C]) float image with bilinear filtering, edge clamp."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0).astype(img.dtype)[:, None]
    fx = np.clip(xs - x0, 0.0, 1.0).astype(img.dtype)[None, :]
    if img.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


# ---------------------------------------------------------------------------
# PNG / PFM I/O
# ---------------------------------------------------------------------------

def save_png(path, img):
    """Write a float [0,1] (or uint8) image as an 8-bit PNG."""
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0)
        arr = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_png(path):
    """Read an 8-bit PNG as float in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    return arr.astype(np.float32) / 255.0


def save_png16(path, img):
    """Write a float [0,1] (H, W, 3) image as a 16-bit RGB PNG.

    Hand-rolled writer; Pillow cannot emit 16-bit RGB.
    """
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("save_png16 expects an (H, W, 3) image")
    h, w = arr.shape[:2]
    data = np.round(arr * 65535.0).astype(">u2")
    raw = bytearray()
    for row in data:
        raw.append(0)  # filter type: none
        raw += row.tobytes()

    def chunk(tag, payload):
        out = struct.pack(">I", len(payload)) + tag + payload
        return out + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF)

    ihdr = struct.pack(">IIBBBBB", w, h, 16, 2, 0, 0, 0)
    blob = (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr)
            + chunk(b"IDAT", zlib.compress(bytes(raw), 9)) + chunk(b"IEND", b""))
    with open(path, "wb") as f:
        f.write(blob)


def load_png16(path):
    """Read a 16-bit RGB PNG written by save_png16 (filters 0-4 supported)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != b"\x89PNG\r\n\x1a\n":
        raise ValueError("not a PNG file")
    pos = 8
    w = h = None
    idat = bytearray()
    while pos < len(blob):
        (length,) = struct.unpack_from(">I", blob, pos)
        tag = blob[pos + 4:pos + 8]
        payload = blob[pos + 8:pos + 8 + length]
        pos += 12 + length
        if tag == b"IHDR":
            w, h, depth, ctype = struct.unpack_from(">IIBB", payload)
            if depth != 16 or ctype != 2:
                raise ValueError("load_png16 supports 16-bit RGB only")
        elif tag == b"IDAT":
            idat += payload
        elif tag == b"IEND":
            break
    raw = zlib.decompress(bytes(idat))
    stride = w * 6
    out = np.zeros((h, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.uint8)
    pos = 0
    for y in range(h):
        ftype = raw[pos]
        line = np.frombuffer(raw, dtype=np.uint8, count=stride, offset=pos + 1).copy()
        pos += 1 + stride
        if ftype == 0:
            rec = line
        elif ftype == 2:  # up
            rec = (line.astype(np.int32) + prev) % 256
        else:
            # sub/average/paeth need byte-sequential reconstruction
            rec = np.zeros(stride, dtype=np.int32)
            bpp = 6
            for i in range(stride):
                a = rec[i - bpp] if i >= bpp else 0
                b = int(prev[i])
                c = int(prev[i - bpp]) if i >= bpp else 0
                if ftype == 1:
                    pred = a
                elif ftype == 3:
                    pred = (a + b) // 2
                elif ftype == 4:
                    p = a + b - c
                    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                    pred = a if (pa <= pb and pa <= pc) else (b if pb <= pc else c)
                else:
                    raise ValueError(f"unsupported PNG filter {ftype}")
                rec[i] = (int(line[i]) + pred) % 256
        out[y] = rec.astype(np.uint8)
        prev = out[y]
    pix = out.reshape(h, w, 3, 2)
    vals = (pix[..., 0].astype(np.uint32) << 8) | pix[..., 1]
    return vals.astype(np.float32) / 65535.0


def save_pfm(path, img):
    """Write a linear float image as PFM (little-endian, bottom-up rows)."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        header, data = b"Pf", arr
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header, data = b"PF", arr
    else:
        raise ValueError("PFM supports 1- or 3-channel images")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")  # negative scale marks little-endian
        f.write(np.flipud(data).astype("<f4").tobytes())


def load_pfm(path):
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise ValueError("not a PFM file")
        w, h = (int(t) for t in f.readline().split())
        scale = float(f.readline())
        count = w * h * (3 if header == b"PF" else 1)
        dt = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(), dtype=dt, count=count)
    shape = (h, w, 3) if header == b"PF" else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float32)
