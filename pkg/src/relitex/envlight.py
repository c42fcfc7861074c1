"""HDR environment lighting: RGBE I/O, lat-long sampling, split-sum precompute.

An EnvironmentLight is an equirectangular radiance map plus a lazy
rotation-about-up / intensity transform. PrefilteredLight carries the
split-sum products (cosine-convolved irradiance, GGX specular mip chain,
scale/bias BRDF table); because both convolution kernels are rotationally
symmetric about the lookup direction, the transform commutes with
prefiltering and is applied at lookup time. That keeps per-iteration
random lighting free of any re-convolution.

Diffuse convention: the irradiance map stores the plain cosine-weighted
integral of incident radiance WITHOUT a 1/pi factor, so a uniform unit
environment integrates to pi. Most engines fold 1/pi into the diffuse
BRDF; here the renderer's diffuse term is kc*(1-km)*irradiance directly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np


class HdrError(ValueError):
    """Raised for unreadable or invalid Radiance HDR input."""


# fixed specular chain layout: widths halve per mip starting here, floored
# so the widest lobes still get enough texels for faithful bilinear lookups
SPECULAR_BASE_WIDTH = 128
SPECULAR_MIN_WIDTH = 16
MIN_ROUGHNESS = 0.03

_IRRADIANCE_SAMPLES = 2048
_SPECULAR_SAMPLES = 1024
_LUT_SAMPLES = 1024


@dataclass
class EnvironmentLight:
    """Equirectangular linear-radiance map with a lazy rotation/intensity transform."""

    radiance: np.ndarray  # (H, W, 3) float32, W = 2*H
    rotation: float = 0.0
    intensity_scale: float = 1.0

    @property
    def width(self):
        return self.radiance.shape[1]

    @property
    def height(self):
        return self.radiance.shape[0]

    def validate(self):
        h, w = self.radiance.shape[:2]
        if w != 2 * h:
            raise HdrError(f"environment map must be 2:1, got {w}x{h}")
        if not np.all(np.isfinite(self.radiance)) or np.any(self.radiance < 0):
            raise HdrError("environment radiance must be finite and >= 0")
        if self.intensity_scale <= 0:
            raise ValueError("intensity_scale must be > 0")

    def sample_direction(self, dirs):
        """Radiance toward unit directions (N, 3) -> (N, 3), transform applied."""
        d = rotate_y(np.asarray(dirs), self.rotation)
        u, v = direction_to_uv(d)
        val, _, _ = _bilinear_panorama(self.radiance, u, v, d.dtype)
        return val * np.asarray(self.intensity_scale, dtype=d.dtype)


def transform_light(light: EnvironmentLight, rotation, scale) -> EnvironmentLight:
    """Compose an extra rotation (radians, about up) and intensity scale."""
    if scale <= 0:
        raise ValueError("scale must be > 0")
    return replace(light, rotation=light.rotation + float(rotation),
                   intensity_scale=light.intensity_scale * float(scale))


# ---------------------------------------------------------------------------
# Direction <-> lat-long mapping (up = +Y, azimuth measured from +X toward +Z)
# ---------------------------------------------------------------------------

def direction_to_uv(d):
    d = np.asarray(d)
    phi = np.arctan2(d[..., 2], d[..., 0])
    u = phi / (2.0 * np.pi) + 0.5
    v = np.arccos(np.clip(d[..., 1], -1.0, 1.0)) / np.pi
    return u, v


def uv_to_direction(u, v, dtype=np.float32):
    phi = (np.asarray(u, dtype=np.float64) - 0.5) * 2.0 * np.pi
    theta = np.asarray(v, dtype=np.float64) * np.pi
    st = np.sin(theta)
    d = np.stack([np.cos(phi) * st, np.cos(theta), np.sin(phi) * st], axis=-1)
    return d.astype(dtype)


def direction_to_uv_jac(d):
    """uv plus their 3-vector Jacobians; pole/seam rows get zero azimuth slope."""
    d = np.asarray(d)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    u, v = direction_to_uv(d)
    r2 = x * x + z * z
    safe = r2 > 1e-12
    inv = np.where(safe, 1.0 / np.where(safe, r2, 1.0), 0.0) / (2.0 * np.pi)
    du = np.stack([-z * inv, np.zeros_like(x), x * inv], axis=-1)
    sy = np.sqrt(np.maximum(1.0 - np.clip(y, -1.0, 1.0) ** 2, 1e-12))
    dv = np.zeros_like(du)
    dv[..., 1] = -1.0 / (np.pi * sy)
    return u, v, du, dv


def rotate_y(d, angle):
    d = np.asarray(d)
    c = np.cos(np.asarray(angle, dtype=d.dtype))
    s = np.sin(np.asarray(angle, dtype=d.dtype))
    out = np.empty_like(d)
    out[..., 0] = c * d[..., 0] + s * d[..., 2]
    out[..., 1] = d[..., 1]
    out[..., 2] = -s * d[..., 0] + c * d[..., 2]
    return out


def _rotation_y_matrix(angle, dtype):
    c, s = np.cos(angle), np.sin(angle)
    return np.asarray([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]], dtype=dtype)


def _bilinear_panorama(img, u, v, dtype):
    """Bilinear lat-long lookup: wrap in u, clamp in v.

    Returns value and the partials wrt (u, v) in per-unit-uv units.
    """
    h, w = img.shape[:2]
    x = u * w - 0.5
    y = v * h - 0.5
    x0f = np.floor(x)
    y0f = np.floor(y)
    fx = (x - x0f)[..., None].astype(dtype)
    fy = (y - y0f)[..., None].astype(dtype)
    x0 = (x0f.astype(np.int64)) % w
    x1 = (x0 + 1) % w
    y0 = np.clip(y0f.astype(np.int64), 0, h - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    c00 = img[y0, x0].astype(dtype, copy=False)
    c10 = img[y0, x1].astype(dtype, copy=False)
    c01 = img[y1, x0].astype(dtype, copy=False)
    c11 = img[y1, x1].astype(dtype, copy=False)
    top = c00 * (1 - fx) + c10 * fx
    bot = c01 * (1 - fx) + c11 * fx
    val = top * (1 - fy) + bot * fy
    dval_du = ((c10 - c00) * (1 - fy) + (c11 - c01) * fy) * w
    dval_dv = (bot - top) * h
    return val, dval_du, dval_dv


def sample_panorama(img, dirs):
    dirs = np.asarray(dirs)
    u, v = direction_to_uv(dirs)
    val, _, _ = _bilinear_panorama(img, u, v, dirs.dtype)
    return val


def sample_panorama_grad(img, dirs):
    """Lookup plus d(value)/d(direction) of shape (..., 3, 3): [channel, axis]."""
    dirs = np.asarray(dirs)
    u, v, du_dd, dv_dd = direction_to_uv_jac(dirs)
    val, dval_du, dval_dv = _bilinear_panorama(img, u, v, dirs.dtype)
    jac = (dval_du[..., :, None] * du_dd[..., None, :]
           + dval_dv[..., :, None] * dv_dd[..., None, :])
    return val, jac


# ---------------------------------------------------------------------------
# Radiance RGBE (.hdr) I/O
# ---------------------------------------------------------------------------

def _rgbe_to_float(rgbe):
    """Decode RGBE quads: value = mantissa * 2^(E-136), E=0 meaning black."""
    rgbe = np.asarray(rgbe, dtype=np.uint8)
    e = rgbe[..., 3].astype(np.int32)
    scale = np.where(e == 0, 0.0, np.ldexp(1.0, e - 136)).astype(np.float32)
    return rgbe[..., :3].astype(np.float32) * scale[..., None]


def _float_to_rgbe(rgb):
    rgb = np.asarray(rgb, dtype=np.float32)
    maxc = rgb.max(axis=-1)
    out = np.zeros(rgb.shape[:-1] + (4,), dtype=np.uint8)
    live = maxc >= 1e-32
    if np.any(live):
        m, e = np.frexp(maxc[live])
        scale = np.ldexp(1.0, 8 - e).astype(np.float32)  # = 2^(136 - (e+128))
        mant = np.clip(rgb[live] * scale[..., None], 0.0, 255.0)
        out[live, :3] = (mant + 0.5).astype(np.uint8)
        out[live, 3] = (e + 128).astype(np.uint8)
    return out


def load_hdr(path) -> EnvironmentLight:
    """Load a Radiance RGBE .hdr file (flat or new-RLE scanlines)."""
    if not os.path.isfile(path):
        raise HdrError(f"hdr file not found: {path}")
    with open(path, "rb") as f:
        blob = f.read()
    if not (blob.startswith(b"#?RADIANCE") or blob.startswith(b"#?RGBE")):
        raise HdrError(f"{path}: missing Radiance signature")
    # header: lines until the blank separator, then the resolution line
    try:
        head_end = blob.index(b"\n\n")
    except ValueError:
        raise HdrError(f"{path}: truncated header") from None
    res_end = blob.index(b"\n", head_end + 2)
    res_line = blob[head_end + 2:res_end].decode("ascii", "replace").split()
    if len(res_line) != 4 or res_line[0] != "-Y" or res_line[2] != "+X":
        raise HdrError(f"{path}: unsupported orientation {' '.join(res_line)}")
    height, width = int(res_line[1]), int(res_line[3])
    data = np.frombuffer(blob[res_end + 1:], dtype=np.uint8)

    rgbe = np.zeros((height, width, 4), dtype=np.uint8)
    pos = 0
    for row in range(height):
        if pos + 4 > len(data):
            raise HdrError(f"{path}: truncated pixel data at row {row}")
        head = data[pos:pos + 4]
        if head[0] == 2 and head[1] == 2 and (int(head[2]) << 8 | int(head[3])) == width:
            pos += 4
            for ch in range(4):
                x = 0
                while x < width:
                    if pos >= len(data):
                        raise HdrError(f"{path}: truncated RLE scanline")
                    count = int(data[pos])
                    pos += 1
                    if count > 128:  # run
                        run = count - 128
                        if pos >= len(data) or x + run > width:
                            raise HdrError(f"{path}: bad RLE run")
                        rgbe[row, x:x + run, ch] = data[pos]
                        pos += 1
                        x += run
                    else:  # literal
                        if pos + count > len(data) or x + count > width:
                            raise HdrError(f"{path}: bad RLE literal")
                        rgbe[row, x:x + count, ch] = data[pos:pos + count]
                        pos += count
                        x += count
        else:
            # flat quads (also covers the legacy repeat marker, rejected below)
            need = width * 4
            if pos + need > len(data):
                raise HdrError(f"{path}: truncated flat scanline")
            quads = data[pos:pos + need].reshape(width, 4)
            if np.any((quads[:, 0] == 1) & (quads[:, 1] == 1) & (quads[:, 2] == 1)):
                raise HdrError(f"{path}: legacy RLE scanlines not supported")
            rgbe[row] = quads
            pos += need

    radiance = _rgbe_to_float(rgbe)
    light = EnvironmentLight(radiance=radiance)
    light.validate()
    return light


def save_hdr(path, light_or_image):
    """Write a linear (H, W, 3) image as a flat (non-RLE) Radiance .hdr."""
    img = light_or_image.radiance if isinstance(light_or_image, EnvironmentLight) else light_or_image
    rgbe = _float_to_rgbe(img)
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n")
        f.write(f"-Y {h} +X {w}\n".encode("ascii"))
        f.write(rgbe.tobytes())


# ---------------------------------------------------------------------------
# Split-sum precomputation
# ---------------------------------------------------------------------------

def _hammersley(n):
    """Deterministic 2D low-discrepancy points (van der Corput base 2)."""
    i = np.arange(n, dtype=np.uint32)
    bits = i.copy()
    bits = (bits << np.uint32(16)) | (bits >> np.uint32(16))
    bits = ((bits & np.uint32(0x55555555)) << np.uint32(1)) | ((bits & np.uint32(0xAAAAAAAA)) >> np.uint32(1))
    bits = ((bits & np.uint32(0x33333333)) << np.uint32(2)) | ((bits & np.uint32(0xCCCCCCCC)) >> np.uint32(2))
    bits = ((bits & np.uint32(0x0F0F0F0F)) << np.uint32(4)) | ((bits & np.uint32(0xF0F0F0F0)) >> np.uint32(4))
    bits = ((bits & np.uint32(0x00FF00FF)) << np.uint32(8)) | ((bits & np.uint32(0xFF00FF00)) >> np.uint32(8))
    u2 = bits.astype(np.float64) * 2.3283064365386963e-10
    u1 = (i.astype(np.float64) + 0.5) / n
    return u1, u2


def _orthonormal_frames(n):
    """Tangent/bitangent frames around unit vectors n: (N, 3) each."""
    ref = np.where(np.abs(n[:, 1:2]) < 0.999,
                   np.array([0.0, 1.0, 0.0], dtype=n.dtype),
                   np.array([1.0, 0.0, 0.0], dtype=n.dtype))
    t = np.cross(ref, n)
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    b = np.cross(n, t)
    return t, b


def _panorama_texel_dirs(width, height, dtype=np.float64):
    us = (np.arange(width, dtype=np.float64) + 0.5) / width
    vs = (np.arange(height, dtype=np.float64) + 0.5) / height
    uu, vv = np.meshgrid(us, vs)
    return uv_to_direction(uu.ravel(), vv.ravel(), dtype=dtype)


def compute_irradiance(light: EnvironmentLight, out_res: int) -> np.ndarray:
    """Cosine-convolved irradiance map E(n) = integral Li(w)(w.n) dw.

    No 1/pi normalization: a uniform unit environment yields pi.
    Quasi-Monte Carlo with cosine-weighted Hammersley directions.
    """
    light.validate()
    w_out, h_out = out_res, out_res // 2
    normals = _panorama_texel_dirs(w_out, h_out)
    t, b = _orthonormal_frames(normals)
    u1, u2 = _hammersley(_IRRADIANCE_SAMPLES)
    r = np.sqrt(u1)
    phi = 2.0 * np.pi * u2
    lx, ly, lz = r * np.cos(phi), r * np.sin(phi), np.sqrt(np.maximum(1.0 - u1, 0.0))

    out = np.zeros((len(normals), 3), dtype=np.float64)
    chunk = 64  # texels per batch to bound the (texel, sample) matrix
    for s in range(0, len(normals), chunk):
        e = min(s + chunk, len(normals))
        dirs = (t[s:e, None, :] * lx[None, :, None]
                + b[s:e, None, :] * ly[None, :, None]
                + normals[s:e, None, :] * lz[None, :, None])
        vals = light.sample_direction(dirs.reshape(-1, 3)).reshape(e - s, -1, 3)
        out[s:e] = np.pi * vals.mean(axis=1)
    return out.reshape(h_out, w_out, 3).astype(np.float32)


def _ggx_half_vectors(alpha, count):
    """Hammersley GGX half-vector samples in the local +Z frame."""
    u1, u2 = _hammersley(count)
    cos_t = np.sqrt((1.0 - u1) / (1.0 + (alpha * alpha - 1.0) * u1))
    sin_t = np.sqrt(np.maximum(1.0 - cos_t * cos_t, 0.0))
    phi = 2.0 * np.pi * u2
    return np.stack([np.cos(phi) * sin_t, np.sin(phi) * sin_t, cos_t], axis=1)


def prefilter_specular(light: EnvironmentLight, mip_count: int):
    """GGX-convolved specular chain; mip k holds roughness k/(mip_count-1).

    Mip 0 (roughness 0, delta lobe) is a plain resample of the radiance.
    Uses the n = v = r collapse standard for split-sum prefiltering.
    """
    if mip_count < 2:
        raise ValueError("mip_count must be >= 2")
    light.validate()
    mips = []
    for k in range(mip_count):
        w = max(SPECULAR_BASE_WIDTH >> k, SPECULAR_MIN_WIDTH)
        h = w // 2
        dirs = _panorama_texel_dirs(w, h)
        if k == 0:
            vals = light.sample_direction(dirs)
            mips.append(np.asarray(vals, dtype=np.float32).reshape(h, w, 3))
            continue
        kr = k / (mip_count - 1)
        alpha = max(kr, MIN_ROUGHNESS) ** 2
        h_local = _ggx_half_vectors(alpha, _SPECULAR_SAMPLES)
        t, b = _orthonormal_frames(dirs)
        out = np.zeros((len(dirs), 3), dtype=np.float64)
        chunk = max(1, 2_000_000 // _SPECULAR_SAMPLES)
        for s in range(0, len(dirs), chunk):
            e = min(s + chunk, len(dirs))
            hw = (t[s:e, None, :] * h_local[None, :, 0, None]
                  + b[s:e, None, :] * h_local[None, :, 1, None]
                  + dirs[s:e, None, :] * h_local[None, :, 2, None])
            r_dot_h = np.einsum("tsd,td->ts", hw, dirs[s:e])
            l = 2.0 * r_dot_h[..., None] * hw - dirs[s:e, None, :]
            wgt = np.maximum(np.einsum("tsd,td->ts", l, dirs[s:e]), 0.0)
            li = light.sample_direction(l.reshape(-1, 3)).reshape(e - s, -1, 3)
            den = wgt.sum(axis=1)
            den = np.where(den > 0, den, 1.0)
            out[s:e] = (li * wgt[..., None]).sum(axis=1) / den[:, None]
        mips.append(out.reshape(h, w, 3).astype(np.float32))
    return mips


def _smith_lambda(cos_theta, alpha):
    c2 = np.clip(cos_theta, 1e-6, 1.0) ** 2
    tan2 = (1.0 - c2) / c2
    return 0.5 * (np.sqrt(1.0 + alpha * alpha * tan2) - 1.0)


def integrate_brdf_lut(res: int) -> np.ndarray:
    """Split-sum scale/bias table over (n.v, roughness), GGX importance sampled.

    Entry (A, B): specular = prefiltered_env(R, kr) * (F0*A + B).
    Layout: lut[row=roughness, col=cos_theta, 0:A 1:B], texel centers.
    """
    if res < 16:
        raise ValueError("res must be >= 16")
    cos_v = (np.arange(res, dtype=np.float64) + 0.5) / res
    rough = (np.arange(res, dtype=np.float64) + 0.5) / res
    lut = np.zeros((res, res, 2), dtype=np.float64)
    nv = np.clip(cos_v, 1e-4, 1.0)
    v = np.stack([np.sqrt(1.0 - nv * nv), np.zeros_like(nv), nv], axis=1)  # (C, 3)
    for i, r in enumerate(rough):
        alpha = max(r, MIN_ROUGHNESS) ** 2
        hvec = _ggx_half_vectors(alpha, _LUT_SAMPLES)  # (S, 3) around +Z
        v_dot_h = v @ hvec.T  # (C, S)
        l = 2.0 * v_dot_h[..., None] * hvec[None] - v[:, None, :]
        n_dot_l = l[..., 2]
        n_dot_h = np.clip(hvec[:, 2], 1e-6, 1.0)[None]
        ok = n_dot_l > 0
        g = 1.0 / (1.0 + _smith_lambda(nv[:, None], alpha) + _smith_lambda(n_dot_l, alpha))
        vh = np.clip(v_dot_h, 0.0, 1.0)
        g_vis = np.where(ok, g * vh / (n_dot_h * nv[:, None]), 0.0)
        fc = (1.0 - vh) ** 5
        lut[i, :, 0] = ((1.0 - fc) * g_vis).mean(axis=1)
        lut[i, :, 1] = (fc * g_vis).mean(axis=1)
    return lut.astype(np.float32)


@dataclass
class PrefilteredLight:
    """Split-sum products plus the lazy rotation/intensity transform.

    All lookups honor (rotation, intensity_scale); the BRDF table is
    geometry-only and unaffected by the transform.
    """

    irradiance: np.ndarray          # (h, w, 3)
    specular_mips: list             # [(h_k, w_k, 3)]
    brdf_lut: np.ndarray            # (res, res, 2)
    rotation: float = 0.0
    intensity_scale: float = 1.0

    @property
    def mip_count(self):
        return len(self.specular_mips)

    def with_transform(self, rotation, scale):
        if scale <= 0:
            raise ValueError("scale must be > 0")
        return replace(self, rotation=self.rotation + float(rotation),
                       intensity_scale=self.intensity_scale * float(scale))

    def _base_dirs(self, dirs):
        # positive rotation carries env features from +X toward +Z, the same
        # sense as camera azimuth, so rotating camera and light together
        # leaves an orbiting view of a symmetric object unchanged
        return rotate_y(np.asarray(dirs), self.rotation)

    def sample_irradiance(self, dirs):
        d = self._base_dirs(dirs)
        val = sample_panorama(self.irradiance, d)
        return val * np.asarray(self.intensity_scale, dtype=d.dtype)

    def sample_irradiance_grad(self, dirs):
        dirs = np.asarray(dirs)
        d = self._base_dirs(dirs)
        val, jac = sample_panorama_grad(self.irradiance, d)
        rot = _rotation_y_matrix(self.rotation, dirs.dtype)
        scale = np.asarray(self.intensity_scale, dtype=dirs.dtype)
        return val * scale, (jac @ rot) * scale

    def sample_specular(self, dirs, kr):
        val, _, _ = self.sample_specular_grad(dirs, kr)
        return val

    def sample_specular_grad(self, dirs, kr):
        """Reflection-lobe lookup: value, d/d(direction), d/d(kr)."""
        dirs = np.asarray(dirs)
        kr = np.asarray(kr, dtype=dirs.dtype)
        d = self._base_dirs(dirs)
        k_max = self.mip_count - 1
        mip_f = np.clip(kr, 0.0, 1.0) * k_max
        k0 = np.minimum(mip_f.astype(np.int64), k_max - 1)
        frac = (mip_f - k0)[..., None].astype(dirs.dtype)

        val0 = np.zeros(d.shape[:-1] + (3,), dtype=dirs.dtype)
        val1 = np.zeros_like(val0)
        jac0 = np.zeros(d.shape[:-1] + (3, 3), dtype=dirs.dtype)
        jac1 = np.zeros_like(jac0)
        for k in range(k_max):
            sel = k0 == k
            if not np.any(sel):
                continue
            v0, j0 = sample_panorama_grad(self.specular_mips[k], d[sel])
            v1, j1 = sample_panorama_grad(self.specular_mips[k + 1], d[sel])
            val0[sel], jac0[sel] = v0, j0
            val1[sel], jac1[sel] = v1, j1

        val = val0 * (1 - frac) + val1 * frac
        jac = jac0 * (1 - frac)[..., None] + jac1 * frac[..., None]
        inside = ((kr > 0.0) & (kr < 1.0)).astype(dirs.dtype)
        dval_dkr = (val1 - val0) * np.asarray(k_max, dtype=dirs.dtype) * inside[..., None]

        rot = _rotation_y_matrix(self.rotation, dirs.dtype)
        scale = np.asarray(self.intensity_scale, dtype=dirs.dtype)
        return val * scale, (jac @ rot) * scale, dval_dkr * scale

    def sample_brdf_grad(self, cos_theta, kr):
        """(A, B) lookup with partials wrt cos_theta and kr (clamped edges)."""
        dtype = np.asarray(cos_theta).dtype
        res = self.brdf_lut.shape[0]
        x = np.clip(np.asarray(cos_theta), 0.0, 1.0) * res - 0.5
        y = np.clip(np.asarray(kr), 0.0, 1.0) * res - 0.5
        x0 = np.clip(np.floor(x).astype(np.int64), 0, res - 1)
        y0 = np.clip(np.floor(y).astype(np.int64), 0, res - 1)
        x1 = np.minimum(x0 + 1, res - 1)
        y1 = np.minimum(y0 + 1, res - 1)
        fx = np.clip(x - x0, 0.0, 1.0)[..., None].astype(dtype)
        fy = np.clip(y - y0, 0.0, 1.0)[..., None].astype(dtype)
        c00 = self.brdf_lut[y0, x0].astype(dtype, copy=False)
        c10 = self.brdf_lut[y0, x1].astype(dtype, copy=False)
        c01 = self.brdf_lut[y1, x0].astype(dtype, copy=False)
        c11 = self.brdf_lut[y1, x1].astype(dtype, copy=False)
        top = c00 * (1 - fx) + c10 * fx
        bot = c01 * (1 - fx) + c11 * fx
        val = top * (1 - fy) + bot * fy
        interior_x = ((x > 0) & (x < res - 1)).astype(dtype)[..., None]
        interior_y = ((y > 0) & (y < res - 1)).astype(dtype)[..., None]
        dval_dcos = ((c10 - c00) * (1 - fy) + (c11 - c01) * fy) * res * interior_x
        dval_dkr = (bot - top) * res * interior_y
        return val, dval_dcos, dval_dkr


def prefilter(light: EnvironmentLight, mip_count=6, irradiance_res=32,
              lut_res=64, brdf_lut=None) -> PrefilteredLight:
    """Full split-sum precompute for one environment.

    The products are computed on the untransformed radiance; the light's
    rotation/intensity carry over as lookup-time parameters.
    """
    base = EnvironmentLight(radiance=light.radiance)
    if brdf_lut is None:
        brdf_lut = integrate_brdf_lut(lut_res)
    return PrefilteredLight(
        irradiance=compute_irradiance(base, irradiance_res),
        specular_mips=prefilter_specular(base, mip_count),
        brdf_lut=brdf_lut,
        rotation=light.rotation,
        intensity_scale=light.intensity_scale,
    )


# ---------------------------------------------------------------------------
# Lighting pools
# ---------------------------------------------------------------------------

def load_lighting_manifest(path):
    """Pool manifest: one `path [rotation_degrees]` per line, # comments."""
    if not os.path.isfile(path):
        raise HdrError(f"lighting manifest not found: {path}")
    base_dir = os.path.dirname(os.path.abspath(path))
    pool = []
    with open(path, "r", encoding="utf-8") as f:
        for raw in f:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.rsplit(maxsplit=1)
            rotation = 0.0
            hdr_path = line
            if len(parts) == 2:
                try:
                    rotation = np.deg2rad(float(parts[1]))
                    hdr_path = parts[0]
                except ValueError:
                    pass
            if not os.path.isabs(hdr_path):
                hdr_path = os.path.join(base_dir, hdr_path)
            light = load_hdr(hdr_path)
            pool.append(transform_light(light, rotation, 1.0))
    if not pool:
        raise HdrError(f"{path}: manifest lists no environments")
    return pool


def procedural_studio_env(index, width=128, ambient=0.08) -> EnvironmentLight:
    """Deterministic studio-style environment: directional key/fill lobes.

    Used as the built-in lighting pool when no manifest is supplied;
    directional enough that shading carries a clear lighting signature.
    """
    height = width // 2
    dirs = _panorama_texel_dirs(width, height).reshape(height, width, 3)
    rng = np.random.default_rng(np.random.SeedSequence([0x11BE, index]))
    radiance = np.full((height, width, 3), ambient, dtype=np.float64)
    n_lobes = 2 + index % 2
    for k in range(n_lobes):
        az = rng.uniform(0.0, 2.0 * np.pi)
        el = rng.uniform(np.deg2rad(15), np.deg2rad(65))
        axis = np.array([np.cos(az) * np.cos(el), np.sin(el), np.sin(az) * np.cos(el)])
        sharp = rng.uniform(30.0, 120.0) if k == 0 else rng.uniform(8.0, 25.0)
        power = rng.uniform(8.0, 16.0) if k == 0 else rng.uniform(1.5, 4.0)
        tint = 1.0 + 0.15 * rng.uniform(-1.0, 1.0, size=3)
        lobe = np.exp((dirs @ axis - 1.0) * sharp)
        radiance += power * lobe[..., None] * tint
    return EnvironmentLight(radiance=radiance.astype(np.float32))


def default_lighting_pool(count=6, width=128):
    return [procedural_studio_env(i, width=width) for i in range(count)]
