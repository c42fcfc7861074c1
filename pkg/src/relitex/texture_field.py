"""Trainable material field: multi-resolution hash encoding + tiny decoder.

A 3D point in the unit box is encoded as 16 levels x 2 features of
trilinearly blended hash-table rows (32 values total), decoded by a
two-layer perceptron into (kc, km, kr, kn). Forward, analytic backward,
an Adam optimizer, UV-space baking to material maps, and a binary
checkpoint format all live here.

Gradients flow to the decoder weights and the touched hash rows only;
query positions are fixed geometry, so no position gradients exist.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse

from .renderer import MaterialGradients, MaterialSample

_HASH_PRIMES = (np.uint32(1), np.uint32(2654435761), np.uint32(805459861))
_CORNERS = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)],
                    dtype=np.int64)  # (8, 3)


def _level_resolutions(levels, base_res, finest_res):
    growth = np.exp((np.log(finest_res) - np.log(base_res)) / (levels - 1))
    return [int(np.floor(base_res * growth ** l)) for l in range(levels)]


def _hash_corners(corners, table_size):
    """Spatial hash of integer lattice corners (..., 3) -> table row index."""
    c = corners.astype(np.uint32)
    with np.errstate(over="ignore"):
        h = ((c[..., 0] * _HASH_PRIMES[0])
             ^ (c[..., 1] * _HASH_PRIMES[1])
             ^ (c[..., 2] * _HASH_PRIMES[2]))
    return (h & np.uint32(table_size - 1)).astype(np.int64)


@dataclass
class CornerPlan:
    """Precomputed table access pattern for a fixed point set.

    The trilinear gather is a sparse linear map from table rows to
    per-point features; its transpose is the gradient scatter. Building
    both once and reusing them beats rebuilding bincount scatters when
    the same pixels are rendered every iteration.
    """

    indices: np.ndarray    # (N, L, 8)
    weights: np.ndarray    # (N, L, 8)
    gather: scipy.sparse.csr_matrix  # (N*L, levels*table_size)


@dataclass
class FieldCache:
    """Forward-pass intermediates needed by backward."""

    indices: np.ndarray    # (N, L, 8) global rows into the stacked tables
    weights: np.ndarray    # (N, L, 8) trilinear weights
    feature: np.ndarray    # (N, 32)
    pre_hidden: np.ndarray  # (N, hidden) pre-activation
    hidden: np.ndarray     # (N, hidden)
    raw: np.ndarray        # (N, 8) decoder output before heads
    bounded: np.ndarray    # (N, 5) sigmoid outputs for kc/km/kr
    plan: CornerPlan | None = None


@dataclass
class FieldGradients:
    tables: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def items(self):
        return {"tables": self.tables, "w1": self.w1, "b1": self.b1,
                "w2": self.w2, "b2": self.b2}.items()


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class TextureField:
    """Hash-grid material field with hand-rolled forward/backward."""

    def __init__(self, levels=16, features_per_level=2, table_size_log2=19,
                 base_resolution=16, finest_resolution=2048, hidden=32, seed=0):
        self.levels = levels
        self.features_per_level = features_per_level
        self.table_size = 1 << table_size_log2
        self.base_resolution = base_resolution
        self.finest_resolution = finest_resolution
        self.hidden = hidden
        self.resolutions = _level_resolutions(levels, base_resolution, finest_resolution)
        self.feature_dim = levels * features_per_level

        rng = np.random.default_rng(np.random.SeedSequence([0xF1E1D, seed]))
        self.tables = rng.uniform(-1e-4, 1e-4,
                                  (levels, self.table_size, features_per_level)
                                  ).astype(np.float32)
        std1 = np.sqrt(2.0 / self.feature_dim)
        std2 = np.sqrt(2.0 / hidden)
        self.w1 = (rng.standard_normal((self.feature_dim, hidden)) * std1).astype(np.float32)
        self.b1 = np.zeros(hidden, dtype=np.float32)
        self.w2 = (rng.standard_normal((hidden, 8)) * std2).astype(np.float32)
        self.b2 = np.zeros(8, dtype=np.float32)

    # -- parameter plumbing ------------------------------------------------

    def parameters(self):
        return {"tables": self.tables, "w1": self.w1, "b1": self.b1,
                "w2": self.w2, "b2": self.b2}

    def astype(self, dtype):
        other = TextureField(self.levels, self.features_per_level,
                             int(np.log2(self.table_size)), self.base_resolution,
                             self.finest_resolution, self.hidden)
        other.tables = self.tables.astype(dtype)
        other.w1 = self.w1.astype(dtype)
        other.b1 = self.b1.astype(dtype)
        other.w2 = self.w2.astype(dtype)
        other.b2 = self.b2.astype(dtype)
        return other

    # -- encoding ----------------------------------------------------------

    def _corner_data(self, points):
        """Per level: global table rows (N, L, 8) and trilinear weights.

        Depends on the points alone, so callers rendering the same pixels
        every iteration can compute it once and pass it back in.
        """
        p = np.clip(np.asarray(points), -1.0, 1.0)
        n = p.shape[0]
        idx = np.empty((n, self.levels, 8), dtype=np.int64)
        wgt = np.empty((n, self.levels, 8), dtype=p.dtype)
        half = (p + 1.0) * 0.5
        for l, res in enumerate(self.resolutions):
            x = half * res
            c0 = np.minimum(np.floor(x), res - 1).astype(np.int64)
            f = (x - c0).astype(p.dtype)
            corners = c0[:, None, :] + _CORNERS[None, :, :]       # (N, 8, 3)
            idx[:, l, :] = _hash_corners(corners, self.table_size) + l * self.table_size
            # corner order is x-major (4x + 2y + z), matching _CORNERS
            fx = np.stack([1.0 - f[:, 0], f[:, 0]], axis=1)
            fy = np.stack([1.0 - f[:, 1], f[:, 1]], axis=1)
            fz = np.stack([1.0 - f[:, 2], f[:, 2]], axis=1)
            w = fx[:, :, None, None] * fy[:, None, :, None] * fz[:, None, None, :]
            wgt[:, l, :] = w.reshape(n, 8)
        return idx, wgt

    def _gather_matrix(self, idx, wgt):
        n = idx.shape[0]
        rows = np.repeat(np.arange(n * self.levels, dtype=np.int64), 8)
        return scipy.sparse.csr_matrix(
            (wgt.reshape(-1), (rows, idx.reshape(-1))),
            shape=(n * self.levels, self.levels * self.table_size))

    def corner_plan(self, points) -> CornerPlan:
        """Corner data plus the sparse gather operator, for reuse."""
        idx, wgt = self._corner_data(points)
        return CornerPlan(indices=idx, weights=wgt,
                          gather=self._gather_matrix(idx, wgt))

    def encode(self, points):
        """(N, 3) points in [-1, 1]^3 -> (N, 32) features."""
        feats, _, _ = self._encode_cached(points)
        return feats

    def _encode_cached(self, points, corners=None):
        flat = self.tables.reshape(-1, self.features_per_level)
        if isinstance(corners, CornerPlan):
            n = corners.indices.shape[0]
            feats = corners.gather @ flat
            return feats.reshape(n, self.feature_dim), corners.indices, corners.weights
        idx, wgt = self._corner_data(points) if corners is None else corners
        n = idx.shape[0]
        feats = np.zeros((n, self.levels, self.features_per_level),
                         dtype=np.result_type(wgt.dtype, flat.dtype))
        for k in range(8):  # corner-by-corner keeps the temporaries small
            feats += flat[idx[:, :, k]] * wgt[:, :, k, None]
        return feats.reshape(n, self.feature_dim), idx, wgt

    # -- decoding ----------------------------------------------------------

    def decode(self, feature):
        """(N, 32) features -> MaterialSample (sigmoid-bounded kc/km/kr)."""
        sample, _ = self._decode_cached(np.asarray(feature))
        return sample

    def _decode_cached(self, x):
        pre = x @ self.w1 + self.b1
        hid = np.maximum(pre, 0.0)
        raw = hid @ self.w2 + self.b2
        bounded = _sigmoid(raw[:, :5])
        sample = MaterialSample(kc=bounded[:, 0:3], km=bounded[:, 3],
                                kr=bounded[:, 4], kn=raw[:, 5:8])
        return sample, (pre, hid, raw, bounded)

    # -- full field --------------------------------------------------------

    def query(self, points, uv=None) -> MaterialSample:
        sample, _ = self.query_cached(points)
        return sample

    def query_cached(self, points, corners=None):
        feats, idx, wgt = self._encode_cached(points, corners=corners)
        sample, (pre, hid, raw, bounded) = self._decode_cached(feats)
        cache = FieldCache(indices=idx, weights=wgt, feature=feats,
                           pre_hidden=pre, hidden=hid, raw=raw, bounded=bounded,
                           plan=corners if isinstance(corners, CornerPlan) else None)
        return sample, cache

    def backward(self, cache: FieldCache, grads: MaterialGradients) -> FieldGradients:
        """Material-parameter gradients -> parameter gradients.

        Table accumulation goes through the transposed gather operator,
        so repeated corners from different query points sum correctly.
        """
        n = cache.feature.shape[0]
        if grads.kc.shape[0] != n:
            raise ValueError("gradient count does not match cached forward pass")
        dtype = cache.feature.dtype
        d_raw = np.empty((n, 8), dtype=dtype)
        sig = cache.bounded
        d_bounded = np.concatenate([grads.kc, grads.km[:, None], grads.kr[:, None]], axis=1)
        d_raw[:, :5] = d_bounded * sig * (1.0 - sig)
        d_raw[:, 5:8] = grads.kn

        d_w2 = cache.hidden.T @ d_raw
        d_b2 = d_raw.sum(axis=0)
        d_hid = d_raw @ self.w2.T
        d_pre = d_hid * (cache.pre_hidden > 0)
        d_w1 = cache.feature.T @ d_pre
        d_b1 = d_pre.sum(axis=0)
        d_feat = d_pre @ self.w1.T                                  # (N, 32)

        d_lv = d_feat.reshape(-1, self.features_per_level)
        gather = (cache.plan.gather if cache.plan is not None
                  else self._gather_matrix(cache.indices, cache.weights))
        # transpose of the gather operator; the csc view costs nothing
        d_tables = np.asarray(gather.T @ d_lv, dtype=dtype)
        return FieldGradients(
            tables=d_tables.reshape(self.tables.shape),
            w1=d_w1, b1=d_b1, w2=d_w2, b2=d_b2)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class AdamState:
    """Adam with bias correction (beta1=0.9, beta2=0.99, eps=1e-8)."""

    def __init__(self, field: TextureField, lr=0.01, beta1=0.9, beta2=0.99,
                 eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in field.parameters().items()}
        self.v = {k: np.zeros_like(v) for k, v in field.parameters().items()}

    def step(self, field: TextureField, grads: FieldGradients):
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                bad = int(np.size(g) - np.isfinite(g).sum())
                raise FloatingPointError(
                    f"non-finite gradient for '{name}' ({bad} elements)")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        params = field.parameters()
        for name, g in grads.items():
            m, v, p = self.m[name], self.v[name], params[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            denom = np.sqrt(v / bc2)
            denom += self.eps
            p -= (self.lr / bc1) * m / denom


# ---------------------------------------------------------------------------
# UV baking and baked-map rendering
# ---------------------------------------------------------------------------

@dataclass
class MaterialMaps:
    """Float-valued UV-space material maps plus texel coverage."""

    kc: np.ndarray       # (R, R, 3) linear color
    km: np.ndarray       # (R, R)
    kr: np.ndarray       # (R, R)
    normal: np.ndarray   # (R, R, 3) unit tangent-space normals, z > 0
    mask: np.ndarray     # (R, R) bool, pre-dilation coverage


def _rasterize_uv(mesh, resolution):
    """UV-space coverage: per-texel interpolated 3D position (last write wins)."""
    res = resolution
    uv = mesh.uvs[mesh.faces].astype(np.float64)      # (T, 3, 2)
    pts = uv * res - 0.5                              # texel-center coords
    pos3 = mesh.vertices[mesh.faces].astype(np.float64)

    position = np.zeros((res, res, 3))
    writes = np.zeros((res, res), dtype=np.int32)
    x0, y0 = pts[:, 0, 0], pts[:, 0, 1]
    x1, y1 = pts[:, 1, 0], pts[:, 1, 1]
    x2, y2 = pts[:, 2, 0], pts[:, 2, 1]
    area2 = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
    for t in range(len(pts)):
        if abs(area2[t]) < 1e-12:
            continue
        xmin = max(int(np.floor(min(x0[t], x1[t], x2[t]))), 0)
        xmax = min(int(np.ceil(max(x0[t], x1[t], x2[t]))) + 1, res)
        ymin = max(int(np.floor(min(y0[t], y1[t], y2[t]))), 0)
        ymax = min(int(np.ceil(max(y0[t], y1[t], y2[t]))) + 1, res)
        if xmin >= xmax or ymin >= ymax:
            continue
        ys, xs = np.mgrid[ymin:ymax, xmin:xmax]
        e0 = (x2[t] - x1[t]) * (ys - y1[t]) - (y2[t] - y1[t]) * (xs - x1[t])
        e1 = (x0[t] - x2[t]) * (ys - y2[t]) - (y0[t] - y2[t]) * (xs - x2[t])
        e2 = (x1[t] - x0[t]) * (ys - y0[t]) - (y1[t] - y0[t]) * (xs - x0[t])
        inv = 1.0 / area2[t]
        l0, l1, l2 = e0 * inv, e1 * inv, e2 * inv
        inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        if not inside.any():
            continue
        yy, xx = ys[inside], xs[inside]
        bary = np.stack([l0[inside], l1[inside], l2[inside]], axis=1)
        position[yy, xx] = bary @ pos3[t]
        writes[yy, xx] += 1
    if np.any(writes > 1):
        warnings.warn(f"{int((writes > 1).sum())} UV texels written by "
                      "multiple charts; last write wins", stacklevel=3)
    return position, writes > 0


def bake_uv(mesh, field, resolution: int, dilation=4) -> MaterialMaps:
    """Rasterize UV charts, query the field per texel, dilate chart seams."""
    if resolution < 64:
        raise ValueError("bake resolution must be >= 64")
    position, mask = _rasterize_uv(mesh, resolution)
    res = resolution
    kc = np.zeros((res, res, 3), dtype=np.float32)
    km = np.zeros((res, res), dtype=np.float32)
    kr = np.zeros((res, res), dtype=np.float32)
    normal = np.zeros((res, res, 3), dtype=np.float32)
    normal[..., 2] = 1.0
    if mask.any():
        sample = field.query(position[mask].astype(np.float32))
        kc[mask] = sample.kc
        km[mask] = sample.km
        kr[mask] = sample.kr
        local = np.stack([0.5 * np.tanh(sample.kn[:, 0]),
                          0.5 * np.tanh(sample.kn[:, 1]),
                          np.ones(len(sample), dtype=np.float32)], axis=1)
        normal[mask] = local / np.linalg.norm(local, axis=1, keepdims=True)

    if dilation > 0 and mask.any() and not mask.all():
        from scipy import ndimage
        dist, (iy, ix) = ndimage.distance_transform_edt(~mask, return_indices=True)
        ring = (~mask) & (dist <= dilation)
        kc[ring] = kc[iy[ring], ix[ring]]
        km[ring] = km[iy[ring], ix[ring]]
        kr[ring] = kr[iy[ring], ix[ring]]
        normal[ring] = normal[iy[ring], ix[ring]]
    return MaterialMaps(kc=kc, km=km, kr=kr, normal=normal, mask=mask)


class BakedField:
    """Field-compatible wrapper over baked maps; queries sample UV space."""

    def __init__(self, maps: MaterialMaps):
        self.maps = maps

    def query(self, points, uv=None) -> MaterialSample:
        if uv is None:
            raise ValueError("BakedField requires per-point uv coordinates")
        uv = np.asarray(uv)
        kc = _bilinear_uv(self.maps.kc, uv)
        km = _bilinear_uv(self.maps.km[..., None], uv)[:, 0]
        kr = _bilinear_uv(self.maps.kr[..., None], uv)[:, 0]
        nrm = _bilinear_uv(self.maps.normal, uv)
        z = np.maximum(nrm[:, 2], 1e-6)
        lim = 1.0 - 1e-6
        kn = np.zeros((len(z), 3), dtype=kc.dtype)
        kn[:, 0] = np.arctanh(np.clip(2.0 * nrm[:, 0] / z, -lim, lim))
        kn[:, 1] = np.arctanh(np.clip(2.0 * nrm[:, 1] / z, -lim, lim))
        return MaterialSample(kc=kc, km=km, kr=kr, kn=kn)


def _bilinear_uv(img, uv):
    """Clamped bilinear lookup of (R, R, C) maps at uv in [0,1]^2."""
    res_y, res_x = img.shape[:2]
    x = np.clip(uv[:, 0] * res_x - 0.5, 0.0, res_x - 1.0)
    y = np.clip(uv[:, 1] * res_y - 0.5, 0.0, res_y - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), res_x - 2)
    y0 = np.minimum(np.floor(y).astype(np.int64), res_y - 2)
    fx = (x - x0)[:, None].astype(uv.dtype)
    fy = (y - y0)[:, None].astype(uv.dtype)
    c00 = img[y0, x0]
    c10 = img[y0, x0 + 1]
    c01 = img[y0 + 1, x0]
    c11 = img[y0 + 1, x0 + 1]
    return ((c00 * (1 - fx) + c10 * fx) * (1 - fy)
            + (c01 * (1 - fx) + c11 * fx) * fy)


# ---------------------------------------------------------------------------
# Map export/import and checkpoints
# ---------------------------------------------------------------------------

def save_material_maps(out_dir, maps: MaterialMaps, prefix="material"):
    """PNG export: kc 8-bit sRGB, km/kr 8-bit linear gray, normal 16-bit RGB."""
    import os

    from .imageops import save_png, save_png16, srgb_encode

    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    paths["kc"] = os.path.join(out_dir, f"{prefix}_kc.png")
    save_png(paths["kc"], srgb_encode(np.clip(maps.kc, 0.0, 1.0)))
    paths["km"] = os.path.join(out_dir, f"{prefix}_km.png")
    save_png(paths["km"], np.clip(maps.km, 0.0, 1.0))
    paths["kr"] = os.path.join(out_dir, f"{prefix}_kr.png")
    save_png(paths["kr"], np.clip(maps.kr, 0.0, 1.0))
    paths["normal"] = os.path.join(out_dir, f"{prefix}_normal.png")
    save_png16(paths["normal"], np.clip((maps.normal + 1.0) * 0.5, 0.0, 1.0))
    return paths


def load_material_maps(paths) -> MaterialMaps:
    """Inverse of save_material_maps; mask is every texel (dilation included)."""
    from .imageops import load_png, load_png16, srgb_decode

    kc = srgb_decode(load_png(paths["kc"]))
    km = load_png(paths["km"])
    if km.ndim == 3:
        km = km[..., 0]
    kr = load_png(paths["kr"])
    if kr.ndim == 3:
        kr = kr[..., 0]
    normal = load_png16(paths["normal"]) * 2.0 - 1.0
    normal /= np.maximum(np.linalg.norm(normal, axis=-1, keepdims=True), 1e-6)
    mask = np.ones(km.shape, dtype=bool)
    return MaterialMaps(kc=kc.astype(np.float32), km=km.astype(np.float32),
                        kr=kr.astype(np.float32), normal=normal.astype(np.float32),
                        mask=mask)


_CKPT_MAGIC = b"RLTX"
_CKPT_VERSION = 1


def save_checkpoint(path, field: TextureField):
    """Little-endian binary: magic, version, entry table, float32 payloads."""
    params = field.parameters()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<II", _CKPT_VERSION, len(params)))
        for name, arr in params.items():
            nb = name.encode("ascii")
            f.write(struct.pack("<B", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        for arr in params.values():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> TextureField:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a field checkpoint")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    shapes = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<B", blob, off)
        off += 1
        name = blob[off:off + nlen].decode("ascii")
        off += nlen
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        shapes[name] = shape
    required = {"tables", "w1", "b1", "w2", "b2"}
    if set(shapes) != required:
        raise ValueError(f"{path}: checkpoint entries {sorted(shapes)} != expected")
    levels, table_size, feats = shapes["tables"]
    hidden = shapes["b1"][0]
    field = TextureField(levels=levels, features_per_level=feats,
                         table_size_log2=int(np.log2(table_size)), hidden=hidden)
    for name in shapes:
        n = int(np.prod(shapes[name]))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shapes[name])
        off += 4 * n
        setattr(field, name, arr.copy())
    return field
