"""Triangle mesh ingestion, derived tangent frames, and surface sampling.

Meshes are loaded from Wavefront OBJ (triangles with UVs required) and
normalized into the unit sphere so every downstream consumer works on a
bounded domain.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np


class MeshError(ValueError):
    """Raised for unusable input geometry (missing file, quads, no UVs)."""


@dataclass
class Mesh:
    """Triangle mesh with per-vertex normals, tangents and UVs.

    vertices: (V, 3) float32 positions, centered and scaled into the unit
    sphere. faces: (F, 3) int32 indices. normals/tangents: (V, 3) unit
    vectors, tangent orthogonal to normal. uvs: (V, 2) in [0, 1]^2.
    """

    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray
    tangents: np.ndarray
    uvs: np.ndarray

    def face_areas(self):
        p = self.vertices[self.faces]
        cross = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        return 0.5 * np.linalg.norm(cross, axis=1)

    def validate(self):
        if self.faces.min(initial=0) < 0 or self.faces.max(initial=-1) >= len(self.vertices):
            raise MeshError("face index out of range")
        for name, arr in (("normals", self.normals), ("tangents", self.tangents)):
            norms = np.linalg.norm(arr, axis=1)
            if not np.all(np.abs(norms - 1.0) < 1e-4):
                raise MeshError(f"{name} not unit length")
        if not np.all(np.abs(np.sum(self.normals * self.tangents, axis=1)) < 1e-3):
            raise MeshError("tangent not orthogonal to normal")
        if not np.all(np.isfinite(self.uvs)):
            raise MeshError("non-finite UVs")


@dataclass
class SurfacePoints:
    """Batch of points sampled on a mesh surface.

    Arrays are parallel: positions/normals/tangents (N, 3), uvs (N, 2),
    face_ids (N,), barycentric (N, 3).
    """

    positions: np.ndarray
    normals: np.ndarray
    tangents: np.ndarray
    uvs: np.ndarray
    face_ids: np.ndarray
    barycentric: np.ndarray

    def __len__(self):
        return len(self.positions)

    def tangent_frames(self):
        """(N, 3, 3) orthonormal bases with rows (tangent, bitangent, normal)."""
        b = np.cross(self.normals, self.tangents)
        b /= np.linalg.norm(b, axis=1, keepdims=True)
        return np.stack([self.tangents, b, self.normals], axis=1)


def _normalize_rows(v, fallback=None):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    bad = n[..., 0] < 1e-12
    n = np.where(n < 1e-12, 1.0, n)
    out = v / n
    if fallback is not None and np.any(bad):
        out[bad] = fallback[bad]
    return out


def _arbitrary_orthogonal(n):
    """A unit vector orthogonal to each row of n (used as tangent fallback)."""
    ref = np.zeros_like(n)
    # pick the axis least aligned with the normal
    idx = np.argmin(np.abs(n), axis=1)
    ref[np.arange(len(n)), idx] = 1.0
    t = ref - n * np.sum(ref * n, axis=1, keepdims=True)
    return _normalize_rows(t)


def compute_vertex_normals(vertices, faces):
    """Area-weighted vertex normals (cross products sum unnormalized)."""
    p = vertices[faces]
    fn = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    normals = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(normals, faces[:, k], fn)
    return _normalize_rows(normals, fallback=np.tile(np.array([0.0, 1.0, 0.0], dtype=vertices.dtype), (len(vertices), 1)))


def compute_tangents(vertices, faces, uvs, normals):
    """Per-vertex tangents from averaged per-face UV gradients (dP/dU),
    Gram-Schmidt orthogonalized against the normal.

    Faces with degenerate UVs contribute nothing; vertices left without a
    tangent get an arbitrary orthogonal direction.
    """
    p = vertices[faces]
    t = uvs[faces]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    d1 = t[:, 1] - t[:, 0]
    d2 = t[:, 2] - t[:, 0]
    det = d1[:, 0] * d2[:, 1] - d2[:, 0] * d1[:, 1]
    ok = np.abs(det) > 1e-12
    r = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tang_face = (e1 * d2[:, 1:2] - e2 * d1[:, 1:2]) * r[:, None]

    acc = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(acc, faces[:, k], tang_face)
    # Gram-Schmidt against the vertex normal
    acc = acc - normals * np.sum(acc * normals, axis=1, keepdims=True)
    lengths = np.linalg.norm(acc, axis=1)
    tangents = _normalize_rows(acc)
    weak = lengths < 1e-8
    if np.any(weak):
        tangents[weak] = _arbitrary_orthogonal(normals[weak])
    return tangents


def _parse_obj(path):
    positions, uvs, normals = [], [], []
    face_tuples = []
    with open(path, "r", encoding="utf-8", errors="replace") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                positions.append([float(x) for x in parts[1:4]])
            elif tag == "vt":
                uvs.append([float(x) for x in parts[1:3]])
            elif tag == "vn":
                normals.append([float(x) for x in parts[1:4]])
            elif tag == "f":
                refs = parts[1:]
                if len(refs) != 3:
                    raise MeshError(
                        f"{path}:{lineno}: non-triangulated face with {len(refs)} vertices")
                tri = []
                for ref in refs:
                    fields = ref.split("/")
                    vi = int(fields[0])
                    ti = int(fields[1]) if len(fields) > 1 and fields[1] else 0
                    ni = int(fields[2]) if len(fields) > 2 and fields[2] else 0
                    tri.append((vi, ti, ni))
                face_tuples.append(tri)
    return positions, uvs, normals, face_tuples


def load_mesh(path) -> Mesh:
    """Load a triangulated OBJ with UVs; center and scale into the unit sphere.

    Normals are taken from the file when every face references them,
    otherwise derived area-weighted. Tangents always derive from UV
    gradients.
    """
    if not os.path.isfile(path):
        raise MeshError(f"mesh file not found: {path}")
    positions, uvs, file_normals, face_tuples = _parse_obj(path)
    if not face_tuples:
        raise MeshError(f"{path}: no faces")

    def resolve(idx, count):
        if idx == 0:
            return -1
        return idx - 1 if idx > 0 else count + idx

    # split vertices per unique (position, uv, normal) reference triple
    remap = {}
    out_pos, out_uv, out_nrm = [], [], []
    faces = []
    has_all_normals = True
    for tri in face_tuples:
        face = []
        for (vi, ti, ni) in tri:
            key = (resolve(vi, len(positions)), resolve(ti, len(uvs)),
                   resolve(ni, len(file_normals)))
            if key[1] < 0:
                raise MeshError(f"{path}: face vertex without UV (baking requires UVs)")
            if key[2] < 0:
                has_all_normals = False
            if key not in remap:
                remap[key] = len(out_pos)
                out_pos.append(positions[key[0]])
                out_uv.append(uvs[key[1]])
                out_nrm.append(file_normals[key[2]] if key[2] >= 0 else (0.0, 0.0, 0.0))
            face.append(remap[key])
        faces.append(face)

    vertices = np.asarray(out_pos, dtype=np.float32)
    uv_arr = np.asarray(out_uv, dtype=np.float32)
    faces = np.asarray(faces, dtype=np.int32)

    # normalize into the unit sphere: bbox-center, max-radius 1
    center = 0.5 * (vertices.min(axis=0) + vertices.max(axis=0))
    vertices = vertices - center
    radius = np.linalg.norm(vertices, axis=1).max()
    if radius < 1e-12:
        raise MeshError(f"{path}: degenerate mesh (zero extent)")
    vertices = vertices / radius

    if has_all_normals:
        normals = _normalize_rows(np.asarray(out_nrm, dtype=np.float32))
    else:
        normals = compute_vertex_normals(vertices, faces)
    tangents = compute_tangents(vertices, faces, uv_arr, normals)

    mesh = Mesh(vertices=vertices, faces=faces, normals=normals,
                tangents=tangents, uvs=uv_arr)
    mesh.validate()
    return mesh


def save_obj(path, mesh: Mesh):
    """Write a Mesh back out as OBJ (v/vt/vn + f v/vt/vn)."""
    with open(path, "w", encoding="utf-8") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.8g} {v[1]:.8g} {v[2]:.8g}\n")
        for t in mesh.uvs:
            f.write(f"vt {t[0]:.8g} {t[1]:.8g}\n")
        for n in mesh.normals:
            f.write(f"vn {n[0]:.8g} {n[1]:.8g} {n[2]:.8g}\n")
        for face in mesh.faces:
            f.write("f " + " ".join(f"{i + 1}/{i + 1}/{i + 1}" for i in face) + "\n")


def sample_surface(mesh: Mesh, count: int, seed: int) -> SurfacePoints:
    """Sample `count` points area-uniformly on the mesh, deterministic per seed."""
    if count < 1:
        raise ValueError("count must be >= 1")
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise MeshError("degenerate mesh: zero total surface area")
    rng = np.random.default_rng(np.random.SeedSequence([0x5EED, seed & 0xFFFFFFFF]))
    probs = (areas / total).astype(np.float64)
    probs /= probs.sum()
    face_ids = rng.choice(len(areas), size=count, p=probs)
    u = rng.random(count)
    v = rng.random(count)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    bary = np.stack([1.0 - u - v, u, v], axis=1).astype(mesh.vertices.dtype)

    tri = mesh.faces[face_ids]
    positions = np.einsum("nk,nkd->nd", bary, mesh.vertices[tri])
    normals = _normalize_rows(np.einsum("nk,nkd->nd", bary, mesh.normals[tri]))
    tangents = np.einsum("nk,nkd->nd", bary, mesh.tangents[tri])
    tangents = tangents - normals * np.sum(tangents * normals, axis=1, keepdims=True)
    lengths = np.linalg.norm(tangents, axis=1)
    weak = lengths < 1e-8
    tangents = _normalize_rows(tangents)
    if np.any(weak):
        tangents[weak] = _arbitrary_orthogonal(normals[weak])
    uvs = np.einsum("nk,nkd->nd", bary, mesh.uvs[tri])
    return SurfacePoints(positions=positions, normals=normals, tangents=tangents,
                         uvs=uvs, face_ids=face_ids.astype(np.int32), barycentric=bary)


# ---------------------------------------------------------------------------
# Procedural primitives (demo + test geometry)
# ---------------------------------------------------------------------------

def uv_sphere(rings=32, segments=64, dtype=np.float32) -> Mesh:
    """Unit sphere with a standard lat-long UV layout.

    Pole rows are split per segment so faces never reference a degenerate
    UV; radius is exactly 1, matching the load_mesh normalization.
    """
    verts, norms, uvs = [], [], []
    for i in range(rings + 1):
        vfrac = i / rings
        theta = vfrac * np.pi
        for j in range(segments + 1):
            ufrac = j / segments
            phi = ufrac * 2.0 * np.pi
            d = (np.cos(phi) * np.sin(theta), np.cos(theta), np.sin(phi) * np.sin(theta))
            verts.append(d)
            norms.append(d)
            uvs.append((ufrac, vfrac))
    faces = []
    stride = segments + 1
    for i in range(rings):
        for j in range(segments):
            a = i * stride + j
            b = a + 1
            c = a + stride
            d = c + 1
            if i > 0:
                faces.append((a, b, c))
            if i < rings - 1:
                faces.append((b, d, c))
    vertices = np.asarray(verts, dtype=dtype)
    normals = np.asarray(norms, dtype=dtype)
    uv_arr = np.asarray(uvs, dtype=dtype)
    faces = np.asarray(faces, dtype=np.int32)
    tangents = compute_tangents(vertices, faces, uv_arr, normals)
    mesh = Mesh(vertices=vertices, faces=faces, normals=normals,
                tangents=tangents, uvs=uv_arr)
    mesh.validate()
    return mesh


def box(dtype=np.float32) -> Mesh:
    """Axis-aligned cube, 24 split vertices, cross-style UV atlas."""
    face_defs = [
        ((1, 0, 0), (0, 0, -1), (0, 1, 0)),
        ((-1, 0, 0), (0, 0, 1), (0, 1, 0)),
        ((0, 1, 0), (1, 0, 0), (0, 0, 1)),
        ((0, -1, 0), (1, 0, 0), (0, 0, -1)),
        ((0, 0, 1), (1, 0, 0), (0, 1, 0)),
        ((0, 0, -1), (-1, 0, 0), (0, 1, 0)),
    ]
    verts, norms, uvs, faces = [], [], [], []
    for fi, (n, t, b) in enumerate(face_defs):
        n, t, b = (np.asarray(x, dtype=np.float64) for x in (n, t, b))
        u0 = (fi % 3) / 3.0
        v0 = (fi // 3) / 2.0
        base = len(verts)
        for (su, sv) in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
            verts.append(n + su * t + sv * b)
            norms.append(n)
            uvs.append((u0 + (su * 0.5 + 0.5) * (1 / 3) * 0.98 + 0.003,
                        v0 + (sv * 0.5 + 0.5) * 0.5 * 0.98 + 0.005))
        faces.append((base, base + 1, base + 2))
        faces.append((base, base + 2, base + 3))
    vertices = np.asarray(verts, dtype=dtype)
    vertices /= np.linalg.norm(vertices, axis=1).max()
    normals = np.asarray(norms, dtype=dtype)
    uv_arr = np.asarray(uvs, dtype=dtype)
    faces = np.asarray(faces, dtype=np.int32)
    tangents = compute_tangents(vertices, faces, uv_arr, normals)
    mesh = Mesh(vertices=vertices, faces=faces, normals=normals,
                tangents=tangents, uvs=uv_arr)
    mesh.validate()
    return mesh
