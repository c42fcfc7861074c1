import numpy as np
import pytest

from relitex import envlight, geometry, texture_field
from relitex.renderer import (MaterialGradients, camera_from_angles,
                              fit_distance, rasterize, shade, shade_backward)
from relitex.texture_field import (AdamState, BakedField, TextureField,
                                   bake_uv, load_checkpoint,
                                   load_material_maps, save_checkpoint,
                                   save_material_maps)

import oracles


@pytest.fixture(scope="module")
def field():
    return TextureField(seed=3)


def rand_points(n, rng, dtype=np.float32):
    return rng.uniform(-0.999, 0.999, (n, 3)).astype(dtype)


def smooth_random_field(seed):
    """Field with content concentrated at coarse levels, as optimization
    produces. Also moves ReLU pre-activations away from zero; the init
    field (1e-4 tables, zero biases) sits exactly on the kink where finite
    differences are meaningless."""
    f = TextureField(seed=seed)
    rng = np.random.default_rng(seed + 100)
    for l in range(f.levels):
        amp = 0.6 * (0.5 ** l)
        f.tables[l] = rng.uniform(-amp, amp,
                                  f.tables[l].shape).astype(np.float32)
    return f


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

def test_encode_shape_and_determinism(field):
    rng = np.random.default_rng(0)
    p = rand_points(40, rng)
    f1 = field.encode(p)
    f2 = field.encode(p)
    assert f1.shape == (40, 32)
    np.testing.assert_array_equal(f1, f2)


def test_encode_matches_reference(field):
    rng = np.random.default_rng(1)
    pts = rand_points(12, rng, dtype=np.float64)
    got = field.astype(np.float64).encode(pts)
    flat = field.tables.reshape(-1, field.features_per_level).astype(np.float64)
    for i, p in enumerate(pts):
        ref = oracles.hashgrid_encode_point(flat, p, field.levels,
                                            field.features_per_level,
                                            field.table_size,
                                            field.resolutions)
        np.testing.assert_allclose(got[i], ref, rtol=1e-10, atol=1e-14)


def test_encode_continuity(field):
    rng = np.random.default_rng(2)
    p = rand_points(300, rng, dtype=np.float64)
    delta = rng.standard_normal((300, 3))
    delta *= 1e-6 / np.linalg.norm(delta, axis=1, keepdims=True)
    f64 = field.astype(np.float64)
    a = f64.encode(p)
    b = f64.encode(p + delta)
    assert np.abs(a - b).max() < 1e-3


def test_encode_clamps_out_of_bounds(field):
    outside = np.array([[1.7, -2.0, 0.3], [5.0, 5.0, 5.0]], dtype=np.float32)
    clamped = np.clip(outside, -1.0, 1.0)
    np.testing.assert_array_equal(field.encode(outside), field.encode(clamped))


def test_encode_partition_of_unity():
    # constant rows per level: trilinear weights must sum to 1 exactly
    f = TextureField(seed=0)
    consts = np.linspace(-0.9, 0.9, f.levels, dtype=np.float32)
    for l, c in enumerate(consts):
        f.tables[l, :, 0] = c
        f.tables[l, :, 1] = -c
    rng = np.random.default_rng(3)
    feats = f.encode(rand_points(50, rng))
    per_level = feats.reshape(50, f.levels, 2)
    assert np.abs(per_level[..., 0] - consts[None, :]).max() < 1e-6
    assert np.abs(per_level[..., 1] + consts[None, :]).max() < 1e-6


def test_encode_bounded_by_tables(field):
    rng = np.random.default_rng(4)
    feats = field.encode(rand_points(200, rng))
    assert np.abs(feats).max() <= np.abs(field.tables).max() + 1e-7


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

def test_decode_zero_feature_is_midgray(field):
    out = field.decode(np.zeros((3, 32), dtype=np.float32))
    np.testing.assert_allclose(out.kc, 0.5, atol=1e-7)
    np.testing.assert_allclose(out.km, 0.5, atol=1e-7)
    np.testing.assert_allclose(out.kr, 0.5, atol=1e-7)
    np.testing.assert_array_equal(out.kn, 0.0)


def test_decode_sigmoid_range(field):
    rng = np.random.default_rng(5)
    feats = rng.standard_normal((500, 32)).astype(np.float32)
    out = field.decode(feats)
    for arr in (out.kc, out.km, out.kr):
        assert arr.min() > 0.0 and arr.max() < 1.0
    assert np.isfinite(out.kn).all()
    # extreme features saturate the float32 sigmoid but never leave [0, 1]
    big = field.decode(feats * 40.0)
    for arr in (big.kc, big.km, big.kr):
        assert arr.min() >= 0.0 and arr.max() <= 1.0


def test_decoder_weight_gradients_fd():
    f = smooth_random_field(6).astype(np.float64)
    rng = np.random.default_rng(6)
    pts = rand_points(64, rng, dtype=np.float64)
    g = MaterialGradients(kc=rng.standard_normal((64, 3)),
                          km=rng.standard_normal(64),
                          kr=rng.standard_normal(64),
                          kn=rng.standard_normal((64, 3)))

    def loss(fld):
        s = fld.query(pts)
        return float((s.kc * g.kc).sum() + (s.km * g.km).sum()
                     + (s.kr * g.kr).sum() + (s.kn * g.kn).sum())

    _, cache = f.query_cached(pts)
    grads = f.backward(cache, g)
    h = 1e-6
    for name in ("w1", "b1", "w2", "b2"):
        arr = getattr(f, name)
        an = getattr(grads, name)
        flat_idx = rng.choice(arr.size, size=min(30, arr.size), replace=False)
        for fi in flat_idx:
            ij = np.unravel_index(fi, arr.shape)
            fds = []
            for step in (h, 2 * h):
                orig = arr[ij]
                arr[ij] = orig + step
                up = loss(f)
                arr[ij] = orig - step
                dn = loss(f)
                arr[ij] = orig
                fds.append((up - dn) / (2 * step))
            assert oracles.fd_pass(np.array(an[ij]), np.array(fds[0]),
                                   np.array(fds[1]), rtol=1e-2, floor=1e-9), \
                (name, ij, an[ij], fds)


# ---------------------------------------------------------------------------
# Field backward
# ---------------------------------------------------------------------------

def test_backward_zero_upstream(field):
    rng = np.random.default_rng(7)
    pts = rand_points(20, rng)
    _, cache = field.query_cached(pts)
    zero = MaterialGradients(kc=np.zeros((20, 3), dtype=np.float32),
                             km=np.zeros(20, dtype=np.float32),
                             kr=np.zeros(20, dtype=np.float32),
                             kn=np.zeros((20, 3), dtype=np.float32))
    grads = field.backward(cache, zero)
    for _, arr in grads.items():
        np.testing.assert_array_equal(arr, 0.0)


def test_backward_single_point_touches_few_rows(field):
    rng = np.random.default_rng(8)
    pts = rand_points(1, rng)
    _, cache = field.query_cached(pts)
    g = MaterialGradients(kc=np.ones((1, 3), dtype=np.float32),
                          km=np.ones(1, dtype=np.float32),
                          kr=np.ones(1, dtype=np.float32),
                          kn=np.ones((1, 3), dtype=np.float32))
    grads = field.backward(cache, g)
    touched = np.any(grads.tables != 0.0, axis=2)
    assert touched.sum() <= 8 * field.levels
    # nonzero rows are exactly among the hashed corners of the query
    flat = touched.reshape(-1)
    nz = set(np.flatnonzero(flat).tolist())
    assert nz <= set(cache.indices.ravel().tolist())


def test_backward_count_mismatch(field):
    rng = np.random.default_rng(9)
    _, cache = field.query_cached(rand_points(4, rng))
    g = MaterialGradients(kc=np.ones((3, 3), dtype=np.float32),
                          km=np.ones(3, dtype=np.float32),
                          kr=np.ones(3, dtype=np.float32),
                          kn=np.ones((3, 3), dtype=np.float32))
    with pytest.raises(ValueError):
        field.backward(cache, g)


def test_backward_accumulates_duplicates(field):
    rng = np.random.default_rng(10)
    p = rand_points(1, rng)
    both = np.concatenate([p, p], axis=0)
    g1 = MaterialGradients(kc=np.full((1, 3), 0.3, dtype=np.float32),
                           km=np.full(1, -0.2, dtype=np.float32),
                           kr=np.full(1, 0.1, dtype=np.float32),
                           kn=np.full((1, 3), 0.05, dtype=np.float32))
    g2 = MaterialGradients(kc=np.tile(g1.kc, (2, 1)), km=np.tile(g1.km, 2),
                           kr=np.tile(g1.kr, 2), kn=np.tile(g1.kn, (2, 1)))
    _, c1 = field.query_cached(p)
    _, c2 = field.query_cached(both)
    one = field.backward(c1, g1)
    two = field.backward(c2, g2)
    np.testing.assert_allclose(two.tables, 2.0 * one.tables, rtol=1e-5,
                               atol=1e-10)


@pytest.fixture(scope="module")
def chain_scene():
    light = envlight.prefilter(envlight.procedural_studio_env(1))
    mesh = geometry.uv_sphere(rings=12, segments=24)
    fov = np.deg2rad(45.0)
    cam = camera_from_angles(0.4, 0.1, fit_distance(fov), fov, (32, 32))
    gb = rasterize(mesh, cam).astype(np.float64)
    return light, cam, gb


def test_full_chain_table_gradients_fd(chain_scene):
    # loss -> pixels -> shade -> decode -> encode -> hash tables, 64-bit
    light, cam, gb = chain_scene
    f = smooth_random_field(11).astype(np.float64)
    rng = np.random.default_rng(12)
    g = rng.standard_normal((gb.count, 3))

    def loss(fld):
        mats = fld.query(gb.position)
        img = shade(gb, mats, light, cam)
        return float((img.pixels[gb.mask] * g).sum())

    mats, cache = f.query_cached(gb.position)
    mat_grads = shade_backward(gb, mats, light, cam, g)
    grads = f.backward(cache, MaterialGradients(
        kc=mat_grads.kc, km=mat_grads.km, kr=mat_grads.kr, kn=mat_grads.kn))

    touched = np.argwhere(np.any(grads.tables != 0.0, axis=2))
    pick = touched[rng.choice(len(touched), size=100, replace=False)]
    h = 1e-6
    # difference quotients carry eps*|loss|/h of cancellation noise
    floor = 20.0 * np.finfo(np.float64).eps * abs(loss(f)) / h
    checked = 0
    for lv, row in pick:
        fcomp = rng.integers(0, f.features_per_level)
        an = grads.tables[lv, row, fcomp]
        fds = []
        for step in (h, 2 * h):
            orig = f.tables[lv, row, fcomp]
            f.tables[lv, row, fcomp] = orig + step
            up = loss(f)
            f.tables[lv, row, fcomp] = orig - step
            dn = loss(f)
            f.tables[lv, row, fcomp] = orig
            fds.append((up - dn) / (2 * step))
        assert oracles.fd_pass(np.array(an), np.array(fds[0]), np.array(fds[1]),
                               rtol=1e-5, floor=floor), \
            (lv, row, fcomp, an, fds)
        checked += 1
    assert checked == 100
    # untouched rows hold exactly zero
    untouched_mask = ~np.any(grads.tables != 0.0, axis=2)
    assert untouched_mask.any()
    np.testing.assert_array_equal(grads.tables[untouched_mask], 0.0)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def tiny_field():
    return TextureField(levels=2, table_size_log2=4, base_resolution=4,
                        finest_resolution=8, hidden=4, seed=0)


def zero_grads_like(field):
    return texture_field.FieldGradients(
        tables=np.zeros_like(field.tables), w1=np.zeros_like(field.w1),
        b1=np.zeros_like(field.b1), w2=np.zeros_like(field.w2),
        b2=np.zeros_like(field.b2))


def test_adam_zero_gradient_keeps_parameters():
    f = tiny_field()
    before = {k: v.copy() for k, v in f.parameters().items()}
    state = AdamState(f)
    for _ in range(3):
        state.step(f, zero_grads_like(f))
    for k, v in f.parameters().items():
        np.testing.assert_array_equal(v, before[k])


def test_adam_unit_step_property():
    f = tiny_field()
    state = AdamState(f, lr=0.01)
    g = zero_grads_like(f)
    g.b2 = np.full_like(f.b2, 0.37)
    prev = f.b2.copy()
    for step in range(1, 101):
        state.step(f, g)
        delta = np.abs(f.b2 - prev)
        # bias-corrected Adam takes (almost exactly) lr-sized steps under a
        # constant gradient, from the very first update
        np.testing.assert_allclose(delta, state.lr, rtol=0.05)
        prev = f.b2.copy()


def test_adam_matches_reference_sequence():
    f = tiny_field()
    state = AdamState(f)
    rng = np.random.default_rng(13)
    x0 = f.b2.astype(np.float64).copy()
    seq = [rng.standard_normal(f.b2.shape) for _ in range(40)]
    for gstep in seq:
        g = zero_grads_like(f)
        g.b2 = gstep.astype(np.float32)
        state.step(f, g)
    ref = oracles.adam_sequence(x0, seq)
    np.testing.assert_allclose(f.b2, ref, atol=2e-6)


def test_adam_quadratic_bowl_converges():
    f = tiny_field()
    target = np.array([0.3, -0.4, 0.1, 0.7, -0.2, 0.05, 0.6, -0.5],
                      dtype=np.float32)
    state = AdamState(f)
    for _ in range(500):
        g = zero_grads_like(f)
        g.b2 = 2.0 * (f.b2 - target)
        state.step(f, g)
    assert np.abs(f.b2 - target).max() < 1e-4


def test_adam_rejects_nan_gradients():
    f = tiny_field()
    state = AdamState(f)
    g = zero_grads_like(f)
    g.w1[0, 0] = np.nan
    with pytest.raises(FloatingPointError, match="w1"):
        state.step(f, g)
    g = zero_grads_like(f)
    g.tables[0, 0, 0] = np.inf
    with pytest.raises(FloatingPointError, match="tables"):
        state.step(f, g)


# ---------------------------------------------------------------------------
# UV baking
# ---------------------------------------------------------------------------

class ConstField:
    kc_val = (0.2, 0.4, 0.8)

    def query(self, points, uv=None):
        n = len(points)
        return texture_field.MaterialSample(
            kc=np.tile(np.float32(self.kc_val), (n, 1)),
            km=np.full(n, 0.3, dtype=np.float32),
            kr=np.full(n, 0.7, dtype=np.float32),
            kn=np.tile(np.float32((0.3, -0.2, 0.0)), (n, 1)))


def test_bake_constant_field(sphere_mesh):
    maps = bake_uv(sphere_mesh, ConstField(), 128)
    assert maps.mask.sum() > 0
    assert np.abs(maps.kc[maps.mask] - (0.2, 0.4, 0.8)).max() < 1e-6
    np.testing.assert_allclose(maps.km[maps.mask], 0.3, atol=1e-6)
    np.testing.assert_allclose(maps.kr[maps.mask], 0.7, atol=1e-6)
    local = np.array([0.5 * np.tanh(0.3), 0.5 * np.tanh(-0.2), 1.0])
    local /= np.linalg.norm(local)
    assert np.abs(maps.normal[maps.mask] - local).max() < 1e-5
    assert (np.linalg.norm(maps.normal[maps.mask], axis=1) > 0.999).all()


def test_bake_rejects_small_resolution(sphere_mesh):
    with pytest.raises(ValueError):
        bake_uv(sphere_mesh, ConstField(), 32)


def test_bake_dilation_ring():
    # one triangle in the middle of UV space, so the chart has margins
    from scipy import ndimage
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=np.float32)
    faces = np.array([[0, 1, 2]], dtype=np.int32)
    uvs = np.array([[0.3, 0.3], [0.7, 0.3], [0.3, 0.7]], dtype=np.float32)
    normals = np.tile(np.float32((0, 0, 1)), (3, 1))
    tangents = np.tile(np.float32((1, 0, 0)), (3, 1))
    mesh = geometry.Mesh(vertices=v, faces=faces, normals=normals,
                         tangents=tangents, uvs=uvs)
    maps = bake_uv(mesh, ConstField(), 128, dilation=4)
    dist = ndimage.distance_transform_edt(~maps.mask)
    ring = (~maps.mask) & (dist <= 4)
    far = (~maps.mask) & (dist > 4.5)
    assert ring.sum() > 0 and far.sum() > 0
    assert np.abs(maps.kc[ring] - (0.2, 0.4, 0.8)).max() < 1e-6
    # far texels keep defaults (black kc, neutral normal)
    np.testing.assert_array_equal(maps.kc[far], 0.0)
    assert np.abs(maps.normal[far] - (0.0, 0.0, 1.0)).max() == 0.0


def test_bake_overlap_warns():
    # two triangles covering the same UV square
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0],
                  [0, 0, 0.5], [1, 0, 0.5], [0, 1, 0.5]], dtype=np.float32)
    faces = np.array([[0, 1, 2], [3, 4, 5]], dtype=np.int32)
    uvs = np.array([[0.1, 0.1], [0.9, 0.1], [0.1, 0.9]] * 2, dtype=np.float32)
    normals = np.tile(np.float32((0, 0, 1)), (6, 1))
    tangents = np.tile(np.float32((1, 0, 0)), (6, 1))
    mesh = geometry.Mesh(vertices=v, faces=faces, normals=normals,
                         tangents=tangents, uvs=uvs)
    with pytest.warns(UserWarning, match="multiple charts"):
        bake_uv(mesh, ConstField(), 64)


def test_bake_roundtrip_psnr(sphere_mesh, studio_light):
    field = smooth_random_field(21)
    maps = bake_uv(sphere_mesh, field, 256)
    baked = BakedField(maps)
    fov = np.deg2rad(45.0)
    psnrs = []
    for az in (0.3, 2.1, 4.0):
        cam = camera_from_angles(az, 0.2, fit_distance(fov), fov, (128, 128))
        gb = rasterize(sphere_mesh, cam)
        direct = shade(gb, field.query(gb.position, uv=gb.uv), studio_light, cam)
        rebaked = shade(gb, baked.query(gb.position, uv=gb.uv), studio_light, cam)
        p = oracles.psnr(rebaked.pixels[gb.mask], direct.pixels[gb.mask],
                         peak=float(direct.pixels[gb.mask].max()))
        psnrs.append(p)
    assert min(psnrs) >= 30.0, psnrs


def test_baked_field_requires_uv():
    maps = bake_uv(geometry.uv_sphere(8, 16), ConstField(), 64)
    with pytest.raises(ValueError):
        BakedField(maps).query(np.zeros((2, 3), dtype=np.float32))


# ---------------------------------------------------------------------------
# Map export / checkpoints
# ---------------------------------------------------------------------------

def test_material_maps_roundtrip(tmp_path, sphere_mesh):
    field = smooth_random_field(22)
    maps = bake_uv(sphere_mesh, field, 128)
    paths = save_material_maps(tmp_path, maps)
    back = load_material_maps(paths)
    # kc goes through 8-bit sRGB; compare in encoded domain
    from relitex.imageops import srgb_encode
    np.testing.assert_allclose(srgb_encode(np.clip(back.kc, 0, 1)),
                               srgb_encode(np.clip(maps.kc, 0, 1)),
                               atol=0.5 / 255 + 1e-4)
    np.testing.assert_allclose(back.km, np.clip(maps.km, 0, 1), atol=0.5 / 255)
    np.testing.assert_allclose(back.kr, np.clip(maps.kr, 0, 1), atol=0.5 / 255)
    assert np.abs(back.normal - maps.normal).max() < 1e-3


def test_checkpoint_roundtrip(tmp_path):
    f = smooth_random_field(23)
    path = tmp_path / "field.ckpt"
    save_checkpoint(path, f)
    g = load_checkpoint(path)
    for (ka, va), (kb, vb) in zip(sorted(f.parameters().items()),
                                  sorted(g.parameters().items())):
        assert ka == kb
        np.testing.assert_array_equal(va, vb)
    # a reloaded field reproduces queries bit-exactly
    rng = np.random.default_rng(24)
    pts = rand_points(16, rng)
    a, b = f.query(pts), g.query(pts)
    np.testing.assert_array_equal(a.kc, b.kc)
    np.testing.assert_array_equal(a.kn, b.kn)


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(ValueError, match="not a field checkpoint"):
        load_checkpoint(bad)


def test_checkpoint_rejects_wrong_version(tmp_path):
    f = tiny_field()
    path = tmp_path / "v.ckpt"
    save_checkpoint(path, f)
    blob = bytearray(path.read_bytes())
    blob[4] = 99
    path.write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)
