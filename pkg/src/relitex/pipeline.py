"""Two-stage orchestration: reference generation, then SDS + recon optimization.

Stage 1 renders conditioning images for four canonical views, tiles them
into a 2x2 grid, and asks the backend for one reference image.

Stage 2 runs the iteration schedule: 50 warm-up reconstruction iterations
on the canonical views, then strict alternation recon / SDS. Every 4th
SDS iteration (starting with the first) revisits the canonical views as
a 2x2 grid; the rest draw 4 random cameras and a random pool light. The
noise level ramps t_max -> t_min and conditioning strength 1 -> 0,
both linear in the SDS iteration index.

All images exchanged with guidance, and both pixel losses, live in
display space (Reinhard tone map + sRGB); gradients are chained back
through that transform before shading backward.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field as dc_field, replace

import numpy as np
from scipy import ndimage

from . import envlight, guidance, imageops
from .geometry import Mesh, sample_surface
from .renderer import (Camera, GBuffer, MaterialGradients, camera_from_angles,
                       fit_distance, rasterize, shade, shade_backward)
from .texture_field import (AdamState, FieldGradients, MaterialMaps, TextureField,
                            bake_uv)

DEFAULT_FOV = np.deg2rad(45.0)
CANONICAL_AZIMUTHS = tuple(np.deg2rad(a) for a in (0.0, 90.0, 180.0, 270.0))
ELEVATION_RANGE = (np.deg2rad(-30.0), np.deg2rad(45.0))
LIGHT_SCALE_RANGE = (0.5, 1.5)
SNAPSHOT_EVERY = 50


# ---------------------------------------------------------------------------
# Configuration and plans
# ---------------------------------------------------------------------------

@dataclass
class OptimConfig:
    total_iterations: int = 400
    warmup_iterations: int = 50
    batch: int = 4
    lr: float = 0.01
    lambda_recon: float = 1000.0
    lambda_reg: float = 10.0
    t_max: float = 0.1
    t_min: float = 0.02
    cfg: float = 50.0
    reg_samples: int = 10000
    reg_epsilon: float = 0.01
    seed: int = 0

    def validate(self):
        if self.warmup_iterations >= self.total_iterations:
            raise ValueError("warmup_iterations must be < total_iterations")
        if not self.t_min < self.t_max:
            raise ValueError("t_min must be < t_max")
        for name in ("lr", "lambda_recon", "lambda_reg"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.batch != 4:
            raise ValueError("the canonical grid workflow requires batch=4")


@dataclass
class CanonicalSetup:
    cameras: list                      # 4 equator cameras
    light: envlight.PrefilteredLight   # L*

    def __post_init__(self):
        if len(self.cameras) != 4:
            raise ValueError("canonical setup needs exactly 4 cameras")


@dataclass
class ReferenceSet:
    grid_image: np.ndarray   # (2H, 2W, 3) display space
    views: list              # 4 tiles
    setup: CanonicalSetup


@dataclass
class IterationPlan:
    kind: str                 # warmup-recon | recon | sds-canonical | sds-random
    t: float = None
    s: float = None
    sds_index: int = None
    azimuths: np.ndarray = None      # sds-random: one per batch view
    elevations: np.ndarray = None
    light_index: int = None
    light_rotation: float = None
    light_scale: float = None


def canonical_setup(light, resolution, fov_y=DEFAULT_FOV, distance=None) -> CanonicalSetup:
    """Four equator cameras at 90-degree azimuth steps plus the fixed light."""
    if distance is None:
        distance = fit_distance(fov_y)
    cams = [camera_from_angles(az, 0.0, distance, fov_y, (resolution, resolution))
            for az in CANONICAL_AZIMUTHS]
    return CanonicalSetup(cameras=cams, light=light)


def prefilter_pool(lights, mip_count=6, irradiance_res=32, lut_res=64):
    """Prefilter every pool entry once, sharing one BRDF table."""
    lut = envlight.integrate_brdf_lut(lut_res)
    return [envlight.prefilter(l, mip_count=mip_count, irradiance_res=irradiance_res,
                               brdf_lut=lut) for l in lights]


# ---------------------------------------------------------------------------
# Stage 1
# ---------------------------------------------------------------------------

def stage1_reference(mesh, prompt, setup: CanonicalSetup, backend,
                     negative_prompt="", seed=0, gbuffers=None) -> ReferenceSet:
    """One generate call on the 2x2 canonical conditioning grid."""
    if gbuffers is None:
        gbuffers = [rasterize(mesh, cam) for cam in setup.cameras]
    conds = [guidance.conditioning_image(mesh, setup.light, cam, gbuffer=gb)
             for cam, gb in zip(setup.cameras, gbuffers)]
    grid = guidance.assemble_grid([c.channels for c in conds])
    request = guidance.GuidanceRequest(
        mode="generate", prompt=prompt, negative_prompt=negative_prompt,
        cond_image=grid, strength=1.0, seed=seed)
    response = backend(request)
    image = np.asarray(response.image, dtype=np.float32)
    if image.shape != grid.shape:
        raise guidance.BackendSchemaError(
            f"generate returned {image.shape}, conditioning grid is {grid.shape}")
    return ReferenceSet(grid_image=image, views=guidance.split_grid(image),
                        setup=setup)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

_PYR_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _blur(x):
    y = ndimage.convolve1d(x, _PYR_KERNEL, axis=0, mode="constant", cval=0.0)
    return ndimage.convolve1d(y, _PYR_KERNEL, axis=1, mode="constant", cval=0.0)


def _down2(x):
    return _blur(x)[::2, ::2]


def _down2_adjoint(g, shape):
    z = np.zeros(shape, dtype=g.dtype)
    z[::2, ::2] = g
    return _blur(z)  # symmetric kernel + zero padding: blur is self-adjoint


def recon_loss(image, ref, mask):
    """Display-space reconstruction: per-covered-pixel L2 plus a 3-level
    Gaussian-pyramid L1. Returns (loss, d loss/d image, parts)."""
    image = np.asarray(image)
    ref = np.asarray(ref)
    if image.shape != ref.shape:
        raise ValueError(f"shape mismatch {image.shape} vs {ref.shape}")
    diff = (image - ref).astype(np.float64)
    w = mask.astype(np.float64)[..., None]
    n_cov = max(float(mask.sum()), 1.0)

    l2 = float((w * diff * diff).sum() / (3.0 * n_cov))
    grad = (2.0 / (3.0 * n_cov)) * w * diff

    levels, weights = [diff], [w]
    for _ in range(2):
        levels.append(_down2(levels[-1]))
        weights.append(_down2(weights[-1]))
    perc = 0.0
    g_back = None
    for d, wl in zip(reversed(levels), reversed(weights)):
        denom = 3.0 * max(float(wl.sum()), 1.0)
        perc += float(np.abs(d).sum() / denom)
        g_here = np.sign(d) / denom
        g_back = g_here if g_back is None else g_here + _down2_adjoint(g_back, d.shape)
    grad += g_back
    total = l2 + perc
    return total, grad.astype(image.dtype), {"l2": l2, "pyramid_l1": perc}


def smoothness_reg(field: TextureField, mesh: Mesh, samples, epsilon, seed):
    """E|kc(p) - kc(p + d)| over surface points with tangent-plane ball
    perturbations; returns (loss, FieldGradients)."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    pts = sample_surface(mesh, samples, seed)
    rng = np.random.default_rng(np.random.SeedSequence([0x0DD5, seed]))
    u = rng.standard_normal((samples, 3))
    u /= np.maximum(np.linalg.norm(u, axis=1, keepdims=True), 1e-12)
    radius = epsilon * rng.uniform(0.0, 1.0, samples) ** (1.0 / 3.0)
    delta = (u * radius[:, None]).astype(np.float32)
    n = pts.normals
    delta -= n * np.sum(delta * n, axis=1, keepdims=True)

    s1, c1 = field.query_cached(pts.positions)
    s2, c2 = field.query_cached(pts.positions + delta)
    d = s1.kc - s2.kc
    loss = float(np.abs(d.astype(np.float64)).mean())
    up = (np.sign(d) / d.size).astype(s1.kc.dtype)
    zeros1 = np.zeros(samples, dtype=up.dtype)
    zeros3 = np.zeros((samples, 3), dtype=up.dtype)
    g1 = field.backward(c1, MaterialGradients(kc=up, km=zeros1, kr=zeros1, kn=zeros3))
    g2 = field.backward(c2, MaterialGradients(kc=-up, km=zeros1, kr=zeros1, kn=zeros3))
    _accumulate(g1, g2)
    return loss, g1


def _accumulate(dst: FieldGradients, src: FieldGradients, scale=1.0):
    for (_, a), (_, b) in zip(dst.items(), src.items()):
        if scale == 1.0:
            a += b
        else:
            a += scale * b


def _zero_gradients(field: TextureField) -> FieldGradients:
    return FieldGradients(**{k: np.zeros_like(v)
                             for k, v in field.parameters().items()})


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------

def sds_iteration_count(config: OptimConfig) -> int:
    return max((config.total_iterations - config.warmup_iterations) // 2, 0)


def schedule(iteration, config: OptimConfig, seed=None, pool_size=6) -> IterationPlan:
    """Pure iteration planning; random draws keyed by (seed, iteration)."""
    if not 0 <= iteration < config.total_iterations:
        raise ValueError(f"iteration {iteration} outside [0, {config.total_iterations})")
    if seed is None:
        seed = config.seed
    if iteration < config.warmup_iterations:
        return IterationPlan(kind="warmup-recon")
    idx = iteration - config.warmup_iterations
    if idx % 2 == 0:
        return IterationPlan(kind="recon")
    k = idx // 2
    n = sds_iteration_count(config)
    denom = max(n - 1, 1)
    t = config.t_max + (config.t_min - config.t_max) * (k / denom)
    s = 1.0 - k / denom
    if k % 4 == 0:
        return IterationPlan(kind="sds-canonical", t=t, s=s, sds_index=k)
    rng = np.random.default_rng([seed, iteration])
    azimuths = rng.uniform(0.0, 2.0 * np.pi, 4)
    elevations = rng.uniform(ELEVATION_RANGE[0], ELEVATION_RANGE[1], 4)
    light_index = int(rng.integers(pool_size))
    light_rotation = float(rng.uniform(0.0, 2.0 * np.pi))
    light_scale = float(rng.uniform(LIGHT_SCALE_RANGE[0], LIGHT_SCALE_RANGE[1]))
    return IterationPlan(kind="sds-random", t=t, s=s, sds_index=k,
                         azimuths=azimuths, elevations=elevations,
                         light_index=light_index, light_rotation=light_rotation,
                         light_scale=light_scale)


# ---------------------------------------------------------------------------
# Optimization loop
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    field: TextureField
    log_rows: list
    snapshots: dict = dc_field(default_factory=dict)


def _render_display(mesh, field, light, camera, gbuffer, corners=None):
    """Forward to display space, keeping intermediates for backward."""
    materials, cache = field.query_cached(gbuffer.position, corners=corners)
    image = shade(gbuffer, materials, light, camera)
    display = imageops.to_display(image.pixels)
    return image, display, materials, cache


def _backward_display(field, gbuffer, materials, cache, light, camera,
                      linear_pixels, g_display, accum, scale=1.0):
    """Chain display-space pixel gradients back to field parameters."""
    g_linear = np.asarray(g_display) * imageops.to_display_grad(linear_pixels)
    if scale != 1.0:
        g_linear = g_linear * scale
    mgrads = shade_backward(gbuffer, materials, light, camera, g_linear)
    _accumulate(accum, field.backward(cache, mgrads))


def optimize(mesh: Mesh, prompt, config: OptimConfig, backend, pool,
             refset: ReferenceSet, field: TextureField = None,
             negative_prompt="", out_dir=None, dump_snapshots=False,
             progress=None) -> RunResult:
    """Stage-2 loop. `pool` holds PrefilteredLight entries; pool[0] must be
    the canonical L*. Returns the trained field and the per-iteration log."""
    config.validate()
    setup = refset.setup
    if field is None:
        field = TextureField(seed=config.seed)
    adam = AdamState(field, lr=config.lr)
    gbuffers = [rasterize(mesh, cam) for cam in setup.cameras]
    # canonical pixels never move, so their hash-grid corners are reusable
    canon_corners = [field.corner_plan(gb.position) for gb in gbuffers]
    cond_cached = [guidance.conditioning_image(mesh, setup.light, cam, gbuffer=gb)
                   for cam, gb in zip(setup.cameras, gbuffers)]
    cond_grid = guidance.assemble_grid([c.channels for c in cond_cached])
    resolution = setup.cameras[0].resolution
    fov = setup.cameras[0].fov_y
    distance = float(np.linalg.norm(setup.cameras[0].position))

    rows = []
    snapshots = {}
    for it in range(config.total_iterations):
        plan = schedule(it, config, seed=config.seed, pool_size=len(pool))
        grads = _zero_gradients(field)
        loss_recon = 0.0
        loss_sds = 0.0
        status = "ok"

        if plan.kind in ("warmup-recon", "recon"):
            for cam, gb, crn, ref in zip(setup.cameras, gbuffers, canon_corners,
                                         refset.views):
                image, display, materials, cache = _render_display(
                    mesh, field, setup.light, cam, gb, corners=crn)
                part, g_disp, _ = recon_loss(display, ref, gb.mask)
                loss_recon += part / 4.0
                _backward_display(field, gb, materials, cache, setup.light, cam,
                                  image.pixels, g_disp, grads,
                                  scale=config.lambda_recon / 4.0)
        elif plan.kind == "sds-canonical":
            views = [_render_display(mesh, field, setup.light, cam, gb,
                                     corners=crn)
                     for cam, gb, crn in zip(setup.cameras, gbuffers,
                                             canon_corners)]
            grid = guidance.assemble_grid([v[1] for v in views])
            try:
                g_grid, loss_sds = guidance.sds_gradient(
                    grid, plan.t, cond_grid, prompt, plan.s, backend,
                    [config.seed, it], negative_prompt=negative_prompt,
                    cfg_scale=config.cfg, camera=None, light=setup.light)
                for (image, _, materials, cache), g_disp, cam, gb in zip(
                        views, guidance.split_grid(g_grid), setup.cameras, gbuffers):
                    _backward_display(field, gb, materials, cache, setup.light,
                                      cam, image.pixels, g_disp, grads)
            except guidance.GuidanceError:
                status = "skipped"
        else:  # sds-random
            light = pool[plan.light_index].with_transform(plan.light_rotation,
                                                          plan.light_scale)
            try:
                for view_idx in range(4):
                    cam = camera_from_angles(plan.azimuths[view_idx],
                                             plan.elevations[view_idx],
                                             distance, fov, resolution)
                    gb = rasterize(mesh, cam)
                    cond = guidance.conditioning_image(mesh, light, cam, gbuffer=gb)
                    # single-use plan still beats the bincount scatter
                    image, display, materials, cache = _render_display(
                        mesh, field, light, cam, gb,
                        corners=field.corner_plan(gb.position))
                    g_disp, part = guidance.sds_gradient(
                        display, plan.t, cond, prompt, plan.s, backend,
                        [config.seed, it, view_idx],
                        negative_prompt=negative_prompt, cfg_scale=config.cfg,
                        camera=cam, light=light)
                    loss_sds += part / 4.0
                    _backward_display(field, gb, materials, cache, light, cam,
                                      image.pixels, g_disp, grads)
            except guidance.GuidanceError:
                status = "skipped"
                grads = _zero_gradients(field)
                loss_sds = 0.0

        loss_reg, reg_grads = smoothness_reg(field, mesh, config.reg_samples,
                                             config.reg_epsilon,
                                             seed=config.seed * 1000003 + it)
        _accumulate(grads, reg_grads, scale=config.lambda_reg)
        total = (config.lambda_recon * loss_recon + loss_sds
                 + config.lambda_reg * loss_reg)
        if not np.isfinite(total):
            raise FloatingPointError(f"non-finite loss at iteration {it}: "
                                     f"recon={loss_recon} sds={loss_sds} reg={loss_reg}")
        if status == "ok":
            adam.step(field, grads)

        rows.append({
            "iteration": it, "kind": plan.kind,
            "t": "" if plan.t is None else f"{plan.t:.9g}",
            "s": "" if plan.s is None else f"{plan.s:.9g}",
            "total": f"{total:.9g}", "recon": f"{loss_recon:.9g}",
            "sds": f"{loss_sds:.9g}", "reg": f"{loss_reg:.9g}",
            "status": status,
        })
        if dump_snapshots and (it % SNAPSHOT_EVERY == 0
                               or it == config.total_iterations - 1):
            img = shade(gbuffers[0], field.query(gbuffers[0].position),
                        setup.light, setup.cameras[0])
            snapshots[it] = imageops.to_display(img.pixels)
            if out_dir is not None:
                os.makedirs(os.path.join(out_dir, "snapshots"), exist_ok=True)
                imageops.save_png(os.path.join(out_dir, "snapshots",
                                               f"iter_{it:04d}.png"),
                                  snapshots[it])
        if progress is not None:
            progress(it, plan, total)

    if out_dir is not None:
        write_run_log(os.path.join(out_dir, "run_log.csv"), rows)
    return RunResult(field=field, log_rows=rows, snapshots=snapshots)


def write_run_log(path, rows):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fields = ["iteration", "kind", "t", "s", "total", "recon", "sds", "reg",
              "status"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# Backprojection baseline
# ---------------------------------------------------------------------------

UNCOVERED_FILL = np.array([1.0, 0.0, 1.0], dtype=np.float32)  # magenta debug


def backproject_baseline(mesh: Mesh, refset: ReferenceSet,
                         resolution=256) -> MaterialMaps:
    """Assign each UV texel the reference color of the best-facing
    unoccluded canonical view; km=0, kr=1, neutral normals.

    Reference views are display-space; colors are linearized before
    storage so the maps share the renderer's kc convention. Lighting is
    deliberately NOT removed: this is the naive baseline that bakes
    shading into base color.
    """
    from .texture_field import _rasterize_uv

    position, mask = _rasterize_uv(mesh, resolution)
    # texel normals via nearest-face interpolation of the same rasterization
    normal_map = _rasterize_uv_attr(mesh, resolution, mesh.normals)

    kc = np.tile(UNCOVERED_FILL, (resolution, resolution, 1)).astype(np.float32)
    covered = np.zeros((resolution, resolution), dtype=bool)
    pts = position[mask].astype(np.float64)
    nrms = normal_map[mask]
    nrms /= np.maximum(np.linalg.norm(nrms, axis=1, keepdims=True), 1e-12)

    best_score = np.full(len(pts), -np.inf)
    best_color = np.zeros((len(pts), 3), dtype=np.float32)
    for cam, view in zip(refset.setup.cameras, refset.views):
        w, h = cam.resolution
        gb = rasterize(mesh, cam)
        depth_buf = np.full((h, w), np.inf, dtype=np.float64)
        depth_buf[gb.mask] = gb.depth
        # nearest-pixel depth is off by the local depth slope near the
        # silhouette; a 3x3 max makes the visibility test conservative the
        # permissive way, and the facing test still rejects back sides
        depth_buf = ndimage.grey_dilation(depth_buf, size=3, mode="nearest")
        px, py, z = cam.project(pts)
        xi = np.clip(px.astype(np.int64), 0, w - 1)
        yi = np.clip(py.astype(np.int64), 0, h - 1)
        in_frame = (px >= 0) & (px < w) & (py >= 0) & (py < h)
        unoccluded = z <= depth_buf[yi, xi] + 2e-2
        view_dir = cam.position[None, :] - pts
        view_dir /= np.maximum(np.linalg.norm(view_dir, axis=1, keepdims=True), 1e-12)
        facing = np.sum(nrms * view_dir, axis=1)
        ok = in_frame & unoccluded & (facing > 0)
        score = np.where(ok, facing, -np.inf)
        take = score > best_score
        if np.any(take):
            vy = np.clip(py[take], 0.0, h - 1.0)
            vx = np.clip(px[take], 0.0, w - 1.0)
            colors = _bilinear_image(np.asarray(view, dtype=np.float32), vx, vy)
            best_color[take] = colors
            best_score[take] = score[take]

    hit = np.isfinite(best_score)
    lin = imageops.srgb_decode(np.clip(best_color[hit], 0.0, 1.0))
    lin = np.clip(lin / np.maximum(1.0 - lin, 1e-3), 0.0, 1.0)  # invert x/(1+x)
    flat = np.zeros((len(pts), 3), dtype=np.float32)
    flat[hit] = lin.astype(np.float32)
    kc_masked = kc[mask]
    kc_masked[hit] = flat[hit]
    kc[mask] = kc_masked
    cov = covered.copy()
    cov[mask] = hit
    res = resolution
    normal = np.zeros((res, res, 3), dtype=np.float32)
    normal[..., 2] = 1.0
    return MaterialMaps(kc=kc, km=np.zeros((res, res), dtype=np.float32),
                        kr=np.ones((res, res), dtype=np.float32),
                        normal=normal, mask=cov)


def _rasterize_uv_attr(mesh, resolution, vertex_attr):
    """UV-space rasterization of an arbitrary per-vertex attribute."""
    from .texture_field import _rasterize_uv

    saved = mesh.vertices
    try:
        mesh.vertices = np.asarray(vertex_attr, dtype=np.float32)
        attr, _ = _rasterize_uv(mesh, resolution)
    finally:
        mesh.vertices = saved
    return attr.astype(np.float32)


def _bilinear_image(img, x, y):
    """Bilinear sample of (H, W, C) at float pixel coords (centers at +0.5)."""
    h, w = img.shape[:2]
    fx = np.clip(x - 0.5, 0.0, w - 1.0)
    fy = np.clip(y - 0.5, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(fx).astype(np.int64), w - 2)
    y0 = np.minimum(np.floor(fy).astype(np.int64), h - 2)
    ax = (fx - x0)[:, None]
    ay = (fy - y0)[:, None]
    return ((img[y0, x0] * (1 - ax) + img[y0, x0 + 1] * ax) * (1 - ay)
            + (img[y0 + 1, x0] * (1 - ax) + img[y0 + 1, x0 + 1] * ax) * ay)


# ---------------------------------------------------------------------------
# Turntable
# ---------------------------------------------------------------------------

def turntable(mesh, field, light, frames, resolution=256, fov_y=DEFAULT_FOV,
              elevation=0.0):
    """Render `frames` azimuth steps under a fixed light; returns display
    images."""
    if frames < 1:
        raise ValueError("frames must be >= 1")
    distance = fit_distance(fov_y)
    out = []
    for k in range(frames):
        az = 2.0 * np.pi * k / frames
        cam = camera_from_angles(az, elevation, distance, fov_y,
                                 (resolution, resolution))
        gb = rasterize(mesh, cam)
        img = shade(gb, field.query(gb.position, uv=gb.uv), light, cam)
        out.append(imageops.to_display(img.pixels))
    return out
