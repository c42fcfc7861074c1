"""Diffusion-prior plumbing: conditioning images, noising, SDS, backends.

Backends are stateless request -> response callables speaking an
image-space contract: renders go in tone-mapped and sRGB-encoded in
[0,1], predicted noise comes back at the same shape. A backend that
works in a latent space internally must hide that behind this surface.

The SDS gradient is w(t) * (eps_hat - eps) with w(t) = 1; no gradient
ever flows through a backend.
"""

from __future__ import annotations

import base64
import io
import json
from dataclasses import dataclass, field as dc_field

import numpy as np

from .imageops import bilinear_resize, luminance, to_display
from .renderer import constant_material, rasterize, shade

# (km, kr) per basis pass; base color is always white, bump always zero
BASIS_MATERIALS = ((0.0, 1.0), (0.5, 0.5), (1.0, 0.0))

DEFAULT_CFG_SCALE = 50.0
REQUEST_TIMEOUT = 120.0


class GuidanceError(RuntimeError):
    """Base for backend failures."""


class BackendUnreachableError(GuidanceError):
    pass


class BackendTimeoutError(GuidanceError):
    pass


class BackendSchemaError(GuidanceError):
    pass


# ---------------------------------------------------------------------------
# Conditioning images and view grids
# ---------------------------------------------------------------------------

@dataclass
class ConditioningImage:
    """Three basis-material renders stacked as channels, display-encoded."""

    channels: np.ndarray   # (H, W, 3) in [0, 1]
    camera: object = None
    light: object = None


def conditioning_image(mesh, light, camera, gbuffer=None) -> ConditioningImage:
    """Shading-based conditioning: one luminance channel per basis material.

    `light` must be a PrefilteredLight; pass a cached gbuffer to reuse
    rasterization across the three passes and the main render.
    """
    if gbuffer is None:
        gbuffer = rasterize(mesh, camera)
    channels = []
    for km, kr in BASIS_MATERIALS:
        mat = constant_material(gbuffer.count, kc=(1.0, 1.0, 1.0), km=km, kr=kr)
        img = shade(gbuffer, mat, light, camera)
        channels.append(luminance(to_display(img.pixels)))
    stacked = np.stack(channels, axis=-1).astype(np.float32)
    return ConditioningImage(channels=stacked, camera=camera, light=light)


def assemble_grid(views):
    """Four same-shaped images -> one 2x2 row-major tiling."""
    if len(views) != 4:
        raise ValueError(f"need exactly 4 views, got {len(views)}")
    views = [np.asarray(v) for v in views]
    if any(v.shape != views[0].shape for v in views[1:]):
        raise ValueError("grid tiles must share one shape")
    top = np.concatenate([views[0], views[1]], axis=1)
    bottom = np.concatenate([views[2], views[3]], axis=1)
    return np.concatenate([top, bottom], axis=0)


def split_grid(grid):
    """Exact inverse of assemble_grid."""
    grid = np.asarray(grid)
    h, w = grid.shape[:2]
    if h % 2 or w % 2:
        raise ValueError(f"grid dims must be even, got {w}x{h}")
    hh, hw = h // 2, w // 2
    return [grid[:hh, :hw], grid[:hh, hw:], grid[hh:, :hw], grid[hh:, hw:]]


# ---------------------------------------------------------------------------
# Noise schedule
# ---------------------------------------------------------------------------

def alpha_bar(t):
    """Cosine signal-retention schedule: 1 at t=0, 0 at t=1."""
    t = np.asarray(t, dtype=np.float64)
    return np.cos(0.5 * np.pi * t) ** 2


def add_noise(x, t, epsilon):
    """Forward diffusion x_t = sqrt(ab)*x + sqrt(1-ab)*eps."""
    if not 0.0 <= float(t) <= 1.0:
        raise ValueError(f"noise level t must be in [0,1], got {t}")
    x = np.asarray(x)
    ab = alpha_bar(t)
    return (np.sqrt(ab) * x + np.sqrt(1.0 - ab) * np.asarray(epsilon)).astype(x.dtype)


# ---------------------------------------------------------------------------
# Requests / responses
# ---------------------------------------------------------------------------

@dataclass
class GuidanceRequest:
    mode: str                       # "generate" | "score"
    prompt: str
    negative_prompt: str = ""
    cond_image: np.ndarray = None   # (H, W, 3) in [0,1]
    noisy_image: np.ndarray = None  # score mode only
    t: float = None                 # score mode only
    strength: float = 1.0
    cfg_scale: float = DEFAULT_CFG_SCALE
    seed: int = 0
    # in-process context (never serialized): lets oracle stubs synthesize a
    # matching target for arbitrary viewpoints; remote backends never see it
    camera: object = dc_field(default=None, compare=False)
    light: object = dc_field(default=None, compare=False)
    rng_seed: object = dc_field(default=None, compare=False)

    def validate(self):
        if self.mode not in ("generate", "score"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError(f"strength must be in [0,1], got {self.strength}")
        if self.mode == "score":
            if self.noisy_image is None or self.t is None:
                raise ValueError("score mode requires noisy_image and t")
            if not 0.0 <= self.t <= 1.0:
                raise ValueError(f"t must be in [0,1], got {self.t}")


@dataclass
class GuidanceResponse:
    image: np.ndarray = None     # generate mode
    epsilon: np.ndarray = None   # score mode


# ---------------------------------------------------------------------------
# Wire serialization (HTTP+JSON; images as base64 PNG, arrays as raw f32)
# ---------------------------------------------------------------------------

def encode_png_b64(img):
    """Float [0,1] (H, W, 3) -> base64 of an 8-bit PNG."""
    from PIL import Image

    arr = (np.clip(np.asarray(img), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png_b64(data):
    from PIL import Image

    buf = io.BytesIO(base64.b64decode(data))
    arr = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32)
    return arr / 255.0


def encode_array_b64(arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return {"shape": list(arr.shape), "dtype": "float32",
            "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def decode_array_b64(obj):
    try:
        shape = tuple(int(s) for s in obj["shape"])
        if obj.get("dtype", "float32") != "float32":
            raise KeyError("dtype")
        raw = base64.b64decode(obj["data"])
        arr = np.frombuffer(raw, dtype="<f4")
        return arr.reshape(shape).astype(np.float32)
    except (KeyError, TypeError, ValueError) as exc:
        raise BackendSchemaError(f"malformed float array payload: {exc}") from exc


def request_to_wire(request: GuidanceRequest) -> dict:
    request.validate()
    body = {
        "mode": request.mode,
        "prompt": request.prompt,
        "negative_prompt": request.negative_prompt,
        "cond_image": {"format": "png", "data": encode_png_b64(request.cond_image)},
        "noisy_image": None,
        "t": None,
        "strength": float(request.strength),
        "cfg_scale": float(request.cfg_scale),
        "seed": int(request.seed),
    }
    if request.mode == "score":
        body["noisy_image"] = encode_array_b64(request.noisy_image)
        body["t"] = float(request.t)
    return body


def response_from_wire(mode, body: dict) -> GuidanceResponse:
    if mode == "generate":
        if "image" not in body or "data" not in body.get("image", {}):
            raise BackendSchemaError("generate response missing image payload")
        try:
            img = decode_png_b64(body["image"]["data"])
        except Exception as exc:
            raise BackendSchemaError(f"undecodable image payload: {exc}") from exc
        return GuidanceResponse(image=img)
    if "epsilon" not in body:
        raise BackendSchemaError("score response missing epsilon payload")
    return GuidanceResponse(epsilon=decode_array_b64(body["epsilon"]))


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------

class StubBackend:
    """Deterministic in-process stand-in for the diffusion service.

    Models the data distribution as a delta at a target image mu, whose
    exact noise prediction is eps_hat = (x_t - sqrt(ab)*mu)/sqrt(1-ab):
    the SDS gradient then pushes renders straight toward mu, which makes
    end-to-end optimization testable without any model.

    Target resolution order: `target_provider(request)` if given, else the
    fixed `target`, else the request's own conditioning image (echo mode,
    the default for offline CLI runs).
    """

    def __init__(self, target=None, target_provider=None):
        self.target = None if target is None else np.asarray(target, dtype=np.float32)
        self.target_provider = target_provider

    def _mu(self, request, shape):
        if self.target_provider is not None:
            mu = np.asarray(self.target_provider(request), dtype=np.float32)
        elif self.target is not None:
            mu = self.target
        else:
            mu = np.asarray(request.cond_image, dtype=np.float32)
        if mu.shape != tuple(shape):
            mu = bilinear_resize(mu, shape[0], shape[1])
        return mu

    def __call__(self, request: GuidanceRequest) -> GuidanceResponse:
        request.validate()
        if request.mode == "generate":
            shape = np.asarray(request.cond_image).shape
            return GuidanceResponse(image=self._mu(request, shape).copy())
        x_t = np.asarray(request.noisy_image, dtype=np.float32)
        mu = self._mu(request, x_t.shape)
        ab = alpha_bar(request.t)
        eps_hat = (x_t - np.sqrt(ab) * mu) / np.sqrt(max(1.0 - ab, 1e-12))
        return GuidanceResponse(epsilon=eps_hat.astype(np.float32))


class IdentityNoiseBackend:
    """Returns eps_hat bit-identical to the sampled noise: SDS gradient is
    exactly zero.

    Works by redrawing the same generator stream sds_gradient used (the
    full seed travels in the request's in-process rng_seed field).
    """

    def __call__(self, request: GuidanceRequest) -> GuidanceResponse:
        request.validate()
        if request.mode == "generate":
            return GuidanceResponse(image=np.asarray(request.cond_image).copy())
        seed = request.rng_seed if request.rng_seed is not None else request.seed
        rng = np.random.default_rng(seed)
        eps = rng.standard_normal(request.noisy_image.shape).astype(np.float32)
        return GuidanceResponse(epsilon=eps)


class RemoteBackend:
    """HTTP client for the guidance wire contract."""

    def __init__(self, url, timeout=REQUEST_TIMEOUT, session=None):
        import requests

        self.url = url.rstrip("/")
        self.timeout = timeout
        self.session = session or requests.Session()

    def __call__(self, request: GuidanceRequest) -> GuidanceResponse:
        import requests

        body = request_to_wire(request)
        endpoint = f"{self.url}/v1/{request.mode}"
        try:
            resp = self.session.post(endpoint, json=body, timeout=self.timeout)
        except requests.Timeout as exc:
            raise BackendTimeoutError(f"{endpoint}: no response in "
                                      f"{self.timeout}s") from exc
        except requests.ConnectionError as exc:
            raise BackendUnreachableError(f"{endpoint}: {exc}") from exc
        if resp.status_code != 200:
            try:
                err = resp.json()
                detail = f"{err.get('code')}: {err.get('message')}"
            except (ValueError, AttributeError):
                detail = resp.text[:200]
            raise GuidanceError(f"{endpoint} -> HTTP {resp.status_code} ({detail})")
        try:
            payload = resp.json()
        except ValueError as exc:
            raise BackendSchemaError(f"{endpoint}: response is not JSON") from exc
        return response_from_wire(request.mode, payload)

    def health(self):
        import requests

        try:
            resp = self.session.get(f"{self.url}/v1/health", timeout=10)
            return resp.status_code == 200
        except requests.RequestException:
            return False


# ---------------------------------------------------------------------------
# SDS gradient
# ---------------------------------------------------------------------------

def sds_gradient(x, t, cond: ConditioningImage, prompt, strength, backend,
                 seed, negative_prompt="", cfg_scale=DEFAULT_CFG_SCALE,
                 camera=None, light=None, retries=3):
    """d(L_SDS)/d(pixels) = w(t) * (eps_hat - eps), w(t) = 1.

    eps is drawn from `seed` (int or sequence); the backend is queried in
    score mode with x_t. Failures retry up to `retries` times before the
    error propagates (the pipeline logs the iteration as skipped).

    Returns (gradient, proxy_loss) where proxy_loss = 0.5*mean((eps_hat-eps)^2)
    is logged for monitoring only; SDS has no true scalar objective.
    """
    x = np.asarray(x)
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(x.shape).astype(np.float32)
    x_t = add_noise(x.astype(np.float32), t, eps)
    request = GuidanceRequest(
        mode="score", prompt=prompt, negative_prompt=negative_prompt,
        cond_image=cond.channels if isinstance(cond, ConditioningImage) else cond,
        noisy_image=x_t, t=float(t), strength=float(strength),
        cfg_scale=float(cfg_scale), seed=int(np.asarray(seed).ravel()[-1]),
        camera=camera, light=light, rng_seed=seed)
    last = None
    for _ in range(max(1, retries)):
        try:
            response = backend(request)
            break
        except GuidanceError as exc:
            last = exc
    else:
        raise last
    eps_hat = np.asarray(response.epsilon, dtype=np.float32)
    if eps_hat.shape != x.shape:
        raise BackendSchemaError(
            f"epsilon shape {eps_hat.shape} != image shape {x.shape}")
    grad = eps_hat - eps
    proxy = 0.5 * float(np.mean(grad.astype(np.float64) ** 2))
    return grad, proxy
