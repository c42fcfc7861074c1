"""Guidance engines: latent-space denoising behind the image-space wire.

Clients noise images with the cosine signal-retention schedule
alpha_bar below and send continuous t in [0,1]; that convention is part
of the contract, so the same function is defined here rather than
imported from the client package. Everything latent (codec geometry,
the model's own timestep discretization) is private to the engine; see
the README for how latent noise predictions map back to image shape.
"""

import hashlib

import numpy as np
from PIL import Image

from .config import PROCEDURAL_MODEL, ServerConfig

TRAIN_TIMESTEPS = 1000   # t in [0,1] snaps to this grid for the denoiser
LATENT_STRIDE = 8        # image -> latent spatial reduction
GENERATE_STEPS = 8
EMBED_DIM = 16

# sqrt(alpha_bar) floors: t=0 and t=1 are legal requests but sit on the
# schedule's zeros, so the residual mappings clamp instead of dividing by 0
SQRT_FLOOR = 1e-4


class EngineLoadError(RuntimeError):
    """Model weights cannot be loaded; the app serves 503."""


def alpha_bar(t):
    """Cosine signal-retention schedule: 1 at t=0, 0 at t=1."""
    t = np.asarray(t, dtype=np.float64)
    return np.cos(0.5 * np.pi * t) ** 2


def _text_embedding(text, dim=EMBED_DIM):
    """Deterministic stand-in for a text encoder: hash -> fixed vector."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return rng.standard_normal(dim).astype(np.float32)


def _resize(img, size, resample=Image.BILINEAR):
    """Per-channel float resize to (h, w)."""
    h, w = size
    chans = [Image.fromarray(np.ascontiguousarray(c), mode="F").resize(
        (w, h), resample) for c in np.moveaxis(img.astype(np.float32), -1, 0)]
    return np.stack([np.asarray(c) for c in chans], axis=-1)


def _latent_grid(h_img, w_img):
    return (max(1, round(h_img / LATENT_STRIDE)),
            max(1, round(w_img / LATENT_STRIDE)))


class ProceduralEngine:
    """Self-contained engine with the full contract semantics.

    A fixed random per-pixel map plays the denoiser and an 8x spatial
    resample plays the autoencoder, so outputs carry no learned content,
    but seeding, conditioning strength, CFG combination and the latent
    round trip behave exactly like the pretrained path. Weights are
    built once from a constant seed and never mutated, so concurrent
    requests share them safely.
    """

    def __init__(self, config: ServerConfig):
        rng = np.random.default_rng(1618033988)
        self.w_z = (0.6 * rng.standard_normal((3, 3))).astype(np.float32)
        self.w_c = (0.6 * rng.standard_normal((3, 3))).astype(np.float32)
        self.w_e = (0.4 * rng.standard_normal((EMBED_DIM, 3))).astype(np.float32)
        self.w_t = rng.uniform(0.5, 3.0, size=3).astype(np.float32)
        self.b_t = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
        self.distilled = bool(config.distilled_encoder)

    # -- latent codec -------------------------------------------------------

    def encode(self, img):
        h, w = _latent_grid(*img.shape[:2])
        if self.distilled:
            # nearest-sample shortcut: no filtering, same latent geometry
            ys = ((np.arange(h) + 0.5) * img.shape[0] / h).astype(int)
            xs = ((np.arange(w) + 0.5) * img.shape[1] / w).astype(int)
            return np.ascontiguousarray(img[ys][:, xs], dtype=np.float32)
        return _resize(img, (h, w), Image.BOX)

    def decode(self, z, size):
        return _resize(z, size, Image.BILINEAR)

    # -- denoiser -----------------------------------------------------------

    def _denoise(self, z_t, tt, emb, control):
        feat = z_t @ self.w_z + control @ self.w_c
        feat = feat + (emb @ self.w_e)[None, None, :]
        feat = feat + np.sin(2.0 * np.pi * (tt * self.w_t + self.b_t))[None, None, :]
        return np.tanh(feat) + 0.25 * z_t

    def _predict(self, z_t, tt, prompt, negative_prompt, cfg_scale, control):
        e_u = self._denoise(z_t, tt, _text_embedding(negative_prompt), control)
        e_c = self._denoise(z_t, tt, _text_embedding(prompt), control)
        return e_u + np.float32(cfg_scale) * (e_c - e_u)

    # -- contract operations ------------------------------------------------

    def generate(self, cond, prompt, negative_prompt, strength, cfg_scale, seed):
        control = np.float32(strength) * self.encode(cond)
        rng = np.random.default_rng(int(seed))
        z = rng.standard_normal(control.shape).astype(np.float32)
        # deterministic denoise-renoise walk; start short of the t=1 pole
        levels = np.linspace(0.96, 0.0, GENERATE_STEPS + 1)
        x0 = np.zeros_like(z)
        for t_now, t_next in zip(levels[:-1], levels[1:]):
            tau = round(t_now * (TRAIN_TIMESTEPS - 1)) / (TRAIN_TIMESTEPS - 1)
            eps = self._predict(z, tau, prompt, negative_prompt, cfg_scale, control)
            ab = float(alpha_bar(t_now))
            x0 = (z - np.sqrt(1.0 - ab) * eps) / max(np.sqrt(ab), SQRT_FLOOR)
            x0 = np.clip(x0, -0.5, 1.5)  # static thresholding keeps the walk bounded
            ab_n = float(alpha_bar(t_next))
            z = (np.sqrt(ab_n) * x0 + np.sqrt(1.0 - ab_n) * eps).astype(np.float32)
        return np.clip(self.decode(x0, cond.shape[:2]), 0.0, 1.0)

    def score(self, cond, noisy, t, prompt, negative_prompt, strength, cfg_scale):
        size = noisy.shape[:2]
        if cond.shape[:2] != size:
            cond = _resize(cond, size)
        control = np.float32(strength) * self.encode(cond)
        z_t = self.encode(noisy)
        tau = round(float(t) * (TRAIN_TIMESTEPS - 1)) / (TRAIN_TIMESTEPS - 1)
        eps_z = self._predict(z_t, tau, prompt, negative_prompt, cfg_scale, control)
        ab = float(alpha_bar(t))
        x0_z = (z_t - np.sqrt(1.0 - ab) * eps_z) / max(np.sqrt(ab), SQRT_FLOOR)
        x0_img = self.decode(x0_z, size)
        eps = (noisy - np.sqrt(ab) * x0_img) / max(np.sqrt(1.0 - ab), SQRT_FLOOR)
        return eps.astype(np.float32)


class PretrainedEngine:
    """Depth- or light-conditioned latent diffusion behind the same surface.

    Loads the control checkpoint named by the config on top of the SD 1.5
    base; light-conditioned weights drop in by identifier alone. Any
    import or checkpoint failure raises EngineLoadError (served as 503).
    The distilled-encoder toggle swaps the base autoencoder for the tiny
    distilled one; the wire surface is unchanged.
    """

    BASE_MODEL = "runwayml/stable-diffusion-v1-5"
    DISTILLED_VAE = "madebyollin/taesd"

    def __init__(self, config: ServerConfig):
        try:
            import torch
            from diffusers import (AutoencoderTiny, ControlNetModel,
                                   StableDiffusionControlNetPipeline)
        except ImportError as exc:
            raise EngineLoadError(
                f"pretrained engine needs torch+diffusers: {exc}") from exc
        try:
            controlnet = ControlNetModel.from_pretrained(config.model)
            pipe = StableDiffusionControlNetPipeline.from_pretrained(
                self.BASE_MODEL, controlnet=controlnet, safety_checker=None)
            if config.distilled_encoder:
                pipe.vae = AutoencoderTiny.from_pretrained(self.DISTILLED_VAE)
            pipe.set_progress_bar_config(disable=True)
            self.pipe = pipe.to(config.device)
        except Exception as exc:
            raise EngineLoadError(f"cannot load {config.model!r}: {exc}") from exc
        self.torch = torch
        self.device = config.device

    def _to_tensor(self, img):
        arr = np.ascontiguousarray(np.moveaxis(img.astype(np.float32), -1, 0))
        return self.torch.from_numpy(arr[None]).to(self.device)

    @staticmethod
    def _snap8(h, w):
        # the UNet and VAE want multiples of 8; odd requests render
        # snapped and resize back so the wire shape contract still holds
        return max(8, 8 * round(h / 8)), max(8, 8 * round(w / 8))

    def generate(self, cond, prompt, negative_prompt, strength, cfg_scale, seed):
        h, w = cond.shape[:2]
        h8, w8 = self._snap8(h, w)
        cond_pil = Image.fromarray(
            (np.clip(cond, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8))
        gen = self.torch.Generator(self.device).manual_seed(int(seed))
        out = self.pipe(
            prompt=prompt, negative_prompt=negative_prompt or None,
            image=cond_pil, height=h8, width=w8, num_inference_steps=20,
            guidance_scale=float(cfg_scale),
            controlnet_conditioning_scale=float(strength),
            generator=gen, output_type="np")
        img = out.images[0].astype(np.float32)
        if (h8, w8) != (h, w):
            img = np.clip(_resize(img, (h, w)), 0.0, 1.0)
        return img

    def score(self, cond, noisy, t, prompt, negative_prompt, strength, cfg_scale):
        torch, pipe = self.torch, self.pipe
        size = noisy.shape[:2]
        snapped = self._snap8(*size)
        noisy_in = noisy if snapped == size else _resize(noisy, snapped)
        if cond.shape[:2] != snapped:
            cond = _resize(cond, snapped)
        with torch.no_grad():
            pos, neg = pipe.encode_prompt(prompt, self.device, 1, True,
                                          negative_prompt or None)
            text = torch.cat([neg, pos])
            enc = pipe.vae.encode(self._to_tensor(noisy_in) * 2.0 - 1.0)
            z_t = (enc.latent_dist.mode() if hasattr(enc, "latent_dist")
                   else enc.latents)
            scaling = getattr(pipe.vae.config, "scaling_factor", 1.0)
            z_t = z_t * scaling
            n_train = pipe.scheduler.config.num_train_timesteps
            tau = int(round(float(t) * (n_train - 1)))
            tstep = torch.tensor([tau, tau], device=self.device)
            control = torch.cat([self._to_tensor(cond)] * 2)
            zz = torch.cat([z_t, z_t])
            down, mid = pipe.controlnet(
                zz, tstep, encoder_hidden_states=text, controlnet_cond=control,
                conditioning_scale=float(strength), return_dict=False)
            e = pipe.unet(zz, tstep, encoder_hidden_states=text,
                          down_block_additional_residuals=down,
                          mid_block_additional_residual=mid).sample
            e_u, e_c = e.chunk(2)
            eps_z = e_u + float(cfg_scale) * (e_c - e_u)
            # x0 estimate under the model's own schedule
            ab_m = pipe.scheduler.alphas_cumprod.to(self.device)[tau]
            x0_z = (z_t - torch.sqrt(1.0 - ab_m) * eps_z) \
                / torch.sqrt(ab_m).clamp(min=SQRT_FLOOR)
            x0 = pipe.vae.decode(x0_z / scaling).sample
            x0_img = ((x0.clamp(-1.0, 1.0) + 1.0) / 2.0)[0]
            x0_img = x0_img.permute(1, 2, 0).cpu().numpy().astype(np.float32)
        if snapped != size:
            x0_img = _resize(x0_img, size)
        # re-express in image space under the contract schedule the client
        # used to build x_t
        ab = float(alpha_bar(t))
        eps = (noisy - np.sqrt(ab) * x0_img) / max(np.sqrt(1.0 - ab), SQRT_FLOOR)
        return eps.astype(np.float32)


def load_engine(config: ServerConfig):
    """Engine factory; raises EngineLoadError when weights cannot load."""
    if config.model == PROCEDURAL_MODEL:
        return ProceduralEngine(config)
    return PretrainedEngine(config)
