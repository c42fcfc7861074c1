"""Command-line front end: config handling, both stages, artifact export.

Configuration precedence is flags > config file > defaults. The config
file is plain `key = value` lines with `#` comments; keys are the long
flag names with underscores (plus the optimizer fields that have no
dedicated flag). Exit codes: 0 success, 2 config error, 3 mesh error,
4 backend unreachable, 5 non-finite loss abort.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, fields as dc_fields

import numpy as np

from . import envlight, guidance, imageops, pipeline, texture_field
from .geometry import MeshError, load_mesh

VALID_RESOLUTIONS = (128, 256, 512)
TURNTABLE_FRAMES = 36


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    mesh: str = None
    prompt: str = None
    negative_prompt: str = ""
    lights: str = None             # manifest path; None = built-in pool
    backend: str = "stub"
    backend_url: str = None
    resolution: int = 256
    iterations: int = 400
    seed: int = 0
    out: str = "out"
    dump_conditioning: bool = False
    dump_snapshots: bool = False
    # optimizer fields (config-file keys, no dedicated flags)
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

    def validate(self):
        if not self.mesh:
            raise ConfigError("a mesh path is required (--mesh)")
        if not self.prompt:
            raise ConfigError("a prompt is required (--prompt)")
        if self.resolution not in VALID_RESOLUTIONS:
            raise ConfigError(f"resolution must be one of {VALID_RESOLUTIONS}, "
                              f"got {self.resolution}")
        if self.backend not in ("stub", "remote"):
            raise ConfigError(f"backend must be 'stub' or 'remote', got "
                              f"{self.backend!r}")
        if self.backend == "remote" and not self.resolved_backend_url():
            raise ConfigError("remote backend needs --backend-url or "
                              "RELITEX_BACKEND_URL")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")

    def resolved_backend_url(self):
        return self.backend_url or os.environ.get("RELITEX_BACKEND_URL")

    def optim_config(self) -> pipeline.OptimConfig:
        return pipeline.OptimConfig(
            total_iterations=self.iterations,
            warmup_iterations=min(self.warmup_iterations, self.iterations - 1)
            if self.iterations > 1 else 0,
            batch=self.batch, lr=self.lr, lambda_recon=self.lambda_recon,
            lambda_reg=self.lambda_reg, t_max=self.t_max, t_min=self.t_min,
            cfg=self.cfg, reg_samples=self.reg_samples,
            reg_epsilon=self.reg_epsilon, seed=self.seed)


_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def parse_config_file(path) -> dict:
    """`key = value` pairs, one per line; `#` starts a comment."""
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    values = {}
    known = {f.name: f.type for f in dc_fields(RunConfig)}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, _, val = line.partition("=")
            key = key.strip().replace("-", "_")
            val = val.strip()
            if key not in known:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _coerce(key, val, lineno, path)
    return values


def _coerce(key, val, lineno, path):
    """Config-file values typed after the field's default (None means path/text)."""
    default = RunConfig.__dataclass_fields__[key].default
    try:
        if isinstance(default, bool):
            low = val.lower()
            if low in _BOOL_TRUE:
                return True
            if low in _BOOL_FALSE:
                return False
            raise ValueError(f"not a boolean: {val!r}")
        if isinstance(default, int):
            return int(val)
        if isinstance(default, float):
            return float(val)
        return val
    except ValueError as exc:
        raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="relitex",
        description="Optimize relightable BRDF texture maps for a mesh "
                    "from a text prompt.")
    p.add_argument("--mesh", help="input .obj (triangles with UVs)")
    p.add_argument("--prompt", help="text prompt")
    p.add_argument("--negative-prompt", dest="negative_prompt")
    p.add_argument("--lights", help="lighting manifest: one 'path [rotation_deg]' per line")
    p.add_argument("--backend", choices=["stub", "remote"])
    p.add_argument("--backend-url", dest="backend_url",
                   help="guidance service URL (or RELITEX_BACKEND_URL)")
    p.add_argument("--resolution", type=int, choices=VALID_RESOLUTIONS)
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--dump-conditioning", dest="dump_conditioning",
                   action="store_true", default=None)
    p.add_argument("--dump-snapshots", dest="dump_snapshots",
                   action="store_true", default=None)
    return p


def merge_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        for key, val in parse_config_file(args.config).items():
            setattr(cfg, key, val)
    for f in dc_fields(RunConfig):
        flag_val = getattr(args, f.name, None)
        if flag_val is not None:
            setattr(cfg, f.name, flag_val)
    cfg.validate()
    return cfg


def _make_backend(cfg: RunConfig):
    if cfg.backend == "stub":
        return guidance.StubBackend()
    backend = guidance.RemoteBackend(cfg.resolved_backend_url())
    if not backend.health():
        raise guidance.BackendUnreachableError(
            f"guidance service not reachable at {backend.url}")
    return backend


def run(cfg: RunConfig) -> int:
    """Stage 1 -> Stage 2 -> bake -> turntable, writing all artifacts."""
    mesh = load_mesh(cfg.mesh)

    if cfg.lights:
        lights = envlight.load_lighting_manifest(cfg.lights)
    else:
        lights = envlight.default_lighting_pool()
    pool = pipeline.prefilter_pool(lights)

    backend = _make_backend(cfg)
    setup = pipeline.canonical_setup(pool[0], cfg.resolution)
    os.makedirs(cfg.out, exist_ok=True)

    refset = pipeline.stage1_reference(mesh, cfg.prompt, setup, backend,
                                       negative_prompt=cfg.negative_prompt,
                                       seed=cfg.seed)
    if cfg.dump_conditioning:
        conds = [guidance.conditioning_image(mesh, setup.light, cam)
                 for cam in setup.cameras]
        grid = guidance.assemble_grid([c.channels for c in conds])
        imageops.save_png(os.path.join(cfg.out, "conditioning_grid.png"), grid)
        imageops.save_pfm(os.path.join(cfg.out, "conditioning_grid.pfm"),
                          grid.astype(np.float32))
        imageops.save_png(os.path.join(cfg.out, "reference_grid.png"),
                          refset.grid_image)

    result = pipeline.optimize(mesh, cfg.prompt, cfg.optim_config(), backend,
                               pool, refset, negative_prompt=cfg.negative_prompt,
                               out_dir=cfg.out, dump_snapshots=cfg.dump_snapshots)

    maps = texture_field.bake_uv(mesh, result.field, cfg.resolution)
    texture_field.save_material_maps(cfg.out, maps)
    texture_field.save_checkpoint(os.path.join(cfg.out, "field.ckpt"),
                                  result.field)
    frames = pipeline.turntable(mesh, result.field, pool[0], TURNTABLE_FRAMES,
                                resolution=cfg.resolution)
    tt_dir = os.path.join(cfg.out, "turntable")
    os.makedirs(tt_dir, exist_ok=True)
    for k, frame in enumerate(frames):
        imageops.save_png(os.path.join(tt_dir, f"frame_{k:03d}.png"), frame)
    pipeline.write_run_log(os.path.join(cfg.out, "run_log.csv"),
                           result.log_rows)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = merge_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MeshError as exc:
        print(f"mesh error: {exc}", file=sys.stderr)
        return 3
    except envlight.HdrError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (guidance.BackendUnreachableError, guidance.BackendTimeoutError,
            guidance.GuidanceError) as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return 4
    except FloatingPointError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
