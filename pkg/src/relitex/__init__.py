"""relitex: text-driven synthesis of relightable BRDF texture maps.

Optimizes a multi-resolution hash-grid material field (base color,
metallicness, roughness, bump) for a fixed mesh by differentiable
split-sum PBR rendering plus Score Distillation Sampling against a
pluggable guidance backend.
"""

__version__ = "0.1.0"

from . import cli, envlight, geometry, guidance, imageops, pipeline, renderer, texture_field

__all__ = [
    "cli",
    "envlight",
    "geometry",
    "guidance",
    "imageops",
    "pipeline",
    "renderer",
    "texture_field",
]
