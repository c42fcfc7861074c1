"""Server-wide settings."""

from dataclasses import dataclass

# Public depth-conditioned checkpoint used when no identifier is given;
# light-conditioned weights drop in through the same field.
DEFAULT_MODEL = "lllyasviel/sd-controlnet-depth"

# Identifier for the self-contained engine with fixed random weights.
# It serves the full contract without any downloaded checkpoint, which
# is what the test suite and offline deployments run against.
PROCEDURAL_MODEL = "procedural"


@dataclass
class ServerConfig:
    model: str = DEFAULT_MODEL
    device: str = "cpu"
    port: int = 8080
    max_concurrent: int = 2
    distilled_encoder: bool = False  # cheaper approximate encoder, same decoder

    def validate(self) -> "ServerConfig":
        if not 1 <= int(self.port) <= 65535:
            raise ValueError(f"port out of range: {self.port}")
        if int(self.max_concurrent) < 1:
            raise ValueError(
                f"max_concurrent must be >= 1, got {self.max_concurrent}")
        return self
