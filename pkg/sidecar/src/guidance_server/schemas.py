"""Wire schema and payload codecs.

JSON bodies carry two binary envelopes: images as base64 8-bit PNG,
float arrays as base64 little-endian float32 with an explicit shape.
Field names and semantics mirror the client side of the contract
exactly; anything that fails to parse here is a 400.
"""

import base64
import io
from typing import Literal, Optional

import numpy as np
from PIL import Image
from pydantic import BaseModel, Field, field_validator, model_validator

# Reject absurd raster sizes before any pixel work happens.
MAX_SIDE = 4096


class PayloadError(ValueError):
    """Body parsed as JSON but a binary payload is unusable."""


class PngImage(BaseModel):
    format: Literal["png"] = "png"
    data: str  # base64 PNG bytes


class FloatArray(BaseModel):
    shape: list[int]
    dtype: Literal["float32"] = "float32"
    data: str  # base64 of C-order little-endian float32

    @field_validator("shape")
    @classmethod
    def _shape_positive(cls, v):
        if not v or any(int(s) < 1 for s in v):
            raise ValueError(f"bad array shape {v}")
        return [int(s) for s in v]


class WireRequest(BaseModel):
    mode: Literal["generate", "score"]
    prompt: str
    negative_prompt: str = ""
    cond_image: PngImage
    noisy_image: Optional[FloatArray] = None
    t: Optional[float] = None
    strength: float = Field(default=1.0, ge=0.0, le=1.0)
    cfg_scale: float = 7.5
    seed: int = Field(default=0, ge=0)

    @field_validator("t")
    @classmethod
    def _t_range(cls, v):
        if v is not None and not 0.0 <= v <= 1.0:
            raise ValueError(f"t must be in [0,1], got {v}")
        return v

    @model_validator(mode="after")
    def _score_fields(self):
        if self.mode == "score":
            if self.noisy_image is None or self.t is None:
                raise ValueError("score mode requires noisy_image and t")
            s = self.noisy_image.shape
            if len(s) != 3 or s[2] != 3:
                raise ValueError(f"noisy_image must be (H, W, 3), got {s}")
        return self


class GenerateResponse(BaseModel):
    image: PngImage


class ScoreResponse(BaseModel):
    epsilon: FloatArray


class ErrorBody(BaseModel):
    code: str
    message: str


# ---------------------------------------------------------------------------
# Codecs
# ---------------------------------------------------------------------------

def decode_png(payload: PngImage) -> np.ndarray:
    """Base64 PNG -> float32 (H, W, 3) in [0,1]."""
    try:
        raw = base64.b64decode(payload.data, validate=True)
        img = Image.open(io.BytesIO(raw))
        width, height = img.size  # header only, nothing decoded yet
    except Exception as exc:
        raise PayloadError(f"undecodable PNG payload: {exc}") from exc
    if width > MAX_SIDE or height > MAX_SIDE:
        raise PayloadError(f"image exceeds {MAX_SIDE}px per side")
    try:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    except Exception as exc:
        raise PayloadError(f"undecodable PNG payload: {exc}") from exc
    return arr / 255.0


def encode_png(img) -> PngImage:
    """Float [0,1] (H, W, 3) -> base64 8-bit PNG."""
    arr = (np.clip(np.asarray(img), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return PngImage(data=base64.b64encode(buf.getvalue()).decode("ascii"))


def decode_array(payload: FloatArray) -> np.ndarray:
    shape = tuple(payload.shape)
    if max(shape) > MAX_SIDE:
        raise PayloadError(f"array exceeds {MAX_SIDE} per axis")
    try:
        raw = base64.b64decode(payload.data, validate=True)
    except Exception as exc:
        raise PayloadError(f"bad base64 in array payload: {exc}") from exc
    count = int(np.prod(shape))
    if len(raw) != 4 * count:
        raise PayloadError(
            f"array payload holds {len(raw)} bytes, shape {shape} needs {4 * count}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def encode_array(arr) -> FloatArray:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return FloatArray(shape=list(arr.shape),
                      data=base64.b64encode(arr.tobytes()).decode("ascii"))
