"""Request and response models. Images travel as base64-encoded PNG."""
from __future__ import annotations

import base64
import binascii
import io as _io
from typing import Literal

import numpy as np
from PIL import Image
from pydantic import BaseModel, Field

from ..config import Settings
from ..errors import ValidationError


def encode_png(arr: np.ndarray) -> str:
    buf = _io.BytesIO()
    im = Image.fromarray(arr.astype(bool)).convert("1") if arr.ndim == 2 else Image.fromarray(arr, "RGB")
    im.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png(data: str, field: str, mask: bool = False) -> np.ndarray:
    try:
        with Image.open(_io.BytesIO(base64.b64decode(data, validate=True))) as im:
            return np.asarray(im.convert("L")) > 127 if mask else np.asarray(im.convert("RGB"))
    except (binascii.Error, OSError, ValueError) as exc:
        raise ValidationError(f"{field} is not a base64 PNG: {exc}", field=field) from exc


class EditRequest(BaseModel):
    image: str = Field(description="base64 PNG")
    mask: str | None = Field(default=None, description="optional base64 PNG object mask overriding extraction")
    settings: Settings


class StepDiagnosticsModel(BaseModel):
    step: int
    timestep: int
    queries_injected: int
    residuals_injected: int
    mask_area: float | None


class EditResponse(BaseModel):
    edited: str
    reconstruction: str
    mask: str | None
    diagnostics: list[StepDiagnosticsModel]
    timing: dict[str, float]
    settings: Settings


class ReconstructRequest(BaseModel):
    image: str
    settings: Settings


class ReconstructResponse(BaseModel):
    image: str
    psnr: float
    timing: dict[str, float]
    settings: Settings


class EvaluateItem(BaseModel):
    name: str
    source: str
    edited: str
    mask: str
    texture: str


class EvaluateRequest(BaseModel):
    items: list[EvaluateItem] = Field(min_length=1)
    networks: Literal["pretrained", "test-doubles", "none"] = "pretrained"


class EvaluateResponse(BaseModel):
    report: dict
    text: str


class LayerModel(BaseModel):
    index: int
    place: str
    resolution: tuple[int, int]
    channels: int
    heads: int


class InventoryResponse(BaseModel):
    model: str
    latent_size: tuple[int, int]
    layers: list[LayerModel]


class ErrorResponse(BaseModel):
    kind: Literal["validation", "runtime"]
    message: str
    field: str | None = None
    module: str | None = None
    step: int | None = None
