"""Latent-diffusion backbone adapter.

Basis blocks are numbered 0-based in U-Net execution order over every
(resnet, self-attention, cross-attention) triple. For Stable Diffusion v1.x
at 512x512 this gives 16 blocks:

====  =================  ======
idx   diffusers module   grid
====  =================  ======
0-1   down_blocks[0]     64x64
2-3   down_blocks[1]     32x32
4-5   down_blocks[2]     16x16
6     mid_block          8x8
7-9   up_blocks[1]       16x16
10-12 up_blocks[2]       32x32
13-15 up_blocks[3]       64x64
====  =================  ======

so the default residual injection (7) and query injection (12-15) both sit
in the decoder. ``down_blocks[3]`` and ``up_blocks[0]`` carry no attention
and are not basis blocks.
"""
from __future__ import annotations

import logging
import os
from pathlib import Path

import torch

from ..errors import ConfigurationError, LoadError
from .handle import BackboneHandle, HFTokenizer, LayerSpec, enumerate_basis_blocks
from .tiny import TINY_LATENT, build_tiny_components

logger = logging.getLogger(__name__)

CACHE_ENV = "TEXEDIT_CACHE_DIR"
DOWNLOAD_ENV = "TEXEDIT_ALLOW_DOWNLOAD"

ALIASES = {
    "sd-v1.4": "CompVis/stable-diffusion-v1-4",
    "sd-v1-4": "CompVis/stable-diffusion-v1-4",
}
TINY_IDS = ("tiny-test-backbone", "tiny-stub-backbone")


def load_backbone(model_id: str, config=None, *, device: str | None = None, cache_dir: str | None = None,
                  allow_download: bool | None = None, seed: int | None = None) -> BackboneHandle:
    """Load a backbone by registry id or local diffusers directory.

    ``tiny-test-backbone`` is a seeded random miniature U-Net; ``tiny-stub-backbone``
    is the same network but always predicts zero noise. Anything else is
    resolved through diffusers from ``cache_dir`` (or ``$TEXEDIT_CACHE_DIR``),
    without network access unless ``allow_download`` (or ``$TEXEDIT_ALLOW_DOWNLOAD=1``).

    ``config`` (an EditConfig or anything with ``injection`` and
    ``mask_resolution``) is checked against the layer inventory.
    """
    if seed is None:
        seed = getattr(config, "seed", 0) or 0
    if model_id in TINY_IDS:
        unet, text_encoder, tokenizer, vae = build_tiny_components(seed)
        handle = BackboneHandle(model_id, unet, text_encoder, tokenizer, vae, latent_size=(TINY_LATENT, TINY_LATENT),
                                vae_kind="pool", stub_noise=model_id == "tiny-stub-backbone", device="cpu")
    else:
        handle = _load_diffusers(model_id, device, cache_dir, allow_download)
    if config is not None:
        check_inventory(handle, config)
    return handle


def check_inventory(handle: BackboneHandle, config) -> None:
    schedule = getattr(config, "injection", None)
    if schedule is not None:
        available = {l.index for l in handle.layers}
        needed = set()
        if schedule.inject_queries:
            needed |= set(schedule.query_layers)
        if schedule.inject_residuals:
            needed |= set(schedule.residual_layers)
        missing = sorted(needed - available)
        if missing:
            raise ConfigurationError(f"backbone {handle.model_id} has no layer {missing[0]} "
                                     f"(inventory 0..{len(handle.layers) - 1})")
    resolution = getattr(config, "mask_resolution", None)
    if resolution and getattr(config, "localization", True) and not handle.layers_at(resolution):
        raise ConfigurationError(f"backbone {handle.model_id} has no cross-attention at {resolution}x{resolution}")


def _load_diffusers(model_id, device, cache_dir, allow_download) -> BackboneHandle:
    try:
        from diffusers import AutoencoderKL, UNet2DConditionModel
        from transformers import CLIPTextModel, CLIPTokenizer
    except ImportError as exc:  # pragma: no cover
        raise LoadError(f"diffusers/transformers unavailable: {exc}") from exc

    repo = ALIASES.get(model_id, model_id)
    if allow_download is None:
        allow_download = os.environ.get(DOWNLOAD_ENV, "") == "1"
    cache_dir = cache_dir or os.environ.get(CACHE_ENV)
    device = device or ("cuda" if torch.cuda.is_available() else "cpu")
    dtype = torch.float16 if str(device).startswith("cuda") else torch.float32
    kwargs = dict(cache_dir=cache_dir, local_files_only=not allow_download)
    if Path(repo).is_dir():
        kwargs = {}
    try:
        tokenizer = CLIPTokenizer.from_pretrained(repo, subfolder="tokenizer", **kwargs)
        text_encoder = CLIPTextModel.from_pretrained(repo, subfolder="text_encoder", **kwargs)
        vae = AutoencoderKL.from_pretrained(repo, subfolder="vae", **kwargs)
        unet = UNet2DConditionModel.from_pretrained(repo, subfolder="unet", **kwargs)
    except Exception as exc:
        raise LoadError(f"cannot load weights for {model_id!r} ({repo}): {exc}") from exc
    for module in (text_encoder, vae, unet):
        module.to(device, dtype).eval()
    sample = unet.config.sample_size
    return BackboneHandle(model_id, unet, text_encoder, HFTokenizer(tokenizer), vae, latent_size=(sample, sample),
                          vae_kind="kl", device=device, dtype=dtype)


def weights_available(model_id: str = "sd-v1.4", cache_dir: str | None = None) -> bool:
    """True when the weights resolve locally (no network)."""
    if model_id in TINY_IDS:
        return True
    try:
        from huggingface_hub import try_to_load_from_cache
    except ImportError:  # pragma: no cover
        return False
    repo = ALIASES.get(model_id, model_id)
    if Path(repo).is_dir():
        return (Path(repo) / "unet").is_dir()
    found = try_to_load_from_cache(repo, "unet/config.json", cache_dir=cache_dir or os.environ.get(CACHE_ENV))
    return isinstance(found, str)


def encode_image(image, handle: BackboneHandle) -> torch.Tensor:
    return handle.encode_image(image)


def decode_latent(latent, handle: BackboneHandle) -> torch.Tensor:
    return handle.decode_latent(latent)


def predict_noise(latent, t, prompt_embedding, taps_in, taps_out, handle: BackboneHandle, **kwargs):
    return handle.predict_noise(latent, t, prompt_embedding, taps_in=taps_in, taps_out=taps_out, **kwargs)


__all__ = [
    "BackboneHandle", "HFTokenizer", "LayerSpec", "enumerate_basis_blocks", "load_backbone", "check_inventory",
    "encode_image", "decode_latent", "predict_noise", "weights_available", "TINY_IDS",
]
