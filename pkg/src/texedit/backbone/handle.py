from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np
import torch

from ..errors import ConfigurationError, InjectionError, ShapeError, TokenError
from ..features import (ATTN_OUTPUT, CROSS_MAP, INJECTABLE_KINDS, KEY, KINDS, QUERY, RESIDUAL, VALUE,
                        FeatureTap)
from ..sampler import NoiseSchedule
from . import hooks


@dataclass(frozen=True)
class LayerSpec:
    """One basis block: a residual block followed by self- and cross-attention.

    ``scale`` is the block's downsampling factor relative to the latent, so its
    grid for a latent of size (H, W) is (H // scale, W // scale).
    """

    index: int
    place: str  # "down", "mid" or "up"
    block: int
    position: int
    scale: int
    resolution: tuple[int, int]  # at the nominal latent size
    channels: int
    attention_channels: int
    heads: int

    @property
    def head_dim(self) -> int:
        return self.attention_channels // self.heads

    def grid(self, latent_hw: tuple[int, int]) -> tuple[int, int]:
        return latent_hw[0] // self.scale, latent_hw[1] // self.scale

    def expected_shape(self, kind: str, latent_hw: tuple[int, int]) -> tuple[int, ...]:
        """Payload shape without the batch dimension."""
        h, w = self.grid(latent_hw)
        if kind in (QUERY, KEY, VALUE, ATTN_OUTPUT):
            return h * w, self.attention_channels
        if kind == RESIDUAL:
            return self.channels, h, w
        raise ConfigurationError(f"no fixed payload shape for {kind}")


def enumerate_basis_blocks(unet, latent_size: tuple[int, int]):
    """Flatten every (resnet, transformer) pair of the U-Net in execution order.

    Yields (LayerSpec, resnet, transformer_block). Blocks without attention
    (e.g. SD's innermost down/up blocks) are not basis blocks and get no index.
    """
    index, scale = 0, 1
    out = []

    def add(place, b, j, resnet, transformer, scale):
        nonlocal index
        tb = transformer.transformer_blocks[0]
        spec = LayerSpec(index=index, place=place, block=b, position=j, scale=scale,
                         resolution=(latent_size[0] // scale, latent_size[1] // scale),
                         channels=resnet.out_channels, attention_channels=tb.attn1.inner_dim, heads=tb.attn1.heads)
        out.append((spec, resnet, tb))
        index += 1

    for b, block in enumerate(unet.down_blocks):
        for j, transformer in enumerate(getattr(block, "attentions", None) or []):
            add("down", b, j, block.resnets[j], transformer, scale)
        if getattr(block, "downsamplers", None):
            scale *= 2
    mid = unet.mid_block
    for j, transformer in enumerate(getattr(mid, "attentions", None) or []):
        add("mid", 0, j, mid.resnets[j], transformer, scale)
    for b, block in enumerate(unet.up_blocks):
        for j, transformer in enumerate(getattr(block, "attentions", None) or []):
            add("up", b, j, block.resnets[j], transformer, scale)
        if getattr(block, "upsamplers", None):
            scale //= 2
    return out


class HFTokenizer:
    """Adapter giving a transformers CLIP tokenizer the WordTokenizer interface."""

    def __init__(self, tokenizer):
        self._tok = tokenizer
        self.model_max_length = tokenizer.model_max_length
        self.bos_token_id = tokenizer.bos_token_id
        self.eos_token_id = tokenizer.eos_token_id

    def word_ids(self, text: str) -> list[int]:
        return list(self._tok(text, add_special_tokens=False).input_ids)

    def __call__(self, text: str) -> list[int]:
        return list(self._tok(text, padding="max_length", max_length=self.model_max_length,
                              truncation=True).input_ids)


class BackboneHandle:
    """A loaded latent-diffusion model with an instrumented U-Net.

    The layer inventory is fixed at load time. Calls never mutate the handle,
    so one handle can serve concurrent edits.
    """

    def __init__(self, model_id: str, unet, text_encoder, tokenizer, vae, latent_size=(64, 64),
                 schedule_kwargs: Mapping | None = None, vae_kind: str = "kl", stub_noise: bool = False,
                 device: str | torch.device = "cpu", dtype: torch.dtype = torch.float32):
        self.model_id = model_id
        self.unet = unet
        self.text_encoder = text_encoder
        self.tokenizer = tokenizer
        self.vae = vae
        self.latent_size = tuple(latent_size)
        self.vae_kind = vae_kind
        self.stub_noise = stub_noise
        self.device = torch.device(device)
        self.dtype = dtype
        self._schedule_kwargs = dict(schedule_kwargs or {})
        blocks = enumerate_basis_blocks(unet, self.latent_size)
        self._layers = tuple(spec for spec, _, _ in blocks)
        self._downsample_factor = 2 ** (len(unet.down_blocks) - 1)
        for spec, resnet, tb in blocks:
            tb.attn1.set_processor(hooks.TapAttnProcessor(spec.index, is_cross=False))
            tb.attn2.set_processor(hooks.TapAttnProcessor(spec.index, is_cross=True))
            resnet.register_forward_hook(hooks.residual_hook(spec.index))
        self._uncond_cache: dict[str, torch.Tensor] = {}

    @property
    def layers(self) -> tuple[LayerSpec, ...]:
        return self._layers

    @property
    def image_size(self) -> tuple[int, int]:
        return self.latent_size[0] * 8, self.latent_size[1] * 8

    def layer(self, index: int) -> LayerSpec:
        if not 0 <= index < len(self._layers):
            raise ConfigurationError(f"layer {index} not in inventory (0..{len(self._layers) - 1})")
        return self._layers[index]

    def layers_at(self, resolution: int | tuple[int, int]) -> list[int]:
        """Indices of basis blocks whose nominal grid equals ``resolution``."""
        if isinstance(resolution, int):
            resolution = (resolution, resolution)
        return [l.index for l in self._layers if l.resolution == tuple(resolution)]

    def noise_schedule(self, num_steps: int) -> NoiseSchedule:
        return NoiseSchedule.scaled_linear(num_steps=num_steps, **self._schedule_kwargs)

    # text

    def token_ids(self, text: str) -> list[int]:
        return self.tokenizer(text)

    def token_indices(self, prompt: str, word: str) -> tuple[int, ...]:
        """Positions of ``word``'s sub-tokens inside the tokenized ``prompt`` (first occurrence)."""
        ids = self.token_ids(prompt)
        sub = self.tokenizer.word_ids(word)
        if not sub:
            raise TokenError(f"{word!r} produces no tokens")
        for start in range(len(ids) - len(sub) + 1):
            if ids[start:start + len(sub)] == sub:
                return tuple(range(start, start + len(sub)))
        raise TokenError(f"{word!r} does not occur in prompt {prompt!r}")

    @torch.no_grad()
    def encode_prompt(self, text: str) -> torch.Tensor:
        ids = torch.tensor([self.token_ids(text)], device=self.device)
        return self.text_encoder(ids)[0].to(self.dtype)

    def unconditional_embedding(self, text: str = "") -> torch.Tensor:
        if text not in self._uncond_cache:
            self._uncond_cache[text] = self.encode_prompt(text)
        return self._uncond_cache[text]

    # images

    @torch.no_grad()
    def encode_image(self, image) -> torch.Tensor:
        x = _image_tensor(image).to(self.device, self.dtype)
        h, w = x.shape[-2:]
        if h % 8 or w % 8:
            raise ShapeError(f"image size {h}x{w} is not divisible by 8")
        x = 2.0 * x - 1.0
        if self.vae_kind == "kl":
            z = self.vae.encode(x).latent_dist.mean
            return z * self.vae.config.scaling_factor
        return self.vae.encode(x) * self.vae.scaling_factor

    @torch.no_grad()
    def decode_latent(self, latent: torch.Tensor) -> torch.Tensor:
        """Latent -> image tensor (1, 3, H, W) in [0, 1]."""
        latent = latent.to(self.device, self.dtype)
        if self.vae_kind == "kl":
            x = self.vae.decode(latent / self.vae.config.scaling_factor).sample
        else:
            x = self.vae.decode(latent / self.vae.scaling_factor)
        return ((x + 1.0) / 2.0).clamp(0.0, 1.0)

    # noise prediction

    @torch.no_grad()
    def predict_noise(self, latent: torch.Tensor, t: int, prompt_embedding: torch.Tensor,
                      taps_in: Iterable[FeatureTap] = (), taps_out: Iterable = (),
                      attention_edits: Mapping | None = None, step: int | None = None,
                      branch: str | None = None):
        """Noise estimate for ``latent`` at timestep ``t``, with feature taps.

        ``taps_out`` lists (layer, kind) pairs to record; ``taps_in`` replaces the
        matching computed features before they are used downstream;
        ``attention_edits`` maps a layer to a function applied to its
        self-attention output. Returns (noise, recorded taps).
        """
        latent = latent.to(self.device, self.dtype)
        emb = prompt_embedding.to(self.device, self.dtype)
        if latent.ndim != 4:
            raise ShapeError(f"latent must be (batch, channels, H, W), got {tuple(latent.shape)}")
        if latent.shape[0] == 1 and emb.shape[0] > 1:
            latent = latent.expand(emb.shape[0], *latent.shape[1:])
        if latent.shape[0] != emb.shape[0]:
            raise ShapeError(f"latent batch {latent.shape[0]} != prompt batch {emb.shape[0]}")
        hw = tuple(latent.shape[-2:])
        if hw[0] % self._downsample_factor or hw[1] % self._downsample_factor:
            raise ShapeError(f"latent size {hw} not divisible by the U-Net factor {self._downsample_factor}")

        requests = set()
        for layer, kind in taps_out:
            self.layer(layer)
            if kind not in KINDS:
                raise ConfigurationError(f"unknown feature kind {kind!r}")
            requests.add((layer, kind))
        injections = {}
        for tap in taps_in:
            spec = self.layer(tap.layer)
            if tap.kind not in INJECTABLE_KINDS:
                raise InjectionError(tap.layer, tap.kind, "feature kind cannot be injected")
            expected = spec.expected_shape(tap.kind, hw)
            if tuple(tap.payload.shape[1:]) != expected:
                raise InjectionError(tap.layer, tap.kind, f"payload shape {tuple(tap.payload.shape[1:])} "
                                                          f"!= layer shape {expected}")
            injections[tap.key] = tap.payload
        for layer in attention_edits or {}:
            self.layer(layer)

        call = hooks.TapCall(requests=requests, injections=injections, attention_edits=attention_edits or {},
                             grids={l.index: l.grid(hw) for l in self._layers})
        token = hooks.activate(call)
        try:
            eps = self.unet(latent, t, encoder_hidden_states=emb).sample
        finally:
            hooks.deactivate(token)
        missed = set(injections) - call.applied
        if missed:
            layer, kind = sorted(missed)[0]
            raise InjectionError(layer, kind, "injection point never reached")
        if self.stub_noise:
            eps = torch.zeros_like(eps)
        taps = [FeatureTap(layer, kind, call.recorded[(layer, kind)], step=step, branch=branch)
                for layer, kind in sorted(call.recorded)]
        return eps, taps


def _image_tensor(image) -> torch.Tensor:
    """Accept HxWx3 arrays (uint8 or float in [0, 1]) or 3xHxW / 1x3xHxW tensors."""
    if isinstance(image, torch.Tensor):
        x = image.float()
        if x.ndim == 3:
            x = x[None]
    else:
        arr = np.asarray(image)
        if arr.dtype == np.uint8:
            arr = arr.astype(np.float32) / 255.0
        if arr.ndim == 2:
            arr = np.repeat(arr[..., None], 3, axis=-1)
        if arr.ndim != 3 or arr.shape[-1] != 3:
            raise ShapeError(f"expected an HxWx3 image, got {arr.shape}")
        x = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(2, 0, 1)[None]
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected a 3-channel image, got {tuple(x.shape)}")
    return x
