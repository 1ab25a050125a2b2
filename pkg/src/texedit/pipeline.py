"""Texture transfer by dual-branch DDIM editing.

The source branch reconstructs the input from its inverted noise under the
source prompt. The edit branch starts from the same noise but is conditioned
on the bare texture word, receives the source branch's structural features,
and is confined to the object mask by attention and latent blending.
"""
from __future__ import annotations

import logging
import re
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from . import localization as loc
from .backbone import BackboneHandle, check_inventory
from .control import InjectionSchedule, build_injection_set
from .errors import ConfigurationError, PipelineError, ShapeError, TexEditError, ValidationError
from .features import ATTN_OUTPUT, CROSS_MAP, QUERY, RESIDUAL
from .sampler import ddim_denoise, ddim_invert, ddim_step, guided_noise

logger = logging.getLogger(__name__)

_WORD = re.compile(r"^[A-Za-z][A-Za-z'-]*$")


def _words(text: str) -> list[str]:
    return re.findall(r"[a-z0-9']+", text.lower())


@dataclass
class EditConfig:
    source_prompt: str
    texture: str
    object_word: str
    model_id: str = "sd-v1.4"
    steps: int = 50
    guidance_scale: float = 7.5
    inversion_guidance_scale: float = 1.0
    unconditional_prompt: str = ""
    injection: InjectionSchedule | None = None
    localization: bool = True
    mask_threshold: float = 0.3
    mask_convention: str = "edited-inside"
    mask_resolution: int = 16
    seed: int = 0
    # test hook: condition the edit branch on this prompt instead of the texture word
    target_prompt_override: str | None = None

    def __post_init__(self):
        if self.injection is None:
            self.injection = InjectionSchedule.scaled(self.steps)

    @property
    def target_prompt(self) -> str:
        return self.target_prompt_override if self.target_prompt_override is not None else self.texture

    def validate(self, for_edit: bool = True) -> "EditConfig":
        """Check invariants; ``for_edit=False`` (reconstruction only) tolerates a missing texture and object word."""
        if not self.source_prompt or not self.source_prompt.strip():
            raise ValidationError("source prompt is empty", field="source_prompt")
        if self.target_prompt_override is None and (for_edit or self.texture):
            if not _WORD.match(self.texture or ""):
                raise ValidationError(f"texture must be a single word, got {self.texture!r}", field="texture")
        if (for_edit or self.object_word) and (not self.object_word or
                                               self.object_word.lower() not in _words(self.source_prompt)):
            raise ValidationError(f"object word {self.object_word!r} does not appear in the source prompt",
                                  field="object_word")
        if self.steps < 1:
            raise ValidationError(f"steps must be positive, got {self.steps}", field="steps")
        if self.guidance_scale < 0 or self.inversion_guidance_scale < 0:
            raise ValidationError("guidance scales must be non-negative", field="guidance")
        if not 0.0 < self.mask_threshold < 1.0:
            raise ValidationError(f"mask threshold must be in (0, 1), got {self.mask_threshold}",
                                  field="mask_threshold")
        if self.mask_convention not in loc.CONVENTIONS:
            raise ValidationError(f"mask convention must be one of {loc.CONVENTIONS}", field="mask_convention")
        if self.injection.num_steps != self.steps:
            raise ConfigurationError(f"injection schedule is for {self.injection.num_steps} steps, "
                                     f"config runs {self.steps}", field="injection")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        inj = self.injection
        d["injection"] = {
            "query_layers": sorted(inj.query_layers), "query_steps": inj.query_steps,
            "residual_layers": sorted(inj.residual_layers), "residual_steps": inj.residual_steps,
            "inject_queries": inj.inject_queries, "inject_residuals": inj.inject_residuals,
        }
        return d


@dataclass
class StepDiagnostics:
    step: int
    timestep: int
    queries_injected: int
    residuals_injected: int
    mask_area: float | None


@dataclass
class EditResult:
    edited: np.ndarray  # HxWx3 uint8
    reconstruction: np.ndarray
    mask: np.ndarray | None  # HxW bool at image resolution
    edit_mask: loc.EditMask | None
    diagnostics: list[StepDiagnostics] = field(default_factory=list)
    timing: dict[str, float] = field(default_factory=dict)
    edited_latent: torch.Tensor | None = None
    source_latent: torch.Tensor | None = None


def check_disentangled(handle: BackboneHandle, config: EditConfig) -> None:
    """The edit branch's text conditioning may share no token with the source prompt except the texture word."""
    if config.target_prompt_override is not None:
        return
    tok = handle.tokenizer
    target = set(handle.token_ids(config.target_prompt)) - {tok.bos_token_id, tok.eos_token_id}
    leaked = (target & set(tok.word_ids(config.source_prompt))) - set(tok.word_ids(config.texture))
    if leaked:
        raise ValidationError(f"target conditioning leaks source-prompt tokens {sorted(leaked)}", field="texture")


def to_uint8(image: torch.Tensor) -> np.ndarray:
    arr = image[0].permute(1, 2, 0).float().cpu().numpy()
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def _latent_mask_to_image(mask: torch.Tensor, size: tuple[int, int]) -> np.ndarray:
    up = torch.nn.functional.interpolate(mask[None, None].float(), size=size, mode="nearest")[0, 0]
    return up.cpu().numpy() > 0.5


def _user_mask(mask, handle: BackboneHandle, latent_hw) -> loc.EditMask:
    if isinstance(mask, loc.EditMask):
        return mask
    m = torch.as_tensor(np.asarray(mask), dtype=torch.float32)
    if m.ndim == 3:
        m = m[..., 0] if m.shape[-1] in (1, 3, 4) else m[0]
    if m.max() > 1:
        m = m / 255.0
    return loc.EditMask.from_binary(m, latent_hw, source="user")


def check_image(image) -> None:
    """Reject images the latent codec cannot take, before any model work."""
    shape = tuple(image.shape[-2:]) if isinstance(image, torch.Tensor) else np.asarray(image).shape[:2]
    if len(shape) != 2 or shape[0] % 8 or shape[1] % 8:
        raise ShapeError(f"image size {'x'.join(map(str, shape))} is not divisible by 8 (no silent resize)",
                         field="image")


class _Stage:
    """Tracks which module is running so failures can name it."""

    def __init__(self):
        self.module = "pipeline"
        self.step: int | None = None

    def __call__(self, module: str):
        self.module = module
        return self


def edit(image, config: EditConfig, handle: BackboneHandle, mask=None) -> EditResult:
    """Transfer ``config.texture`` onto ``config.object_word``'s region of ``image``.

    ``mask`` (binary, image or latent resolution) overrides the
    cross-attention mask; an all-zeros mask reduces the edit to reconstruction.
    """
    config.validate()
    check_image(image)
    check_inventory(handle, config)
    check_disentangled(handle, config)
    stage = _Stage()
    timing: dict[str, float] = {}
    started = time.perf_counter()
    torch.manual_seed(config.seed)
    try:
        stage("backbone")
        injection = config.injection.bind(handle.layers)
        schedule = handle.noise_schedule(config.steps)
        token_idx = handle.token_indices(config.source_prompt, config.object_word)
        emb_s = handle.encode_prompt(config.source_prompt)
        emb_t = handle.encode_prompt(config.target_prompt)
        uncond = handle.unconditional_embedding(config.unconditional_prompt)
        x0 = handle.encode_image(image)
        latent_hw = tuple(x0.shape[-2:])
        timing["encode"] = time.perf_counter() - started

        stage("sampler")
        t0 = time.perf_counter()
        inverted = ddim_invert(x0, emb_s, handle, schedule, config.inversion_guidance_scale, uncond)
        timing["invert"] = time.perf_counter() - t0

        fixed_mask = _user_mask(mask, handle, latent_hw) if mask is not None else None
        localize = config.localization or fixed_mask is not None
        map_layers = handle.layers_at(config.mask_resolution) if localize and fixed_mask is None else []
        attn_layers = [l.index for l in handle.layers] if localize else []
        grids = {l.index: l.grid(latent_hw) for l in handle.layers}

        z_src = z_tgt = inverted.final
        running: loc.AggregatedAttentionMap | None = None
        edit_mask = fixed_mask
        diagnostics = []
        t0 = time.perf_counter()
        for step, (t, t_prev) in enumerate(schedule.denoising_pairs()):
            stage.step = step
            stage("backbone")
            taps_out = injection.required_taps(step)
            taps_out += [(l, ATTN_OUTPUT) for l in attn_layers] + [(l, CROSS_MAP) for l in map_layers]
            eps_s, taps_s = handle.predict_noise(z_src, t, emb_s, taps_out=taps_out, step=step, branch="source")

            if map_layers:
                stage("localization")
                current = loc.aggregate_cross_attention([tp.payload for tp in taps_s if tp.kind == CROSS_MAP],
                                                        token_idx)
                running = current if running is None else running.update(current)
                edit_mask = loc.binarize_mask(running, config.mask_threshold, latent_hw)

            stage("control")
            taps_in = build_injection_set(taps_s, step, injection)

            edits = None
            if localize and edit_mask is not None:
                stage("localization")
                outputs = {tp.layer: tp.payload for tp in taps_s if tp.kind == ATTN_OUTPUT}
                edits = {layer: _attention_blend(outputs[layer], edit_mask.at(grids[layer]), config.mask_convention)
                         for layer in attn_layers}

            stage("backbone")
            eps_t, _ = guided_noise(handle, z_tgt, t, emb_t, uncond, config.guidance_scale, taps_in=taps_in,
                                    attention_edits=edits, step=step)
            stage("sampler")
            z_src = ddim_step(z_src, eps_s, t, t_prev, schedule)
            z_tgt = ddim_step(z_tgt, eps_t, t, t_prev, schedule)
            if localize and edit_mask is not None:
                stage("localization")
                z_tgt = loc.blend_latents(z_tgt, z_src, edit_mask.latent_mask)
            diagnostics.append(StepDiagnostics(
                step, t, sum(tp.kind == QUERY for tp in taps_in), sum(tp.kind == RESIDUAL for tp in taps_in),
                edit_mask.area_fraction if edit_mask is not None else None))
        timing["denoise"] = time.perf_counter() - t0

        stage.step = None
        stage("backbone")
        t0 = time.perf_counter()
        edited = to_uint8(handle.decode_latent(z_tgt))
        reconstruction = to_uint8(handle.decode_latent(z_src))
        timing["decode"] = time.perf_counter() - t0
    except TexEditError as exc:
        raise PipelineError(stage.module, stage.step, exc) from exc
    timing["total"] = time.perf_counter() - started

    mask_image = _latent_mask_to_image(edit_mask.latent_mask, edited.shape[:2]) if edit_mask is not None else None
    return EditResult(edited=edited, reconstruction=reconstruction, mask=mask_image, edit_mask=edit_mask,
                      diagnostics=diagnostics, timing=timing, edited_latent=z_tgt, source_latent=z_src)


def _attention_blend(r_source, mask, convention):
    def blend(r_target):
        return loc.blend_attention(r_source, r_target, mask, convention)

    return blend


def reconstruct_latent(image, config: EditConfig, handle: BackboneHandle) -> torch.Tensor:
    config.validate(for_edit=False)
    check_image(image)
    try:
        schedule = handle.noise_schedule(config.steps)
        emb = handle.encode_prompt(config.source_prompt)
        uncond = handle.unconditional_embedding(config.unconditional_prompt)
        x0 = handle.encode_image(image)
        inverted = ddim_invert(x0, emb, handle, schedule, config.inversion_guidance_scale, uncond)
        return ddim_denoise(inverted.final, emb, handle, schedule, 1.0, branch="source").final
    except TexEditError as exc:
        raise PipelineError("sampler", None, exc) from exc


def reconstruct(image, config: EditConfig, handle: BackboneHandle) -> np.ndarray:
    """Invert and re-denoise under the source prompt at unit guidance (the no-edit baseline)."""
    latent = reconstruct_latent(image, config, handle)
    return to_uint8(handle.decode_latent(latent))


def test_config(source_prompt: str, texture: str, object_word: str, **overrides) -> EditConfig:
    """Config sized for the tiny test backbone (7 basis blocks, 16x16 latent)."""
    steps = overrides.pop("steps", 50)
    defaults = dict(
        model_id="tiny-test-backbone", steps=steps,
        injection=InjectionSchedule.scaled(steps, query_layers=frozenset({5, 6}), residual_layers=frozenset({3})),
    )
    defaults.update(overrides)
    return EditConfig(source_prompt, texture, object_word, **defaults)


__all__ = ["EditConfig", "EditResult", "StepDiagnostics", "edit", "reconstruct", "reconstruct_latent",
           "check_disentangled", "test_config", "replace"]
