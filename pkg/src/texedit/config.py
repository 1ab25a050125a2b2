"""Run settings: defaults, config files, flag overrides and run manifests.

Precedence, lowest first: built-in defaults, per-model defaults (the tiny test
backbones have their own layer inventory), the config file, command-line
flags. Every flag has a config key of the same name with dashes replaced by
underscores. A run manifest is itself a valid config file, so
``texedit edit --config out.png.manifest.json`` replays a run.
"""
from __future__ import annotations

import json
import platform
from importlib import metadata
from pathlib import Path
from typing import Any, Literal

import pydantic
import yaml
from pydantic import BaseModel, ConfigDict

from .backbone import TINY_IDS
from .control import InjectionSchedule
from .errors import ConfigurationError
from .io import atomic_write_text
from .pipeline import EditConfig

SCHEMA_VERSION = 1
MANIFEST_KIND = "texedit-run-manifest"


class Settings(BaseModel):
    """Flat run settings. ``None`` means "not set at this level"."""

    model_config = ConfigDict(extra="forbid")

    model: str | None = None
    image: str | None = None
    out: str | None = None
    source_prompt: str | None = None
    texture: str | None = None
    object_word: str | None = None
    steps: int | None = None
    guidance: float | None = None
    inversion_guidance: float | None = None
    unconditional_prompt: str | None = None
    seed: int | None = None
    mask_threshold: float | None = None
    mask_convention: Literal["edited-inside", "verbatim"] | None = None
    mask_resolution: int | None = None
    localization: bool | None = None
    mask_in: str | None = None
    mask_out: str | None = None
    query_layers: list[int] | None = None
    query_fraction: float | None = None
    query_steps: int | None = None
    residual_layers: list[int] | None = None
    residual_steps: int | None = None
    inject_queries: bool | None = None
    inject_residuals: bool | None = None
    device: str | None = None


DEFAULTS = Settings(
    model="sd-v1.4", steps=50, guidance=7.5, inversion_guidance=1.0, unconditional_prompt="", seed=0,
    mask_threshold=0.3, mask_convention="edited-inside", mask_resolution=16, localization=True,
    query_layers=[12, 13, 14, 15], query_fraction=0.8, residual_layers=[7], inject_queries=True,
    inject_residuals=True,
)

# tiny backbones have 7 basis blocks: 3 opens the decoder, 5-6 are its full-resolution blocks
MODEL_DEFAULTS = {mid: Settings(query_layers=[5, 6], residual_layers=[3]) for mid in TINY_IDS}


def parse_settings(data: dict[str, Any], origin: str = "config") -> Settings:
    try:
        return Settings.model_validate(data)
    except pydantic.ValidationError as exc:
        err = exc.errors()[0]
        key = ".".join(str(p) for p in err["loc"]) or None
        raise ConfigurationError(f"{origin}: {key}: {err['msg']}", field=key) from exc


def load_config_file(path: str | Path) -> Settings:
    """Read a YAML (or JSON) config file or run manifest."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}", field="config") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"config {path} must be a mapping", field="config")
    if data.get("kind") == MANIFEST_KIND:
        data = dict(data.get("config") or {}, schema_version=data.get("schema_version"))
    version = data.pop("schema_version", None)
    if version is None:
        raise ConfigurationError(f"config {path} has no schema_version", field="schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigurationError(f"config {path} has schema_version {version}; this release reads {SCHEMA_VERSION}",
                                 field="schema_version")
    return parse_settings(data, origin=str(path))


def merge(*layers: Settings) -> Settings:
    merged: dict[str, Any] = {}
    for layer in layers:
        merged.update(layer.model_dump(exclude_none=True))
    return Settings(**merged)


def resolve(flags: Settings | dict | None = None, config_path: str | Path | None = None) -> Settings:
    flags = flags if isinstance(flags, Settings) else parse_settings(flags or {}, origin="flags")
    file_settings = load_config_file(config_path) if config_path else Settings()
    model = flags.model or file_settings.model or DEFAULTS.model
    return merge(DEFAULTS, MODEL_DEFAULTS.get(model, Settings()), file_settings, flags)


def injection_schedule(s: Settings) -> InjectionSchedule:
    query_steps = s.query_steps if s.query_steps is not None else round(s.query_fraction * s.steps)
    return InjectionSchedule(num_steps=s.steps, query_layers=frozenset(s.query_layers), query_steps=query_steps,
                             residual_layers=frozenset(s.residual_layers), residual_steps=s.residual_steps,
                             inject_queries=s.inject_queries, inject_residuals=s.inject_residuals)


def to_edit_config(s: Settings) -> EditConfig:
    if not s.source_prompt:
        raise ConfigurationError("source_prompt is required", field="source_prompt")
    return EditConfig(
        source_prompt=s.source_prompt, texture=s.texture or "", object_word=s.object_word or "", model_id=s.model,
        steps=s.steps, guidance_scale=s.guidance, inversion_guidance_scale=s.inversion_guidance,
        unconditional_prompt=s.unconditional_prompt, injection=injection_schedule(s), localization=s.localization,
        mask_threshold=s.mask_threshold, mask_convention=s.mask_convention, mask_resolution=s.mask_resolution,
        seed=s.seed,
    )


def versions() -> dict[str, str]:
    out = {"python": platform.python_version()}
    for dist in ("artifact", "torch", "diffusers", "transformers", "numpy", "pillow"):
        try:
            out[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            pass
    return out


def build_manifest(command: str, settings: Settings, outputs: dict[str, str], timing: dict | None = None,
                   extra: dict | None = None) -> dict:
    return {
        "kind": MANIFEST_KIND,
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config": settings.model_dump(exclude_none=True),
        "seed": settings.seed,
        "outputs": outputs,
        "timing": timing or {},
        "versions": versions(),
        **(extra or {}),
    }


def manifest_path(output: str | Path) -> Path:
    output = Path(output)
    return output.with_name(output.name + ".manifest.json")


def write_manifest(output: str | Path, manifest: dict) -> Path:
    return atomic_write_text(manifest_path(output), json.dumps(manifest, indent=2, sort_keys=True))
