"""Tuning-free texture transfer onto objects with latent diffusion.

The edit branch is conditioned on the bare texture word; structure comes from
query and residual-feature injection out of a DDIM reconstruction branch, and
the edit is confined to the object by cross-attention-derived masks.
"""
from .backbone import BackboneHandle, load_backbone
from .control import InjectionSchedule, build_injection_set, should_inject
from .errors import PipelineError, RuntimeFailure, TexEditError, ValidationError
from .pipeline import EditConfig, EditResult, edit, reconstruct

__all__ = [
    "BackboneHandle", "EditConfig", "EditResult", "InjectionSchedule", "PipelineError", "RuntimeFailure",
    "TexEditError", "ValidationError", "build_injection_set", "edit", "load_backbone", "reconstruct",
    "should_inject",
]
