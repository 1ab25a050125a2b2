"""Edit localization: object masks from cross-attention, and masked blending.

Convention: a mask value of 1 marks the target object. ``"edited-inside"``
puts the edit branch's features inside the mask for both the attention and
the latent blend. ``"verbatim"`` reproduces the printed attention blend, which
places the source branch's attention output inside the mask instead.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, ShapeError, TokenError

logger = logging.getLogger(__name__)

CONVENTIONS = ("edited-inside", "verbatim")


@dataclass
class AggregatedAttentionMap:
    """Mean cross-attention map for one token group, optionally averaged over steps."""

    values: torch.Tensor  # (H, W), >= 0
    token_indices: tuple[int, ...]
    num_maps: int = 0
    num_steps: int = 1

    def normalized(self) -> torch.Tensor:
        lo, hi = self.values.min(), self.values.max()
        if self.degenerate:
            return torch.zeros_like(self.values)
        return (self.values - lo) / (hi - lo)

    @property
    def degenerate(self) -> bool:
        return bool(self.values.max() <= self.values.min())

    def update(self, other: "AggregatedAttentionMap") -> "AggregatedAttentionMap":
        """Fold another step's map into the running mean."""
        if other.values.shape != self.values.shape:
            raise ShapeError(f"cannot average maps of shape {tuple(self.values.shape)} and {tuple(other.values.shape)}")
        n = self.num_steps + other.num_steps
        values = self.values + (other.values - self.values) * (other.num_steps / n)
        return AggregatedAttentionMap(values, self.token_indices, self.num_maps, n)


@dataclass
class EditMask:
    mask: torch.Tensor  # (h, w) binary at the attention resolution
    latent_mask: torch.Tensor  # (H, W) binary at latent resolution
    threshold: float | None = None
    token_indices: tuple[int, ...] = ()
    steps_aggregated: int = 0
    source: str = "attention"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_binary(cls, mask: torch.Tensor, latent_size: tuple[int, int], attention_size=None, source="user"):
        """Build from any binary mask (e.g. user supplied at image resolution)."""
        mask = (torch.as_tensor(mask, dtype=torch.float32) > 0.5).float()
        attention_size = attention_size or latent_size
        return cls(mask=resample_mask(mask, attention_size), latent_mask=resample_mask(mask, latent_size),
                   source=source)

    @classmethod
    def full(cls, attention_size, latent_size, value: float = 1.0, source="constant"):
        return cls(mask=torch.full(attention_size, value), latent_mask=torch.full(latent_size, value), source=source)

    def at(self, size: tuple[int, int]) -> torch.Tensor:
        """Binary mask resampled to ``size`` (cached)."""
        size = tuple(size)
        if size == tuple(self.latent_mask.shape):
            return self.latent_mask
        if size not in self._cache:
            self._cache[size] = resample_mask(self.mask, size)
        return self._cache[size]

    @property
    def area_fraction(self) -> float:
        return float(self.latent_mask.mean())


def resample_mask(mask: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Resize a binary mask and re-binarize at 0.5.

    Shrinking uses area averaging, enlarging uses bilinear interpolation.
    """
    mask = torch.as_tensor(mask, dtype=torch.float32)
    size = tuple(int(s) for s in size)
    if tuple(mask.shape) == size:
        return (mask >= 0.5).float()
    x = mask[None, None]
    if size[0] <= mask.shape[0] and size[1] <= mask.shape[1]:
        y = F.adaptive_avg_pool2d(x, size)
    else:
        y = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    return (y[0, 0] >= 0.5).float()


def aggregate_cross_attention(maps, token_index) -> AggregatedAttentionMap:
    """Average cross-attention probabilities over heads and layers for one token (or sub-token group).

    Args:
        maps: iterable of tensors shaped (heads, H, W, tokens); leading batch dimensions are folded
            into heads. All maps must share one spatial grid.
        token_index: int or sequence of ints; several indices (sub-tokens of one word) are averaged.
    """
    indices = (token_index,) if isinstance(token_index, int) else tuple(token_index)
    if not indices:
        raise TokenError("no token index given")
    stacked, size = [], None
    for m in maps:
        m = torch.as_tensor(m, dtype=torch.float32)
        if m.ndim < 4:
            raise ShapeError(f"cross-attention map must be (heads, H, W, tokens), got {tuple(m.shape)}")
        m = m.reshape(-1, *m.shape[-3:])
        if size is not None and m.shape[1:3] != size:
            raise ShapeError("cross-attention maps must share one spatial resolution")
        size = m.shape[1:3]
        n_tokens = m.shape[-1]
        for i in indices:
            if not 0 <= i < n_tokens:
                raise TokenError(f"token index {i} out of range for {n_tokens} tokens")
        stacked.append(m[..., list(indices)].mean(-1))
    if not stacked:
        raise ConfigurationError("no cross-attention layers at the mask resolution")
    heads = torch.cat(stacked, dim=0)
    return AggregatedAttentionMap(heads.mean(0), indices, num_maps=heads.shape[0])


def binarize_mask(agg: AggregatedAttentionMap, threshold: float, latent_size: tuple[int, int] | None = None) -> EditMask:
    """Min-max normalize, threshold, and lift to latent resolution.

    A constant map carries no location information; the mask then covers
    everything (edit everywhere rather than nowhere) and a warning is logged.
    """
    if not 0.0 < threshold < 1.0:
        raise ConfigurationError(f"mask threshold must be in (0, 1), got {threshold}")
    latent_size = tuple(latent_size or agg.values.shape)
    if agg.degenerate:
        logger.warning("cross-attention map is constant; using an all-ones mask")
        mask = torch.ones_like(agg.values)
    else:
        mask = (agg.normalized() >= threshold).float()
    return EditMask(mask=mask, latent_mask=resample_mask(mask, latent_size), threshold=threshold,
                    token_indices=agg.token_indices, steps_aggregated=agg.num_steps)


def _mask_for(x: torch.Tensor, mask: torch.Tensor, tokens_last: bool) -> torch.Tensor:
    mask = torch.as_tensor(mask, dtype=x.dtype, device=x.device)
    if tokens_last:
        # (B, N, C) token layout: one mask value per token
        if mask.numel() != x.shape[-2]:
            raise ShapeError(f"mask with {mask.numel()} cells cannot cover {x.shape[-2]} tokens")
        return mask.reshape(-1, 1)
    if tuple(mask.shape) != tuple(x.shape[-2:]):
        raise ShapeError(f"mask shape {tuple(mask.shape)} != spatial shape {tuple(x.shape[-2:])}")
    return mask


def blend_attention(r_source: torch.Tensor, r_target: torch.Tensor, mask, convention: str = "edited-inside"):
    """Blend self-attention outputs (..., tokens, channels) under a binary token mask."""
    if r_source.shape[-2:] != r_target.shape[-2:] or r_source.ndim != r_target.ndim:
        raise ShapeError(f"attention outputs differ: {tuple(r_source.shape)} vs {tuple(r_target.shape)}")
    if convention not in CONVENTIONS:
        raise ConfigurationError(f"unknown mask convention {convention!r}")
    m = _mask_for(r_target, mask, tokens_last=True)
    inside, outside = (r_target, r_source) if convention == "edited-inside" else (r_source, r_target)
    return inside * m + outside * (1 - m)


def blend_latents(z_target: torch.Tensor, z_source: torch.Tensor, mask) -> torch.Tensor:
    """Keep the edit branch inside the mask and the source branch elsewhere."""
    if z_target.shape != z_source.shape:
        raise ShapeError(f"latents differ: {tuple(z_target.shape)} vs {tuple(z_source.shape)}")
    m = _mask_for(z_target, mask, tokens_last=False)
    return z_target * m + z_source * (1 - m)
