"""Feature taps: intermediate U-Net features recorded from, or injected into, one noise prediction."""
from __future__ import annotations

from dataclasses import dataclass

import torch

QUERY = "self-attention-query"
KEY = "self-attention-key"
VALUE = "self-attention-value"
RESIDUAL = "residual-block-output"
ATTN_OUTPUT = "self-attention-output"
CROSS_MAP = "cross-attention-map"

KINDS = (QUERY, KEY, VALUE, RESIDUAL, ATTN_OUTPUT, CROSS_MAP)
INJECTABLE_KINDS = (QUERY, KEY, VALUE, RESIDUAL, ATTN_OUTPUT)


@dataclass(frozen=True)
class FeatureTap:
    """One recorded feature.

    Payload layouts: queries, keys, values and attention outputs are
    (batch, tokens, channels); residual outputs are (batch, channels, H, W);
    cross-attention maps are (batch, heads, H, W, text_tokens).
    """

    layer: int
    kind: str
    payload: torch.Tensor
    step: int | None = None
    branch: str | None = None

    @property
    def key(self) -> tuple[int, str]:
        return self.layer, self.kind
