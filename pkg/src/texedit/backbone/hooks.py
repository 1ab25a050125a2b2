"""U-Net instrumentation: feature recording, injection and attention-output edits.

Hooks are installed once at load time and stay inert unless a :class:`TapCall`
is active in the current context, so recording state is per call (and per
thread) rather than global.
"""
from __future__ import annotations

from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Callable, Mapping

import torch
import torch.nn.functional as F

from ..errors import InjectionError
from ..features import ATTN_OUTPUT, CROSS_MAP, KEY, QUERY, RESIDUAL, VALUE


@dataclass
class TapCall:
    requests: set[tuple[int, str]]
    injections: dict[tuple[int, str], torch.Tensor]
    attention_edits: Mapping[int, Callable[[torch.Tensor], torch.Tensor]] = field(default_factory=dict)
    recorded: dict[tuple[int, str], torch.Tensor] = field(default_factory=dict)
    applied: set[tuple[int, str]] = field(default_factory=set)
    grids: dict[int, tuple[int, int]] = field(default_factory=dict)

    def tap(self, layer: int, kind: str, computed: torch.Tensor) -> torch.Tensor:
        key = (layer, kind)
        if key in self.requests:
            self.recorded[key] = computed.detach().clone()
        payload = self.injections.get(key)
        if payload is None:
            return computed
        if payload.shape[1:] != computed.shape[1:] or payload.shape[0] not in (1, computed.shape[0]):
            raise InjectionError(layer, kind, f"payload shape {tuple(payload.shape)} does not fit computed "
                                              f"feature {tuple(computed.shape)}")
        self.applied.add(key)
        return payload.to(device=computed.device, dtype=computed.dtype).expand_as(computed)


_ACTIVE: ContextVar[TapCall | None] = ContextVar("texedit_tap_call", default=None)


def active_call() -> TapCall | None:
    return _ACTIVE.get()


def activate(call: TapCall):
    return _ACTIVE.set(call)


def deactivate(token) -> None:
    _ACTIVE.reset(token)


class TapAttnProcessor:
    """Attention processor mirroring diffusers' default, with tap points.

    Self-attention exposes Q, K, V and the pre-projection output; cross-attention
    exposes the softmax probabilities. Self-attention goes through fused SDPA,
    cross-attention through explicit scores (the map is needed).
    """

    def __init__(self, layer: int, is_cross: bool):
        self.layer = layer
        self.is_cross = is_cross

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, temb=None,
                 *args, **kwargs):
        call = _ACTIVE.get()
        residual = hidden_states
        if attn.spatial_norm is not None:
            hidden_states = attn.spatial_norm(hidden_states, temb)

        input_ndim = hidden_states.ndim
        if input_ndim == 4:
            batch_size, channel, height, width = hidden_states.shape
            hidden_states = hidden_states.view(batch_size, channel, height * width).transpose(1, 2)

        batch_size, sequence_length, _ = (
            hidden_states.shape if encoder_hidden_states is None else encoder_hidden_states.shape
        )
        if attn.group_norm is not None:
            hidden_states = attn.group_norm(hidden_states.transpose(1, 2)).transpose(1, 2)

        query = attn.to_q(hidden_states)
        if encoder_hidden_states is None:
            encoder_hidden_states = hidden_states
        elif attn.norm_cross:
            encoder_hidden_states = attn.norm_encoder_hidden_states(encoder_hidden_states)
        key = attn.to_k(encoder_hidden_states)
        value = attn.to_v(encoder_hidden_states)

        if self.is_cross:
            out = self._cross(attn, call, query, key, value, attention_mask, sequence_length, batch_size)
        else:
            if call is not None:
                query = call.tap(self.layer, QUERY, query)
                key = call.tap(self.layer, KEY, key)
                value = call.tap(self.layer, VALUE, value)
            out = self._self(attn, query, key, value, attention_mask, sequence_length, batch_size)
            if call is not None:
                out = call.tap(self.layer, ATTN_OUTPUT, out)
                edit = call.attention_edits.get(self.layer)
                if edit is not None:
                    out = edit(out)

        out = attn.to_out[0](out)
        out = attn.to_out[1](out)
        if input_ndim == 4:
            out = out.transpose(-1, -2).reshape(batch_size, channel, height, width)
        if attn.residual_connection:
            out = out + residual
        return out / attn.rescale_output_factor

    @staticmethod
    def _self(attn, query, key, value, attention_mask, sequence_length, batch_size):
        heads = attn.heads
        head_dim = query.shape[-1] // heads
        if attention_mask is not None:
            attention_mask = attn.prepare_attention_mask(attention_mask, sequence_length, batch_size)
            attention_mask = attention_mask.view(batch_size, heads, -1, attention_mask.shape[-1])
        q = query.view(batch_size, -1, heads, head_dim).transpose(1, 2)
        k = key.view(batch_size, -1, heads, head_dim).transpose(1, 2)
        v = value.view(batch_size, -1, heads, head_dim).transpose(1, 2)
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=attention_mask, scale=attn.scale)
        return out.transpose(1, 2).reshape(batch_size, -1, heads * head_dim).to(query.dtype)

    def _cross(self, attn, call, query, key, value, attention_mask, sequence_length, batch_size):
        attention_mask = attn.prepare_attention_mask(attention_mask, sequence_length, batch_size)
        q = attn.head_to_batch_dim(query)
        k = attn.head_to_batch_dim(key)
        v = attn.head_to_batch_dim(value)
        probs = attn.get_attention_scores(q, k, attention_mask)
        if call is not None and (self.layer, CROSS_MAP) in call.requests:
            h, w = call.grids[self.layer]
            grid = probs.reshape(batch_size, attn.heads, h, w, probs.shape[-1])
            call.recorded[(self.layer, CROSS_MAP)] = grid.detach().clone()
        return attn.batch_to_head_dim(torch.bmm(probs, v))


def residual_hook(layer: int):
    def hook(module, args, output):
        call = _ACTIVE.get()
        if call is None:
            return output
        return call.tap(layer, RESIDUAL, output)

    return hook
