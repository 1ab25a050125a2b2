"""Miniature, randomly initialized stand-ins for the Stable Diffusion components.

They honour the same contracts as the real backbone (tokenizer interface,
latent encode/decode, instrumented conditional U-Net) so the editing
machinery can be exercised on CPU in seconds without downloading weights.
"""
from __future__ import annotations

import re
import zlib

import torch
import torch.nn.functional as F
from torch import nn

TINY_LATENT = 16  # 128x128 images
TINY_WIDTH = 32
OUTPUT_SCALE = 0.05


class WordTokenizer:
    """Lower-cased word tokenizer with hashed ids, padded CLIP-style with EOS."""

    bos_token_id = 0
    eos_token_id = 1

    def __init__(self, vocab_size: int = 1000, model_max_length: int = 77):
        self.vocab_size = vocab_size
        self.model_max_length = model_max_length

    def word_ids(self, text: str) -> list[int]:
        words = re.findall(r"[a-z0-9]+", text.lower())
        return [2 + zlib.crc32(w.encode()) % (self.vocab_size - 2) for w in words]

    def __call__(self, text: str) -> list[int]:
        ids = [self.bos_token_id] + self.word_ids(text)[: self.model_max_length - 2] + [self.eos_token_id]
        return ids + [self.eos_token_id] * (self.model_max_length - len(ids))


class PoolingAutoencoder(nn.Module):
    """Deterministic 8x latent codec: area pooling plus a fixed orthonormal 3 -> 4 channel lift.

    Round trips are exact for images that are constant on 8x8 cells.
    """

    scaling_factor = 1.0
    downsample = 8

    def __init__(self):
        super().__init__()
        hadamard = torch.tensor([[1, 1, 1, 1], [1, -1, 1, -1], [1, 1, -1, -1], [1, -1, -1, 1]],
                                dtype=torch.float32) / 2
        self.register_buffer("lift", hadamard[:, :3].contiguous())

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        pooled = F.avg_pool2d(x, self.downsample)
        return torch.einsum("lc,bchw->blhw", self.lift, pooled)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        rgb = torch.einsum("lc,blhw->bchw", self.lift, z)
        return F.interpolate(rgb, scale_factor=self.downsample, mode="nearest")


def build_tiny_components(seed: int = 0):
    """(unet, text_encoder, tokenizer, vae) with weights drawn from ``seed``."""
    from diffusers import UNet2DConditionModel
    from transformers import CLIPTextConfig, CLIPTextModel

    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        unet = UNet2DConditionModel(
            sample_size=TINY_LATENT,
            in_channels=4,
            out_channels=4,
            layers_per_block=1,
            block_out_channels=(32, 64),
            down_block_types=("CrossAttnDownBlock2D", "CrossAttnDownBlock2D"),
            up_block_types=("CrossAttnUpBlock2D", "CrossAttnUpBlock2D"),
            cross_attention_dim=TINY_WIDTH,
            attention_head_dim=4,
            norm_num_groups=8,
        )
        text_encoder = CLIPTextModel(CLIPTextConfig(
            vocab_size=1000, hidden_size=TINY_WIDTH, intermediate_size=64, num_hidden_layers=2,
            num_attention_heads=4, max_position_embeddings=77, bos_token_id=0, eos_token_id=1, pad_token_id=1,
        ))
    finally:
        torch.random.set_rng_state(gen_state)
    with torch.no_grad():
        # DDIM inversion needs a noise estimate that varies slowly along the trajectory
        unet.conv_out.weight.mul_(OUTPUT_SCALE)
        unet.conv_out.bias.mul_(OUTPUT_SCALE)
    unet.eval()
    text_encoder.eval()
    return unet, text_encoder, WordTokenizer(), PoolingAutoencoder()
