import logging

import numpy as np
import pytest
import torch

from texedit.backbone import load_backbone
from texedit.desk import load_desk_set

TINY_SIZE = 128


@pytest.fixture(scope="session")
def tiny():
    return load_backbone("tiny-test-backbone")


@pytest.fixture(scope="session")
def stub():
    return load_backbone("tiny-stub-backbone")


@pytest.fixture(scope="session")
def desk_small():
    return load_desk_set(TINY_SIZE)


@pytest.fixture(scope="session")
def cat_image(desk_small):
    return desk_small[0].image


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _quiet_and_seeded():
    torch.manual_seed(0)
    logging.getLogger("texedit").setLevel(logging.ERROR)
    yield


@pytest.fixture(scope="session")
def sd_shaped():
    """Narrow random U-Net with Stable Diffusion v1's block layout (16 basis blocks on a 64x64 latent)."""
    from diffusers import UNet2DConditionModel

    from texedit.backbone import BackboneHandle
    from texedit.backbone.tiny import build_tiny_components

    _, text_encoder, tokenizer, vae = build_tiny_components(0)
    torch.manual_seed(0)
    unet = UNet2DConditionModel(
        sample_size=64, in_channels=4, out_channels=4, layers_per_block=2, block_out_channels=(32, 32, 64, 64),
        down_block_types=("CrossAttnDownBlock2D",) * 3 + ("DownBlock2D",),
        up_block_types=("UpBlock2D",) + ("CrossAttnUpBlock2D",) * 3,
        cross_attention_dim=32, attention_head_dim=8, norm_num_groups=8,
    ).eval()
    return BackboneHandle("sd-shaped-random", unet, text_encoder, tokenizer, vae, latent_size=(64, 64), vae_kind="pool")


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
