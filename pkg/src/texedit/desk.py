"""The bundled 5-image evaluation set (512x512 images, 1-bit object masks, prompts, textures)."""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np
from PIL import Image


@dataclass(frozen=True)
class DeskItem:
    name: str
    image: np.ndarray  # HxWx3 uint8
    mask: np.ndarray  # HxW bool
    source_prompt: str
    object_word: str
    textures: tuple[str, ...]


def load_desk_set(size: int | None = None) -> list[DeskItem]:
    """Load the set, optionally resized to ``size`` x ``size`` (Lanczos for images, nearest for masks)."""
    root = resources.files("texedit") / "data" / "desk_set"
    index = json.loads((root / "index.json").read_text(encoding="utf-8"))
    items = []
    for entry in index:
        with Image.open(root / entry["image"]) as im, Image.open(root / entry["mask"]) as mk:
            im, mk = im.convert("RGB"), mk.convert("L")
            if size is not None:
                im = im.resize((size, size), Image.LANCZOS)
                mk = mk.resize((size, size), Image.NEAREST)
            items.append(DeskItem(entry["name"], np.asarray(im), np.asarray(mk) > 127, entry["source_prompt"],
                                  entry["object_word"], tuple(entry["textures"])))
    return items
