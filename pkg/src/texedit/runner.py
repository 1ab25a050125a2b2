"""Job execution shared by the local CLI and the HTTP service."""
from __future__ import annotations

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io, metrics
from .backbone import TINY_IDS, BackboneHandle, load_backbone
from .config import Settings, to_edit_config
from .errors import ValidationError
from .pipeline import EditResult, check_image, edit, reconstruct

logger = logging.getLogger(__name__)

EVAL_FILES = ("source.png", "edited.png", "mask.png", "texture.txt")


class BackboneCache:
    """Loads each backbone once per process; handles are immutable and shared across jobs."""

    def __init__(self, loader=load_backbone):
        self._loader = loader
        self._handles: dict[tuple, BackboneHandle] = {}
        self._lock = threading.Lock()

    def get(self, model_id: str, seed: int = 0, device: str | None = None) -> BackboneHandle:
        # only the random tiny backbones depend on the seed
        key = (model_id, seed if model_id in TINY_IDS else None, device)
        with self._lock:
            if key not in self._handles:
                self._handles[key] = self._loader(model_id, device=device, seed=seed)
            return self._handles[key]


def run_edit(settings: Settings, image: np.ndarray, cache: BackboneCache, mask: np.ndarray | None = None) -> EditResult:
    config = to_edit_config(settings)
    config.validate()
    check_image(image)
    if mask is not None and mask.shape != image.shape[:2]:
        raise ValidationError(f"mask {mask.shape} does not match image {image.shape[:2]}", field="mask_in")
    handle = cache.get(config.model_id, config.seed, settings.device)
    return edit(image, config, handle, mask=mask)


@dataclass
class ReconstructionResult:
    image: np.ndarray
    psnr: float
    timing: dict[str, float]


def run_reconstruct(settings: Settings, image: np.ndarray, cache: BackboneCache) -> ReconstructionResult:
    config = to_edit_config(settings)
    config.validate(for_edit=False)
    check_image(image)
    handle = cache.get(config.model_id, config.seed, settings.device)
    started = time.perf_counter()
    out = reconstruct(image, config, handle)
    return ReconstructionResult(out, metrics.psnr_background(out, image), {"total": time.perf_counter() - started})


@dataclass
class EvalEntry:
    name: str
    source: np.ndarray
    edited: np.ndarray
    mask: np.ndarray
    texture: str


def scan_eval_dir(root: str | Path) -> list[EvalEntry]:
    """Read ``root/<name>/{source.png, edited.png, mask.png, texture.txt}`` tuples.

    Raises a ValidationError listing every incomplete entry.
    """
    root = Path(root)
    if not root.is_dir():
        raise ValidationError(f"{root} is not a directory", field="dir")
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise ValidationError(f"{root} contains no evaluation entries", field="dir")
    problems = []
    for d in dirs:
        missing = [f for f in EVAL_FILES if not (d / f).is_file()]
        if missing:
            problems.append(f"{d.name} (missing {', '.join(missing)})")
    if problems:
        raise ValidationError("incomplete evaluation entries: " + "; ".join(problems), field="dir")
    return [EvalEntry(d.name, io.read_image(d / "source.png"), io.read_image(d / "edited.png"),
                      io.read_mask(d / "mask.png"), (d / "texture.txt").read_text(encoding="utf-8").strip())
            for d in dirs]


def evaluate_entries(entries: list[EvalEntry], evaluator: metrics.Evaluator, workers: int = 1) -> metrics.MetricsReport:
    def one(e: EvalEntry):
        return evaluator.evaluate(e.name, e.source, e.edited, e.mask, e.texture)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(one, entries))
    else:
        rows = [one(e) for e in entries]
    return metrics.MetricsReport(rows, notes=list(evaluator.notes))


def make_evaluator(networks: str = "pretrained", cache_dir: str | None = None) -> metrics.Evaluator:
    if networks == "pretrained":
        return metrics.Evaluator.pretrained(cache_dir=cache_dir)
    if networks == "test-doubles":
        return metrics.Evaluator.test_doubles()
    if networks == "none":
        return metrics.Evaluator(notes=["learned metrics disabled"])
    raise ValidationError(f"unknown metric networks {networks!r}", field="networks")
