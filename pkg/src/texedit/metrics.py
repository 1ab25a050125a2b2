"""Evaluation protocol for texture edits.

Four aspects: structure distance (deep self-similarity), background
preservation outside the annotated mask (PSNR, LPIPS, MSE, SSIM), and the
CLIP similarity between the texture word and the edited object region.

Images are HxW or HxWxC arrays, uint8 or float in [0, 1]. Masks are HxW with
nonzero marking the editable object region.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
import torch
import torch.nn.functional as F

from .errors import LoadError, ShapeError, SizeError, UndefinedRegionError

logger = logging.getLogger(__name__)

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03

DINO_ID = "facebook/dino-vitb8"
CLIP_ID = "openai/clip-vit-large-patch14"
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)

# (field, header, multiplier) in report column order
COLUMNS = (
    ("structure", "Structure Distance (×10³)", 1e3),
    ("psnr", "PSNR", 1.0),
    ("lpips", "LPIPS (×10³)", 1e3),
    ("mse", "MSE (×10⁴)", 1e4),
    ("ssim", "SSIM (×10²)", 1e2),
    ("clip", "CLIP Similarity", 1.0),
)


def as_float_image(image) -> np.ndarray:
    """HxWxC float64 in [0, 1]."""
    if isinstance(image, torch.Tensor):
        t = image.detach().cpu()
        if t.ndim == 4:
            t = t[0]
        image = t.permute(1, 2, 0).numpy() if t.ndim == 3 and t.shape[0] in (1, 3) else t.numpy()
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    else:
        arr = arr.astype(np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise ShapeError(f"expected an HxW or HxWxC image, got shape {arr.shape}")
    return arr


def as_mask(mask, shape: tuple[int, int]) -> np.ndarray:
    """Boolean HxW object mask."""
    m = np.asarray(mask)
    if m.ndim == 3:
        m = m[..., 0]
    if m.shape != tuple(shape):
        raise ShapeError(f"mask shape {m.shape} != image shape {tuple(shape)}")
    return m > (127 if m.dtype == np.uint8 and m.max() > 1 else 0.5)


def _pair(a, b):
    a, b = as_float_image(a), as_float_image(b)
    if a.shape != b.shape:
        raise ShapeError(f"images differ in shape: {a.shape} vs {b.shape}")
    return a, b


def _background(mask, shape) -> np.ndarray:
    bg = ~as_mask(mask, shape) if mask is not None else np.ones(shape, dtype=bool)
    if not bg.any():
        raise UndefinedRegionError("annotation mask covers the whole image; no background to compare")
    return bg


# background preservation

def mse_background(a, b, mask=None) -> float:
    a, b = _pair(a, b)
    bg = _background(mask, a.shape[:2])
    return float(((a - b) ** 2)[bg].mean())


def psnr_from_mse(mse: float, cap: float = PSNR_CAP) -> float:
    if mse <= 0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def psnr_background(a, b, mask=None, cap: float = PSNR_CAP) -> float:
    return psnr_from_mse(mse_background(a, b, mask), cap)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(a, b, window: np.ndarray | None = None) -> np.ndarray:
    """Per-window SSIM (data range 1) over valid window positions, averaged over channels.

    Output is (H - k + 1, W - k + 1); entry (i, j) is centred on pixel (i + k//2, j + k//2).
    """
    a, b = _pair(a, b)
    w = gaussian_window() if window is None else window
    k = w.shape[0]
    if a.shape[0] < k or a.shape[1] < k:
        raise SizeError(f"image {a.shape[:2]} smaller than the {k}x{k} SSIM window")
    kernel = torch.from_numpy(w)[None, None]
    x = torch.from_numpy(a).permute(2, 0, 1)[:, None]
    y = torch.from_numpy(b).permute(2, 0, 1)[:, None]
    mu_x, mu_y = F.conv2d(x, kernel), F.conv2d(y, kernel)
    sxx = F.conv2d(x * x, kernel) - mu_x ** 2
    syy = F.conv2d(y * y, kernel) - mu_y ** 2
    sxy = F.conv2d(x * y, kernel) - mu_x * mu_y
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    s = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2))
    return s[:, 0].mean(0).numpy()


def ssim_background(a, b, mask=None) -> float:
    """SSIM restricted to the background.

    Object pixels are zeroed in both images so nothing inside the mask can reach
    a window, and the map is averaged over windows centred on background pixels.
    """
    a, b = _pair(a, b)
    bg = _background(mask, a.shape[:2])
    a = a * bg[..., None]
    b = b * bg[..., None]
    s = ssim_map(a, b)
    r = SSIM_WINDOW // 2
    centers = bg[r:bg.shape[0] - r, r:bg.shape[1] - r]
    if not centers.any():
        raise UndefinedRegionError("no SSIM window is centred on a background pixel")
    return float(s[centers].mean())


class PerceptualDistance(Protocol):
    def __call__(self, a: torch.Tensor, b: torch.Tensor) -> float: ...


class LPIPSDistance:
    """LPIPS over (1, 3, H, W) tensors in [0, 1] (rescaled to [-1, 1] internally)."""

    def __init__(self, net: str = "alex", pretrained: bool = True, seed: int = 0):
        try:
            import lpips
        except ImportError as exc:  # pragma: no cover
            raise LoadError(f"lpips unavailable: {exc}") from exc
        state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            self.model = lpips.LPIPS(net=net, pretrained=pretrained, pnet_rand=not pretrained, verbose=False).eval()
        except Exception as exc:
            raise LoadError(f"cannot load LPIPS ({net}) weights: {exc}") from exc
        finally:
            torch.random.set_rng_state(state)
        self.pretrained = pretrained

    @torch.no_grad()
    def __call__(self, a: torch.Tensor, b: torch.Tensor) -> float:
        return float(self.model(a * 2 - 1, b * 2 - 1, normalize=False).mean())


def _chw(arr: np.ndarray) -> torch.Tensor:
    if arr.shape[-1] == 1:
        arr = np.repeat(arr, 3, axis=-1)
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(2, 0, 1)[None]


def lpips_background(a, b, mask=None, distance: PerceptualDistance | None = None) -> float:
    """Perceptual distance with the object region blanked to black in both images."""
    if distance is None:
        raise LoadError("no perceptual distance network configured")
    a, b = _pair(a, b)
    bg = _background(mask, a.shape[:2])[..., None]
    return float(distance(_chw(a * bg), _chw(b * bg)))


def background_metrics(edited, source, annotation_mask=None, distance: PerceptualDistance | None = None,
                       cap: float = PSNR_CAP) -> dict[str, float | None]:
    """PSNR, LPIPS, MSE and SSIM outside the annotated mask (LPIPS is None without a network)."""
    mse = mse_background(edited, source, annotation_mask)
    return {
        "psnr": psnr_from_mse(mse, cap),
        "lpips": lpips_background(edited, source, annotation_mask, distance) if distance is not None else None,
        "mse": mse,
        "ssim": ssim_background(edited, source, annotation_mask),
    }


# structure distance

def _hf_features(out) -> torch.Tensor:
    return out if isinstance(out, torch.Tensor) else out.pooler_output


class ViTKeyExtractor:
    """Last-layer self-attention keys of a ViT, one row per patch token.

    Works with any transformers ViTModel; heads are concatenated along channels.
    """

    def __init__(self, model, image_size: int = 224, mean=IMAGENET_MEAN, std=IMAGENET_STD):
        self.model = model.eval()
        self.image_size = image_size
        self.patch_size = model.config.patch_size
        self.mean = torch.tensor(mean).view(1, 3, 1, 1)
        self.std = torch.tensor(std).view(1, 3, 1, 1)
        key_layers = [m for n, m in model.named_modules() if n.endswith(("k_proj", "attention.key"))]
        if not key_layers:
            raise LoadError("feature extractor exposes no attention key projection")
        self._key_layer = key_layers[-1]

    @classmethod
    def pretrained(cls, model_id: str = DINO_ID, cache_dir: str | None = None, allow_download: bool = False):
        from transformers import ViTModel
        try:
            model = ViTModel.from_pretrained(model_id, add_pooling_layer=False, cache_dir=cache_dir,
                                             local_files_only=not allow_download)
        except Exception as exc:
            raise LoadError(f"cannot load structure feature extractor {model_id!r}: {exc}") from exc
        return cls(model)

    @classmethod
    def random(cls, seed: int = 0, image_size: int = 64, patch_size: int = 8):
        """Randomly initialized small ViT with the same interface (test double)."""
        from transformers import ViTConfig, ViTModel
        state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            model = ViTModel(ViTConfig(hidden_size=48, num_hidden_layers=2, num_attention_heads=4,
                                       intermediate_size=96, image_size=image_size, patch_size=patch_size),
                             add_pooling_layer=False)
        finally:
            torch.random.set_rng_state(state)
        return cls(model, image_size=image_size)

    @torch.no_grad()
    def __call__(self, image: torch.Tensor) -> torch.Tensor:
        h, w = image.shape[-2:]
        if h < self.patch_size or w < self.patch_size:
            raise SizeError(f"image {h}x{w} is smaller than the {self.patch_size}px patch grid")
        x = F.interpolate(image.float(), size=(self.image_size, self.image_size), mode="bicubic",
                          align_corners=False).clamp(0, 1)
        x = (x - self.mean) / self.std
        captured = {}
        handle = self._key_layer.register_forward_hook(lambda m, i, o: captured.__setitem__("k", o))
        try:
            self.model(pixel_values=x)
        finally:
            handle.remove()
        return captured["k"][0, 1:]  # drop CLS


def self_similarity(keys: torch.Tensor) -> torch.Tensor:
    k = F.normalize(keys.double(), dim=-1)
    return k @ k.T


def structure_distance(edited, source, extractor: Callable[[torch.Tensor], torch.Tensor]) -> float:
    """Mean absolute difference between the images' patch self-similarity matrices."""
    a, b = _pair(edited, source)
    sa = self_similarity(extractor(_chw(a)))
    sb = self_similarity(extractor(_chw(b)))
    return float((sa - sb).abs().mean())


# CLIP similarity

class ClipScorer:
    def __init__(self, model, tokenize: Callable[[str], list[int]], image_size: int | None = None):
        self.model = model.eval()
        self.tokenize = tokenize
        self.image_size = image_size or model.config.vision_config.image_size
        self.mean = torch.tensor(CLIP_MEAN).view(1, 3, 1, 1)
        self.std = torch.tensor(CLIP_STD).view(1, 3, 1, 1)

    @classmethod
    def pretrained(cls, model_id: str = CLIP_ID, cache_dir: str | None = None, allow_download: bool = False):
        from transformers import CLIPModel, CLIPTokenizer
        kwargs = dict(cache_dir=cache_dir, local_files_only=not allow_download)
        try:
            model = CLIPModel.from_pretrained(model_id, **kwargs)
            tok = CLIPTokenizer.from_pretrained(model_id, **kwargs)
        except Exception as exc:
            raise LoadError(f"cannot load CLIP model {model_id!r}: {exc}") from exc
        return cls(model, lambda text: tok(text, padding="max_length", max_length=77, truncation=True).input_ids)

    @classmethod
    def random(cls, seed: int = 0):
        """Small randomly initialized CLIP with a hashed word tokenizer (test double)."""
        from transformers import CLIPConfig, CLIPModel

        from .backbone.tiny import WordTokenizer
        state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            model = CLIPModel(CLIPConfig(
                text_config=dict(vocab_size=1000, hidden_size=32, intermediate_size=64, num_hidden_layers=2,
                                 num_attention_heads=4, max_position_embeddings=77, bos_token_id=0,
                                 eos_token_id=1, pad_token_id=1),
                vision_config=dict(hidden_size=32, intermediate_size=64, num_hidden_layers=2, num_attention_heads=4,
                                   image_size=32, patch_size=8),
                projection_dim=16))
        finally:
            torch.random.set_rng_state(state)
        return cls(model, WordTokenizer())

    @torch.no_grad()
    def text_embedding(self, text: str) -> torch.Tensor:
        ids = torch.tensor([self.tokenize(text)])
        return _hf_features(self.model.get_text_features(input_ids=ids))[0]

    @torch.no_grad()
    def image_embedding(self, image: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(image.float(), size=(self.image_size, self.image_size), mode="bicubic",
                          align_corners=False).clamp(0, 1)
        x = (x - self.mean) / self.std
        return _hf_features(self.model.get_image_features(pixel_values=x))[0]

    def __call__(self, image: torch.Tensor, text: str) -> float:
        return 100.0 * float(F.cosine_similarity(self.image_embedding(image), self.text_embedding(text), dim=0))


def object_region(image, mask, fill: float = 0.5) -> np.ndarray:
    """Blank the background to mid-gray, crop to the mask's bounding box and pad it square with the same gray."""
    img = as_float_image(image)
    m = as_mask(mask, img.shape[:2])
    if not m.any():
        raise UndefinedRegionError("object mask is empty")
    img = np.where(m[..., None], img, fill)
    rows, cols = np.flatnonzero(m.any(1)), np.flatnonzero(m.any(0))
    crop = img[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
    h, w = crop.shape[:2]
    side = max(h, w)
    out = np.full((side, side, crop.shape[2]), fill)
    top, left = (side - h) // 2, (side - w) // 2
    out[top:top + h, left:left + w] = crop
    return out


def masked_clip_similarity(edited, mask, texture_word: str, scorer: ClipScorer) -> float:
    """100 x cosine similarity between the texture word and the masked object region."""
    return scorer(_chw(object_region(edited, mask)), texture_word)


# reports

@dataclass
class MetricsRow:
    name: str
    structure: float | None = None
    psnr: float | None = None
    lpips: float | None = None
    mse: float | None = None
    ssim: float | None = None
    clip: float | None = None
    clip_source: float | None = None


@dataclass
class Evaluator:
    """Bundles the learned metrics' networks; any of them may be None (metric reported as missing)."""

    structure_extractor: Callable | None = None
    perceptual: PerceptualDistance | None = None
    clip: ClipScorer | None = None
    psnr_cap: float = PSNR_CAP
    notes: list[str] = field(default_factory=list)

    @classmethod
    def pretrained(cls, cache_dir: str | None = None, allow_download: bool = False, strict: bool = False):
        """Load DINO, LPIPS and CLIP; with ``strict=False`` a network that fails to load is left out."""
        ev = cls()
        for attr, load in (("structure_extractor", lambda: ViTKeyExtractor.pretrained(cache_dir=cache_dir,
                                                                                      allow_download=allow_download)),
                           ("perceptual", lambda: LPIPSDistance()),
                           ("clip", lambda: ClipScorer.pretrained(cache_dir=cache_dir,
                                                                  allow_download=allow_download))):
            try:
                setattr(ev, attr, load())
            except LoadError as exc:
                if strict:
                    raise
                logger.warning("%s", exc)
                ev.notes.append(f"{attr} unavailable: {exc}")
        return ev

    @classmethod
    def test_doubles(cls, seed: int = 0):
        return cls(ViTKeyExtractor.random(seed), LPIPSDistance(pretrained=False, seed=seed), ClipScorer.random(seed),
                   notes=["randomly initialized test-double networks; learned metrics are not meaningful"])

    def evaluate(self, name: str, source, edited, mask, texture: str) -> MetricsRow:
        row = MetricsRow(name, **background_metrics(edited, source, mask, self.perceptual, self.psnr_cap))
        if self.structure_extractor is not None:
            row.structure = structure_distance(edited, source, self.structure_extractor)
        if self.clip is not None:
            row.clip = masked_clip_similarity(edited, mask, texture, self.clip)
            row.clip_source = masked_clip_similarity(source, mask, texture, self.clip)
        return row


@dataclass
class MetricsReport:
    rows: list[MetricsRow]
    notes: list[str] = field(default_factory=list)

    def mean(self) -> MetricsRow:
        out = MetricsRow("mean")
        for name in [c[0] for c in COLUMNS] + ["clip_source"]:
            vals = [getattr(r, name) for r in self.rows if getattr(r, name) is not None]
            setattr(out, name, float(np.mean(vals)) if vals else None)
        return out

    def scaled(self, row: MetricsRow) -> dict[str, float | None]:
        return {header: (None if getattr(row, f) is None else getattr(row, f) * k) for f, header, k in COLUMNS}

    def to_text(self) -> str:
        headers = ["Image"] + [h for _, h, _ in COLUMNS]
        lines = [" | ".join(headers)]
        for row in self.rows + [self.mean()]:
            cells = [row.name] + ["-" if v is None else f"{v:.2f}" for v in self.scaled(row).values()]
            lines.append(" | ".join(cells))
        lines += [f"# {n}" for n in self.notes]
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return {
            "columns": [{"field": f, "header": h, "scale": k} for f, h, k in COLUMNS],
            "rows": [{"name": r.name, **self.scaled(r), "raw": asdict(r)} for r in self.rows],
            "mean": {"name": "mean", **self.scaled(self.mean()), "raw": asdict(self.mean())},
            "notes": self.notes,
        }

    def write(self, out_dir: str | Path, stem: str = "metrics") -> tuple[Path, Path]:
        from .io import atomic_write_text
        out_dir = Path(out_dir)
        text = atomic_write_text(out_dir / f"{stem}.txt", self.to_text())
        js = atomic_write_text(out_dir / f"{stem}.json", json.dumps(self.to_json(), indent=2, ensure_ascii=False))
        return text, js
