"""Regenerate the 5-image desk set under ``src/texedit/data/desk_set``.

Photos come from scikit-image's bundled sample images (public domain / CC0);
annotation masks are hand-drawn polygons traced over the 512x512 crops. The
horse scene is synthetic: the silhouette doubles as an exact annotation.

    python tools/make_desk_set.py
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import skimage.data
from PIL import Image, ImageDraw
from skimage.transform import resize

SIZE = 512
OUT = Path(__file__).resolve().parents[1] / "src" / "texedit" / "data" / "desk_set"


def _square(im: np.ndarray, x0: int, y0: int, side: int) -> np.ndarray:
    crop = im[y0:y0 + side, x0:x0 + side]
    return (resize(crop, (SIZE, SIZE), order=3, anti_aliasing=True) * 255).round().astype(np.uint8)


def _mask(polygons=(), ellipses=()) -> np.ndarray:
    m = Image.new("L", (SIZE, SIZE), 0)
    draw = ImageDraw.Draw(m)
    for p in polygons:
        draw.polygon([tuple(map(float, pt)) for pt in p], fill=255)
    for e in ellipses:
        draw.ellipse(e, fill=255)
    return np.array(m) > 127


def cat():
    image = _square(skimage.data.chelsea(), 151, 0, 300)
    outline = [(0, 0), (300, 0), (420, 0), (400, 40), (380, 80), (360, 115), (362, 160), (360, 210),
               (352, 260), (338, 300), (320, 340), (330, 390), (365, 440), (395, 512), (0, 512)]
    return image, _mask([outline]), "a close-up photo of a cat", "cat"


def cup():
    image = _square(skimage.data.coffee(), 100, 0, 400)
    s = SIZE / 400

    def t(pts):
        return [((x - 100) * s, y * s) for x, y in pts]

    body = t([(176, 110), (182, 60), (205, 35), (250, 20), (300, 18), (350, 24), (392, 45), (408, 90),
              (405, 150), (395, 200), (375, 240), (350, 265), (320, 280), (270, 285), (240, 280),
              (215, 265), (200, 240), (185, 190)])
    handle = t([(200, 230), (235, 228), (262, 240), (255, 262), (240, 295), (220, 305), (200, 300), (195, 270)])
    return image, _mask([body, handle]), "a cup of coffee on a saucer on a wooden table", "cup"


def rocket():
    image = _square(skimage.data.rocket(), 107, 0, 427)
    s = SIZE / 427
    body = [((x - 107) * s, y * s) for x, y in
            [(322, 126), (329, 133), (333, 148), (335, 178), (335, 405), (309, 405), (309, 178),
             (311, 148), (315, 133)]]
    return image, _mask([body]), "a rocket on a launch pad at dusk", "rocket"


def helmet():
    image = skimage.data.astronaut()
    return image, _mask(ellipses=[(277, 343, 509, 545)]), "an astronaut next to a helmet", "helmet"


def horse():
    rng = np.random.default_rng(7)
    silhouette = ~skimage.data.horse()
    h, w = silhouette.shape
    scale = 0.9 * SIZE / w
    sil = resize(silhouette.astype(float), (int(h * scale), int(w * scale)), order=1) > 0.5
    mask = np.zeros((SIZE, SIZE), bool)
    top, left = SIZE - sil.shape[0] - 40, (SIZE - sil.shape[1]) // 2
    mask[top:top + sil.shape[0], left:left + sil.shape[1]] = sil

    yy = np.linspace(0.0, 1.0, SIZE)[:, None, None]
    sky = np.array([0.45, 0.65, 0.92]) * (1 - 0.4 * yy) + np.array([0.9, 0.92, 0.95]) * 0.4 * yy
    grass = np.array([0.25, 0.5, 0.18]) + 0.06 * rng.standard_normal((SIZE, SIZE, 1))
    horizon = int(SIZE * 0.55)
    scene = np.where(np.arange(SIZE)[:, None, None] < horizon, np.broadcast_to(sky, (SIZE, SIZE, 3)), grass)

    shade = 0.85 + 0.15 * np.linspace(1, -1, SIZE)[:, None] + 0.03 * rng.standard_normal((SIZE, SIZE))
    coat = np.array([0.45, 0.28, 0.15])[None, None, :] * shade[..., None]
    scene = np.where(mask[..., None], coat, scene)
    image = (np.clip(scene, 0, 1) * 255).round().astype(np.uint8)
    return image, mask, "a horse standing in a field", "horse"


ENTRIES = {"cat": cat, "cup": cup, "rocket": rocket, "helmet": helmet, "horse": horse}
TEXTURES = ["golden", "cloud"]


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    index = []
    for name, build in ENTRIES.items():
        image, mask, prompt, word = build()
        Image.fromarray(image).save(OUT / f"{name}.png")
        Image.fromarray(mask).convert("1").save(OUT / f"{name}_mask.png")
        index.append({"name": name, "image": f"{name}.png", "mask": f"{name}_mask.png",
                      "source_prompt": prompt, "object_word": word, "textures": TEXTURES})
    (OUT / "index.json").write_text(json.dumps(index, indent=2) + "\n")
    print(f"wrote {len(index)} entries to {OUT}")


if __name__ == "__main__":
    main()
