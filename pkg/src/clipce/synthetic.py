"""Procedural shapes scenes with per-object depth, for desk-scale runs.

Each scene is a textured ground plane (farther toward the top) with one to
four coloured shapes, each placed at its own depth. The clear images, depth
maps and a COCO annotation file are written to disk; hazing them with
:func:`clipce.haze.synthesize_dataset` gives every object a degradation score
equal to the mean ``1 - t`` over its box.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import Annotation, DatasetManifest, ManifestEntry, save_depth, save_image, write_coco

SHAPE_CLASSES = ("square", "disk", "triangle")
_BASE_COLORS = np.array([[0.85, 0.15, 0.1], [0.1, 0.75, 0.2], [0.15, 0.25, 0.9]])


def _shape_mask(kind: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if kind == "square":
        return np.ones((size, size), dtype=bool)
    if kind == "disk":
        r = size / 2.0
        return (xx - r) ** 2 + (yy - r) ** 2 <= r * r
    # upward triangle
    return np.abs(xx - size / 2.0) <= yy / 2.0


def render_scene(rng: np.random.Generator, size: int = 64, max_objects: int = 4):
    """Return ``(image, depth, objects)``; ``objects`` are ``(class_index, (x, y, w, h))``."""
    yy = np.linspace(1.0, 0.0, size)[:, None] * np.ones((1, size))
    tint = rng.uniform(0.25, 0.6, size=3)
    image = tint[None, None, :] * (0.7 + 0.3 * yy[..., None])
    image = image + rng.normal(0, 0.04, size=(size, size, 3))
    # ground plane: near at the bottom, far at the top
    depth = 0.2 + 0.8 * (1.0 - yy)
    objects = []
    placed = np.zeros((size, size), dtype=bool)
    for _ in range(int(rng.integers(1, max_objects + 1))):
        cls = int(rng.integers(len(SHAPE_CLASSES)))
        side = int(rng.integers(size // 6, size // 3 + 1))
        for _attempt in range(20):
            x = int(rng.integers(0, size - side + 1))
            y = int(rng.integers(0, size - side + 1))
            if not placed[y:y + side, x:x + side].any():
                break
        else:
            continue
        mask = _shape_mask(SHAPE_CLASSES[cls], side)
        color = np.clip(_BASE_COLORS[cls] + rng.normal(0, 0.05, size=3), 0, 1)
        region = image[y:y + side, x:x + side]
        region[mask] = color
        depth[y:y + side, x:x + side][mask] = rng.uniform(0.02, 1.0)
        placed[y:y + side, x:x + side] = True
        objects.append((cls, (float(x), float(y), float(side), float(side))))
    return np.clip(image, 0.0, 1.0), depth, objects


def make_shapes_dataset(out_dir, n_images: int = 200, size: int = 64, seed: int = 0, split: str = "train"):
    """Write clear scenes, depth maps and ``annotations.json``; returns the clear manifest."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    entries = []
    ann_id = 1
    for image_id in range(1, n_images + 1):
        image, depth, objects = render_scene(rng, size)
        while not objects:
            image, depth, objects = render_scene(rng, size)
        name = f"{image_id:06d}"
        save_image(out_dir / "images" / f"{name}.png", image)
        save_depth(out_dir / "depth" / f"{name}.depth", depth)
        anns = []
        for cls, box in objects:
            anns.append(Annotation(ann_id, cls, box))
            ann_id += 1
        entries.append(ManifestEntry(image_id, f"images/{name}.png", anns, f"depth/{name}.depth", size, size))
    manifest = DatasetManifest(entries, list(SHAPE_CLASSES), split, root=out_dir)
    manifest.save(out_dir / "manifest.json")
    write_coco(out_dir / "annotations.json", manifest)
    return manifest
