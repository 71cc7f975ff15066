"""Synthetic stand-in for an annotated photo dataset.

Images are smooth low-contrast textures with coloured rectangles and disks
composited on top. Every shape comes with its exact binary mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import io, ops
from .tensor import Tensor, UsageError, no_grad

DATASET_FORMAT = "gazeforge-dataset/1"


@dataclass
class Item:
    id: str
    image: np.ndarray  # (3, H, W) in [0, 1]
    masks: dict[int, np.ndarray] = field(default_factory=dict)  # object id -> (H, W) in {0, 1}
    split: str = "train"

    @property
    def union_mask(self) -> np.ndarray:
        if not self.masks:
            return np.zeros(self.image.shape[1:])
        return np.clip(np.sum(list(self.masks.values()), axis=0), 0.0, 1.0)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.25, 0.75, size=(3, 1, 1))
    noise = rng.standard_normal((1, 3, size, size))
    with no_grad():
        smooth = ops.gaussian_blur(Tensor(noise), max(1.0, size / 16)).data[0]
    smooth /= smooth.std() + 1e-12
    return np.clip(base + 0.04 * smooth, 0.0, 1.0)


def _shape_mask(rng: np.random.Generator, size: int, taken: np.ndarray) -> Optional[np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(50):
        extent = int(rng.integers(max(3, size // 6), max(4, size // 3) + 1))
        top = int(rng.integers(0, size - extent + 1))
        left = int(rng.integers(0, size - extent + 1))
        if rng.random() < 0.5:
            mask = (yy >= top) & (yy < top + extent) & (xx >= left) & (xx < left + extent)
        else:
            r = extent / 2.0
            cy, cx = top + r - 0.5, left + r - 0.5
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        # keep one pixel of clearance so masks never touch
        grown = np.zeros_like(mask)
        grown[max(top - 1, 0):top + extent + 1, max(left - 1, 0):left + extent + 1] = True
        if mask.any() and not (grown & taken).any():
            return mask
    return None


def make_item(rng: np.random.Generator, size: int, objects_per_image: int, item_id: str) -> Item:
    image = _background(rng, size)
    taken = np.zeros((size, size), dtype=bool)
    masks = {}
    for obj in range(1, objects_per_image + 1):
        mask = _shape_mask(rng, size, taken)
        if mask is None:
            break
        taken |= mask
        colour = rng.uniform(0.0, 1.0, size=3)
        if rng.random() < 0.5:
            period = int(rng.integers(2, 4))
            stripes = (np.arange(size)[None, :] // period) % 2 if rng.random() < 0.5 else \
                (np.arange(size)[:, None] // period) % 2
            other = 1.0 - colour
            fill = np.where(stripes[None], colour[:, None, None], other[:, None, None])
        else:
            fill = np.broadcast_to(colour[:, None, None], (3, size, size))
        image = np.where(mask[None], fill, image)
        masks[obj] = mask.astype(np.float64)
    return Item(item_id, image, masks)


def make_dataset(n: int, size: int = 32, objects_per_image: int = 2, seed: int = 0,
                 test_fraction: float = 0.2) -> list[Item]:
    """``n`` seeded items; the last ``round(n * test_fraction)`` are the test split."""
    if size % 16:
        raise UsageError(f"image size {size} must be divisible by 16")
    if n < 1:
        raise UsageError("dataset needs at least one image")
    if objects_per_image < 1:
        raise UsageError("need at least one object per image")
    rng = np.random.default_rng(seed)
    n_test = int(round(n * test_fraction))
    items = []
    for k in range(n):
        item = make_item(rng, size, objects_per_image, f"img{k:04d}")
        item.split = "test" if k >= n - n_test else "train"
        items.append(item)
    return items


def write_dataset(items: list[Item], out_dir, meta: Optional[dict] = None) -> Path:
    """Images as PPM, masks as 0/255 PGM, plus ``manifest.json``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for item in items:
        image_rel = f"images/{item.id}.ppm"
        io.save_image(out / image_rel, item.image)
        objects = []
        for obj_id, mask in item.masks.items():
            mask_rel = f"masks/{item.id}_obj{obj_id}.pgm"
            io.save_mask(out / mask_rel, mask)
            objects.append({"object_id": obj_id, "mask": mask_rel})
        entries.append({"id": item.id, "image": image_rel, "split": item.split, "objects": objects})
    manifest = {"format": DATASET_FORMAT, "items": entries, "meta": meta or {}}
    io.dump_json(out / "manifest.json", manifest)
    return out / "manifest.json"


def read_dataset(manifest_path) -> list[Item]:
    import json

    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise io.FormatError(f"{manifest_path}: unsupported dataset format {manifest.get('format')!r}")
    root = manifest_path.parent
    items = []
    for entry in manifest["items"]:
        image = io.load_image(root / entry["image"])
        masks = {int(o["object_id"]): io.load_mask(root / o["mask"]) for o in entry["objects"]}
        items.append(Item(entry["id"], image, masks, entry.get("split", "train")))
    return items


def split(items: list[Item]) -> tuple[list[Item], list[Item]]:
    train = [it for it in items if it.split == "train"]
    test = [it for it in items if it.split == "test"]
    return train, test
