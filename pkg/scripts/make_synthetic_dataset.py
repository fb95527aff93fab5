#!/usr/bin/env python3
"""Generate a small synthetic object/material dataset plus its manifest.

Every image is constant on 8x8 pixel blocks so the toy codec reproduces it
exactly; each item is a flat-colored object on a textured floor, paired with
a block-checker or block-stripe material exemplar. The manifest is the JSONL
format the evaluate command and the eval harness consume.
"""

import argparse
import json
import os

import numpy as np

from matfuse.core import BinaryMask, ImageRGB

OBJECTS = ("cube", "vase", "bowl", "pillow", "teapot", "lamp")
MATERIALS = ("checker tiles", "striped fabric", "speckled stone")


def blocks_to_image(blocks: np.ndarray) -> ImageRGB:
    return ImageRGB(np.repeat(np.repeat(np.clip(blocks, 0.0, 1.0), 8, axis=0), 8, axis=1))


def checker_material(rng: np.random.Generator, cells: int) -> ImageRGB:
    a, b = rng.uniform(0.1, 0.9, (2, 3))
    parity = np.indices((cells, cells)).sum(axis=0) % 2
    return blocks_to_image(np.where(parity[..., None] == 0, a, b))


def stripe_material(rng: np.random.Generator, cells: int) -> ImageRGB:
    a, b = rng.uniform(0.1, 0.9, (2, 3))
    parity = np.broadcast_to(np.arange(cells) % 2, (cells, cells))
    return blocks_to_image(np.where(parity[..., None] == 0, a, b))


def speckle_material(rng: np.random.Generator, cells: int) -> ImageRGB:
    base = rng.uniform(0.2, 0.8, 3)
    jitter = rng.uniform(-0.15, 0.15, (cells, cells, 1))
    return blocks_to_image(base + jitter)


def object_scene(rng: np.random.Generator, cells: int) -> tuple[ImageRGB, BinaryMask]:
    """A solid object block on a mottled floor, with its pixel mask."""
    floor = rng.uniform(0.15, 0.45, (cells, cells, 3))
    color = rng.uniform(0.5, 0.95, 3)
    span = max(2, cells // 2)
    top = int(rng.integers(1, cells - span))
    left = int(rng.integers(1, cells - span))
    blocks = floor.copy()
    blocks[top : top + span, left : left + span] = color
    mask_cells = np.zeros((cells, cells), dtype=np.uint8)
    mask_cells[top : top + span, left : left + span] = 1
    mask = BinaryMask(np.repeat(np.repeat(mask_cells, 8, axis=0), 8, axis=1))
    return blocks_to_image(blocks), mask


_MATERIAL_MAKERS = (checker_material, stripe_material, speckle_material)


def write_dataset(out_dir: str, items: int, size: int, seed: int) -> str:
    rng = np.random.default_rng(seed)
    cells = size // 8
    os.makedirs(out_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest_path, "w") as fh:
        for index in range(items):
            item_id = f"item_{index:03d}"
            item_dir = os.path.join(out_dir, item_id)
            os.makedirs(item_dir, exist_ok=True)
            scene, mask = object_scene(rng, cells)
            material = _MATERIAL_MAKERS[index % len(_MATERIAL_MAKERS)](rng, cells)
            scene.save(os.path.join(item_dir, "object.png"))
            mask.save(os.path.join(item_dir, "mask.png"))
            material.save(os.path.join(item_dir, "material.png"))
            noun = OBJECTS[index % len(OBJECTS)]
            texture = MATERIALS[index % len(MATERIALS)]
            fh.write(
                json.dumps(
                    {
                        "id": item_id,
                        "object_image": f"{item_id}/object.png",
                        "mask": f"{item_id}/mask.png",
                        "material_image": f"{item_id}/material.png",
                        "y_src": f"a {noun} on a floor",
                        "y_trg": f"a {noun} made of {texture}",
                    }
                )
                + "\n"
            )
    return manifest_path


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="dataset directory to create")
    parser.add_argument("--items", type=int, default=6)
    parser.add_argument("--size", type=int, default=64, help="image side in pixels, multiple of 8")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    if args.size % 8:
        parser.error("--size must be a multiple of 8")
    manifest = write_dataset(args.out, args.items, args.size, args.seed)
    print(f"wrote {args.items} items, manifest at {manifest}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
