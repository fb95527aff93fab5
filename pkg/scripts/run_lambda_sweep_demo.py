#!/usr/bin/env python3
"""Sweep the material transfer force and tabulate how the scores move.

One inversion is shared across the whole sweep; each row of the table is a
full sampling run at one force value. Result images land next to the table
so the visual progression can be eyeballed.
"""

import argparse
import os
import sys

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
from make_synthetic_dataset import checker_material, object_scene  # noqa: E402

from matfuse.core import PromptSet, make_config
from matfuse.denoiser import make_toy_backend
from matfuse.evaluation import (
    ToyEmbeddingBackend,
    ToyPerceptualBackend,
    background_drift,
    classify_zone,
    crop_clip_similarity,
)
from matfuse.pipeline import TransferRequest, lambda_sweep


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="directory for result images")
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--steps", type=int, default=50, dest="T")
    parser.add_argument("--lams", default="0.5,0.8,1.1,1.5", help="comma-separated force values")
    args = parser.parse_args()

    lams = tuple(float(v) for v in args.lams.split(",") if v.strip())
    rng = np.random.default_rng(args.seed)
    scene, mask = object_scene(rng, args.size // 8)
    material = checker_material(rng, args.size // 8)
    config = make_config({"T": args.T, "tau_g": min(30, args.T), "tau_m": min(40, args.T), "seed": args.seed})

    backend = make_toy_backend(seed=args.seed, image_size=(args.size, args.size))
    request = TransferRequest(
        init_image=scene,
        material_image=material,
        mask=mask,
        prompts=PromptSet(y_src="an object on a floor", y_trg="an object made of checker tiles"),
        config=config,
    )
    runs = lambda_sweep(backend, request, lam_values=lams)

    os.makedirs(args.out, exist_ok=True)
    embedder, perceptual = ToyEmbeddingBackend(), ToyPerceptualBackend()
    print(f"{'lam':>5}  {'similarity':>10}  {'drift':>8}  zone")
    for lam, result in runs:
        result.image.save(os.path.join(args.out, f"lam_{lam:g}.png"))
        sim = crop_clip_similarity(embedder, material, result.image, mask, sizes=(8, 16))
        drift = background_drift(perceptual, scene, result.image, mask)
        print(f"{lam:>5g}  {sim:>10.4f}  {drift:>8.4f}  {classify_zone(sim, drift)}")
    print(f"images in {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
