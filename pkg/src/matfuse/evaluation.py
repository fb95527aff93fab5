"""Transfer quality measurement: material similarity and background drift.

Material similarity embeds square crops from the material exemplar and from
the edited object region and averages pairwise cosine similarity over two
crop sizes. Background drift is a perceptual distance between the input and
the result with the object region blanked in both. Thresholds on the two
axes split results into named zones for reporting.

Both measures run against pluggable feature backends; the toy backends are
fixed seeded convnets so the whole harness tests deterministically on CPU.
Full pretrained backends load only if their weights are present locally.
"""

from __future__ import annotations

import csv
import json
import os
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import BinaryMask, ImageRGB, ValidationError


def _to_batch(image: ImageRGB) -> torch.Tensor:
    return torch.from_numpy(image.pixels.copy()).permute(2, 0, 1).unsqueeze(0)


class PerceptualBackend(ABC):
    """Layered feature extractor with per-channel distance weights."""

    @abstractmethod
    def layers(self, images: torch.Tensor) -> list[torch.Tensor]:
        """images: (B, 3, H, W) in [0, 1] -> feature maps (B, C_l, H_l, W_l)."""

    @abstractmethod
    def layer_weights(self) -> list[torch.Tensor]:
        """Nonnegative (C_l,) weights, one vector per layer."""


class ToyPerceptualBackend(PerceptualBackend):
    """Three fixed seeded strided convolutions with relu."""

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng(seed)
        t64 = lambda a: torch.from_numpy(np.ascontiguousarray(a, dtype=np.float64))
        dims = [3, 8, 16, 32]
        self._kernels = [
            t64(0.4 * rng.standard_normal((dims[i + 1], dims[i], 3, 3))) for i in range(3)
        ]
        self._weights = [t64(np.abs(rng.standard_normal(dims[i + 1]))) for i in range(3)]

    def layers(self, images: torch.Tensor) -> list[torch.Tensor]:
        out, x = [], images.to(torch.float64)
        for kernel in self._kernels:
            x = F.relu(F.conv2d(x, kernel, stride=2, padding=1))
            out.append(x)
        return out

    def layer_weights(self) -> list[torch.Tensor]:
        return list(self._weights)


class AlexNetPerceptualBackend(PerceptualBackend):
    """AlexNet relu features with uniform channel weights.

    Needs torchvision plus a local weights file; never downloads. Point
    MATFUSE_WEIGHTS_DIR at a directory holding alexnet.pth.
    """

    _RELU_INDICES = (1, 4, 7, 9, 11)

    def __init__(self, weights_dir: str | None = None):
        weights_dir = weights_dir or os.environ.get("MATFUSE_WEIGHTS_DIR", "")
        path = os.path.join(weights_dir, "alexnet.pth") if weights_dir else ""
        if not path or not os.path.isfile(path):
            raise ValidationError("weights", f"missing perceptual weights: no alexnet.pth under {weights_dir or '$MATFUSE_WEIGHTS_DIR'}")
        try:
            from torchvision.models import alexnet
        except ImportError as exc:
            raise ValidationError("weights", f"missing perceptual weights: torchvision unavailable ({exc})")
        model = alexnet()
        model.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
        model.eval()
        self._features = model.features
        self._channels = [64, 192, 384, 256, 256]

    def layers(self, images: torch.Tensor) -> list[torch.Tensor]:
        mean = torch.tensor([0.485, 0.456, 0.406]).reshape(1, 3, 1, 1)
        std = torch.tensor([0.229, 0.224, 0.225]).reshape(1, 3, 1, 1)
        x = (images.to(torch.float32) - mean) / std
        out = []
        with torch.no_grad():
            for index, module in enumerate(self._features):
                x = module(x)
                if index in self._RELU_INDICES:
                    out.append(x.to(torch.float64))
        return out

    def layer_weights(self) -> list[torch.Tensor]:
        return [torch.full((c,), 1.0 / c, dtype=torch.float64) for c in self._channels]


def perceptual_distance(backend: PerceptualBackend, a: ImageRGB, b: ImageRGB) -> float:
    """Weighted squared distance between unit-normalized feature stacks.

    Per layer, features are L2-normalized along channels, squared channel
    differences are weighted and summed, then averaged spatially; layers
    add up. Identical images give exactly 0; the form is symmetric.
    """
    if (a.height, a.width) != (b.height, b.width):
        raise ValidationError("b", f"image sizes differ: {a.height}x{a.width} vs {b.height}x{b.width}")
    feats_a = backend.layers(_to_batch(a))
    feats_b = backend.layers(_to_batch(b))
    total = 0.0
    for fa, fb, w in zip(feats_a, feats_b, backend.layer_weights()):
        na = fa / (fa.norm(dim=1, keepdim=True) + 1e-10)
        nb = fb / (fb.norm(dim=1, keepdim=True) + 1e-10)
        sq = (na - nb) ** 2
        weighted = (w.reshape(1, -1, 1, 1) * sq).sum(dim=1)
        total += float(weighted.mean())
    return total


class EmbeddingBackend(ABC):
    """Maps image batches to one embedding vector each."""

    @abstractmethod
    def embed(self, images: torch.Tensor) -> torch.Tensor:
        """images: (B, 3, H, W) in [0, 1] -> (B, D)."""


class ToyEmbeddingBackend(EmbeddingBackend):
    """Fixed seeded convnet over a pooled 32x32 view."""

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng(seed)
        t64 = lambda a: torch.from_numpy(np.ascontiguousarray(a, dtype=np.float64))
        self._k1 = t64(0.4 * rng.standard_normal((16, 3, 3, 3)))
        self._k2 = t64(0.4 * rng.standard_normal((32, 16, 3, 3)))

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        x = F.adaptive_avg_pool2d(images.to(torch.float64), (32, 32))
        x = F.relu(F.conv2d(x, self._k1, stride=2, padding=1))
        x = F.relu(F.conv2d(x, self._k2, stride=2, padding=1))
        return x.mean(dim=(2, 3))


class ClipEmbeddingBackend(EmbeddingBackend):
    """CLIP vision tower from a local weights directory; never downloads."""

    def __init__(self, weights_dir: str | None = None):
        weights_dir = weights_dir or os.environ.get("MATFUSE_WEIGHTS_DIR", "")
        path = os.path.join(weights_dir, "clip_vision") if weights_dir else ""
        if not path or not os.path.isdir(path):
            raise ValidationError("weights", f"missing embedding weights: no clip_vision under {weights_dir or '$MATFUSE_WEIGHTS_DIR'}")
        from transformers import CLIPImageProcessor, CLIPVisionModelWithProjection

        self._processor = CLIPImageProcessor.from_pretrained(path)
        self._model = CLIPVisionModelWithProjection.from_pretrained(path)
        self._model.eval()

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        arrays = [img.permute(1, 2, 0).numpy() for img in images]
        inputs = self._processor(images=arrays, do_rescale=False, return_tensors="pt")
        with torch.no_grad():
            out = self._model(**inputs)
        return out.image_embeds.to(torch.float64)


def crop_grid(mask: BinaryMask, size: int, stride: int | None = None) -> list[tuple[int, int]]:
    """Top-left corners of size x size windows lying entirely inside the mask.

    Corners sit on a stride grid from the origin; the default stride equals
    the crop size, tiling the region without overlap.
    """
    if size < 1:
        raise ValidationError("size", f"must be >= 1, got {size}")
    stride = stride or size
    if stride < 1:
        raise ValidationError("stride", f"must be >= 1, got {stride}")
    inside = mask.values.astype(np.float64)
    corners = []
    for top in range(0, mask.height - size + 1, stride):
        for left in range(0, mask.width - size + 1, stride):
            if inside[top : top + size, left : left + size].min() == 1.0:
                corners.append((top, left))
    return corners


def extract_crops(
    image: ImageRGB, mask: BinaryMask, size: int, stride: int | None = None
) -> torch.Tensor:
    """Stack of (N, 3, size, size) crops whose footprints the mask covers."""
    if (mask.height, mask.width) != (image.height, image.width):
        raise ValidationError("mask", "mask size does not match image")
    corners = crop_grid(mask, size, stride)
    if not corners:
        return torch.zeros((0, 3, size, size), dtype=torch.float64)
    crops = [image.pixels[t : t + size, l : l + size] for t, l in corners]
    return torch.from_numpy(np.stack(crops)).permute(0, 3, 1, 2)


def pairwise_cosine_mean(a: torch.Tensor, b: torch.Tensor) -> float:
    """Mean cosine similarity over all rows of a crossed with all rows of b."""
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValidationError("a", "need at least one embedding on each side")
    na = a / (a.norm(dim=1, keepdim=True) + 1e-12)
    nb = b / (b.norm(dim=1, keepdim=True) + 1e-12)
    return float((na @ nb.transpose(0, 1)).mean())


def crop_clip_similarity(
    embedder: EmbeddingBackend,
    material_image: ImageRGB,
    result_image: ImageRGB,
    result_mask: BinaryMask,
    sizes: tuple[int, ...] = (64, 128),
) -> float:
    """Material fidelity score: pairwise crop-embedding cosine, pooled.

    Material crops tile the whole exemplar; result crops tile the edited
    region. Sizes contribute pair counts to a single pooled mean; a size
    that fits no crop on either side is skipped.
    """
    total, pairs = 0.0, 0
    for size in sizes:
        mat = extract_crops(material_image, BinaryMask.full(material_image.height, material_image.width), size)
        res = extract_crops(result_image, result_mask, size)
        if mat.shape[0] == 0 or res.shape[0] == 0:
            continue
        ea, eb = embedder.embed(mat), embedder.embed(res)
        count = ea.shape[0] * eb.shape[0]
        total += pairwise_cosine_mean(ea, eb) * count
        pairs += count
    if pairs == 0:
        raise ValidationError("sizes", f"no crop size in {sizes} fits both the material image and the masked region")
    return total / pairs


@dataclass(frozen=True)
class EvalThresholds:
    """Zone boundaries on the similarity/drift plane."""

    sim_acceptable: float = 0.82
    sim_strong: float = 0.84
    drift_max: float = 0.21


def classify_zone(clip_sim: float, background_drift: float, thresholds: EvalThresholds = EvalThresholds()) -> str:
    """Name the region a result lands in.

    strong: high similarity, low drift. acceptable: similarity clears the
    lower bar, low drift. drifted: similarity fine but the background
    moved. weak: material similarity below the bar.
    """
    if clip_sim < thresholds.sim_acceptable:
        return "weak"
    if background_drift > thresholds.drift_max:
        return "drifted"
    return "strong" if clip_sim >= thresholds.sim_strong else "acceptable"


def background_drift(
    perceptual: PerceptualBackend, before: ImageRGB, after: ImageRGB, mask: BinaryMask
) -> float:
    """Perceptual distance outside the mask, object region blanked in both."""
    if (mask.height, mask.width) != (before.height, before.width):
        raise ValidationError("mask", "mask size does not match image")
    keep = (1 - mask.values).astype(np.float64)[..., None]
    a = ImageRGB(np.ascontiguousarray(before.pixels * keep))
    b = ImageRGB(np.ascontiguousarray(after.pixels * keep))
    return perceptual_distance(perceptual, a, b)


@dataclass(frozen=True)
class DatasetItem:
    """One evaluation case from a manifest line."""

    item_id: str
    object_image: str
    mask: str
    material_image: str
    y_src: str
    y_trg: str


def load_manifest(path: str) -> list[DatasetItem]:
    """Read a JSONL manifest; relative paths resolve against its directory."""
    base = os.path.dirname(os.path.abspath(path))
    items = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError("manifest", f"line {line_no} is not valid JSON: {exc}")
            missing = [k for k in ("id", "object_image", "mask", "material_image", "y_src", "y_trg") if k not in row]
            if missing:
                raise ValidationError("manifest", f"line {line_no} missing keys: {', '.join(missing)}")
            resolve = lambda p: p if os.path.isabs(p) else os.path.join(base, p)
            items.append(
                DatasetItem(
                    item_id=str(row["id"]),
                    object_image=resolve(row["object_image"]),
                    mask=resolve(row["mask"]),
                    material_image=resolve(row["material_image"]),
                    y_src=row["y_src"],
                    y_trg=row["y_trg"],
                )
            )
    if not items:
        raise ValidationError("manifest", f"no items in {path}")
    return items


@dataclass(frozen=True)
class EvalRecord:
    item_id: str
    clip_sim: float
    background_drift: float
    zone: str


def evaluate_dataset(
    backend,
    items: list[DatasetItem],
    config,
    out_dir: str,
    perceptual: PerceptualBackend | None = None,
    embedder: EmbeddingBackend | None = None,
    thresholds: EvalThresholds = EvalThresholds(),
    crop_sizes: tuple[int, ...] = (64, 128),
    force: bool = False,
) -> dict:
    """Run the transfer on every item and score it; write report files.

    Produces report.csv (one scored row per item), scatter.json (points
    plus the zone thresholds) and summary.json, and returns the summary.
    """
    from .core import PromptSet
    from .pipeline import TransferRequest, material_transfer

    if os.path.isdir(out_dir) and os.listdir(out_dir) and not force:
        raise FileExistsError(f"output directory {out_dir} is not empty (use force to overwrite)")
    os.makedirs(out_dir, exist_ok=True)
    perceptual = perceptual or ToyPerceptualBackend()
    embedder = embedder or ToyEmbeddingBackend()

    records = []
    for item in items:
        init = ImageRGB.from_file(item.object_image)
        mask = BinaryMask.from_file(item.mask)
        material = ImageRGB.from_file(item.material_image)
        request = TransferRequest(
            init_image=init,
            material_image=material,
            mask=mask,
            prompts=PromptSet(y_src=item.y_src, y_trg=item.y_trg),
            config=config,
        )
        result = material_transfer(backend, request)
        result.image.save(os.path.join(out_dir, f"{item.item_id}.png"))
        sim = crop_clip_similarity(embedder, material, result.image, mask, sizes=crop_sizes)
        drift = background_drift(perceptual, init, result.image, mask)
        records.append(
            EvalRecord(
                item_id=item.item_id,
                clip_sim=sim,
                background_drift=drift,
                zone=classify_zone(sim, drift, thresholds),
            )
        )

    with open(os.path.join(out_dir, "report.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "clip_sim", "background_drift", "zone"])
        for rec in records:
            writer.writerow([rec.item_id, f"{rec.clip_sim:.6f}", f"{rec.background_drift:.6f}", rec.zone])

    scatter = {
        "points": [
            {"id": r.item_id, "clip_sim": r.clip_sim, "background_drift": r.background_drift, "zone": r.zone}
            for r in records
        ],
        "thresholds": {
            "sim_acceptable": thresholds.sim_acceptable,
            "sim_strong": thresholds.sim_strong,
            "drift_max": thresholds.drift_max,
        },
    }
    with open(os.path.join(out_dir, "scatter.json"), "w") as fh:
        json.dump(scatter, fh, indent=2)
        fh.write("\n")

    zone_counts: dict[str, int] = {}
    for rec in records:
        zone_counts[rec.zone] = zone_counts.get(rec.zone, 0) + 1
    summary = {
        "items": len(records),
        "mean_clip_sim": float(np.mean([r.clip_sim for r in records])),
        "mean_background_drift": float(np.mean([r.background_drift for r in records])),
        "zones": zone_counts,
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary
