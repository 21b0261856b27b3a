"""Directory-of-class-folders -> EKFT feature file plus a JSON label map.

Enumeration order is fixed (sorted class directories, sorted file names), so
a job always produces byte-identical output regardless of filesystem order
or internal batching. Unreadable images are skipped and counted in the
sidecar; labels are densified to 0..K-1 in sorted class-name order.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .ekft import write_ekft
from .embedders import make_embedder

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}


@dataclass
class ExportJob:
    dataset: str            # directory of class subdirectories
    output: str             # EKFT file path; sidecar written next to it
    model: str = "patch-proj-v1"
    image_size: int = 32
    d_t: int = 4
    d: int = 32
    max_per_class: int = 0  # 0 = unlimited
    seed: int = 0
    stage: int = 0          # >0: deeper-layer tokens (ViT backends only)


class DatasetError(ValueError):
    """Unusable dataset directory."""


def _load_pixels(path: Path, size: int) -> np.ndarray:
    with Image.open(path) as img:
        rgb = img.convert("RGB").resize((size, size), Image.BILINEAR)
    return np.asarray(rgb, dtype=np.float64) / 255.0


def scan_dataset(root: str) -> dict[str, list[Path]]:
    base = Path(root)
    if not base.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    classes = {}
    for sub in sorted(p for p in base.iterdir() if p.is_dir()):
        files = sorted(p for p in sub.iterdir()
                       if p.suffix.lower() in IMAGE_SUFFIXES)
        if files:
            classes[sub.name] = files
    if not classes:
        raise DatasetError(f"no class directories with images under {root}")
    return classes


def export(job: ExportJob) -> dict:
    """Run the job; returns the sidecar dict (also written to disk)."""
    classes = scan_dataset(job.dataset)
    embed = make_embedder(job.model, job.d_t, job.d, job.image_size, job.seed,
                          job.stage)
    tokens = []
    labels = []
    skipped = 0
    names = sorted(classes)
    for label, name in enumerate(names):
        files = classes[name]
        if job.max_per_class > 0:
            files = files[: job.max_per_class]
        for path in files:
            try:
                pixels = _load_pixels(path, job.image_size)
            except (OSError, UnidentifiedImageError):
                skipped += 1
                continue
            tokens.append(embed(pixels))
            labels.append(label)
    if not tokens:
        raise DatasetError("every image failed to load")
    write_ekft(job.output, np.stack(tokens), np.asarray(labels, dtype=np.uint32),
               len(names))
    sidecar = {
        "classes": names,
        "samples": len(labels),
        "skipped": skipped,
        "job": asdict(job),
    }
    sidecar_path = Path(job.output).with_suffix(".labels.json")
    sidecar_path.write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
    return sidecar
