"""Desk-scale data: pristine crops from scikit-image's bundled photographs, and stand-in MOS.

No subjective scores exist for synthetic desk data, so ``attach_pseudo_mos``
labels each pair with ``100 * SSIM`` (luma). SSIM normalises structural error
by local contrast, which gives the labels a content-dependent (masking-like)
component that distortion level alone does not explain.
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from .degrade import DegradationProtocol, Manifest, build_dataset, split_manifest
from .imageio import load_image, save_image

SOURCES = (
    "astronaut",
    "camera",
    "chelsea",
    "coffee",
    "rocket",
    "coins",
    "hubble_deep_field",
    "immunohistochemistry",
    "moon",
    "brick",
    "grass",
    "gravel",
    "retina",
    "clock",
    "page",
    "text",
)


def _source(name: str) -> Image.Image:
    from skimage import data

    arr = getattr(data, name)()
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    return Image.fromarray(arr[..., :3].astype(np.uint8))


def sample_pristine(
    out_dir, n: int, size: int = 64, seed: int = 0, min_std: float = 0.08, scale_range=(2.0, 4.0), prefix: str = "p"
) -> list[Path]:
    """Write ``n`` random ``size``-pixel crops (at random downscale factors in ``scale_range``)."""
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache: dict = {}
    paths = []
    while len(paths) < n:
        name = SOURCES[rng.integers(len(SOURCES))]
        src = cache.setdefault(name, _source(name))
        scale = rng.uniform(*scale_range)
        w, h = max(size, int(src.width / scale)), max(size, int(src.height / scale))
        small = src.resize((w, h), Image.LANCZOS)
        x0, y0 = rng.integers(0, w - size + 1), rng.integers(0, h - size + 1)
        crop = np.asarray(small.crop((x0, y0, x0 + size, y0 + size)), dtype=np.float32) / 255.0
        if crop.std() < min_std:
            continue
        path = out_dir / f"{prefix}{len(paths):03d}.png"
        save_image(crop, path)
        paths.append(path)
    return paths


def attach_pseudo_mos(manifest: Manifest, scale: float = 100.0) -> Manifest:
    from .evaluation import ssim

    recs = []
    for r in manifest.records:
        ref = load_image(manifest.resolve(r.ref_path))
        dist = load_image(manifest.resolve(r.dist_path))
        recs.append(replace(r, mos=round(float(scale * ssim(ref, dist)), 6)))
    return Manifest(recs, manifest.root)


def build_desk_benchmark(
    out_dir,
    n_pristine: int = 28,
    kinds=("gaussian_blur", "gaussian_noise"),
    levels: int = 4,
    ratios=(16 / 28, 4 / 28, 8 / 28),
    size: int = 64,
    seed: int = 0,
    pseudo_mos: bool = True,
) -> Manifest:
    """Pristine crops -> degraded pairs -> pristine-level split -> (optional) stand-in MOS."""
    out_dir = Path(out_dir)
    sample_pristine(out_dir / "pristine", n_pristine, size, seed)
    protocol = DegradationProtocol(kinds=kinds, levels_per_kind=levels)
    manifest = build_dataset(out_dir / "pristine", protocol, out_dir, seed)
    manifest = split_manifest(manifest, ratios, seed)
    if pseudo_mos:
        manifest = attach_pseudo_mos(manifest)
    manifest.write(out_dir / "manifest.jsonl")
    return manifest
