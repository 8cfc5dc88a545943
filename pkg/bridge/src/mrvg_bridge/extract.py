"""Extraction driver: images in, feature manifest + tensor files out.

Two input layouts are understood:

- a dataset root (``objects/`` and/or ``queries/``): template views keep their
  dataset masks (no segmenter call) and query images go through the full
  propose -> segment -> features path;
- a flat directory of images, all treated as query images.

The primary pipeline consumes only the written files; nothing is imported
from it.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np
from PIL import Image

from . import BridgeError
from .backbones import BackboneSet, BridgeConfig, load_backbones
from .tensorio import mask_to_rle, write_tensor

MANIFEST_NAME = "features.json"
_VIEW_FILE = re.compile(r"^view_(\d+)\.png$")
_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def _load_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def _resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    img = Image.fromarray((mask.astype(np.uint8)) * 255)
    return np.asarray(img.resize((size, size), Image.NEAREST)) > 127


def _load_dataset_mask(image_path: Path) -> np.ndarray:
    sidecar = image_path.with_name(image_path.stem + "_mask.json")
    if sidecar.exists():
        payload = json.loads(sidecar.read_text(encoding="utf-8"))
        flat = np.zeros(payload["width"] * payload["height"], dtype=bool)
        runs = payload["runs"]
        for i in range(0, len(runs), 2):
            flat[runs[i] : runs[i] + runs[i + 1]] = True
        return flat.reshape(payload["height"], payload["width"])
    png = image_path.with_name(image_path.stem + "_mask.png")
    if png.exists():
        with Image.open(png) as img:
            return np.asarray(img.convert("L")) > 127
    raise BridgeError(f"template {image_path} has no mask sidecar")


def _grid_entry(backbones: BackboneSet, crop: np.ndarray, mask: np.ndarray,
                out_dir: Path, grid_rel: str) -> dict:
    size = backbones.config.resize
    grid = backbones.features.extract(crop)
    write_tensor(grid.shape, grid, out_dir / grid_rel)
    return {
        "grid": grid_rel,
        "mask": mask_to_rle(_resize_mask(mask, size)),
        "analyzed_size": [size, size],
    }


def _extract_query_image(backbones: BackboneSet, rgb: np.ndarray, out_dir: Path,
                         stem: str) -> dict:
    height, width = rgb.shape[:2]
    entry: dict = {"width": width, "height": height, "proposals": []}
    for j, box in enumerate(backbones.proposer.propose(rgb)):
        mask = backbones.segmenter.segment(rgb, box)
        crop = rgb[box.y : box.y + box.h, box.x : box.x + box.w]
        grid_rel = f"tensors/{stem}_p{j}.mrvgt"
        proposal = _grid_entry(backbones, crop, mask, out_dir, grid_rel)
        proposal.update(
            box=[box.x, box.y, box.w, box.h],
            objectness=box.objectness,
        )
        entry["proposals"].append(proposal)
    return entry


def _extract_template(backbones: BackboneSet, image_path: Path, out_dir: Path,
                      grid_rel: str) -> dict:
    rgb = _load_rgb(image_path)
    mask = _load_dataset_mask(image_path)
    if mask.shape != rgb.shape[:2]:
        raise BridgeError(
            f"mask {mask.shape} does not match image {rgb.shape[:2]} ({image_path})"
        )
    return _grid_entry(backbones, rgb, mask, out_dir, grid_rel)


def _iter_query_images(images_dir: Path):
    queries = images_dir / "queries"
    if queries.is_dir():
        for path in sorted(queries.glob("*/*")):
            if path.suffix.lower() in _IMAGE_SUFFIXES:
                yield path.relative_to(images_dir).as_posix(), path
        return
    if (images_dir / "objects").is_dir():
        return  # dataset root without queries: templates only
    for path in sorted(images_dir.iterdir()):
        if path.suffix.lower() in _IMAGE_SUFFIXES:
            yield path.relative_to(images_dir).as_posix(), path


def extract(images_dir, out_dir, config: BridgeConfig | None = None) -> dict:
    """Run the three backbones over a directory and write the manifest."""
    images_dir = Path(images_dir)
    out_dir = Path(out_dir)
    if not images_dir.is_dir():
        raise BridgeError(f"image directory does not exist: {images_dir}")
    config = config or BridgeConfig()
    backbones = load_backbones(config)
    out_dir.mkdir(parents=True, exist_ok=True)

    manifest: dict = {
        "format_version": 1,
        "backbones": backbones.metadata(),
        "images": {},
        "templates": {},
    }

    objects_dir = images_dir / "objects"
    if objects_dir.is_dir():
        for instance_dir in sorted(p for p in objects_dir.iterdir() if p.is_dir()):
            views = {}
            for child in sorted(instance_dir.iterdir()):
                m = _VIEW_FILE.match(child.name)
                if not m:
                    continue
                view = m.group(1)
                grid_rel = f"tensors/templates/{instance_dir.name}/view_{view}.mrvgt"
                views[view] = _extract_template(backbones, child, out_dir, grid_rel)
            if views:
                manifest["templates"][instance_dir.name] = views

    for image_key, path in _iter_query_images(images_dir):
        stem = image_key.rsplit(".", 1)[0]
        try:
            entry = _extract_query_image(backbones, _load_rgb(path), out_dir, stem)
        except (OSError, ValueError) as exc:
            # per-image failures are recorded, not fatal
            entry = {"width": 1, "height": 1, "proposals": [], "error": str(exc)}
        manifest["images"][image_key] = entry

    (out_dir / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return manifest
