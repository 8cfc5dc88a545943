"""Reference database: on-disk layout loading, geometry types, and the profile store.

Layout::

    root/objects/<instance_name>/view_<k>.png      template images
    root/objects/<instance_name>/view_<k>_mask.json  (RLE sidecar) or view_<k>_mask.png
    root/objects/<instance_name>/detail.png        the one web-sourced image
    root/queries/<scene>/<image>.png + <image>.anno.json
    root/profiles.json                             optional profile store

Instance IDs are the integer prefix of the instance directory name
(e.g. ``005_dr_pepper_soda_pop_bottle`` -> 5).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .profiles import ObjectProfile, ProfileError, parse_profile, profile_to_dict


class DatasetError(ValueError):
    """On-disk dataset violates the layout contract; carries the offending path."""

    def __init__(self, message: str, path=None):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            message = f"{message} ({self.path})"
        super().__init__(message)


@dataclass(frozen=True)
class BoundingBox:
    """Half-open pixel rectangle [x, x+w) x [y, y+h)."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box sides must be positive, got w={self.w} h={self.h}")
        if self.x < 0 or self.y < 0:
            raise ValueError(f"box origin must be non-negative, got x={self.x} y={self.y}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_list(self) -> list:
        return [self.x, self.y, self.w, self.h]

    @classmethod
    def from_list(cls, values) -> "BoundingBox":
        if len(values) != 4:
            raise ValueError(f"box must have 4 entries, got {len(values)}")
        return cls(*values)

    def within(self, width: float, height: float) -> bool:
        return self.x + self.w <= width and self.y + self.h <= height


@dataclass(frozen=True)
class RasterMask:
    """Binary mask as row-major run-length spans over the flattened pixel grid."""

    width: int
    height: int
    runs: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"mask dims must be positive, got {self.width}x{self.height}")
        total = self.width * self.height
        prev_end = -1
        covered = 0
        for start, length in self.runs:
            if length <= 0:
                raise ValueError(f"run length must be positive, got {length}")
            if start <= prev_end:
                raise ValueError("runs must be strictly increasing and non-overlapping")
            if start + length > total:
                raise ValueError("run extends past the pixel grid")
            prev_end = start + length - 1
            covered += length
        if covered > total:
            raise ValueError("mask covers more pixels than the grid holds")

    @property
    def foreground_count(self) -> int:
        return sum(length for _, length in self.runs)

    def to_array(self) -> np.ndarray:
        flat = np.zeros(self.width * self.height, dtype=bool)
        for start, length in self.runs:
            flat[start : start + length] = True
        return flat.reshape(self.height, self.width)

    @classmethod
    def from_array(cls, array: np.ndarray) -> "RasterMask":
        arr = np.asarray(array, dtype=bool)
        if arr.ndim != 2:
            raise ValueError(f"mask array must be 2-D, got shape {arr.shape}")
        flat = arr.reshape(-1)
        runs = []
        padded = np.diff(np.concatenate(([0], flat.view(np.int8), [0])))
        starts = np.flatnonzero(padded == 1)
        ends = np.flatnonzero(padded == -1)
        for s, e in zip(starts, ends):
            runs.append((int(s), int(e - s)))
        return cls(width=arr.shape[1], height=arr.shape[0], runs=tuple(runs))

    @classmethod
    def full(cls, width: int, height: int) -> "RasterMask":
        return cls(width=width, height=height, runs=((0, width * height),))

    def to_json(self) -> dict:
        flat = []
        for start, length in self.runs:
            flat.extend((start, length))
        return {"width": self.width, "height": self.height, "runs": flat}

    @classmethod
    def from_json(cls, obj: dict) -> "RasterMask":
        flat = obj["runs"]
        if len(flat) % 2 != 0:
            raise ValueError("RLE runs list must hold (start, length) pairs")
        runs = tuple((int(flat[i]), int(flat[i + 1])) for i in range(0, len(flat), 2))
        return cls(width=int(obj["width"]), height=int(obj["height"]), runs=runs)


@dataclass
class TemplateRecord:
    instance_id: int
    view_index: int
    image_path: Path
    mask: RasterMask
    embedding_ref: str | None = None


@dataclass
class ReferenceInstance:
    instance_id: int
    name: str
    templates: list[TemplateRecord]
    detail_image_path: Path
    profile: ObjectProfile | None = None
    # depth maps, camera intrinsics, etc.: carried as opaque paths, never parsed
    extra_files: list[Path] = field(default_factory=list)


@dataclass
class QueryAnnotation:
    query_image_path: Path
    expression_id: int
    expression_text: str
    gt_instance_id: int
    gt_box: BoundingBox
    gt_mask: RasterMask | None = None


@dataclass
class DatasetStats:
    n_instances: int
    k_views: int
    query_images: int
    annotations: int

    def to_dict(self) -> dict:
        return {
            "N": self.n_instances,
            "K": self.k_views,
            "queries": self.query_images,
            "annotations": self.annotations,
        }


@dataclass
class Dataset:
    root: Path
    instances: list[ReferenceInstance]
    annotations: list[QueryAnnotation]
    stats: DatasetStats
    by_id: dict[int, ReferenceInstance] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.by_id:
            self.by_id = {inst.instance_id: inst for inst in self.instances}

    def annotations_by_image(self) -> dict[str, list[QueryAnnotation]]:
        grouped: dict[str, list[QueryAnnotation]] = {}
        for anno in self.annotations:
            key = image_key(self.root, anno.query_image_path)
            grouped.setdefault(key, []).append(anno)
        return grouped


def image_key(root: Path, image_path: Path) -> str:
    """Root-relative POSIX path used to key images in JSON artifacts."""
    return Path(image_path).relative_to(root).as_posix()


_ID_PREFIX = re.compile(r"^(\d+)_")
_VIEW_FILE = re.compile(r"^view_(\d+)\.png$")


def instance_id_from_name(name: str) -> int:
    m = _ID_PREFIX.match(name)
    if not m:
        raise DatasetError(f"instance name {name!r} has no integer id prefix")
    return int(m.group(1))


def _image_size(path: Path) -> tuple[int, int]:
    try:
        with Image.open(path) as img:
            return img.size  # (width, height)
    except Exception as exc:
        raise DatasetError(f"unreadable image: {exc}", path) from exc


def _load_mask(image_path: Path) -> RasterMask:
    sidecar = image_path.with_name(image_path.stem + "_mask.json")
    if sidecar.exists():
        try:
            return RasterMask.from_json(json.loads(sidecar.read_text(encoding="utf-8")))
        except (ValueError, KeyError) as exc:
            raise DatasetError(f"bad mask sidecar: {exc}", sidecar) from exc
    png = image_path.with_name(image_path.stem + "_mask.png")
    if png.exists():
        with Image.open(png) as img:
            return RasterMask.from_array(np.asarray(img.convert("L")) > 127)
    raise DatasetError("missing mask (expected _mask.json or _mask.png sidecar)", image_path)


def _load_instance(instance_dir: Path) -> ReferenceInstance:
    name = instance_dir.name
    instance_id = instance_id_from_name(name)
    detail = instance_dir / "detail.png"
    if not detail.exists():
        raise DatasetError("missing detail.png", instance_dir)

    views = []
    extra_files = []
    for child in sorted(instance_dir.iterdir()):
        m = _VIEW_FILE.match(child.name)
        if m:
            views.append((int(m.group(1)), child))
        elif child.name != "detail.png" and "_mask." not in child.name:
            extra_files.append(child)
    if not views:
        raise DatasetError("instance has no view_<k>.png templates", instance_dir)
    views.sort()

    templates = []
    for view_index, image_path in views:
        width, height = _image_size(image_path)
        mask = _load_mask(image_path)
        if (mask.width, mask.height) != (width, height):
            raise DatasetError(
                f"mask is {mask.width}x{mask.height} but image is {width}x{height}",
                image_path,
            )
        templates.append(
            TemplateRecord(
                instance_id=instance_id,
                view_index=view_index,
                image_path=image_path,
                mask=mask,
            )
        )
    return ReferenceInstance(
        instance_id=instance_id,
        name=name,
        templates=templates,
        detail_image_path=detail,
        extra_files=extra_files,
    )


def _load_annotations(anno_path: Path, image_path: Path, known_ids: set[int]) -> list[QueryAnnotation]:
    try:
        payload = json.loads(anno_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"unreadable annotation file: {exc}", anno_path) from exc

    width, height = _image_size(image_path)
    if (payload.get("width"), payload.get("height")) != (width, height):
        raise DatasetError(
            f"annotation extent {payload.get('width')}x{payload.get('height')} "
            f"disagrees with image {width}x{height}",
            anno_path,
        )

    annotations = []
    seen_ids: set[int] = set()
    for entry in payload.get("annotations", []):
        try:
            expression_id = int(entry["expression_id"])
            text = entry["expression"]
            gt_instance = int(entry["instance_id"])
            box = BoundingBox.from_list(entry["box"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"bad annotation entry: {exc}", anno_path) from exc
        if not isinstance(text, str) or not text:
            raise DatasetError("expression text must be non-empty", anno_path)
        if expression_id in seen_ids:
            raise DatasetError(f"duplicate expression_id {expression_id}", anno_path)
        seen_ids.add(expression_id)
        if gt_instance not in known_ids:
            raise DatasetError(f"annotation names unknown instance {gt_instance}", anno_path)
        if not box.within(width, height):
            raise DatasetError(f"gt box {box.as_list()} exceeds image extent", anno_path)
        mask = RasterMask.from_json(entry["mask"]) if entry.get("mask") else None
        annotations.append(
            QueryAnnotation(
                query_image_path=image_path,
                expression_id=expression_id,
                expression_text=text,
                gt_instance_id=gt_instance,
                gt_box=box,
                gt_mask=mask,
            )
        )
    return annotations


def load_dataset(root) -> Dataset:
    """Load and validate a full dataset root."""
    root = Path(root)
    objects_dir = root / "objects"
    if not objects_dir.is_dir():
        raise DatasetError("no instances found (missing objects/ directory)", root)

    instances = []
    seen: dict[int, str] = {}
    for instance_dir in sorted(p for p in objects_dir.iterdir() if p.is_dir()):
        instance = _load_instance(instance_dir)
        if instance.instance_id in seen:
            raise DatasetError(
                f"duplicate instance id {instance.instance_id} "
                f"(also used by {seen[instance.instance_id]})",
                instance_dir,
            )
        seen[instance.instance_id] = instance.name
        instances.append(instance)
    if not instances:
        raise DatasetError("no instances found", objects_dir)

    k_counts = {len(inst.templates) for inst in instances}
    if len(k_counts) != 1:
        raise DatasetError(f"ragged template counts across instances: {sorted(k_counts)}", objects_dir)
    k_views = k_counts.pop()

    known_ids = set(seen)
    annotations: list[QueryAnnotation] = []
    query_images = 0
    queries_dir = root / "queries"
    if queries_dir.is_dir():
        for image_path in sorted(queries_dir.glob("*/*.png")):
            anno_path = image_path.with_name(image_path.stem + ".anno.json")
            if not anno_path.exists():
                raise DatasetError("query image has no .anno.json sidecar", image_path)
            query_images += 1
            annotations.extend(_load_annotations(anno_path, image_path, known_ids))

    profiles_path = root / "profiles.json"
    if profiles_path.exists():
        profiles = load_profiles(profiles_path, known_ids=known_ids)
        for inst in instances:
            inst.profile = profiles.get(inst.instance_id)

    stats = DatasetStats(
        n_instances=len(instances),
        k_views=k_views,
        query_images=query_images,
        annotations=len(annotations),
    )
    return Dataset(root=root, instances=instances, annotations=annotations, stats=stats)


def load_profiles(path, known_ids: set[int] | None = None) -> dict[int, ObjectProfile]:
    """Load a profile store; accepts a JSON array or an object keyed by name."""
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"unreadable profile file: {exc}", path) from exc

    if isinstance(payload, dict):
        raw_profiles = list(payload.values())
    elif isinstance(payload, list):
        raw_profiles = payload
    else:
        raise DatasetError("profile store must be a JSON array or object", path)

    profiles: dict[int, ObjectProfile] = {}
    for raw in raw_profiles:
        try:
            profile = parse_profile(raw)
        except ProfileError as exc:
            raise DatasetError(f"bad profile entry: {exc}", path) from exc
        try:
            instance_id = instance_id_from_name(profile.identifier)
        except DatasetError as exc:
            raise DatasetError(
                f"profile {profile.identifier!r} names no known instance", path
            ) from exc
        if known_ids is not None and instance_id not in known_ids:
            raise DatasetError(
                f"profile {profile.identifier!r} names no known instance", path
            )
        if instance_id in profiles:
            raise DatasetError(f"duplicate profile for instance {instance_id}", path)
        profiles[instance_id] = profile
    return profiles


def save_profiles(profiles: dict[int, ObjectProfile], path) -> Path:
    """Inverse of load_profiles; output is byte-stable given the same map."""
    path = Path(path)
    store = {
        profiles[i].identifier: profile_to_dict(profiles[i]) for i in sorted(profiles)
    }
    path.write_text(json.dumps(store, indent=2, ensure_ascii=False, sort_keys=True) + "\n", encoding="utf-8")
    return path
