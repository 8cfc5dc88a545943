"""Seeded synthetic banks, scenes, and dataset roots with known ground truth.

Images on disk are placeholders; the embeddings written to the manifest are the
ground truth signal, so every pipeline stage runs without backbones or paid
APIs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import featio
from .featio import Embedding, TemplateBank
from .profiles import ObjectProfile
from .refdb import BoundingBox, RasterMask, save_profiles

CANVAS_W = 640
CANVAS_H = 480
_SHAPES = ("bottle", "box", "can", "jar")
_TEMPLATE_SIDE = 64


class SynthError(ValueError):
    pass


@dataclass
class SynthConfig:
    n_instances: int = 20
    k_views: int = 14
    dim: int = 64
    cluster_sigma: float = 0.3
    scene_count: int = 2
    proposals_per_scene: int = 4
    distractor_rate: float = 0.0
    seed: int = 0
    proposal_sigma: float = 0.0

    def __post_init__(self) -> None:
        if self.n_instances < 2:
            raise SynthError(f"n_instances must be >= 2, got {self.n_instances}")
        if self.dim < 2:
            raise SynthError(f"dim must be >= 2, got {self.dim}")
        if self.cluster_sigma < 0 or self.proposal_sigma < 0:
            raise SynthError("sigmas must be non-negative")
        if not 0.0 <= self.distractor_rate <= 1.0:
            raise SynthError(f"distractor_rate must lie in [0, 1], got {self.distractor_rate}")
        if self.proposals_per_scene > self.n_instances:
            raise SynthError("proposals_per_scene cannot exceed n_instances")
        if self.k_views < 1 or self.scene_count < 0 or self.proposals_per_scene < 1:
            raise SynthError("k_views/scene_count/proposals_per_scene out of range")


def instance_name(i: int) -> str:
    return f"{i:03d}_synth_{_SHAPES[(i - 1) % len(_SHAPES)]}"


def instance_shape(i: int) -> str:
    return _SHAPES[(i - 1) % len(_SHAPES)]


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def gen_bank(cfg: SynthConfig) -> tuple[TemplateBank, np.ndarray]:
    """Unit-norm cluster centers plus K renormalized noisy views per instance."""
    rng = np.random.default_rng(cfg.seed)
    centers = np.stack([_unit(rng.normal(size=cfg.dim)) for _ in range(cfg.n_instances)])
    embeddings: dict[int, list[Embedding]] = {}
    names: dict[int, str] = {}
    for idx in range(cfg.n_instances):
        instance_id = idx + 1
        views = []
        for _ in range(cfg.k_views):
            if cfg.cluster_sigma == 0.0:
                vec = centers[idx].copy()
            else:
                vec = _unit(centers[idx] + rng.normal(0.0, cfg.cluster_sigma, size=cfg.dim))
            views.append(Embedding(values=vec, stage="raw"))
        embeddings[instance_id] = views
        names[instance_id] = instance_name(instance_id)
    return TemplateBank(embeddings=embeddings, names=names), centers


def gen_queries(cfg: SynthConfig, centers: np.ndarray, per_instance: int,
                seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Fresh noisy samples around each center, for held-out classification."""
    rng = np.random.default_rng(seed)
    vectors, labels = [], []
    for idx in range(centers.shape[0]):
        for _ in range(per_instance):
            if cfg.cluster_sigma == 0.0:
                vec = centers[idx].copy()
            else:
                vec = _unit(centers[idx] + rng.normal(0.0, cfg.cluster_sigma, size=cfg.dim))
            vectors.append(vec)
            labels.append(idx + 1)
    return np.stack(vectors), np.asarray(labels, dtype=np.int64)


def gen_profiles(cfg: SynthConfig) -> dict[int, ObjectProfile]:
    """Profiles with per-instance unique color and text tokens."""
    profiles = {}
    for i in range(1, cfg.n_instances + 1):
        shape = instance_shape(i)
        hue = f"hue{i:03d}"
        tag = f"TAG{i:03d}"
        profiles[i] = ObjectProfile(
            identifier=instance_name(i),
            shape=shape,
            colors=[{"description": "main color of the body", "color": hue}],
            texts=[{"text": tag, "position": "on the label, black"}],
            function=f"A synthetic benchmark {shape}.",
            summary=f"The item is a {shape} with a {hue} body labeled {tag}.",
        )
    return profiles


@dataclass
class ScenePlacement:
    instance_id: int
    box: BoundingBox
    embedding: np.ndarray
    objectness: float = 1.0


@dataclass
class SceneExpression:
    expression_id: int
    text: str
    target: int  # index into placements
    gt_instance_id: int
    gt_box: BoundingBox


@dataclass
class SynthScene:
    index: int
    width: int
    height: int
    placements: list[ScenePlacement]
    expressions: list[SceneExpression]


def _place_boxes(rng: np.random.Generator, count: int,
                 max_tries: int = 200) -> list[BoundingBox]:
    """Non-overlapping boxes with pairwise-distinct x origins on the canvas."""
    boxes: list[BoundingBox] = []
    for _ in range(count):
        for attempt in range(max_tries):
            w = int(rng.integers(60, 121))
            h = int(rng.integers(60, 121))
            x = int(rng.integers(0, CANVAS_W - w + 1))
            y = int(rng.integers(0, CANVAS_H - h + 1))
            candidate = BoundingBox(x, y, w, h)
            overlaps = any(
                not (candidate.x + candidate.w <= b.x or b.x + b.w <= candidate.x
                     or candidate.y + candidate.h <= b.y or b.y + b.h <= candidate.y)
                for b in boxes
            )
            if not overlaps and all(b.x != x for b in boxes):
                boxes.append(candidate)
                break
        else:
            raise SynthError(f"could not place {count} non-overlapping boxes")
    return boxes


def gen_scene(cfg: SynthConfig, centers: np.ndarray, scene_index: int,
              rng: np.random.Generator) -> SynthScene:
    """One query scene: placed proposals with ground truth plus expressions."""
    boxes = _place_boxes(rng, cfg.proposals_per_scene)
    chosen = rng.choice(cfg.n_instances, size=cfg.proposals_per_scene, replace=False)
    placements = []
    for box, idx in zip(boxes, chosen):
        if cfg.proposal_sigma == 0.0:
            vec = centers[idx].copy()
        else:
            vec = _unit(centers[idx] + rng.normal(0.0, cfg.proposal_sigma, size=cfg.dim))
        placements.append(ScenePlacement(instance_id=int(idx) + 1, box=box, embedding=vec))

    n_targeted = max(1, int(round((1.0 - cfg.distractor_rate) * len(placements))))
    expressions = []
    eid = 1
    for p_idx in range(n_targeted):
        placement = placements[p_idx]
        shape = instance_shape(placement.instance_id)
        expressions.append(
            SceneExpression(
                expression_id=eid,
                text=f"the hue{placement.instance_id:03d} {shape}",
                target=p_idx,
                gt_instance_id=placement.instance_id,
                gt_box=placement.box,
            )
        )
        eid += 1
    if len(placements) >= 2:
        leftmost = min(range(len(placements)), key=lambda i: placements[i].box.x)
        placement = placements[leftmost]
        expressions.append(
            SceneExpression(
                expression_id=eid,
                text=f"the leftmost {instance_shape(placement.instance_id)}",
                target=leftmost,
                gt_instance_id=placement.instance_id,
                gt_box=placement.box,
            )
        )
    return SynthScene(
        index=scene_index,
        width=CANVAS_W,
        height=CANVAS_H,
        placements=placements,
        expressions=expressions,
    )


def oracle_assignments(scene: SynthScene) -> dict[int, int]:
    """Ground-truth expression -> item id, with items numbered from 1 in the
    same (x, y) order the matcher uses."""
    order = sorted(
        range(len(scene.placements)),
        key=lambda i: (scene.placements[i].box.x, scene.placements[i].box.y),
    )
    item_of = {p_idx: rank + 1 for rank, p_idx in enumerate(order)}
    return {expr.expression_id: item_of[expr.target] for expr in scene.expressions}


@dataclass
class SynthDataset:
    cfg: SynthConfig
    bank: TemplateBank
    centers: np.ndarray
    profiles: dict[int, ObjectProfile]
    scenes: list[SynthScene] = field(default_factory=list)


def gen_dataset(cfg: SynthConfig) -> SynthDataset:
    bank, centers = gen_bank(cfg)
    profiles = gen_profiles(cfg)
    # Separate stream so scene layout does not disturb the bank's noise draw.
    rng = np.random.default_rng((cfg.seed, 1))
    scenes = [gen_scene(cfg, centers, s, rng) for s in range(cfg.scene_count)]
    return SynthDataset(cfg=cfg, bank=bank, centers=centers, profiles=profiles, scenes=scenes)


def _solid_png(path: Path, width: int, height: int, color: tuple[int, int, int]) -> None:
    Image.new("RGB", (width, height), color).save(path)


def _instance_color(i: int) -> tuple[int, int, int]:
    rng = np.random.default_rng(i)
    return tuple(int(c) for c in rng.integers(40, 216, size=3))


def write_synth_dataset(cfg: SynthConfig, root) -> dict:
    """Materialize a full dataset root (refdb layout) plus the feature manifest."""
    root = Path(root)
    dataset = gen_dataset(cfg)
    full_template_mask = RasterMask.full(_TEMPLATE_SIDE, _TEMPLATE_SIDE).to_json()

    manifest: dict = {
        "format_version": 1,
        "backbones": {
            "detector": {"name": "synthetic-oracle"},
            "segmenter": {"name": "synthetic-oracle"},
            "features": {"name": "synthetic-oracle", "dim": cfg.dim},
        },
        "images": {},
        "templates": {},
    }

    for instance_id in dataset.bank.instance_ids:
        name = dataset.bank.names[instance_id]
        obj_dir = root / "objects" / name
        obj_dir.mkdir(parents=True, exist_ok=True)
        color = _instance_color(instance_id)
        _solid_png(obj_dir / "detail.png", _TEMPLATE_SIDE, _TEMPLATE_SIDE, color)
        views = dataset.bank.embeddings[instance_id]
        manifest["templates"][name] = {}
        for view_index, emb in enumerate(views, start=1):
            _solid_png(obj_dir / f"view_{view_index}.png", _TEMPLATE_SIDE, _TEMPLATE_SIDE, color)
            (obj_dir / f"view_{view_index}_mask.json").write_text(
                json.dumps(full_template_mask), encoding="utf-8"
            )
            grid_rel = f"tensors/templates/{name}/view_{view_index}.mrvgt"
            featio.write_tensor((1, 1, cfg.dim), emb.values.astype(np.float32), root / grid_rel)
            manifest["templates"][name][str(view_index)] = {
                "grid": grid_rel,
                "mask": full_template_mask,
                "analyzed_size": [_TEMPLATE_SIDE, _TEMPLATE_SIDE],
            }

    for scene in dataset.scenes:
        scene_dir = root / "queries" / f"scene{scene.index:03d}"
        scene_dir.mkdir(parents=True, exist_ok=True)
        image_rel = f"queries/scene{scene.index:03d}/img000.png"
        img = Image.new("RGB", (scene.width, scene.height), (255, 255, 255))
        draw = ImageDraw.Draw(img)
        for placement in scene.placements:
            b = placement.box
            draw.rectangle(
                [b.x, b.y, b.x + b.w - 1, b.y + b.h - 1],
                fill=_instance_color(placement.instance_id),
            )
        img.save(root / image_rel)

        entry = {"width": scene.width, "height": scene.height, "proposals": []}
        for j, placement in enumerate(scene.placements):
            b = placement.box
            grid_rel = f"tensors/queries/scene{scene.index:03d}/img000_p{j}.mrvgt"
            featio.write_tensor((1, 1, cfg.dim), placement.embedding.astype(np.float32), root / grid_rel)
            entry["proposals"].append(
                {
                    "box": [b.x, b.y, b.w, b.h],
                    "objectness": placement.objectness,
                    "grid": grid_rel,
                    "mask": RasterMask.full(int(b.w), int(b.h)).to_json(),
                    "analyzed_size": [int(b.w), int(b.h)],
                }
            )
        manifest["images"][image_rel] = entry

        anno = {
            "width": scene.width,
            "height": scene.height,
            "annotations": [
                {
                    "expression_id": expr.expression_id,
                    "expression": expr.text,
                    "instance_id": expr.gt_instance_id,
                    "box": expr.gt_box.as_list(),
                }
                for expr in scene.expressions
            ],
        }
        (scene_dir / "img000.anno.json").write_text(
            json.dumps(anno, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    save_profiles(dataset.profiles, root / "profiles.json")
    (root / featio.MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return {
        "N": cfg.n_instances,
        "K": cfg.k_views,
        "queries": len(dataset.scenes),
        "annotations": sum(len(s.expressions) for s in dataset.scenes),
    }
