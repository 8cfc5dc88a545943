"""Stage implementations behind the CLI: detect, ground, and eval run on the
JSON artifacts their upstream stages wrote."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import featio, matcher
from .adapter import AdapterParams
from .detector import Detection, Proposal, classify_proposals, nms
from .evalkit import EvalDetection, EvalTruth, average_precision, evaluate_grounding
from .featio import Embedding, PatchGrid, TemplateBank
from .profiles import ObjectProfile
from .refdb import BoundingBox, Dataset, RasterMask


def detect_images(
    dataset: Dataset,
    tensor_root,
    bank: TemplateBank,
    params: AdapterParams,
    sim_threshold: float,
    nms_iou: float,
) -> dict[str, list[dict]]:
    """Pool every manifest proposal, classify against the bank, suppress, and
    return JSON-ready detections per image."""
    root = Path(tensor_root)
    manifest = featio.load_manifest(root)
    results: dict[str, list[dict]] = {}
    for image_key in sorted(manifest.get("images", {})):
        entry = manifest["images"][image_key]
        proposals = []
        for raw in entry.get("proposals", []):
            grid = PatchGrid.load(root / raw["grid"])
            mask = RasterMask.from_json(raw["mask"])
            embedding = featio.pool_foreground(grid, mask)
            proposals.append(
                Proposal(
                    box=BoundingBox.from_list(raw["box"]),
                    embedding=embedding,
                    objectness=float(raw.get("objectness", 1.0)),
                )
            )
        detections = nms(
            classify_proposals(proposals, bank, params, sim_threshold=sim_threshold),
            iou_threshold=nms_iou,
        )
        results[image_key] = [
            {
                "instance_id": det.instance_id,
                "box": det.proposal.box.as_list(),
                "similarity": det.similarity,
                "view": det.best_view,
            }
            for det in detections
        ]
    return results


def _detections_from_records(records: list[dict]) -> list[Detection]:
    detections = []
    for rec in records:
        box = BoundingBox.from_list(rec["box"])
        detections.append(
            Detection(
                # Embeddings are not persisted in detections.json; matching
                # only reads the box and instance id.
                proposal=Proposal(box=box, embedding=Embedding(values=np.zeros(1))),
                instance_id=int(rec["instance_id"]),
                similarity=float(rec["similarity"]),
                best_view=int(rec.get("view", 1)),
            )
        )
    return detections


def ground_images(
    dataset: Dataset,
    detections_by_image: dict[str, list[dict]],
    profiles: dict[int, ObjectProfile],
    backend,
    strategy: str,
    model: str,
    max_inflight: int = 1,
) -> dict[str, list[dict]]:
    """Resolve every annotated image's expressions against its detections."""
    results: dict[str, list[dict]] = {}
    for image_key, annotations in sorted(dataset.annotations_by_image().items()):
        expressions = [(a.expression_id, a.expression_text) for a in annotations]
        records = detections_by_image.get(image_key, [])
        candidates = matcher.build_candidates(_detections_from_records(records), profiles)
        if strategy == "joint":
            matches = matcher.match_joint(
                candidates, expressions, backend, model=model, key=f"{image_key}.joint"
            )
        elif strategy == "independent":
            matches = matcher.match_independent(
                candidates, expressions, backend, model=model,
                key_prefix=image_key, max_inflight=max_inflight,
            )
        else:
            raise matcher.MatchError(f"unknown strategy {strategy!r}")
        results[image_key] = [
            {
                "expression_id": m.expression_id,
                "item_id": m.item_id,
                "box": m.box.as_list(),
                "source": m.source,
            }
            for m in matches
        ]
    return results


def evaluate_run(
    dataset: Dataset,
    matches_by_image: dict[str, list[dict]],
    detections_by_image: dict[str, list[dict]] | None = None,
    strict: bool = True,
) -> dict:
    """Grounding report plus detection AP when detections are available."""
    ground_truth = {}
    for image_key, annotations in dataset.annotations_by_image().items():
        for anno in annotations:
            ground_truth[(image_key, anno.expression_id)] = anno.gt_box
    predictions = {}
    for image_key, records in matches_by_image.items():
        for rec in records:
            predictions[(image_key, int(rec["expression_id"]))] = BoundingBox.from_list(rec["box"])
    report = evaluate_grounding(predictions, ground_truth, strict=strict)
    payload = report.to_dict()

    if detections_by_image is not None:
        eval_dets = [
            EvalDetection(
                image=image_key,
                category=int(rec["instance_id"]),
                box=BoundingBox.from_list(rec["box"]),
                score=float(rec["similarity"]),
            )
            for image_key, records in detections_by_image.items()
            for rec in records
        ]
        truths = []
        seen = set()
        for image_key, annotations in dataset.annotations_by_image().items():
            for anno in annotations:
                key = (image_key, anno.gt_instance_id, tuple(anno.gt_box.as_list()))
                if key not in seen:
                    seen.add(key)
                    truths.append(
                        EvalTruth(image=image_key, category=anno.gt_instance_id, box=anno.gt_box)
                    )
        payload["detection"] = average_precision(eval_dets, truths)
    return payload


def write_json(path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
