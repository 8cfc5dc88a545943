"""Proposal classification against the template bank, plus score filtering and NMS."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapter import AdapterParams, forward_array
from .evalkit import iou
from .featio import Embedding, TemplateBank
from .refdb import BoundingBox, RasterMask

DEFAULT_SIM_THRESHOLD = 0.35
DEFAULT_NMS_IOU = 0.5


class DetectorError(ValueError):
    pass


@dataclass
class Proposal:
    box: BoundingBox
    embedding: Embedding
    objectness: float = 1.0
    mask: RasterMask | None = None

    def __post_init__(self) -> None:
        if not (0.0 <= self.objectness <= 1.0):
            raise DetectorError(f"objectness must lie in [0, 1], got {self.objectness}")


@dataclass
class Detection:
    proposal: Proposal
    instance_id: int
    similarity: float
    best_view: int


def cosine_sim(a: Embedding, b: Embedding) -> float:
    if a.dim != b.dim:
        raise DetectorError(f"dim mismatch: {a.dim} vs {b.dim}")
    na = np.linalg.norm(a.values)
    nb = np.linalg.norm(b.values)
    if na == 0.0 or nb == 0.0:
        raise DetectorError("cosine similarity undefined for zero-norm embedding")
    return float(np.dot(a.values, b.values) / (na * nb))


def _normalize_rows(M: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(M, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DetectorError("zero-norm embedding")
    return M / norms


def classify_proposals(
    proposals: list[Proposal],
    bank: TemplateBank,
    params: AdapterParams,
    sim_threshold: float = DEFAULT_SIM_THRESHOLD,
) -> list[Detection]:
    """Label each proposal with the instance whose best template view is most
    cosine-similar after adapter refinement. Ties go to the lowest instance id;
    proposals scoring under the threshold are dropped."""
    if bank.n_instances == 0:
        raise DetectorError("template bank is empty")
    if bank.dim != params.dim:
        raise DetectorError(f"bank dim {bank.dim} != adapter dim {params.dim}")

    instance_ids = bank.instance_ids
    adapted_views = []
    view_owner = []
    view_index = []
    for instance_id in instance_ids:
        views = bank.matrix(instance_id)
        adapted_views.append(forward_array(params, views))
        view_owner.extend([instance_id] * views.shape[0])
        view_index.extend(range(1, views.shape[0] + 1))
    T = _normalize_rows(np.concatenate(adapted_views))
    view_owner = np.asarray(view_owner)
    view_index = np.asarray(view_index)
    owner_rank = np.searchsorted(np.asarray(instance_ids), view_owner)

    detections = []
    for proposal in proposals:
        if proposal.embedding.dim != bank.dim:
            raise DetectorError(
                f"proposal dim {proposal.embedding.dim} != bank dim {bank.dim}"
            )
        z = forward_array(params, proposal.embedding.values)
        nz = np.linalg.norm(z)
        if nz == 0.0:
            raise DetectorError("adapted proposal embedding has zero norm")
        sims = T @ (z / nz)
        per_instance = np.full(len(instance_ids), -np.inf)
        np.maximum.at(per_instance, owner_rank, sims)
        best_rank = int(np.argmax(per_instance))  # argmax keeps the lowest id on ties
        best_sim = float(per_instance[best_rank])
        if best_sim < sim_threshold:
            continue
        instance_mask = owner_rank == best_rank
        local = int(np.argmax(np.where(instance_mask, sims, -np.inf)))
        detections.append(
            Detection(
                proposal=proposal,
                instance_id=instance_ids[best_rank],
                similarity=best_sim,
                best_view=int(view_index[local]),
            )
        )
    return detections


def nms(detections: list[Detection], iou_threshold: float = DEFAULT_NMS_IOU) -> list[Detection]:
    """Greedy class-agnostic suppression by similarity; keeps a detection only
    if its box IoU with every survivor is <= the threshold."""
    ranked = sorted(
        range(len(detections)), key=lambda i: (-detections[i].similarity, i)
    )
    kept: list[Detection] = []
    for i in ranked:
        candidate = detections[i]
        if all(iou(candidate.proposal.box, other.proposal.box) <= iou_threshold for other in kept):
            kept.append(candidate)
    return kept
