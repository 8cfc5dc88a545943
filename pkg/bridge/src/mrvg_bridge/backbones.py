"""Backbone registry: proposal generator, segmenter, and patch-feature extractor.

Two sets ship:

- ``builtin``: deterministic pure-numpy models (border-color background
  subtraction, color-distance masks, color-statistic patch features behind a
  fixed random projection). No weights, runs anywhere, used by the tests.
- ``hf``: transformers-based grounded detector / promptable segmenter /
  self-supervised ViT. Requires torch plus local weight directories; imports
  lazily so the builtin path has no heavy dependencies.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

from . import BridgeError


@dataclass
class BridgeConfig:
    backbones: str = "builtin"
    detector_prompt: str = "objects"
    box_threshold: float = 0.3
    feature_dim: int = 64
    resize: int = 224
    patch_size: int = 16
    min_component_area: int = 64
    background_distance: float = 40.0
    weights_root: str | None = None  # required for the hf set

    def __post_init__(self) -> None:
        if self.resize % self.patch_size:
            raise BridgeError(
                f"resize {self.resize} must be a multiple of patch_size {self.patch_size}"
            )

    @classmethod
    def from_dict(cls, payload: dict) -> "BridgeConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(payload) - known
        if unknown:
            raise BridgeError(f"unknown config keys: {sorted(unknown)}")
        return cls(**payload)


@dataclass
class ProposalBox:
    x: int
    y: int
    w: int
    h: int
    objectness: float


def _background_color(rgb: np.ndarray) -> np.ndarray:
    border = np.concatenate([rgb[0], rgb[-1], rgb[:, 0], rgb[:, -1]])
    return np.median(border, axis=0)


def _distance_map(rgb: np.ndarray, reference: np.ndarray) -> np.ndarray:
    return np.linalg.norm(rgb.astype(np.float64) - reference, axis=-1)


class BuiltinProposer:
    """Connected components of pixels that stand out from the border color."""

    name = "builtin-border-cc"

    def __init__(self, config: BridgeConfig):
        self.config = config

    def propose(self, rgb: np.ndarray) -> list[ProposalBox]:
        distance = _distance_map(rgb, _background_color(rgb))
        foreground = distance > self.config.background_distance
        labelled, count = ndimage.label(foreground)
        proposals = []
        for slc in ndimage.find_objects(labelled):
            if slc is None:
                continue
            ys, xs = slc
            region = foreground[ys, xs]
            area = int(region.sum())
            if area < self.config.min_component_area:
                continue
            h = ys.stop - ys.start
            w = xs.stop - xs.start
            objectness = float(min(1.0, area / (w * h)))
            if objectness < self.config.box_threshold:
                continue
            proposals.append(ProposalBox(x=xs.start, y=ys.start, w=w, h=h,
                                         objectness=objectness))
        proposals.sort(key=lambda p: (-p.objectness, p.x, p.y))
        return proposals


class BuiltinSegmenter:
    """Per-box mask: pixels whose color stands out from the image background."""

    name = "builtin-color-distance"

    def __init__(self, config: BridgeConfig):
        self.config = config

    def segment(self, rgb: np.ndarray, box: ProposalBox) -> np.ndarray:
        crop = rgb[box.y : box.y + box.h, box.x : box.x + box.w]
        distance = _distance_map(crop, _background_color(rgb))
        mask = distance > self.config.background_distance
        if not mask.any():
            mask = np.ones(crop.shape[:2], dtype=bool)
        return mask


class BuiltinFeatures:
    """Patch lattice of color statistics, projected to the feature dim with a
    fixed seeded Gaussian matrix so outputs are deterministic."""

    name = "builtin-colorstat-v1"
    _STATS = 9  # mean RGB, std RGB, gradient energy, patch x, patch y
    _PROJECTION_SEED = 0x5EED

    def __init__(self, config: BridgeConfig):
        self.config = config
        self.output_dim = config.feature_dim
        rng = np.random.default_rng(self._PROJECTION_SEED)
        self.projection = rng.normal(
            0.0, 1.0 / np.sqrt(self._STATS), size=(self._STATS, config.feature_dim)
        ).astype(np.float32)

    @property
    def grid_side(self) -> int:
        return self.config.resize // self.config.patch_size

    def extract(self, crop_rgb: np.ndarray) -> np.ndarray:
        size = self.config.resize
        image = Image.fromarray(crop_rgb.astype(np.uint8)).resize((size, size), Image.BILINEAR)
        pixels = np.asarray(image, dtype=np.float32) / 255.0
        side = self.grid_side
        p = self.config.patch_size
        patches = pixels.reshape(side, p, side, p, 3).transpose(0, 2, 1, 3, 4)
        mean = patches.mean(axis=(2, 3))
        std = patches.std(axis=(2, 3))
        grad_y = np.abs(np.diff(patches, axis=2)).mean(axis=(2, 3, 4))
        ys, xs = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
        stats = np.concatenate(
            [
                mean,
                std,
                grad_y[..., None],
                (xs / max(side - 1, 1))[..., None],
                (ys / max(side - 1, 1))[..., None],
            ],
            axis=-1,
        ).astype(np.float32)
        return stats @ self.projection  # (side, side, feature_dim)


class HFProposer:
    """Grounded open-vocabulary detector queried with the generic text prompt."""

    name = "grounding-dino"

    def __init__(self, config: BridgeConfig):
        torch, transformers = _require_torch()
        if not config.weights_root:
            raise BridgeError("hf backbones need config.weights_root with local weights")
        path = f"{config.weights_root}/grounding-dino"
        self.processor = transformers.AutoProcessor.from_pretrained(path)
        self.model = transformers.GroundingDinoForObjectDetection.from_pretrained(path).eval()
        self.prompt = config.detector_prompt
        self.threshold = config.box_threshold
        self.torch = torch

    def propose(self, rgb: np.ndarray) -> list[ProposalBox]:
        image = Image.fromarray(rgb.astype(np.uint8))
        inputs = self.processor(images=image, text=f"{self.prompt}.", return_tensors="pt")
        with self.torch.no_grad():
            outputs = self.model(**inputs)
        results = self.processor.post_process_grounded_object_detection(
            outputs,
            inputs.input_ids,
            box_threshold=self.threshold,
            text_threshold=self.threshold,
            target_sizes=[image.size[::-1]],
        )[0]
        proposals = []
        for score, box in zip(results["scores"], results["boxes"]):
            x0, y0, x1, y1 = [int(round(float(v))) for v in box]
            if x1 <= x0 or y1 <= y0:
                continue
            proposals.append(
                ProposalBox(x=x0, y=y0, w=x1 - x0, h=y1 - y0,
                            objectness=float(min(1.0, score)))
            )
        return proposals


class HFSegmenter:
    """Promptable segmenter driven by the proposal box."""

    name = "sam"

    def __init__(self, config: BridgeConfig):
        torch, transformers = _require_torch()
        path = f"{config.weights_root}/sam"
        self.processor = transformers.SamProcessor.from_pretrained(path)
        self.model = transformers.SamModel.from_pretrained(path).eval()
        self.torch = torch

    def segment(self, rgb: np.ndarray, box: ProposalBox) -> np.ndarray:
        image = Image.fromarray(rgb.astype(np.uint8))
        input_boxes = [[[box.x, box.y, box.x + box.w, box.y + box.h]]]
        inputs = self.processor(image, input_boxes=input_boxes, return_tensors="pt")
        with self.torch.no_grad():
            outputs = self.model(**inputs)
        masks = self.processor.image_processor.post_process_masks(
            outputs.pred_masks.cpu(),
            inputs["original_sizes"].cpu(),
            inputs["reshaped_input_sizes"].cpu(),
        )[0][0, 0].numpy()
        crop = masks[box.y : box.y + box.h, box.x : box.x + box.w]
        return crop.astype(bool)


class HFFeatures:
    """Self-supervised ViT patch embeddings over the resized crop."""

    name = "dinov2"

    def __init__(self, config: BridgeConfig):
        torch, transformers = _require_torch()
        path = f"{config.weights_root}/dinov2"
        self.processor = transformers.AutoImageProcessor.from_pretrained(path)
        self.model = transformers.AutoModel.from_pretrained(path).eval()
        self.config = config
        self.output_dim = int(self.model.config.hidden_size)
        self.torch = torch

    @property
    def grid_side(self) -> int:
        return self.config.resize // self.config.patch_size

    def extract(self, crop_rgb: np.ndarray) -> np.ndarray:
        size = self.config.resize
        image = Image.fromarray(crop_rgb.astype(np.uint8)).resize((size, size), Image.BILINEAR)
        inputs = self.processor(images=image, return_tensors="pt",
                                size={"height": size, "width": size})
        with self.torch.no_grad():
            hidden = self.model(**inputs).last_hidden_state[0]
        side = self.grid_side
        patches = hidden[1 : 1 + side * side]  # drop the CLS token
        return patches.reshape(side, side, -1).numpy().astype(np.float32)


def _require_torch():
    try:
        import torch
        import transformers
    except ImportError as exc:
        raise BridgeError(
            "hf backbones need the torch extra: pip install 'mrvg-bridge[torch]'"
        ) from exc
    return torch, transformers


@dataclass
class BackboneSet:
    proposer: object
    segmenter: object
    features: object
    config: BridgeConfig = field(repr=False, default=None)

    def metadata(self) -> dict:
        cfg = self.config
        return {
            "detector": {
                "name": self.proposer.name,
                "prompt": cfg.detector_prompt,
                "box_threshold": cfg.box_threshold,
            },
            "segmenter": {"name": self.segmenter.name},
            "features": {
                "name": self.features.name,
                "dim": self.features.output_dim,
                "resize": [cfg.resize, cfg.resize],
                "patch_size": cfg.patch_size,
                "normalization": "rgb / 255",
            },
        }


def load_backbones(config: BridgeConfig) -> BackboneSet:
    if config.backbones == "builtin":
        return BackboneSet(
            proposer=BuiltinProposer(config),
            segmenter=BuiltinSegmenter(config),
            features=BuiltinFeatures(config),
            config=config,
        )
    if config.backbones == "hf":
        return BackboneSet(
            proposer=HFProposer(config),
            segmenter=HFSegmenter(config),
            features=HFFeatures(config),
            config=config,
        )
    raise BridgeError(f"unknown backbone set {config.backbones!r}")
