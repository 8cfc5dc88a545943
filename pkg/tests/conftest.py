import json
from pathlib import Path

import numpy as np
import pytest

from mrvg.matcher import Candidate
from mrvg.profiles import parse_profile
from mrvg.refdb import BoundingBox

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"


def golden_text(name: str) -> str:
    return (GOLDEN / f"{name}.txt").read_text(encoding="utf-8")


def iou_pixel_oracle(a: BoundingBox, b: BoundingBox) -> float:
    """Rasterize both half-open integer boxes and count pixels."""
    w = int(max(a.x + a.w, b.x + b.w)) + 1
    h = int(max(a.y + a.h, b.y + b.h)) + 1
    grid_a = np.zeros((h, w), dtype=bool)
    grid_b = np.zeros((h, w), dtype=bool)
    grid_a[int(a.y) : int(a.y + a.h), int(a.x) : int(a.x + a.w)] = True
    grid_b[int(b.y) : int(b.y + b.h), int(b.x) : int(b.x + b.w)] = True
    inter = int(np.logical_and(grid_a, grid_b).sum())
    union = int(np.logical_or(grid_a, grid_b).sum())
    return inter / union


@pytest.fixture(scope="session")
def bottle_scene():
    """The three-bottle fixture scene: candidates plus its three inquiries."""
    scene = json.loads((FIXTURES / "bottle_scene.json").read_text(encoding="utf-8"))
    candidates = [
        Candidate(
            item_id=item["item_id"],
            instance_id=item["instance_id"],
            profile=parse_profile(item["profile"]),
            position=(item["box"][0], item["box"][1]),
            box=BoundingBox.from_list(item["box"]),
        )
        for item in scene["items"]
    ]
    expressions = [(eid, text) for eid, text in scene["inquiries"]]
    return candidates, expressions


@pytest.fixture()
def synth_root(tmp_path):
    """Small synthetic dataset root written to disk."""
    from mrvg.synthgen import SynthConfig, write_synth_dataset

    root = tmp_path / "data"
    cfg = SynthConfig(
        n_instances=6, k_views=3, dim=16, cluster_sigma=0.0, proposal_sigma=0.0,
        scene_count=2, proposals_per_scene=3, seed=11,
    )
    write_synth_dataset(cfg, root)
    return root, cfg
