import numpy as np
import pytest

from mrvg.matcher import Candidate, heuristic_match
from mrvg.refdb import BoundingBox, load_dataset
from mrvg.synthgen import (
    SynthConfig,
    SynthError,
    gen_bank,
    gen_dataset,
    gen_queries,
    gen_scene,
    oracle_assignments,
    write_synth_dataset,
)


def test_zero_sigma_views_equal_center():
    cfg = SynthConfig(n_instances=4, k_views=3, dim=8, cluster_sigma=0.0,
                      proposals_per_scene=3, seed=1)
    bank, centers = gen_bank(cfg)
    for instance_id in bank.instance_ids:
        for emb in bank.embeddings[instance_id]:
            np.testing.assert_array_equal(emb.values, centers[instance_id - 1])


def test_bank_is_deterministic_per_seed():
    cfg = SynthConfig(n_instances=5, k_views=4, dim=10, cluster_sigma=0.2,
                      proposals_per_scene=3, seed=9)
    a, ca = gen_bank(cfg)
    b, cb = gen_bank(cfg)
    np.testing.assert_array_equal(ca, cb)
    for instance_id in a.instance_ids:
        for ea, eb in zip(a.embeddings[instance_id], b.embeddings[instance_id]):
            np.testing.assert_array_equal(ea.values, eb.values)


def test_views_are_unit_norm():
    cfg = SynthConfig(n_instances=3, k_views=5, dim=16, cluster_sigma=0.5,
                      proposals_per_scene=2, seed=2)
    bank, centers = gen_bank(cfg)
    np.testing.assert_allclose(np.linalg.norm(centers, axis=1), 1.0, atol=1e-12)
    for instance_id in bank.instance_ids:
        for emb in bank.embeddings[instance_id]:
            assert np.linalg.norm(emb.values) == pytest.approx(1.0, abs=1e-12)


def test_nearest_center_classification_regression_bound():
    # measured once with this exact seeding: 0.865; frozen with a little slack
    cfg = SynthConfig(n_instances=20, k_views=14, dim=64, cluster_sigma=0.3, seed=7)
    _, centers = gen_bank(cfg)
    queries, labels = gen_queries(cfg, centers, per_instance=10, seed=707)
    sims = queries @ centers.T
    predicted = np.argmax(sims, axis=1) + 1
    accuracy = float(np.mean(predicted == labels))
    assert accuracy >= 0.86


def test_config_validation():
    with pytest.raises(SynthError):
        SynthConfig(n_instances=1)
    with pytest.raises(SynthError):
        SynthConfig(distractor_rate=1.5)
    with pytest.raises(SynthError):
        SynthConfig(n_instances=3, proposals_per_scene=5)


def test_scene_boxes_disjoint_with_unique_x():
    cfg = SynthConfig(n_instances=10, k_views=2, dim=8, proposals_per_scene=5, seed=3)
    _, centers = gen_bank(cfg)
    rng = np.random.default_rng(0)
    scene = gen_scene(cfg, centers, 0, rng)
    boxes = [p.box for p in scene.placements]
    xs = [b.x for b in boxes]
    assert len(set(xs)) == len(xs)
    for i, a in enumerate(boxes):
        for b in boxes[i + 1 :]:
            disjoint = (a.x + a.w <= b.x or b.x + b.w <= a.x
                        or a.y + a.h <= b.y or b.y + b.h <= a.y)
            assert disjoint


def _scene_candidates(scene, profiles):
    order = sorted(
        range(len(scene.placements)),
        key=lambda i: (scene.placements[i].box.x, scene.placements[i].box.y),
    )
    return [
        Candidate(
            item_id=rank + 1,
            instance_id=scene.placements[p].instance_id,
            profile=profiles[scene.placements[p].instance_id],
            position=(scene.placements[p].box.x, scene.placements[p].box.y),
            box=scene.placements[p].box,
        )
        for rank, p in enumerate(order)
    ]


@pytest.mark.parametrize("seed", range(4))
def test_heuristic_recovers_oracle_on_clean_scenes(seed):
    cfg = SynthConfig(n_instances=12, k_views=2, dim=8, proposals_per_scene=5,
                      distractor_rate=0.0, seed=seed)
    dataset = gen_dataset(cfg)
    for scene in dataset.scenes:
        oracle = oracle_assignments(scene)
        candidates = _scene_candidates(scene, dataset.profiles)
        for expr in scene.expressions:
            assert heuristic_match(candidates, expr.text) == oracle[expr.expression_id]


def test_distractor_rate_limits_targeted_expressions():
    cfg = SynthConfig(n_instances=10, k_views=2, dim=8, proposals_per_scene=4,
                      distractor_rate=0.5, seed=5)
    _, centers = gen_bank(cfg)
    scene = gen_scene(cfg, centers, 0, np.random.default_rng(1))
    attribute_exprs = [e for e in scene.expressions if "leftmost" not in e.text]
    assert len(attribute_exprs) == 2  # half of the 4 proposals stay untargeted


def test_identity_adapter_grounds_noise_free_scenes_perfectly(tmp_path):
    from mrvg import featio, pipeline
    from mrvg.adapter import AdapterParams
    from mrvg.matcher import HeuristicBackend

    cfg = SynthConfig(n_instances=6, k_views=3, dim=16, cluster_sigma=0.0,
                      proposal_sigma=0.0, scene_count=2, proposals_per_scene=3, seed=8)
    root = tmp_path / "root"
    write_synth_dataset(cfg, root)
    dataset = load_dataset(root)
    bank = featio.build_template_bank(dataset.instances, root)
    identity = AdapterParams.identity(cfg.dim, alpha=0.0)
    detections = pipeline.detect_images(dataset, root, bank, identity,
                                        sim_threshold=0.35, nms_iou=0.5)
    profiles = {i.instance_id: i.profile for i in dataset.instances}
    matches = pipeline.ground_images(dataset, detections, profiles, HeuristicBackend(),
                                     strategy="joint", model="oracle")
    report = pipeline.evaluate_run(dataset, matches, detections)
    assert report["acc"]["0.50"] == 1.0
    assert report["macc"] == 1.0


def test_written_dataset_round_trips_through_loader(tmp_path):
    cfg = SynthConfig(n_instances=4, k_views=2, dim=8, proposals_per_scene=3,
                      scene_count=2, seed=13)
    stats = write_synth_dataset(cfg, tmp_path / "root")
    assert stats["N"] == 4 and stats["K"] == 2 and stats["queries"] == 2
    dataset = load_dataset(tmp_path / "root")
    assert dataset.stats.n_instances == 4
    assert dataset.stats.k_views == 2
    assert all(inst.profile is not None for inst in dataset.instances)
    for anno in dataset.annotations:
        assert isinstance(anno.gt_box, BoundingBox)
