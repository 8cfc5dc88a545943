"""Pipeline orchestrator: validate | synth | describe | extract | train-adapter
| detect | ground | eval | ablate-epochs.

Option precedence is CLI flag > --config JSON file > built-in default. Stage
artifacts land in a run directory and are deterministic given the same inputs
and seed.
"""

from __future__ import annotations

import json
import subprocess
import time
from pathlib import Path

import click

from . import adapter, backends, describer, featio, pipeline, refdb, synthgen
from .evalkit import EvalError
from .matcher import MatchError
from .profiles import ProfileError

ADAPTER_FILE = "adapter.ckpt"
DETECTIONS_FILE = "detections.json"
MATCHES_FILE = "matches.json"
REPORT_FILE = "report.json"
ABLATION_FILE = "ablation.json"

_VALIDATION_ERRORS = (
    refdb.DatasetError,
    featio.FeatIOError,
    featio.TensorFormatError,
    adapter.AdapterError,
    synthgen.SynthError,
    MatchError,
    ProfileError,
    EvalError,
    ValueError,
    OSError,
)


class PipelineAbort(click.ClickException):
    def __init__(self, message: str, exit_code: int = 1):
        super().__init__(message)
        self.exit_code = exit_code


def _run_guard(fn):
    """Map validation failures to exit 1 and backend failures to exit 2."""

    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except PipelineAbort:
            raise
        except backends.BackendError as exc:
            raise PipelineAbort(f"backend failure: {exc}", exit_code=2) from exc
        except describer.DescribeError as exc:
            raise PipelineAbort(f"backend failure: {exc}", exit_code=2) from exc
        except _VALIDATION_ERRORS as exc:
            raise PipelineAbort(str(exc), exit_code=1) from exc

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _load_config(config_path: str | None) -> dict:
    if not config_path:
        return {}
    try:
        payload = json.loads(Path(config_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise PipelineAbort(f"cannot read config file {config_path}: {exc}")
    if not isinstance(payload, dict):
        raise PipelineAbort(f"config file {config_path} must hold a JSON object")
    return payload


def _resolve(cli_value, config: dict, key: str, default):
    if cli_value is not None:
        return cli_value
    if key in config:
        return config[key]
    return default


def _require_artifact(path: Path, producer: str) -> Path:
    if not path.exists():
        raise PipelineAbort(
            f"missing {path.name} in {path.parent}; run `{producer}` first"
        )
    return path


def _default_run_dir(seed: int) -> Path:
    stamp = time.strftime("%Y%m%dT%H%M%S")
    return Path("runs") / f"{stamp}-{seed}"


def _load_bank(dataset, tensor_root):
    return featio.build_template_bank(dataset.instances, tensor_root)


def _profiles_for(dataset) -> dict:
    profiles = {i.instance_id: i.profile for i in dataset.instances if i.profile is not None}
    if not profiles:
        raise PipelineAbort(
            "dataset has no profiles.json; run `describe` (or `synth`) first"
        )
    return profiles


@click.group()
def main() -> None:
    """Reference-guided grounding pipeline."""


@main.command()
@click.option("--dataset", "dataset_root", required=True, type=click.Path(exists=True))
@click.option("--tensor-root", type=click.Path(), default=None,
              help="Directory holding features.json (defaults to the dataset root).")
@_run_guard
def validate(dataset_root, tensor_root):
    """Load and validate a dataset root; print its stats."""
    dataset = refdb.load_dataset(dataset_root)
    tensor_root = tensor_root or dataset_root
    manifest_path = Path(tensor_root) / featio.MANIFEST_NAME
    manifest_ok = None
    if manifest_path.exists():
        featio.validate_manifest(featio.load_manifest(tensor_root), tensor_root)
        manifest_ok = True
    payload = dataset.stats.to_dict()
    if manifest_ok is not None:
        payload["manifest"] = "ok"
    click.echo(json.dumps(payload, indent=2, sort_keys=True))


@main.command()
@click.option("--out", "out_root", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--instances", type=int, default=None, help="[default: 20]")
@click.option("--views", type=int, default=None, help="[default: 14]")
@click.option("--dim", type=int, default=None, help="[default: 64]")
@click.option("--cluster-sigma", type=float, default=None, help="[default: 0.3]")
@click.option("--proposal-sigma", type=float, default=None, help="[default: 0.0]")
@click.option("--scenes", type=int, default=None, help="[default: 2]")
@click.option("--proposals-per-scene", type=int, default=None, help="[default: 4]")
@click.option("--distractor-rate", type=float, default=None, help="[default: 0.0]")
@click.option("--seed", type=int, default=None, help="[default: 0]")
@_run_guard
def synth(out_root, config_path, instances, views, dim, cluster_sigma, proposal_sigma,
          scenes, proposals_per_scene, distractor_rate, seed):
    """Write a seeded synthetic dataset root with known ground truth."""
    config = _load_config(config_path)
    cfg = synthgen.SynthConfig(
        n_instances=_resolve(instances, config, "instances", 20),
        k_views=_resolve(views, config, "views", 14),
        dim=_resolve(dim, config, "dim", 64),
        cluster_sigma=_resolve(cluster_sigma, config, "cluster_sigma", 0.3),
        proposal_sigma=_resolve(proposal_sigma, config, "proposal_sigma", 0.0),
        scene_count=_resolve(scenes, config, "scenes", 2),
        proposals_per_scene=_resolve(proposals_per_scene, config, "proposals_per_scene", 4),
        distractor_rate=_resolve(distractor_rate, config, "distractor_rate", 0.0),
        seed=_resolve(seed, config, "seed", 0),
    )
    stats = synthgen.write_synth_dataset(cfg, out_root)
    click.echo(json.dumps(stats, indent=2, sort_keys=True))


@main.command()
@click.option("--dataset", "dataset_root", required=True, type=click.Path(exists=True))
@click.option("--backend", "backend_spec", required=True,
              help="http or fixtures:<dir>.")
@click.option("--model", default="gpt-4o-mini", show_default=True)
@click.option("--max-inflight", type=int, default=4, show_default=True)
@_run_guard
def describe(dataset_root, backend_spec, model, max_inflight):
    """Generate an object profile per instance and persist profiles.json."""
    dataset = refdb.load_dataset(dataset_root)
    backend = backends.make_backend(backend_spec)
    profiles = describer.describe_all(
        dataset.instances, backend, model=model, max_inflight=max_inflight
    )
    path = refdb.save_profiles(profiles, Path(dataset_root) / "profiles.json")
    click.echo(f"wrote {len(profiles)} profiles to {path}")


@main.command()
@click.option("--images", "images_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--bridge-bin", default="mrvg-bridge", show_default=True,
              help="Extractor-bridge executable.")
@_run_guard
def extract(images_dir, out_dir, config_path, bridge_bin):
    """Invoke the extractor bridge to produce features.json + tensors."""
    cmd = [bridge_bin, "extract", "--images", str(images_dir), "--out", str(out_dir)]
    if config_path:
        cmd += ["--config", str(config_path)]
    try:
        proc = subprocess.run(cmd, check=False)
    except FileNotFoundError as exc:
        raise PipelineAbort(
            f"bridge executable {bridge_bin!r} not found; install the bridge package "
            f"or pass --bridge-bin"
        ) from exc
    if proc.returncode != 0:
        raise PipelineAbort(f"bridge exited with status {proc.returncode}", exit_code=2)
    featio.validate_manifest(featio.load_manifest(out_dir), out_dir)
    click.echo(f"manifest at {Path(out_dir) / featio.MANIFEST_NAME} validated")


@main.command("train-adapter")
@click.option("--dataset", "dataset_root", required=True, type=click.Path(exists=True))
@click.option("--tensor-root", type=click.Path(), default=None)
@click.option("--run-dir", type=click.Path(), default=None,
              help="Artifact directory [default: runs/<timestamp>-<seed>].")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--epochs", type=int, default=None, help="[default: 640]")
@click.option("--lr", type=float, default=None, help="[default: 1e-3]")
@click.option("--batch", type=int, default=None, help="[default: 1024]")
@click.option("--temperature", type=float, default=None, help="[default: 0.05]")
@click.option("--alpha", type=float, default=None, help="Residual blend [default: 0.6]")
@click.option("--hidden", type=int, default=None, help="Adapter width [default: embedding dim]")
@click.option("--seed", type=int, default=None, help="[default: 0]")
@_run_guard
def train_adapter_cmd(dataset_root, tensor_root, run_dir, config_path, epochs, lr,
                      batch, temperature, alpha, hidden, seed):
    """Train the weight adapter on the template bank; write adapter.ckpt."""
    config = _load_config(config_path)
    cfg = adapter.TrainConfig(
        epochs=_resolve(epochs, config, "epochs", 640),
        lr=_resolve(lr, config, "lr", 1e-3),
        batch_size=_resolve(batch, config, "batch", 1024),
        temperature=_resolve(temperature, config, "temperature", 0.05),
        alpha=_resolve(alpha, config, "alpha", 0.6),
        hidden=_resolve(hidden, config, "hidden", None),
        seed=_resolve(seed, config, "seed", 0),
    )
    dataset = refdb.load_dataset(dataset_root)
    bank = _load_bank(dataset, tensor_root or dataset_root)
    result = adapter.train_adapter(bank, cfg)
    run_path = Path(run_dir) if run_dir else _default_run_dir(cfg.seed)
    ckpt = adapter.save_checkpoint(run_path / ADAPTER_FILE, result.params, cfg, result.loss_history)
    click.echo(
        f"trained {cfg.epochs} epochs; final loss {result.loss_history[-1]:.6f}; wrote {ckpt}"
    )


@main.command()
@click.option("--dataset", "dataset_root", required=True, type=click.Path(exists=True))
@click.option("--tensor-root", type=click.Path(), default=None)
@click.option("--run-dir", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--sim-threshold", type=float, default=None, help="[default: 0.35]")
@click.option("--nms-threshold", type=float, default=None, help="[default: 0.5]")
@_run_guard
def detect(dataset_root, tensor_root, run_dir, config_path, sim_threshold, nms_threshold):
    """Classify manifest proposals with the trained adapter; write detections.json."""
    config = _load_config(config_path)
    run_path = Path(run_dir)
    ckpt = _require_artifact(run_path / ADAPTER_FILE, "train-adapter")
    params, _ = adapter.load_checkpoint(ckpt)
    dataset = refdb.load_dataset(dataset_root)
    tensor_root = tensor_root or dataset_root
    bank = _load_bank(dataset, tensor_root)
    images = pipeline.detect_images(
        dataset,
        tensor_root,
        bank,
        params,
        sim_threshold=_resolve(sim_threshold, config, "sim_threshold", 0.35),
        nms_iou=_resolve(nms_threshold, config, "nms_threshold", 0.5),
    )
    path = pipeline.write_json(run_path / DETECTIONS_FILE, {"version": 1, "images": images})
    total = sum(len(v) for v in images.values())
    click.echo(f"wrote {total} detections across {len(images)} images to {path}")


@main.command()
@click.option("--dataset", "dataset_root", required=True, type=click.Path(exists=True))
@click.option("--run-dir", required=True, type=click.Path())
@click.option("--backend", "backend_spec", required=True,
              help="http, fixtures:<dir>, or heuristic.")
@click.option("--strategy", type=click.Choice(["joint", "independent"]),
              default="independent", show_default=True)
@click.option("--model", default="gpt-4o", show_default=True)
@click.option("--max-inflight", type=int, default=1, show_default=True)
@_run_guard
def ground(dataset_root, run_dir, backend_spec, strategy, model, max_inflight):
    """Resolve referring expressions against detections; write matches.json."""
    run_path = Path(run_dir)
    detections_path = _require_artifact(run_path / DETECTIONS_FILE, "detect")
    detections = pipeline.read_json(detections_path)["images"]
    dataset = refdb.load_dataset(dataset_root)
    profiles = _profiles_for(dataset)
    backend = backends.make_backend(backend_spec)
    matches = pipeline.ground_images(
        dataset, detections, profiles, backend,
        strategy=strategy, model=model, max_inflight=max_inflight,
    )
    path = pipeline.write_json(
        run_path / MATCHES_FILE, {"version": 1, "strategy": strategy, "images": matches}
    )
    total = sum(len(v) for v in matches.values())
    click.echo(f"wrote {total} matches to {path}")


@main.command("eval")
@click.option("--dataset", "dataset_root", required=True, type=click.Path(exists=True))
@click.option("--run-dir", required=True, type=click.Path())
@click.option("--lenient-threshold", is_flag=True, default=False,
              help="Count IoU == tau as correct instead of requiring IoU > tau.")
@_run_guard
def eval_cmd(dataset_root, run_dir, lenient_threshold):
    """Score matches (and detections, if present) against ground truth."""
    run_path = Path(run_dir)
    matches_path = _require_artifact(run_path / MATCHES_FILE, "ground")
    matches = pipeline.read_json(matches_path)["images"]
    detections = None
    detections_path = run_path / DETECTIONS_FILE
    if detections_path.exists():
        detections = pipeline.read_json(detections_path)["images"]
    dataset = refdb.load_dataset(dataset_root)
    report = pipeline.evaluate_run(
        dataset, matches, detections, strict=not lenient_threshold
    )
    path = pipeline.write_json(run_path / REPORT_FILE, report)
    click.echo(_format_report_table(report))
    click.echo(f"wrote {path}")


def _format_report_table(report: dict) -> str:
    acc = report["acc"]
    header = f"{'Acc0.5':>8} {'Acc0.75':>8} {'Acc0.9':>8} {'mAcc':>8}"
    row = (
        f"{100 * acc['0.50']:8.2f} {100 * acc['0.75']:8.2f} "
        f"{100 * acc['0.90']:8.2f} {100 * report['macc']:8.2f}"
    )
    lines = [header, row]
    if "detection" in report:
        det = report["detection"]
        lines.append(f"{'AP':>8} {'AP50':>8} {'AP75':>8}")
        lines.append(f"{100 * det['AP']:8.2f} {100 * det['AP50']:8.2f} {100 * det['AP75']:8.2f}")
    return "\n".join(lines)


@main.command("ablate-epochs")
@click.option("--dataset", "dataset_root", required=True, type=click.Path(exists=True))
@click.option("--tensor-root", type=click.Path(), default=None)
@click.option("--run-dir", required=True, type=click.Path())
@click.option("--epochs-list", default="80,160,320,640", show_default=True,
              help="Comma-separated epoch counts to sweep.")
@click.option("--lr", type=float, default=1e-3, help="[default: 1e-3]")
@click.option("--batch", type=int, default=1024, help="[default: 1024]")
@click.option("--temperature", type=float, default=0.05, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--sim-threshold", type=float, default=0.35, show_default=True)
@click.option("--nms-threshold", type=float, default=0.5, show_default=True)
@_run_guard
def ablate_epochs(dataset_root, tensor_root, run_dir, epochs_list, lr, batch,
                  temperature, seed, sim_threshold, nms_threshold):
    """Sweep adapter training epochs (plus a no-adapter baseline) and report AP."""
    dataset = refdb.load_dataset(dataset_root)
    tensor_root = tensor_root or dataset_root
    bank = _load_bank(dataset, tensor_root)
    rows = []

    def ap_for(params) -> dict:
        images = pipeline.detect_images(
            dataset, tensor_root, bank, params,
            sim_threshold=sim_threshold, nms_iou=nms_threshold,
        )
        dummy_matches = {k: [] for k in images}
        return pipeline.evaluate_run(dataset, dummy_matches, images)["detection"]

    baseline = adapter.AdapterParams.identity(bank.dim, alpha=0.0)
    rows.append({"epochs": 0, "adapter": False, **ap_for(baseline)})
    for epochs in [int(e) for e in epochs_list.split(",") if e.strip()]:
        cfg = adapter.TrainConfig(
            epochs=epochs, lr=lr, batch_size=batch, temperature=temperature, seed=seed
        )
        result = adapter.train_adapter(bank, cfg)
        rows.append({"epochs": epochs, "adapter": True, **ap_for(result.params)})
    path = pipeline.write_json(Path(run_dir) / ABLATION_FILE, {"version": 1, "sweep": rows})
    for row in rows:
        click.echo(
            f"epochs={row['epochs']:>5} adapter={str(row['adapter']):>5} "
            f"AP={100 * row['AP']:.2f} AP50={100 * row['AP50']:.2f} AP75={100 * row['AP75']:.2f}"
        )
    click.echo(f"wrote {path}")


if __name__ == "__main__":
    main()
