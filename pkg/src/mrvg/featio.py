"""Tensor interchange files (.mrvgt), the feature manifest, and foreground pooling."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .refdb import RasterMask, ReferenceInstance

MAGIC = b"MRVG"
FORMAT_VERSION = 1
# dtype code 0 is the interchange baseline; code 1 is used by adapter checkpoints.
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
DTYPE_CODES = {"float32": 0, "float64": 1}

# A patch cell counts as foreground when more than this fraction of its pixels are.
FOREGROUND_COVERAGE = 0.5

MANIFEST_NAME = "features.json"


class TensorFormatError(ValueError):
    """Raised for malformed .mrvgt payloads."""


class FeatIOError(ValueError):
    """Raised for pooling/bank/manifest contract violations."""


def encode_tensor(shape, data, dtype: str = "float32") -> bytes:
    """Serialize a tensor to the interchange byte format."""
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise TensorFormatError(f"negative dimension in shape {shape}")
    code = DTYPE_CODES.get(dtype)
    if code is None:
        raise TensorFormatError(f"unsupported dtype {dtype!r}")
    arr = np.ascontiguousarray(np.asarray(data, dtype=DTYPES[code]).reshape(-1))
    expected = int(np.prod(shape, dtype=np.int64)) if shape else 1
    if arr.size != expected:
        raise TensorFormatError(f"shape {shape} implies {expected} values, got {arr.size}")
    header = MAGIC + struct.pack("<III", FORMAT_VERSION, code, len(shape))
    header += struct.pack(f"<{len(shape)}Q", *shape) if shape else b""
    return header + arr.tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[tuple[int, ...], np.ndarray, int]:
    """Parse one tensor out of a byte buffer; returns (shape, data, next offset)."""
    if buf[offset : offset + 4] != MAGIC:
        raise TensorFormatError("bad magic")
    offset += 4
    if len(buf) < offset + 12:
        raise TensorFormatError("truncated header")
    version, code, ndim = struct.unpack_from("<III", buf, offset)
    offset += 12
    if version != FORMAT_VERSION:
        raise TensorFormatError(f"unsupported format version {version}")
    if code not in DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    if len(buf) < offset + 8 * ndim:
        raise TensorFormatError("truncated shape block")
    shape = struct.unpack_from(f"<{ndim}Q", buf, offset) if ndim else ()
    offset += 8 * ndim
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    nbytes = count * DTYPES[code].itemsize
    if len(buf) < offset + nbytes:
        raise TensorFormatError("truncated payload")
    data = np.frombuffer(buf, dtype=DTYPES[code], count=count, offset=offset).copy()
    return tuple(int(s) for s in shape), data, offset + nbytes


def write_tensor(shape, data, path, dtype: str = "float32") -> Path:
    """Write a tensor file atomically (temp file + rename)."""
    path = Path(path)
    payload = encode_tensor(shape, data, dtype=dtype)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_tensor(path) -> tuple[tuple[int, ...], np.ndarray]:
    buf = Path(path).read_bytes()
    shape, data, end = decode_tensor(buf)
    if end != len(buf):
        raise TensorFormatError(f"trailing bytes after payload ({len(buf) - end})")
    return shape, data


@dataclass(frozen=True)
class PatchGrid:
    """Per-patch backbone features over a uniform lattice of the source image."""

    rows: int
    cols: int
    dim: int
    data: np.ndarray  # (rows, cols, dim) float32

    def __post_init__(self) -> None:
        if self.data.shape != (self.rows, self.cols, self.dim):
            raise FeatIOError(
                f"grid data shape {self.data.shape} != ({self.rows}, {self.cols}, {self.dim})"
            )
        if self.data.size and not np.all(np.isfinite(self.data)):
            raise FeatIOError("grid contains non-finite values")

    @classmethod
    def from_tensor(cls, shape: tuple[int, ...], data: np.ndarray) -> "PatchGrid":
        if len(shape) != 3:
            raise FeatIOError(f"patch grid tensor must be 3-D, got shape {shape}")
        rows, cols, dim = shape
        return cls(rows=rows, cols=cols, dim=dim, data=np.asarray(data, dtype=np.float32).reshape(shape))

    @classmethod
    def load(cls, path) -> "PatchGrid":
        shape, data = read_tensor(path)
        return cls.from_tensor(shape, data)


@dataclass(frozen=True)
class Embedding:
    """Pooled (or adapter-refined) instance vector."""

    values: np.ndarray  # float64
    stage: str = "raw"
    fallback: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.values.ndim != 1 or self.values.size == 0:
            raise FeatIOError(f"embedding must be a non-empty vector, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise FeatIOError("embedding contains non-finite values")
        if self.stage not in ("raw", "adapted"):
            raise FeatIOError(f"unknown embedding stage {self.stage!r}")

    @property
    def dim(self) -> int:
        return int(self.values.size)


def pool_foreground(grid: PatchGrid, mask: RasterMask) -> Embedding:
    """Average the patch vectors whose cell is majority-covered by the mask.

    Falls back to the mean over all patches (flagged) when no cell qualifies.
    """
    if grid.dim == 0:
        raise FeatIOError("grid feature dim is 0")
    if grid.rows == 0 or grid.cols == 0:
        raise FeatIOError("grid has no patches")
    if mask.height % grid.rows or mask.width % grid.cols:
        raise FeatIOError(
            f"mask {mask.width}x{mask.height} is not a uniform lattice of "
            f"{grid.cols}x{grid.rows} patches"
        )
    ph = mask.height // grid.rows
    pw = mask.width // grid.cols
    coverage = (
        mask.to_array()
        .reshape(grid.rows, ph, grid.cols, pw)
        .mean(axis=(1, 3), dtype=np.float64)
    )
    selected = coverage > FOREGROUND_COVERAGE
    vectors = grid.data.astype(np.float64).reshape(grid.rows * grid.cols, grid.dim)
    if not selected.any():
        return Embedding(values=vectors.mean(axis=0), stage="raw", fallback=True)
    return Embedding(values=vectors[selected.reshape(-1)].mean(axis=0), stage="raw")


@dataclass
class TemplateBank:
    """All template embeddings, grouped per instance in view order."""

    embeddings: dict[int, list[Embedding]]
    names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.embeddings:
            raise FeatIOError("template bank is empty")
        dims = {e.dim for views in self.embeddings.values() for e in views}
        if len(dims) != 1:
            raise FeatIOError(f"mixed embedding dims in bank: {sorted(dims)}")
        self.dim = dims.pop()
        for instance_id, views in self.embeddings.items():
            if not views:
                raise FeatIOError(f"instance {instance_id} has no template embeddings")

    @property
    def instance_ids(self) -> list[int]:
        return sorted(self.embeddings)

    @property
    def n_instances(self) -> int:
        return len(self.embeddings)

    def matrix(self, instance_id: int) -> np.ndarray:
        return np.stack([e.values for e in self.embeddings[instance_id]])

    def all_vectors(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked (N*K, dim) matrix plus the instance-id label per row."""
        rows, labels = [], []
        for instance_id in self.instance_ids:
            for emb in self.embeddings[instance_id]:
                rows.append(emb.values)
                labels.append(instance_id)
        return np.stack(rows), np.asarray(labels, dtype=np.int64)


def load_manifest(tensor_root) -> dict:
    path = Path(tensor_root) / MANIFEST_NAME
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise FeatIOError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FeatIOError(f"manifest {path} is not valid JSON: {exc}") from exc


def manifest_schema() -> dict:
    text = resources.files("mrvg.schemas").joinpath("features_manifest.schema.json").read_text("utf-8")
    return json.loads(text)


def validate_manifest(manifest: dict, tensor_root, check_tensors: bool = True) -> None:
    """Schema-validate a manifest and optionally open every referenced tensor."""
    try:
        jsonschema.validate(manifest, manifest_schema())
    except jsonschema.ValidationError as exc:
        raise FeatIOError(f"manifest schema violation: {exc.message}") from exc
    if not check_tensors:
        return
    root = Path(tensor_root)
    patch_size = manifest.get("backbones", {}).get("features", {}).get("patch_size")
    for entry in _iter_grid_entries(manifest):
        grid_path = root / entry["grid"]
        if not grid_path.exists():
            raise FeatIOError(f"manifest references missing tensor {grid_path}")
        grid = PatchGrid.load(grid_path)
        mask = RasterMask.from_json(entry["mask"])
        if mask.height % grid.rows or mask.width % grid.cols:
            raise FeatIOError(
                f"{grid_path}: grid {grid.rows}x{grid.cols} does not tile mask "
                f"{mask.width}x{mask.height}"
            )
        if patch_size and entry.get("analyzed_size"):
            width, height = entry["analyzed_size"]
            if (grid.rows, grid.cols) != (height // patch_size, width // patch_size):
                raise FeatIOError(
                    f"{grid_path}: grid {grid.rows}x{grid.cols} inconsistent with "
                    f"analyzed size {width}x{height} at patch size {patch_size}"
                )


def _iter_grid_entries(manifest: dict):
    for image_entry in manifest.get("images", {}).values():
        yield from image_entry.get("proposals", [])
    for views in manifest.get("templates", {}).values():
        yield from views.values()


def build_template_bank(instances: list[ReferenceInstance], tensor_root) -> TemplateBank:
    """Pool every template's patch grid (per the manifest) into a raw bank."""
    root = Path(tensor_root)
    manifest = load_manifest(root)
    template_entries = manifest.get("templates", {})
    embeddings: dict[int, list[Embedding]] = {}
    names: dict[int, str] = {}
    for instance in instances:
        views = template_entries.get(instance.name)
        if views is None:
            raise FeatIOError(f"manifest has no template entries for {instance.name!r}")
        pooled = []
        for record in instance.templates:
            entry = views.get(str(record.view_index))
            if entry is None:
                raise FeatIOError(
                    f"missing embedding for template {instance.name!r} view {record.view_index}"
                )
            grid = PatchGrid.load(root / entry["grid"])
            mask = RasterMask.from_json(entry["mask"])
            pooled.append(pool_foreground(grid, mask))
        embeddings[instance.instance_id] = pooled
        names[instance.instance_id] = instance.name
    return TemplateBank(embeddings=embeddings, names=names)
