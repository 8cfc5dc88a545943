import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrvg import featio
from mrvg.featio import (
    Embedding,
    FeatIOError,
    PatchGrid,
    TemplateBank,
    TensorFormatError,
    pool_foreground,
    read_tensor,
    write_tensor,
)
from mrvg.refdb import RasterMask


def test_tensor_round_trip_bit_exact(tmp_path):
    data = np.arange(6, dtype=np.float32)
    path = write_tensor((2, 3), data, tmp_path / "t.mrvgt")
    shape, back = read_tensor(path)
    assert shape == (2, 3)
    assert back.tobytes() == data.tobytes()


def test_tensor_empty_shape_round_trips(tmp_path):
    path = write_tensor((0,), np.zeros(0, dtype=np.float32), tmp_path / "t.mrvgt")
    shape, back = read_tensor(path)
    assert shape == (0,)
    assert back.size == 0


def test_tensor_file_size_matches_format(tmp_path):
    n = 1_000_000
    data = np.random.default_rng(3).random(n, dtype=np.float32)
    path = write_tensor((n,), data, tmp_path / "big.mrvgt")
    # magic(4) + version/dtype/ndim u32s(12) + one u64 dim(8) + 4 bytes per value
    assert path.stat().st_size == 24 + 4 * n
    _, back = read_tensor(path)
    assert back.tobytes() == data.tobytes()


@settings(max_examples=40)
@given(st.lists(st.integers(0, 5), min_size=0, max_size=3), st.data())
def test_tensor_round_trip_property(shape, data):
    count = int(np.prod(shape)) if shape else 1
    values = np.array(
        data.draw(st.lists(st.floats(-1e6, 1e6, width=32), min_size=count, max_size=count)),
        dtype=np.float32,
    )
    blob = featio.encode_tensor(shape, values)
    decoded_shape, decoded, end = featio.decode_tensor(blob)
    assert end == len(blob)
    assert decoded_shape == tuple(shape)
    assert decoded.tobytes() == values.tobytes()


@pytest.mark.parametrize(
    "mangle, message",
    [
        (lambda b: b"XXXX" + b[4:], "magic"),
        (lambda b: b[:4] + b"\x09\x00\x00\x00" + b[8:], "version"),
        (lambda b: b[:-2], "truncated"),
        (lambda b: b + b"\x00", "trailing"),
    ],
)
def test_tensor_error_cases(tmp_path, mangle, message):
    path = write_tensor((3,), np.ones(3, dtype=np.float32), tmp_path / "t.mrvgt")
    path.write_bytes(mangle(path.read_bytes()))
    with pytest.raises(TensorFormatError, match=message):
        read_tensor(path)


def test_encode_rejects_shape_length_mismatch():
    with pytest.raises(TensorFormatError):
        featio.encode_tensor((2, 2), np.zeros(3, dtype=np.float32))


def _grid(vectors, rows, cols):
    dim = len(vectors[0])
    data = np.array(vectors, dtype=np.float32).reshape(rows, cols, dim)
    return PatchGrid(rows=rows, cols=cols, dim=dim, data=data)


def _pool_oracle(grid: PatchGrid, mask: RasterMask) -> np.ndarray:
    """Per-pixel brute-force pooling: count foreground per cell, average the
    majority-covered cells."""
    arr = mask.to_array()
    ph = mask.height // grid.rows
    pw = mask.width // grid.cols
    chosen = []
    for r in range(grid.rows):
        for c in range(grid.cols):
            fg = 0
            for y in range(r * ph, (r + 1) * ph):
                for x in range(c * pw, (c + 1) * pw):
                    fg += bool(arr[y, x])
            if fg / (ph * pw) > 0.5:
                chosen.append(grid.data[r, c].astype(np.float64))
    if not chosen:
        return grid.data.reshape(-1, grid.dim).astype(np.float64).mean(axis=0)
    return np.mean(chosen, axis=0)


def test_pool_all_foreground_is_grid_mean():
    grid = _grid([(1, 0), (0, 1), (3, 0), (0, 3)], 2, 2)
    mask = RasterMask.full(8, 8)
    pooled = pool_foreground(grid, mask)
    assert not pooled.fallback
    np.testing.assert_allclose(pooled.values, [1.0, 1.0])


def test_pool_single_covered_cell():
    grid = _grid([(1, 0), (0, 1), (3, 0), (0, 3)], 2, 2)
    # cover only the top-left 4x4 cell of an 8x8 image
    arr = np.zeros((8, 8), dtype=bool)
    arr[:4, :4] = True
    pooled = pool_foreground(grid, RasterMask.from_array(arr))
    np.testing.assert_allclose(pooled.values, [1.0, 0.0])


def test_pool_two_selected_cells_hand_value():
    grid = _grid([(1, 0), (0, 1), (3, 0), (0, 3)], 2, 2)
    # fully cover cells 1 and 2 (1-based, row-major): the whole top row
    arr = np.zeros((8, 8), dtype=bool)
    arr[:4, :] = True
    mask = RasterMask.from_array(arr)
    pooled = pool_foreground(grid, mask)
    np.testing.assert_allclose(pooled.values, [0.5, 0.5])
    np.testing.assert_allclose(pooled.values, _pool_oracle(grid, mask))


def test_pool_empty_foreground_falls_back_to_global_mean():
    grid = _grid([(1, 0), (0, 1), (3, 0), (0, 3)], 2, 2)
    arr = np.zeros((8, 8), dtype=bool)
    arr[0, 0] = True  # 1/16 coverage of one cell: below the majority rule
    pooled = pool_foreground(grid, RasterMask.from_array(arr))
    assert pooled.fallback
    np.testing.assert_allclose(pooled.values, [1.0, 1.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.data())
def test_pool_matches_pixel_oracle(rows, cols, dim, data):
    ph = data.draw(st.integers(1, 3))
    pw = data.draw(st.integers(1, 3))
    h, w = rows * ph, cols * pw
    rng = np.random.default_rng(data.draw(st.integers(0, 10_000)))
    grid = PatchGrid(rows=rows, cols=cols, dim=dim,
                     data=rng.normal(size=(rows, cols, dim)).astype(np.float32))
    mask = RasterMask.from_array(rng.random((h, w)) < 0.5)
    pooled = pool_foreground(grid, mask)
    np.testing.assert_allclose(pooled.values, _pool_oracle(grid, mask), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 9999))
def test_pool_is_convex_combination(rows, cols, dim, seed):
    rng = np.random.default_rng(seed)
    grid = PatchGrid(rows=rows, cols=cols, dim=dim,
                     data=rng.normal(size=(rows, cols, dim)).astype(np.float32))
    mask = RasterMask.from_array(rng.random((rows * 2, cols * 2)) < 0.6)
    pooled = pool_foreground(grid, mask).values
    flat = grid.data.reshape(-1, dim).astype(np.float64)
    assert np.all(pooled >= flat.min(axis=0) - 1e-12)
    assert np.all(pooled <= flat.max(axis=0) + 1e-12)


def test_pool_invariant_to_background_patch_permutation():
    rng = np.random.default_rng(7)
    data = rng.normal(size=(1, 4, 3)).astype(np.float32)
    arr = np.zeros((2, 8), dtype=bool)
    arr[:, :2] = True  # only cell 1 is foreground; cells 2..4 are background
    mask = RasterMask.from_array(arr)
    base = pool_foreground(PatchGrid(1, 4, 3, data), mask)
    shuffled = data.copy()
    shuffled[0, [1, 2, 3]] = data[0, [3, 1, 2]]
    permuted = pool_foreground(PatchGrid(1, 4, 3, shuffled), mask)
    np.testing.assert_array_equal(base.values, permuted.values)


def test_pool_rejects_non_lattice_mask():
    grid = _grid([(1, 0), (0, 1), (3, 0), (0, 3)], 2, 2)
    with pytest.raises(FeatIOError):
        pool_foreground(grid, RasterMask.full(7, 8))


def test_bank_rejects_mixed_dims():
    with pytest.raises(FeatIOError, match="mixed"):
        TemplateBank(
            embeddings={
                1: [Embedding(values=np.ones(4))],
                2: [Embedding(values=np.ones(5))],
            }
        )


def test_build_template_bank_from_manifest(synth_root):
    from mrvg.refdb import load_dataset

    root, cfg = synth_root
    dataset = load_dataset(root)
    bank = featio.build_template_bank(dataset.instances, root)
    assert bank.n_instances == cfg.n_instances
    assert bank.dim == cfg.dim
    X, labels = bank.all_vectors()
    assert X.shape == (cfg.n_instances * cfg.k_views, cfg.dim)
    assert len(set(labels.tolist())) == cfg.n_instances


def test_build_template_bank_missing_entry(synth_root):
    import json as _json

    from mrvg.refdb import load_dataset

    root, _ = synth_root
    manifest_path = root / featio.MANIFEST_NAME
    manifest = _json.loads(manifest_path.read_text())
    victim = sorted(manifest["templates"])[0]
    del manifest["templates"][victim]["1"]
    manifest_path.write_text(_json.dumps(manifest))
    dataset = load_dataset(root)
    with pytest.raises(FeatIOError, match="missing embedding"):
        featio.build_template_bank(dataset.instances, root)


def test_manifest_validates_against_schema(synth_root):
    root, _ = synth_root
    featio.validate_manifest(featio.load_manifest(root), root)


def test_manifest_schema_rejects_missing_sections(synth_root):
    root, _ = synth_root
    manifest = featio.load_manifest(root)
    del manifest["backbones"]
    with pytest.raises(FeatIOError, match="schema"):
        featio.validate_manifest(manifest, root, check_tensors=False)
