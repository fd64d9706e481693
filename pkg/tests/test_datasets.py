import shutil

import numpy as np
import pytest

from mlrdsc import container
from mlrdsc.datasets import (DecodeError, IngestionError, SampleSet, SyntheticSpec, load_cache, load_coil,
                             load_orl, load_yaleb, save_cache, synth_union_of_subspaces)

from conftest import make_coil_tree, make_yaleb_tree


def _check_bounds(s: SampleSet):
    assert s.X.dtype == np.float32
    assert s.X.min() >= 0.0 and s.X.max() <= 1.0


def test_yaleb_full(yaleb_root):
    s = load_yaleb(yaleb_root, 1, 38)
    assert (s.n, s.K, s.image_shape) == (2432, 38, (48, 42, 1))
    assert s.d == 48 * 42
    assert np.all(np.bincount(s.labels) == 64)
    _check_bounds(s)


def test_yaleb_subset(yaleb_root):
    s = load_yaleb(yaleb_root, 1, 10)
    assert (s.n, s.K) == (640, 10)
    assert sorted(set(s.labels.tolist())) == list(range(10))


def test_yaleb_subset_matches_full_columns(yaleb_root):
    full = load_yaleb(yaleb_root, 1, 38)
    part = load_yaleb(yaleb_root, 5, 3)
    np.testing.assert_array_equal(part.X, full.X[:, 4 * 64:7 * 64])


def test_yaleb_box_downsampling_is_block_mean(yaleb_root):
    from PIL import Image
    s = load_yaleb(yaleb_root, 1, 1)
    first = sorted(p for p in (yaleb_root / "yaleB01").glob("*.pgm") if "Ambient" not in p.name)[0]
    raw = np.asarray(Image.open(first), dtype=np.float64) / 255.0
    expected = raw.reshape(48, 4, 42, 4).mean(axis=(1, 3))
    np.testing.assert_allclose(s.X[:, 0].reshape(48, 42), expected, atol=1e-6)


def test_yaleb_bounds():
    with pytest.raises(ValueError):
        load_yaleb("/nonexistent", 35, 10)
    with pytest.raises(ValueError):
        load_yaleb("/nonexistent", 0, 3)


def test_yaleb_missing_subject(tmp_path):
    make_yaleb_tree(tmp_path, subjects=3, per_subject=64)
    with pytest.raises(IngestionError, match="subject 4"):
        load_yaleb(tmp_path, 1, 4)


def test_yaleb_short_subject(tmp_path):
    make_yaleb_tree(tmp_path, subjects=2, per_subject=64)
    next((tmp_path / "yaleB02").glob("*A000.pgm")).unlink()
    with pytest.raises(IngestionError, match="subject 2"):
        load_yaleb(tmp_path, 1, 2)


def test_yaleb_corrupt_image(tmp_path):
    make_yaleb_tree(tmp_path, subjects=1, per_subject=64)
    bad = next((tmp_path / "yaleB01").glob("*A010.pgm"))
    bad.write_bytes(b"not an image")
    with pytest.raises(DecodeError, match="A010.pgm"):
        load_yaleb(tmp_path, 1, 1)


def test_orl(orl_root):
    s = load_orl(orl_root)
    assert (s.n, s.K, s.image_shape) == (400, 40, (32, 32, 1))
    assert np.all(np.bincount(s.labels) == 10)
    _check_bounds(s)


def test_orl_missing(tmp_path):
    with pytest.raises(IngestionError):
        load_orl(tmp_path / "nope")


def test_orl_missing_subject(orl_root, tmp_path):
    root = tmp_path / "orl"
    shutil.copytree(orl_root, root)
    shutil.rmtree(root / "s17")
    with pytest.raises(IngestionError, match="s17"):
        load_orl(root)


def test_loads_are_deterministic(orl_root):
    assert load_orl(orl_root) == load_orl(orl_root)


def test_coil20(tmp_path):
    s = load_coil(make_coil_tree(tmp_path / "coil20", 20), 20)
    assert (s.n, s.K, s.image_shape) == (1440, 20, (32, 32, 1))
    assert np.all(np.bincount(s.labels) == 72)
    _check_bounds(s)


@pytest.mark.slow
def test_coil100_color_resized(tmp_path):
    s = load_coil(make_coil_tree(tmp_path / "coil100", 100, size=64, color=True), 100)
    assert (s.n, s.K, s.image_shape) == (7200, 100, (32, 32, 1))
    assert np.all(np.bincount(s.labels) == 72)
    _check_bounds(s)


def test_coil_missing_object(tmp_path):
    root = make_coil_tree(tmp_path / "coil", 3)
    with pytest.raises(IngestionError, match="object 4"):
        load_coil(root, 20)


def test_cache_round_trip(orl_root, tmp_path):
    s = load_orl(orl_root)
    save_cache(s, tmp_path / "orl.mlrd")
    back = load_cache(tmp_path / "orl.mlrd")
    assert np.max(np.abs(back.X - s.X)) == 0
    assert back == s
    assert back.image_shape == (32, 32, 1) and back.K == 40


def test_cache_truncated(tmp_path):
    s = synth_union_of_subspaces(SyntheticSpec(2, 5, 2, 4, 0.0, 1))
    p = tmp_path / "s.mlrd"
    save_cache(s, p)
    data = p.read_bytes()
    for cut in (3, 20, len(data) // 2, len(data) - 1):
        p.write_bytes(data[:cut])
        with pytest.raises(container.FormatError):
            load_cache(p)


def test_cache_version_mismatch(tmp_path):
    s = synth_union_of_subspaces(SyntheticSpec(2, 5, 2, 4, 0.0, 1))
    body = bytearray(container.dumps("sampleset", {"X": s.X, "labels": s.labels}, {}))
    body[4] = 99
    import struct, zlib
    body[-4:] = struct.pack("<I", zlib.crc32(bytes(body[:-4])) & 0xFFFFFFFF)
    p = tmp_path / "v.mlrd"
    p.write_bytes(bytes(body))
    with pytest.raises(container.FormatError, match="version"):
        load_cache(p)


def test_cache_wrong_kind(tmp_path):
    p = tmp_path / "w.mlrd"
    container.write(p, "affinity", {"W": np.eye(2)})
    with pytest.raises(container.FormatError, match="affinity"):
        load_cache(p)


def test_synthetic_noiseless_membership():
    spec = SyntheticSpec(K=4, ambient_dim=20, subspace_dim=3, points_per_subspace=15, noise_sigma=0.0, seed=3)
    s = synth_union_of_subspaces(spec)
    np.testing.assert_allclose(np.linalg.norm(s.X, axis=0), 1.0, atol=1e-12)
    for k in range(spec.K):
        pts = s.X[:, s.labels == k]
        U, sv, _ = np.linalg.svd(pts, full_matrices=False)
        basis = U[:, :spec.subspace_dim]
        resid = np.linalg.norm(pts - basis @ (basis.T @ pts), axis=0)
        assert resid.max() <= 1e-10
        assert sv[spec.subspace_dim] < 1e-10


def test_synthetic_determinism():
    spec = SyntheticSpec(3, 30, 3, 40, 0.1, 7)
    a, b = synth_union_of_subspaces(spec), synth_union_of_subspaces(spec)
    np.testing.assert_array_equal(a.X, b.X)
    assert not np.array_equal(a.X, synth_union_of_subspaces(SyntheticSpec(3, 30, 3, 40, 0.1, 8)).X)


@pytest.mark.parametrize("kwargs", [
    dict(K=2, ambient_dim=5, subspace_dim=5, points_per_subspace=10),
    dict(K=2, ambient_dim=5, subspace_dim=2, points_per_subspace=2),
    dict(K=2, ambient_dim=5, subspace_dim=2, points_per_subspace=4, noise_sigma=-1.0),
])
def test_synthetic_spec_validation(kwargs):
    with pytest.raises(ValueError):
        SyntheticSpec(**kwargs)


def test_sampleset_invariants():
    X = np.zeros((4, 3), dtype=np.float32)
    with pytest.raises(ValueError):
        SampleSet(X, [0, 1, 1], (2, 3, 1), "bad-shape", 2)
    with pytest.raises(ValueError):
        SampleSet(X, [0, 2, 2], (2, 2, 1), "gap-in-labels", 2)
    X[0, 0] = np.nan
    with pytest.raises(ValueError):
        SampleSet(X, [0, 1, 1], (2, 2, 1), "nan", 2)
