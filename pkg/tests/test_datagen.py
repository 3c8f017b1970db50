import gzip
import struct
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from selfens.datagen import (CIFAR10_PAIR_MAP, BatchPlan, Dataset, DegenerateBatchError,
                             InvalidNoiseSpec, LabelTable, LoadError, NoiseSpec, Status,
                             compose_batch, inject_asymmetric, inject_noise, inject_symmetric,
                             load_csv, load_idx, make_blobs, split_indices, write_csv, write_idx)


# -- symmetric noise -------------------------------------------------------

def test_symmetric_zero_noise_is_identity():
    y = np.arange(50) % 5
    t = inject_symmetric(y, 0.0, 5, seed=1)
    np.testing.assert_array_equal(t.original, t.true)


def test_symmetric_binary_full_flip():
    y = np.array([0, 1, 1, 0, 1])
    t = inject_symmetric(y, 1.0, 2, seed=3)
    np.testing.assert_array_equal(t.original, 1 - y)


def test_symmetric_exact_count_and_uniform_targets():
    y = np.arange(1000) % 10
    t = inject_symmetric(y, 0.4, 10, seed=7)
    flipped = t.original != t.true
    assert flipped.sum() == 400
    np.testing.assert_array_equal(t.true, y)
    # labels are balanced, so flipped targets must be uniform over classes
    counts = np.bincount(t.original[flipped], minlength=10)
    assert chisquare(counts).pvalue > 0.001


def test_symmetric_rejects_bad_spec():
    with pytest.raises(InvalidNoiseSpec):
        inject_symmetric([0, 0], 0.5, 1, seed=0)
    with pytest.raises(InvalidNoiseSpec):
        inject_symmetric([0, 1], 1.5, 2, seed=0)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.integers(0, 300), st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_symmetric_never_self_flips(k, n, p, seed):
    y = np.random.default_rng(seed).integers(0, k, size=n)
    t = inject_symmetric(y, p, k, seed)
    flipped = t.original != t.true
    assert flipped.sum() == round(p * n)
    np.testing.assert_array_equal(t.true, y)
    assert np.all((t.original >= 0) & (t.original < k))


def test_symmetric_deterministic_and_iid_mode():
    y = np.arange(400) % 4
    assert inject_symmetric(y, 0.3, 4, 11) == inject_symmetric(y, 0.3, 4, 11)
    t = inject_symmetric(y, 0.3, 4, 11, exact=False)
    assert 60 < (t.original != t.true).sum() < 180
    assert np.all(t.original[t.original != t.true] != t.true[t.original != t.true])


# -- asymmetric noise ------------------------------------------------------

def test_nextclass_full_rotation():
    spec = NoiseSpec("nextclass", 1.0, 0)
    t = inject_asymmetric([0, 1, 2, 3], spec, 4)
    np.testing.assert_array_equal(t.original, [1, 2, 3, 0])


def test_pairflip_zero_probability_unchanged():
    y = np.arange(60) % 6
    t = inject_asymmetric(y, NoiseSpec("pairflip", 0.0, 5, {3: 5, 5: 3}), 6)
    np.testing.assert_array_equal(t.original, y)


def test_cifar10_map_exact_counts_per_source():
    y = np.repeat(np.arange(10), 100)
    t = inject_asymmetric(y, NoiseSpec("pairflip", 0.4, 9, CIFAR10_PAIR_MAP), 10)
    for c in range(10):
        src = t.true == c
        flips = (t.original[src] != c).sum()
        if c in CIFAR10_PAIR_MAP:
            assert flips == 40
            assert set(t.original[src][t.original[src] != c]) == {CIFAR10_PAIR_MAP[c]}
        else:
            assert flips == 0


def test_pairflip_target_out_of_range():
    with pytest.raises(InvalidNoiseSpec):
        inject_asymmetric([0, 1], NoiseSpec("pairflip", 0.5, 0, {1: 7}), 3)
    with pytest.raises(InvalidNoiseSpec):
        inject_asymmetric([0, 1], NoiseSpec("symmetric", 0.5, 0), 3)
    with pytest.raises(InvalidNoiseSpec):
        NoiseSpec("gaussian", 0.1)


def test_inject_noise_dispatch():
    y = np.arange(100) % 10
    assert inject_noise(y, NoiseSpec("symmetric", 0.2, 4), 10) == inject_symmetric(y, 0.2, 10, 4)
    t = inject_noise(y, NoiseSpec("nextclass", 0.5, 4), 10)
    flipped = t.original != t.true
    assert flipped.sum() == 50
    np.testing.assert_array_equal(t.original[flipped], (t.true[flipped] + 1) % 10)


# -- records ---------------------------------------------------------------

def test_label_table_records_and_immutability():
    t = LabelTable([1, 2, 0], [1, 0, 0], [True, False, True])
    assert t[1].status is Status.REMOVED
    assert t[1].original_label == 2 and t[1].true_label == 0
    assert [r.sample_id for r in t] == [0, 1, 2]
    with pytest.raises(ValueError):
        t.original[0] = 5
    t2 = t.with_active([False, False, False])
    np.testing.assert_array_equal(t2.original, t.original)
    assert t.active.sum() == 2


# -- blobs -----------------------------------------------------------------

def test_blobs_minimal():
    ds = make_blobs(2, 1, 3, seed=0)
    assert len(ds) == 2
    assert set(ds.labels.true) == {0, 1}
    np.testing.assert_array_equal(ds.labels.original, ds.labels.true)


def test_blobs_deterministic():
    a = make_blobs(4, 20, 5, seed=3)
    b = make_blobs(4, 20, 5, seed=3)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.labels == b.labels


def test_blobs_low_dim_means_are_spaced():
    ds = make_blobs(6, 200, 2, spread=1.0, seed=1)
    assert ds.dim == 2
    np.testing.assert_allclose(ds.features.mean(axis=0), 0, atol=1e-12)


def test_blobs_clean_probe_reaches_99_percent():
    """Multinomial logistic probe trained on clean labels, scored on held-out blobs."""
    ds = make_blobs(10, 500, 20, spread=1.0, seed=5)
    tr, te = split_indices(len(ds), [4000, -1], seed=0)
    x, y = ds.features[tr], ds.labels.true[tr]
    w = np.zeros((ds.dim, 10))
    b = np.zeros(10)
    onehot = np.eye(10)[y]
    for _ in range(300):
        z = x @ w + b
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / len(x)
        w -= 1.0 * x.T @ g
        b -= 1.0 * g.sum(axis=0)
    acc = ((ds.features[te] @ w + b).argmax(axis=1) == ds.labels.true[te]).mean()
    assert acc >= 0.99


# -- IDX -------------------------------------------------------------------

@pytest.fixture
def idx_pair(tmp_path):
    imgs = np.zeros((4, 28, 28), dtype=np.uint8)
    imgs[0, 0, 0] = 255
    imgs[1, 27, 27] = 128
    labels = np.array([3, 1, 4, 1], dtype=np.uint8)
    ip, lp = tmp_path / "img-idx3-ubyte", tmp_path / "lab-idx1-ubyte"
    write_idx(imgs, labels, ip, lp)
    return ip, lp


def test_load_idx_fixture(idx_pair):
    ds = load_idx(*idx_pair)
    assert len(ds) == 4 and ds.dim == 784
    assert ds.features[0, 0] == 1.0
    assert ds.features[1, -1] == pytest.approx(128 / 255)
    np.testing.assert_array_equal(ds.labels.true, [3, 1, 4, 1])


def test_load_idx_gzip(tmp_path):
    imgs = np.full((2, 2, 3), 255, dtype=np.uint8)
    ip, lp = tmp_path / "i.gz", tmp_path / "l.gz"
    write_idx(imgs, [0, 1], ip, lp)
    assert ip.read_bytes()[:2] == b"\x1f\x8b"
    ds = load_idx(ip, lp)
    assert ds.dim == 6 and np.all(ds.features == 1.0)


def test_load_idx_count_mismatch(idx_pair, tmp_path):
    ip, _ = idx_pair
    lp = tmp_path / "short-labels"
    lp.write_bytes(struct.pack(">II", 0x801, 3) + bytes([1, 2, 3]))
    with pytest.raises(LoadError, match="count mismatch"):
        load_idx(ip, lp)


def test_load_idx_bad_magic_names_file(idx_pair, tmp_path):
    ip, lp = idx_pair
    bad = tmp_path / "bad"
    bad.write_bytes(b"\x00\x00\x08\x04" + ip.read_bytes()[4:])
    with pytest.raises(LoadError, match="bad"):
        load_idx(bad, lp)
    # labels file given as images file
    with pytest.raises(LoadError, match="magic"):
        load_idx(lp, lp)


def test_load_idx_truncated(idx_pair, tmp_path):
    ip, lp = idx_pair
    cut = tmp_path / "cut"
    cut.write_bytes(ip.read_bytes()[:-10])
    with pytest.raises(LoadError, match="truncated"):
        load_idx(cut, lp)
    with pytest.raises(LoadError, match="missing"):
        load_idx(tmp_path / "missing", lp)


# -- CSV -------------------------------------------------------------------

def test_csv_roundtrip(tmp_path):
    ds = make_blobs(3, 4, 2, seed=0)
    path = tmp_path / "d.csv"
    write_csv(ds, path)
    assert path.read_text().splitlines()[0] == "f0,f1,label"
    back = load_csv(path)
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.labels.original, ds.labels.original)


def test_csv_bad_header(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("a,b,label\n1,2,0\n")
    with pytest.raises(LoadError, match="header"):
        load_csv(path)


# -- batches ---------------------------------------------------------------

def test_batches_per_epoch_arithmetic():
    batches = compose_batch(np.arange(8), np.arange(8), BatchPlan(4, 4), seed=0, epoch=0)
    assert len(batches) == 2
    assert all(len(b.labeled) == 4 and len(b.unlabeled) == 4 for b in batches)
    np.testing.assert_array_equal(np.sort(np.concatenate([b.unlabeled for b in batches])),
                                  np.arange(8))


def test_small_active_set_is_resampled():
    active = np.array([3, 6])
    batches = compose_batch(active, np.arange(16), BatchPlan(4, 4), seed=1, epoch=2)
    assert len(batches) == 4
    for first, second in zip(batches[0::2], batches[1::2]):
        seen = Counter(np.concatenate([first.labeled, second.labeled]).tolist())
        assert set(seen) == {3, 6}
        assert all(v >= 1 for v in seen.values())
    for b in batches:
        assert set(b.labeled.tolist()) <= {3, 6}


def test_no_semi_supervised_plan():
    active = np.arange(10, 20)
    batches = compose_batch(active, np.arange(30), BatchPlan(4, 0), seed=0, epoch=0)
    assert [len(b.labeled) for b in batches] == [4, 4, 2]
    assert all(len(b.unlabeled) == 0 for b in batches)
    np.testing.assert_array_equal(np.sort(np.concatenate([b.labeled for b in batches])), active)


def test_empty_active_set_is_degenerate():
    with pytest.raises(DegenerateBatchError):
        compose_batch([], np.arange(4), BatchPlan(2, 2), seed=0, epoch=0)


def test_batches_deterministic_per_epoch():
    a = compose_batch(np.arange(5), np.arange(12), BatchPlan(3, 5), seed=4, epoch=1)
    b = compose_batch(np.arange(5), np.arange(12), BatchPlan(3, 5), seed=4, epoch=1)
    c = compose_batch(np.arange(5), np.arange(12), BatchPlan(3, 5), seed=4, epoch=2)
    assert all(np.array_equal(x.labeled, y.labeled) and np.array_equal(x.unlabeled, y.unlabeled)
               for x, y in zip(a, b))
    assert not all(np.array_equal(x.unlabeled, y.unlabeled) for x, y in zip(a, c))


def test_split_indices_disjoint():
    a, b, c = split_indices(100, [20, 30, -1], seed=0)
    assert len(a) == 20 and len(b) == 30 and len(c) == 50
    assert not (set(a) & set(b) or set(a) & set(c) or set(b) & set(c))


def test_mnist_fixture_script_roundtrip(tmp_path):
    import importlib.util
    from pathlib import Path
    script = Path(__file__).resolve().parent.parent / "scripts" / "make_mnist_fixture.py"
    spec = importlib.util.spec_from_file_location("make_mnist_fixture", script)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, size=(3, 784))
    rows = np.column_stack([pixels, [7, 0, 3]])
    src = tmp_path / "mnist_5k.csv.gz"
    src.write_bytes(gzip.compress("\n".join(",".join(map(str, r)) for r in rows).encode()))
    mod.main([str(src), str(tmp_path / "out")])
    ds = load_idx(tmp_path / "out" / "images-idx3-ubyte.gz", tmp_path / "out" / "labels-idx1-ubyte.gz")
    np.testing.assert_array_equal(ds.labels.true, [7, 0, 3])
    np.testing.assert_allclose(ds.features, pixels / 255.0)
