import numpy as np
import pytest
from hypothesis import given, strategies as st

from sparelab.datagen import (DEFAULT_PALETTE, GroupSpec, binary_groups, build_binary_dataset, build_cmnist,
                              build_feature_bank, check_input_norms, generate_synthetic, load_dataset, nsr,
                              read_spds, save_dataset, stratified_subset)


def test_feature_bank_orthogonal():
    bank = build_feature_bank(10, {1: 1.0, -1: 1.0}, {"A": 2.0, "B": 2.0})
    G = bank.gram()
    np.testing.assert_allclose(G, np.diag([1, 1, 4, 4]), atol=1e-15)
    assert bank.max_coherence() == 0.0


def test_rotated_bank_keeps_gram():
    a = build_feature_bank(20, {1: 1.0, -1: 1.5}, {"A": 2.0, "B": 0.5})
    b = build_feature_bank(20, {1: 1.0, -1: 1.5}, {"A": 2.0, "B": 0.5}, rotate=True, seed=3)
    np.testing.assert_allclose(a.gram(), b.gram(), atol=1e-12)


def test_bank_too_small():
    with pytest.raises(ValueError, match="d >= 4"):
        build_feature_bank(3, {1: 1.0, -1: 1.0}, {"A": 1.0, "B": 1.0})


def test_reference_dataset_layout():
    ds = build_binary_dataset(seed=0)
    assert (ds.n, ds.d) == (2000, 100)
    assert ds.group_counts() == {"1|A": 950, "1|B": 50, "-1|B": 950, "-1|A": 50}
    assert ds.class_counts() == {-1: 1000, 1: 1000}
    assert ds.is_majority.sum() == 1900


def test_noise_free_examples_are_exact():
    bank = build_feature_bank(8, {1: 1.0, -1: 1.0}, {"A": 2.0, "B": 2.0})
    ds = generate_synthetic(bank, binary_groups(3, 1), seed=0)
    for i in range(ds.n):
        ex = ds.example(i)
        c, s = ex.group
        np.testing.assert_array_equal(ex.features, bank.core[c] + bank.spurious[s])


def test_noise_along_feature_directions():
    ds = build_binary_dataset(d=20, core_sigma=0.5, spurious_sigma=0.2, majority=4000, minority=10, seed=1)
    vc = ds.bank.core[1]
    idx = ds.y == 1
    proj = ds.X[idx] @ vc / np.linalg.norm(vc)
    assert abs(proj.std() - 0.5) < 0.03
    other = ds.X[idx][:, 4:]
    assert np.abs(other).max() == 0.0


def test_ambient_noise_orthogonal_to_features():
    ds = build_binary_dataset(d=30, ambient_sigma=1.0, core_sigma=0.0, spurious_sigma=0.0, seed=2)
    U = ds.bank.unit_directions()
    clean = np.array([ds.bank.core[ds.y[i]] + ds.bank.spurious[ds.spurious[i]] for i in range(ds.n)])
    np.testing.assert_allclose((ds.X - clean) @ U.T, 0.0, atol=1e-12)


def test_balanced_spurious_control():
    ds = build_binary_dataset(balanced_spurious=True, seed=0)
    counts = ds.group_counts()
    assert counts["1|A"] == counts["-1|B"] and counts["1|B"] == counts["-1|A"]
    assert abs(counts["1|A"] - counts["1|B"]) <= 1


def test_unknown_ids():
    bank = build_feature_bank(8, {1: 1.0, -1: 1.0}, {"A": 1.0, "B": 1.0})
    with pytest.raises(KeyError):
        generate_synthetic(bank, [GroupSpec(2, "A", 3, True)], 0)
    with pytest.raises(KeyError):
        generate_synthetic(bank, [GroupSpec(1, "C", 3, True)], 0)


def test_minority_larger_than_majority_rejected():
    bank = build_feature_bank(8, {1: 1.0, -1: 1.0}, {"A": 1.0, "B": 1.0})
    with pytest.raises(ValueError):
        generate_synthetic(bank, [GroupSpec(1, "A", 3, True), GroupSpec(1, "B", 5, False)], 0)


def test_nsr_and_norm_check():
    assert nsr(2.0, 0.04) == pytest.approx(0.02)
    with pytest.raises(ValueError):
        nsr(0.0, 1.0)
    ds = build_binary_dataset(ambient_sigma=1.0, seed=0)
    rep = check_input_norms(ds.X)
    assert 0.9 < rep["mean_sq_norm_over_d"] < 1.2


def test_determinism():
    a = build_binary_dataset(ambient_sigma=1.0, seed=5)
    b = build_binary_dataset(ambient_sigma=1.0, seed=5)
    np.testing.assert_array_equal(a.X, b.X)


def test_spds_roundtrip(tmp_path):
    ds = build_binary_dataset(d=12, majority=20, minority=3, ambient_sigma=0.5, seed=3)
    save_dataset(ds, tmp_path, "train")
    back = load_dataset(tmp_path, "train")
    np.testing.assert_array_equal(back.X, ds.X)
    np.testing.assert_array_equal(back.y, ds.y)
    np.testing.assert_array_equal(back.group, ds.group)
    assert back.groups == ds.groups
    np.testing.assert_array_equal(back.bank.core[1], ds.bank.core[1])
    raw = (tmp_path / "train.spds").read_bytes()
    with pytest.raises(ValueError):
        read_spds(raw[:-1])


@given(st.integers(1, 200), st.integers(0, 10**6))
def test_stratified_subset_property(size, seed):
    labels = np.repeat(np.arange(5), [40, 30, 20, 60, 50])
    idx = stratified_subset(labels, size, np.random.default_rng(seed))
    assert len(idx) == min(size, len(labels))
    assert len(set(idx.tolist())) == len(idx)
    frac = np.bincount(labels[idx], minlength=5) / max(len(idx), 1)
    assert np.all(np.abs(frac - np.bincount(labels) / len(labels)) <= 1.0 / max(len(idx), 1) + 1e-12)


def _fake_digits(n_per=100, seed=0):
    rng = np.random.default_rng(seed)
    imgs = rng.integers(0, 256, (10 * n_per, 28, 28), dtype=np.uint8)
    imgs[:, :5] = 0
    return imgs, np.repeat(np.arange(10), n_per)


def test_cmnist_majority_fraction():
    imgs, labels = _fake_digits()
    ds = build_cmnist(imgs, labels, p_corr=0.995, seed=0)
    assert ds.d == 3 * 28 * 28
    for c in range(5):
        members = ds.y == c
        frac = np.mean(ds.spurious[members] == str(c))
        assert frac == round(0.995 * members.sum()) / members.sum()
    assert np.all(ds.is_majority == (ds.spurious == ds.y.astype(str)))


def test_cmnist_coloring_formula():
    imgs, labels = _fake_digits(10)
    ds = build_cmnist(imgs, labels, p_corr=1.0, seed=0)
    i = 13
    rgb = np.array([int(DEFAULT_PALETTE[ds.y[i]][k:k + 2], 16) for k in (1, 3, 5)]) / 255.0
    expected = (imgs[i].reshape(1, -1) / 255.0) * rgb[:, None]
    np.testing.assert_allclose(ds.X[i], expected.ravel())
    assert np.all(ds.X[i].reshape(3, 28, 28)[:, :5] == 0)


def test_cmnist_bad_args():
    imgs, labels = _fake_digits(5)
    with pytest.raises(ValueError):
        build_cmnist(imgs, labels, p_corr=0.0)
    with pytest.raises(ValueError):
        build_cmnist(imgs, labels, palette=DEFAULT_PALETTE[:3])
