from __future__ import annotations

import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import pearsonr, ttest_ind

from mdgcn.data import (BrainNetwork, Dataset, MultiModalSample, NotSPDWarning, SynthConfig,
                        generate_synthetic, load_dataset, pearson_connectivity, save_dataset,
                        stratified_kfold, write_matrix_csv)
from mdgcn.errors import ValidationError

# zero-diagonal count matrices are never SPD; the warning has its own test
pytestmark = pytest.mark.filterwarnings("ignore::mdgcn.data.NotSPDWarning")


def _write_manifest(tmp_path, subjects, M=3, names=None):
    entries = []
    for sid, label, func, struct in subjects:
        write_matrix_csv(tmp_path / f"{sid}_f.csv", func)
        write_matrix_csv(tmp_path / f"{sid}_s.csv", struct)
        entries.append({"id": sid, "label": label, "functional": f"{sid}_f.csv",
                        "structural": f"{sid}_s.csv"})
    doc = {"atlas": {"n_regions": M, "region_names": names or [f"r{i}" for i in range(M)]},
           "subjects": entries}
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(doc))
    return path


F3 = np.array([[1.0, 0.2, -0.1], [0.2, 1.0, 0.3], [-0.1, 0.3, 1.0]])
S3 = np.array([[0.0, 4.0, 1.0], [4.0, 0.0, 2.0], [1.0, 2.0, 0.0]])


# --------------------------------------------------------------------------
# loading
# --------------------------------------------------------------------------

def test_load_two_subjects(tmp_path):
    path = _write_manifest(tmp_path, [("a", 0, F3, S3), ("b", 1, F3, S3)])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NotSPDWarning)
        ds = load_dataset(path)
    assert len(ds) == 2 and ds.subject_ids == ["a", "b"]
    assert np.array_equal(ds.samples[0].functional.matrix, F3)


def test_functional_range_violation_names_subject(tmp_path):
    bad = F3.copy()
    bad[0, 1] = bad[1, 0] = 1.5
    path = _write_manifest(tmp_path, [("ok", 0, F3, S3), ("sub-bad", 1, bad, S3)])
    with pytest.raises(ValidationError, match="sub-bad.*range violation"):
        load_dataset(path)


def test_small_asymmetry_symmetrised(tmp_path):
    f = F3.copy()
    f[0, 1] += 1e-8
    path = _write_manifest(tmp_path, [("a", 0, f, S3), ("b", 1, F3, S3)])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NotSPDWarning)
        ds = load_dataset(path)
    X = ds.samples[0].functional.matrix
    assert np.abs(X - X.T).max() == 0.0
    assert X[0, 1] == pytest.approx(0.2 + 5e-9, abs=1e-15)


def test_large_asymmetry_rejected(tmp_path):
    s = S3.copy()
    s[0, 1] += 1e-3
    path = _write_manifest(tmp_path, [("a", 0, F3, s), ("b", 1, F3, S3)])
    with pytest.raises(ValidationError, match="subject a .*asymmetric"):
        load_dataset(path)


def test_dimension_mismatch(tmp_path):
    path = _write_manifest(tmp_path, [("a", 0, F3, S3)])
    doc = json.loads(path.read_text())
    doc["atlas"] = {"n_regions": 4, "region_names": list("wxyz")}
    path.write_text(json.dumps(doc))
    with pytest.raises(ValidationError, match="subject a.*atlas has 4"):
        load_dataset(path)


def test_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nope.json")
    path = _write_manifest(tmp_path, [("a", 0, F3, S3)])
    (tmp_path / "a_s.csv").unlink()
    with pytest.raises(FileNotFoundError, match="subject a"):
        load_dataset(path)


def test_structural_rules(tmp_path):
    neg = S3.copy()
    neg[0, 2] = neg[2, 0] = -1.0
    with pytest.raises(ValidationError, match="range violation"):
        load_dataset(_write_manifest(tmp_path, [("a", 0, F3, neg)]))
    diag = S3.copy()
    diag[1, 1] = 3.0
    with pytest.raises(ValidationError, match="diagonal must be 0"):
        load_dataset(_write_manifest(tmp_path, [("a", 0, F3, diag)]))


def test_not_spd_is_a_warning(tmp_path):
    path = _write_manifest(tmp_path, [("a", 0, F3, S3)])
    with pytest.warns(NotSPDWarning):
        load_dataset(path)   # a zero-diagonal count matrix has a negative eigenvalue


def test_save_load_round_trip(tmp_path):
    ds = generate_synthetic(SynthConfig(n_regions=5, n_per_group=3, n_timepoints=20, seed=4))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NotSPDWarning)
        back = load_dataset(save_dataset(ds, tmp_path))
    assert back.subject_ids == ds.subject_ids
    assert np.array_equal(back.functional(), ds.functional())
    assert np.array_equal(back.structural(), ds.structural())
    assert np.array_equal(back.labels, ds.labels)


def test_fuzz_200_manifests(tmp_path):
    """Every accepted matrix satisfies its modality invariants; the rest raise."""
    rng = np.random.default_rng(2024)
    accepted = rejected = 0
    for trial in range(200):
        d = tmp_path / f"m{trial}"
        d.mkdir()
        M = int(rng.integers(2, 7))
        subjects = []
        for s in range(int(rng.integers(1, 4))):
            ts = rng.standard_normal((M + 5, M))
            f = pearson_connectivity(ts)
            c = np.triu(rng.poisson(3.0, (M, M)).astype(float), 1)
            c = c + c.T
            kind = rng.integers(0, 6)
            if kind == 1:
                f[0, -1] += rng.choice([1e-8, 1e-3])          # tiny or large asymmetry
            elif kind == 2:
                c[0, -1] = c[-1, 0] = -rng.uniform(0.1, 5)    # negative count
            elif kind == 3:
                f[-1, 0] = f[0, -1] = rng.uniform(1.01, 3)    # out of Pearson range
            elif kind == 4:
                np.fill_diagonal(c, 1.0)                      # nonzero count diagonal
            subjects.append((f"s{s}", int(rng.integers(0, 2)), f, c))
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", NotSPDWarning)
                ds = load_dataset(_write_manifest(d, subjects, M))
        except ValidationError:
            rejected += 1
            continue
        accepted += 1
        for smp in ds.samples:
            for net in (smp.functional, smp.structural):
                X = net.matrix
                assert np.abs(X - X.T).max() <= 1e-9
                if net.modality == "functional":
                    assert X.min() >= -1 - 1e-9 and X.max() <= 1 + 1e-9
                    assert np.allclose(np.diag(X), 1.0)
                else:
                    assert X.min() >= 0 and np.all(np.diag(X) == 0)
    assert accepted > 20 and rejected > 20


# --------------------------------------------------------------------------
# Pearson
# --------------------------------------------------------------------------

def test_pearson_duplicate_and_negated_columns():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(30)
    ts = np.column_stack([x, rng.standard_normal(30), x, -x])
    R = pearson_connectivity(ts)
    assert R[0, 2] == pytest.approx(1.0) and R[0, 3] == pytest.approx(-1.0)


def test_pearson_hand_value():
    R = pearson_connectivity(np.array([[1, 1], [2, 2], [3, 2], [4, 4]], dtype=float))
    # deviations (-1.5,-.5,.5,1.5) and (-1.25,-.25,-.25,1.75): 4.5 / sqrt(5 * 4.75)
    hand = 4.5 / np.sqrt(5.0 * 4.75)
    assert R[0, 1] == pytest.approx(hand, abs=1e-12)
    assert R[0, 1] == pytest.approx(pearsonr([1, 2, 3, 4], [1, 2, 2, 4]).statistic, abs=1e-12)
    assert R[0, 1] == pytest.approx(0.92338, abs=1e-5)


def test_pearson_zero_variance_names_region():
    ts = np.column_stack([np.arange(5.0), np.ones(5)])
    with pytest.raises(ValidationError, match="region 1"):
        pearson_connectivity(ts)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 8), st.integers(0, 10_000))
def test_pearson_properties(M, seed):
    ts = np.random.default_rng(seed).standard_normal((M + 3, M))
    R = pearson_connectivity(ts)
    assert np.array_equal(R, R.T)
    assert np.all(np.diag(R) == 1.0)
    assert R.min() >= -1.0 and R.max() <= 1.0
    np.testing.assert_allclose(R, np.corrcoef(ts.T), atol=1e-12)


# --------------------------------------------------------------------------
# synthetic cohorts
# --------------------------------------------------------------------------

def test_synthetic_deterministic():
    cfg = SynthConfig(n_regions=6, n_per_group=3, n_timepoints=20, seed=3)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    assert np.array_equal(a.functional(), b.functional())
    assert np.array_equal(a.structural(), b.structural())
    assert a.subject_ids == b.subject_ids


def test_synthetic_invariants():
    ds = generate_synthetic(SynthConfig(n_regions=8, n_per_group=5, n_timepoints=30, seed=1))
    assert np.array_equal(np.bincount(ds.labels), [5, 5])
    for s in ds.samples:
        s.functional.validate(s.subject_id)
        s.structural.validate(s.subject_id)
        S = s.structural.matrix
        assert np.array_equal(S, np.round(S)) and S.min() >= 0


def test_synthetic_config_validation():
    for bad in (dict(n_regions=1), dict(n_per_group=1), dict(n_timepoints=4, n_regions=4),
                dict(effect_regions=(9,), n_regions=4), dict(effect_strength=-1.0)):
        with pytest.raises(ValidationError):
            SynthConfig(**bad)


def test_null_effect_not_significant():
    """effect_strength 0: group means of block entries agree at alpha 0.01 over 50 seeds."""
    hits = 0
    for seed in range(50):
        ds = generate_synthetic(SynthConfig(n_regions=8, n_per_group=10, n_timepoints=30,
                                            effect_strength=0.0, seed=seed))
        block = ds.functional()[:, :4, :4].mean(axis=(1, 2))
        hits += ttest_ind(block[ds.labels == 1], block[ds.labels == 0]).pvalue < 0.01
    # 50 tests at alpha 0.01: more than 4 rejections has probability < 0.2%
    assert hits <= 4


def test_planted_effect_raises_block_connectivity():
    for seed in range(20):
        ds = generate_synthetic(SynthConfig(n_regions=16, n_per_group=10, n_timepoints=60,
                                            effect_strength=2.0, seed=seed))
        F = ds.functional()[:, :4, :4]
        off = ~np.eye(4, dtype=bool)
        means = [F[ds.labels == g][:, off].mean() for g in (0, 1)]
        assert means[1] > means[0]


# --------------------------------------------------------------------------
# folds
# --------------------------------------------------------------------------

def test_kfold_balanced_twenty():
    labels = np.repeat([0, 1], 10)
    folds = stratified_kfold(labels, 10, seed=0)
    for _, test in folds:
        assert len(test) == 2 and sorted(labels[test]) == [0, 1]


@settings(max_examples=80, deadline=None)
@given(st.integers(2, 12), st.integers(2, 12), st.integers(0, 10**6), st.data())
def test_kfold_partition_and_ratio(n0, n1, seed, data):
    k = data.draw(st.integers(2, min(n0, n1)))
    labels = np.array([0] * n0 + [1] * n1)
    folds = stratified_kfold(labels, k, seed)
    tests = np.concatenate([t for _, t in folds])
    assert np.array_equal(np.sort(tests), np.arange(n0 + n1))
    for train, test in folds:
        assert np.intersect1d(train, test).size == 0
        assert len(train) + len(test) == n0 + n1
        expected = len(test) * n1 / (n0 + n1)
        assert abs(labels[test].sum() - expected) <= 1.0 + 1e-9


def test_kfold_seed_semantics():
    labels = np.repeat([0, 1], 15)
    a, b = stratified_kfold(labels, 5, 1), stratified_kfold(labels, 5, 1)
    c = stratified_kfold(labels, 5, 2)
    assert all(np.array_equal(x[1], y[1]) for x, y in zip(a, b))
    assert any(not np.array_equal(x[1], y[1]) for x, y in zip(a, c))


def test_kfold_small_class():
    with pytest.raises(ValidationError, match="fewer than k"):
        stratified_kfold([0, 0, 0, 1, 1], 3, 0)


def test_kfold_unstratified_partition():
    folds = stratified_kfold(np.repeat([0, 1], 7), 4, 0, stratified=False)
    assert sorted(np.concatenate([t for _, t in folds]).tolist()) == list(range(14))


def test_dataset_requires_both_labels():
    net_f = BrainNetwork("functional", np.eye(2), ["a", "b"])
    net_s = BrainNetwork("structural", np.zeros((2, 2)), ["a", "b"])
    ds = Dataset([MultiModalSample("x", net_f, net_s, 0)], ["a", "b"])
    with pytest.raises(ValidationError):
        ds.require_both_labels()
