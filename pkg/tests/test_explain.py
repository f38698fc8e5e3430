from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import f_oneway

from helpers import tiny_dataset
from mdgcn.errors import ShapeError, ValidationError
from mdgcn.explain import (CSV_COLUMNS, SubjectCorrespondence, extract_correspondence,
                           gower_center, group_analysis, mdmr_region, read_region_csv,
                           write_region_csv)
from mdgcn.model import Hyper, init_params, sinkhorn_normalize


def centered_gram(X):
    Xc = X - X.mean(axis=0)
    return Xc @ Xc.T


def hat_pseudo_f(X, y):
    """Textbook form: explicit hat matrix and traces of H G H and (I-H) G (I-H)."""
    n = len(y)
    D2 = ((X[:, None, :] - X[None, :, :]) ** 2).sum(-1)
    J = np.eye(n) - 1.0 / n
    G = -0.5 * J @ D2 @ J
    same = y[:, None] == y[None, :]
    sizes = np.array([np.sum(y == v) for v in y])
    H = same / sizes[None, :]
    R = np.eye(n) - H
    return (np.trace(H @ G @ H) / 1) / (np.trace(R @ G @ R) / (n - 2))


def random_correspondences(rng, n, M, labels=None):
    out = []
    for j in range(n):
        A = rng.uniform(-2, 2, (M, M))
        phi = sinkhorn_normalize((A + A.T) / 2).normalized
        lab = int(labels[j]) if labels is not None else j % 2
        out.append(SubjectCorrespondence(f"s{j:03d}", lab, phi))
    return out


# --------------------------------------------------------------------------
# Gower centring
# --------------------------------------------------------------------------

def test_gower_examples():
    assert np.array_equal(gower_center(np.zeros((3, 3))), np.zeros((3, 3)))
    G = gower_center([[0.0, 1.0], [1.0, 0.0]])
    np.testing.assert_allclose(G, [[0.25, -0.25], [-0.25, 0.25]], atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 12), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_gower_equals_centered_gram(n, p, seed):
    X = np.random.default_rng(seed).standard_normal((n, p)) * 3
    D = np.sqrt(((X[:, None] - X[None]) ** 2).sum(-1))
    G = gower_center(D)
    np.testing.assert_allclose(G, centered_gram(X), atol=1e-10)
    assert np.array_equal(G, G.T)
    assert np.abs(G.sum(axis=1)).max() <= 1e-10


def test_gower_rejects_bad_input():
    with pytest.raises(ValidationError):
        gower_center([[0.0, 1.0], [2.0, 0.0]])
    with pytest.raises(ValidationError):
        gower_center([[0.0, -1.0], [-1.0, 0.0]])
    with pytest.raises(ShapeError):
        gower_center(np.zeros((2, 3)))


# --------------------------------------------------------------------------
# MDMR
# --------------------------------------------------------------------------

def test_mdmr_identical_features_is_degenerate():
    assert mdmr_region(np.ones((6, 3)), [0, 0, 0, 1, 1, 1], n_perm=50) == (0.0, 1.0)


@pytest.mark.parametrize("seed", range(100))
def test_mdmr_univariate_matches_anova(seed):
    rng = np.random.default_rng(seed)
    n0, n1 = rng.integers(2, 15, 2)
    y = np.r_[np.zeros(n0, int), np.ones(n1, int)]
    x = rng.standard_normal(len(y)) + rng.uniform(0, 2) * y
    F, _ = mdmr_region(x[:, None], y, n_perm=1)
    ref = f_oneway(x[y == 0], x[y == 1]).statistic
    assert F == pytest.approx(ref, abs=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_mdmr_matches_hat_matrix_form(seed):
    rng = np.random.default_rng(seed)
    y = np.r_[np.zeros(5, int), np.ones(7, int)]
    X = rng.standard_normal((12, 4))
    F, _ = mdmr_region(X, y, n_perm=1)
    assert F == pytest.approx(hat_pseudo_f(X, y), rel=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_mdmr_exact_enumeration(seed):
    rng = np.random.default_rng(seed)
    y = np.array([0, 0, 0, 1, 1, 1])
    X = rng.standard_normal((6, 3)) + 0.8 * y[:, None]
    F_obs = hat_pseudo_f(X, y)
    assignments = list(itertools.combinations(range(6), 3))
    assert len(assignments) == 20
    hits = 0
    for ones in assignments:
        z = np.zeros(6, int)
        z[list(ones)] = 1
        hits += hat_pseudo_f(X, z) >= F_obs * (1 - 1e-10)
    F, p = mdmr_region(X, y, exact=True)
    assert F == pytest.approx(F_obs, rel=1e-10)
    assert p == hits / 20


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 60))
def test_mdmr_p_bounds_and_label_swap(seed, n_perm):
    rng = np.random.default_rng(seed)
    y = rng.permutation(np.r_[np.zeros(4, int), np.ones(5, int)])
    X = rng.standard_normal((9, 3))
    F, p = mdmr_region(X, y, n_perm=n_perm, seed=seed)
    assert F >= 0.0
    assert 1 / (1 + n_perm) <= p <= 1.0
    F2, p2 = mdmr_region(X, 1 - y, n_perm=n_perm, seed=seed)
    assert F2 == pytest.approx(F, rel=1e-10)
    assert p2 == p


def test_mdmr_subject_order_invariance():
    rng = np.random.default_rng(3)
    y = np.r_[np.zeros(6, int), np.ones(6, int)]
    X = rng.standard_normal((12, 4)) + 0.5 * y[:, None]
    ids = [f"sub{i:02d}" for i in range(12)]
    ref = mdmr_region(X, y, n_perm=300, seed=5, subject_ids=ids)
    for _ in range(5):
        perm = rng.permutation(12)
        got = mdmr_region(X[perm], y[perm], n_perm=300, seed=5,
                          subject_ids=[ids[i] for i in perm])
        assert got == ref


def test_mdmr_strong_effect_is_significant():
    rng = np.random.default_rng(0)
    # unequal groups, so the complementary labelling is not a permutation of y
    y = np.r_[np.zeros(9, int), np.ones(11, int)]
    X = rng.standard_normal((20, 3)) + 3 * y[:, None]
    _, p = mdmr_region(X, y, n_perm=999)
    assert p == 1 / 1000


def test_mdmr_preconditions():
    with pytest.raises(ValidationError):
        mdmr_region(np.zeros((3, 2)), [0, 1, 1])
    with pytest.raises(ValidationError):
        mdmr_region(np.random.default_rng(0).random((5, 2)), [0, 1, 1, 1, 1])
    with pytest.raises(ValidationError):
        mdmr_region(np.random.default_rng(0).random((4, 2)), [0, 0, 1, 1], n_perm=0)
    with pytest.raises(ShapeError):
        mdmr_region(np.zeros((4, 2)), [0, 0, 1])


# --------------------------------------------------------------------------
# group analysis
# --------------------------------------------------------------------------

def test_group_analysis_rows_and_bonferroni():
    rng = np.random.default_rng(0)
    corr = random_correspondences(rng, 12, 5)
    stats = group_analysis(corr, n_perm=99, alpha=0.05, seed=1)
    assert [s.index for s in stats] == list(range(5))
    assert [s.name for s in stats] == [f"region_{i}" for i in range(5)]
    for s in stats:
        assert s.p_bonferroni == min(1.0, 5 * s.p_raw)
        assert s.significant == (s.p_bonferroni < 0.05)
        assert s.neg_log10_p == pytest.approx(-np.log10(max(s.p_raw, 1 / 100)))


def test_group_analysis_threads_agree():
    rng = np.random.default_rng(1)
    corr = random_correspondences(rng, 10, 6)
    a = group_analysis(corr, n_perm=200, seed=3, threads=1)
    b = group_analysis(corr, n_perm=200, seed=3, threads=4)
    assert a == b


def test_group_analysis_null_false_positives():
    M, alpha = 8, 0.05
    counts = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        labels = rng.permutation(np.r_[np.zeros(8, int), np.ones(8, int)])
        corr = random_correspondences(rng, 16, M, labels)
        stats = group_analysis(corr, n_perm=199, alpha=alpha, seed=seed)
        counts.append(sum(s.significant for s in stats))
    assert np.mean(counts) <= alpha * M + 2
    assert max(counts) <= alpha * M + 2


def test_group_analysis_detects_planted_rows():
    rng = np.random.default_rng(2)
    M = 6
    labels = np.r_[np.zeros(10, int), np.ones(10, int)]
    corr = []
    for j, lab in enumerate(labels):
        A = rng.uniform(-0.5, 0.5, (M, M))
        if lab:
            A[0, 1] = A[1, 0] = 3.0
        corr.append(SubjectCorrespondence(f"s{j}", int(lab),
                                          sinkhorn_normalize((A + A.T) / 2).normalized))
    stats = group_analysis(corr, n_perm=499)
    assert stats[0].significant and stats[1].significant


def test_extract_correspondence_zero_gru_is_uniform():
    ds = tiny_dataset()
    hy = Hyper(n_regions=ds.n_regions, hidden_dim=3, mlp_hidden=(8, 4))
    p = init_params(hy, 0)
    for k in p.weights:
        if k.startswith("gru"):
            p.weights[k] = np.zeros_like(p.weights[k])
    corr = extract_correspondence(p, ds)
    assert len(corr) == len(ds)
    for c in corr:
        np.testing.assert_allclose(c.phi_hat, 1 / ds.n_regions, atol=1e-15)


def test_extract_correspondence_deterministic_and_doubly_stochastic():
    ds = tiny_dataset()
    p = init_params(Hyper(n_regions=ds.n_regions, hidden_dim=3, mlp_hidden=(8, 4)), 1)
    a = extract_correspondence(p, ds)
    b = extract_correspondence(p, ds)
    for x, y in zip(a, b):
        assert x.subject_id == y.subject_id and np.array_equal(x.phi_hat, y.phi_hat)
        assert np.abs(x.phi_hat.sum(0) - 1).max() <= 1e-6
        assert np.abs(x.phi_hat.sum(1) - 1).max() <= 1e-6
    with pytest.raises(ShapeError):
        extract_correspondence(init_params(Hyper(n_regions=3, hidden_dim=2,
                                                 mlp_hidden=(4, 4)), 0), ds)


def test_region_csv_round_trip(tmp_path):
    corr = random_correspondences(np.random.default_rng(0), 8, 4)
    stats = group_analysis(corr, n_perm=50)
    path = write_region_csv(stats, tmp_path / "r.csv")
    rows = read_region_csv(path)
    assert tuple(rows[0]) == CSV_COLUMNS and len(rows) == 4
    for row, s in zip(rows, stats):
        assert float(row["pseudo_F"]) == s.pseudo_F and float(row["p_raw"]) == s.p_raw
        assert row["significant"] == str(int(s.significant))
