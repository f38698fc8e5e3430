"""Region-wise group statistics on per-subject correspondence matrices.

For every region ``i`` the ``i``-th row of each subject's normalised
correspondence matrix is treated as that subject's feature vector, and a
two-group MDMR (multivariate distance matrix regression) pseudo-F is
computed with a permutation p-value. Bonferroni correction runs over all
regions.
"""
from __future__ import annotations

import csv
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .data import Dataset
from .errors import ShapeError, ValidationError
from .model import ModelParams, model_forward

# permuted statistics within this relative distance of the observed one count as ties
TIE_RTOL = 1e-10


@dataclass
class SubjectCorrespondence:
    subject_id: str
    label: int
    phi_hat: np.ndarray


@dataclass
class RegionStat:
    index: int
    name: str
    pseudo_F: float
    p_raw: float
    p_bonferroni: float
    neg_log10_p: float
    significant: bool


def extract_correspondence(params: ModelParams, dataset: Dataset) -> list[SubjectCorrespondence]:
    """Eval-mode forward per subject, keeping the normalised correspondence matrix."""
    if dataset.n_regions != params.hyper.n_regions:
        raise ShapeError(
            f"dataset has {dataset.n_regions} regions, model expects {params.hyper.n_regions}")
    out = []
    for s in dataset.samples:
        trace = model_forward(s, params, mode="eval")
        out.append(SubjectCorrespondence(s.subject_id, int(s.label), trace.phi_hat))
    return out


def gower_center(D) -> np.ndarray:
    """Gower-centred matrix ``G = -1/2 J (D*D) J`` with ``J = I - 11'/n``."""
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ShapeError(f"distance matrix must be square, got {D.shape}")
    if not np.allclose(D, D.T, rtol=0.0, atol=1e-12):
        raise ValidationError("distance matrix is not symmetric")
    if np.any(D < 0):
        raise ValidationError("distance matrix has negative entries")
    A = -0.5 * D * D
    A = A - A.mean(axis=0, keepdims=True)
    A = A - A.mean(axis=1, keepdims=True)
    return 0.5 * (A + A.T)


def _between_trace(G: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """``tr(H G)`` for the two-group hat matrix of every indicator row in ``Y``.

    With an intercept plus a group indicator, ``H`` is block averaging, so
    ``tr(HG) = sum_g 1_g' G 1_g / n_g``.
    """
    Y = Y.astype(np.float64)
    n1 = Y.sum(axis=1)
    n0 = Y.shape[1] - n1
    Z = 1.0 - Y
    q1 = np.einsum("pi,ij,pj->p", Y, G, Y)
    q0 = np.einsum("pi,ij,pj->p", Z, G, Z)
    return q1 / n1 + q0 / n0


def _pseudo_f(G: np.ndarray, Y: np.ndarray) -> np.ndarray:
    n = G.shape[0]
    m = 2
    total = np.trace(G)
    between = _between_trace(G, Y)
    within = total - between
    with np.errstate(divide="ignore", invalid="ignore"):
        F = (between / (m - 1)) / (within / (n - m))
    # roundoff can push a zero between-trace slightly negative
    return np.maximum(F, 0.0)


def mdmr_region(features, labels, n_perm: int = 2000, seed=0, *,
                exact: bool = False, subject_ids: Sequence[str] | None = None
                ) -> tuple[float, float]:
    """Two-group MDMR pseudo-F with a permutation p-value.

    Parameters
    ----------
    features : (n, p) array
        One feature row per subject.
    labels : (n,) array of {0, 1}
    n_perm : int
        Number of seeded label shuffles. Ignored when ``exact``.
    seed : int or sequence of int
        Anything :func:`numpy.random.default_rng` accepts.
    exact : bool
        Enumerate every distinct assignment of the group sizes instead of
        sampling; ``p`` is then the fraction of assignments (observed one
        included) whose statistic reaches the observed value.
    subject_ids : sequence of str, optional
        When given, subjects are put in id order before shuffling so the
        result does not depend on input order.

    Returns
    -------
    (pseudo_F, p_raw)
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(labels).astype(np.int64)
    n = X.shape[0]
    if y.shape != (n,):
        raise ShapeError(f"{n} feature rows but labels have shape {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValidationError("labels must be 0 or 1")
    n1 = int(y.sum())
    if n < 4 or n1 < 2 or n - n1 < 2:
        raise ValidationError(
            f"MDMR needs n >= 4 and at least 2 per group (n={n}, groups {n - n1}/{n1})")
    if n_perm < 1 and not exact:
        raise ValidationError("n_perm must be >= 1")
    if subject_ids is not None:
        if len(subject_ids) != n:
            raise ShapeError(f"{len(subject_ids)} subject ids for {n} subjects")
        order = np.argsort(np.asarray(subject_ids, dtype=object), kind="stable")
        X, y = X[order], y[order]

    G = gower_center(squareform(pdist(X, "euclidean")))
    between = float(_between_trace(G, y[None])[0])
    if between <= 0.0 and np.trace(G) - between <= 0.0:
        return 0.0, 1.0
    F_obs = float(_pseudo_f(G, y[None])[0])
    threshold = F_obs * (1.0 - TIE_RTOL)

    if exact:
        hits = total = 0
        for ones in itertools.combinations(range(n), n1):
            Y = np.zeros((1, n), dtype=np.int64)
            Y[0, list(ones)] = 1
            hits += int(_pseudo_f(G, Y)[0] >= threshold)
            total += 1
        return F_obs, hits / total

    rng = np.random.default_rng(seed)
    hits = 0
    chunk = 500
    for start in range(0, n_perm, chunk):
        size = min(chunk, n_perm - start)
        Y = np.stack([rng.permutation(y) for _ in range(size)])
        hits += int(np.count_nonzero(_pseudo_f(G, Y) >= threshold))
    return F_obs, (1 + hits) / (1 + n_perm)


def group_analysis(correspondences: Sequence[SubjectCorrespondence], labels=None,
                   n_perm: int = 2000, alpha: float = 0.05, seed: int = 0,
                   threads: int = 1, region_names: Sequence[str] | None = None
                   ) -> list[RegionStat]:
    """Run :func:`mdmr_region` on every region and apply Bonferroni correction.

    Region ``i`` draws its permutations from ``default_rng([seed, i])``, so
    the result is the same for any ``threads``.
    """
    if not correspondences:
        raise ValidationError("no correspondence matrices given")
    phis = np.stack([c.phi_hat for c in correspondences])
    if labels is None:
        labels = [c.label for c in correspondences]
    y = np.asarray(labels)
    ids = [c.subject_id for c in correspondences]
    M = phis.shape[1]
    if region_names is None:
        region_names = [f"region_{i}" for i in range(M)]
    if len(region_names) != M:
        raise ShapeError(f"{len(region_names)} region names for {M} regions")

    def job(i):
        return mdmr_region(phis[:, i, :], y, n_perm, seed=[seed, i], subject_ids=ids)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, range(M)))
    else:
        results = [job(i) for i in range(M)]

    floor = 1.0 / (1 + n_perm)
    stats = []
    for i, (F, p) in enumerate(results):
        p_bonf = min(1.0, p * M)
        stats.append(RegionStat(i, str(region_names[i]), F, p, p_bonf,
                                -math.log10(max(p, floor)), p_bonf < alpha))
    return stats


CSV_COLUMNS = ("region_name", "pseudo_F", "p_raw", "p_bonferroni", "neg_log10_p", "significant")


def write_region_csv(stats: Sequence[RegionStat], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for s in stats:
            w.writerow([s.name, repr(s.pseudo_F), repr(s.p_raw), repr(s.p_bonferroni),
                        repr(s.neg_log10_p), int(s.significant)])
    return path


def read_region_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
