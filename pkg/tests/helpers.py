"""Small builders shared by the test modules."""
from __future__ import annotations

import numpy as np

from mdgcn.data import SynthConfig, generate_synthetic
from mdgcn.model import Hyper, build_forward, cross_entropy_var, init_params, prepare_inputs

PLANTED = SynthConfig(n_regions=32, n_per_group=40, n_timepoints=200,
                      effect_regions=(0, 1, 2, 3), effect_strength=2.0, seed=7)


def tiny_dataset(n_regions=6, n_per_group=4, seed=0, effect=2.0):
    return generate_synthetic(SynthConfig(n_regions=n_regions, n_per_group=n_per_group,
                                          n_timepoints=40, effect_regions=(0, 1),
                                          effect_strength=effect, seed=seed))


def gradient_instance(seed: int):
    """One random M=4, d=3, L=2 sample with dropout off.

    MLP widths are narrowed to (8, 4) so central differences over every
    coordinate stay fast; Sinkhorn runs to 1e-13 so the loss is smooth at the
    finite-difference step.
    """
    rng = np.random.default_rng(seed)
    hyper = Hyper(n_regions=4, hidden_dim=3, n_layers=2, dropout_rate=0.0,
                  mlp_hidden=(8, 4), sinkhorn_tol=1e-13, sinkhorn_max_iters=2000)
    params = init_params(hyper, seed)
    func = np.corrcoef(rng.standard_normal((20, 4)).T)
    counts = np.triu(rng.poisson(5, (4, 4)).astype(float), 1)
    xf, xs = prepare_inputs(func, counts + counts.T, hyper)
    labels = [int(rng.integers(0, 2))]

    def loss(g, w):
        t = build_forward(g, xf, xs, w, hyper)
        return cross_entropy_var(g, t["probs"], labels)

    return params, loss


def naive_matmul(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def pairwise_auc(labels, scores):
    """Exhaustive pair count: ties score one half."""
    pos = [s for y, s in zip(labels, scores) if y == 1]
    neg = [s for y, s in zip(labels, scores) if y == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))
