"""Multi-modal dynamic graph convolution network.

Pipeline per subject: each modality's connectivity matrix is read row by row
by a GRU, the two embeddings are combined into a symmetric correspondence
matrix, which is lifted with ``exp`` and Sinkhorn-scaled to a doubly
stochastic adjacency. That adjacency drives cross-modal projection and a
stack of per-modality graph convolutions; the final node features are
flattened and classified by a three-layer MLP.

All batched arrays use a leading subject axis: ``(B, M, M)`` inputs,
``(B, M, d)`` embeddings.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, asdict
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from .errors import ShapeError, SinkhornConvergenceError
from .numerics import DiffGraph, Var, as_tensor, register_primitive, matmul

READOUT_MODES = ("both", "functional_only", "structural_only")
POOLINGS = ("flatten", "mean")
ACTIVATIONS = ("leaky_relu", "relu")


class SinkhornClampWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class Hyper:
    """Architecture and numerical settings of one model."""

    n_regions: int
    hidden_dim: int = 16
    n_layers: int = 2
    dropout_rate: float = 0.5
    readout_mode: str = "both"
    pooling: str = "flatten"
    mlp_hidden: tuple[int, int] = (256, 64)
    activation: str = "leaky_relu"
    leaky_slope: float = 0.01
    sinkhorn_max_iters: int = 200
    sinkhorn_tol: float = 1e-6
    exp_clamp: float = 30.0
    normalize_structural: bool = True
    bgc_dim: int | None = None   # graph-convolution width; None means hidden_dim

    def __post_init__(self):
        object.__setattr__(self, "mlp_hidden", tuple(int(w) for w in self.mlp_hidden))
        problems = []
        if self.n_regions < 1:
            problems.append("n_regions must be >= 1")
        if self.hidden_dim < 1:
            problems.append("hidden_dim must be >= 1")
        if self.bgc_dim is not None and self.bgc_dim < 1:
            problems.append("bgc_dim must be >= 1")
        if self.n_layers < 1:
            problems.append("n_layers must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            problems.append("dropout_rate must be in [0, 1)")
        if self.readout_mode not in READOUT_MODES:
            problems.append(f"readout_mode must be one of {READOUT_MODES}")
        if self.pooling not in POOLINGS:
            problems.append(f"pooling must be one of {POOLINGS}")
        if self.activation not in ACTIVATIONS:
            problems.append(f"activation must be one of {ACTIVATIONS}")
        if len(self.mlp_hidden) != 2 or min(self.mlp_hidden) < 1:
            problems.append("mlp_hidden must be two positive widths")
        if self.sinkhorn_max_iters < 1 or not self.sinkhorn_tol > 0:
            problems.append("sinkhorn_max_iters >= 1 and sinkhorn_tol > 0 required")
        if problems:
            raise ValueError("invalid hyperparameters: " + "; ".join(problems))

    @property
    def bgc_width(self) -> int:
        return self.hidden_dim if self.bgc_dim is None else self.bgc_dim

    @property
    def readout_width(self) -> int:
        n_mod = 2 if self.readout_mode == "both" else 1
        per_node = n_mod * self.bgc_width
        return per_node * self.n_regions if self.pooling == "flatten" else per_node

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mlp_hidden"] = list(self.mlp_hidden)
        return d


@dataclass(frozen=True)
class GruParams:
    """Gate weights, each ``d x (d + M)``, acting on ``[o_{k-1}, x_k]``."""

    W_z: np.ndarray
    W_r: np.ndarray
    W: np.ndarray

    @property
    def hidden_dim(self) -> int:
        return self.W_z.shape[0]


@dataclass
class ModelParams:
    """Learnable tensors keyed by name, plus the hyperparameters.

    Names: ``gru_{f,s}.{W_z,W_r,W}``, ``bgc_{f,s}.{l}`` and
    ``mlp.{W,b}{0,1,2}``. MLP weights are stored ``in x out``.
    """

    hyper: Hyper
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    def gru(self, modality: str) -> GruParams:
        w = self.weights
        p = f"gru_{modality}."
        return GruParams(w[p + "W_z"], w[p + "W_r"], w[p + "W"])

    def bgc(self, modality: str) -> list[np.ndarray]:
        return [self.weights[f"bgc_{modality}.{l}"] for l in range(self.hyper.n_layers)]

    def copy(self) -> "ModelParams":
        return ModelParams(self.hyper, {k: v.copy() for k, v in self.weights.items()})


def param_shapes(hyper: Hyper) -> dict[str, tuple[int, int]]:
    M, d = hyper.n_regions, hyper.hidden_dim
    shapes = {}
    for m in ("f", "s"):
        for gate in ("W_z", "W_r", "W"):
            shapes[f"gru_{m}.{gate}"] = (d, d + M)
    for m in ("f", "s"):
        for l in range(hyper.n_layers):
            w = hyper.bgc_width
            shapes[f"bgc_{m}.{l}"] = (2 * d if l == 0 else w, w)
    widths = [hyper.readout_width, *hyper.mlp_hidden, 2]
    for i in range(3):
        shapes[f"mlp.W{i}"] = (widths[i], widths[i + 1])
        shapes[f"mlp.b{i}"] = (widths[i + 1],)
    return shapes


def init_params(hyper: Hyper, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases, fully determined by `seed`."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in param_shapes(hyper).items():
        if name.startswith("mlp.b"):
            weights[name] = np.zeros(shape)
            continue
        if name.startswith("gru"):
            fan_out, fan_in = shape
        else:
            fan_in, fan_out = shape
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(hyper, weights)


# --------------------------------------------------------------------------
# GRU (fused primitive with backpropagation through the region sequence)
# --------------------------------------------------------------------------

def _gru_forward(X, W_z, W_r, W):
    # X: (G, B, M, F) with one weight set per leading group, W_*: (G, d, d + F)
    G, B, M, F = X.shape
    d = W_z.shape[-2]
    if W_z.shape != (G, d, d + F) or W_r.shape != W_z.shape or W.shape != W_z.shape:
        raise ShapeError(
            f"GRU weights {W_z.shape[-2:]}, {W_r.shape[-2:]}, {W.shape[-2:]} do not fit "
            f"input {X.shape[-2:]} (expected ({d}, {d + F}))")
    U_zr = np.concatenate([W_z[:, :, :d], W_r[:, :, :d]], axis=1)     # (G, 2d, d)
    U_h = W[:, :, :d]
    Vx = np.concatenate([W_z[:, :, d:], W_r[:, :, d:], W[:, :, d:]], axis=1)
    xg = X @ np.swapaxes(Vx, -1, -2)[:, None]                         # (G, B, M, 3d)
    U_zr_t = np.swapaxes(U_zr, -1, -2)
    U_h_t = np.swapaxes(U_h, -1, -2)
    o = np.zeros((G, B, d))
    out = np.empty((G, B, M, d))
    steps = []
    for k in range(M):
        x_k = xg[:, :, k]
        zr = expit(o @ U_zr_t + x_k[..., :2 * d])
        z, r = zr[..., :d], zr[..., d:]
        h = np.tanh((r * o) @ U_h_t + x_k[..., 2 * d:])
        o_new = o + z * (h - o)
        steps.append((o, z, r, h))
        out[:, :, k] = o_new
        o = o_new
    return out, steps


def _gru_backward(g, steps, inputs, out):
    X, W_z, W_r, W = inputs
    G, B, M, F = X.shape
    d = W_z.shape[-2]
    U_zr = np.concatenate([W_z[:, :, :d], W_r[:, :, :d]], axis=1)
    U_h = W[:, :, :d]
    gU_zr = np.zeros_like(U_zr)
    gU_h = np.zeros_like(U_h)
    ga = np.empty((G, B, M, 3 * d))        # pre-activation grads: z | r | h
    carry = np.zeros((G, B, d))
    sw = lambda a: np.swapaxes(a, -1, -2)  # noqa: E731
    for k in range(M - 1, -1, -1):
        o, z, r, h = steps[k]
        go = g[:, :, k] + carry
        a_h = go * z * (1.0 - h * h)
        gU_h += sw(a_h) @ (r * o)
        g_ro = a_h @ U_h
        a_zr = np.concatenate([go * (h - o) * z * (1.0 - z),
                               g_ro * o * r * (1.0 - r)], axis=-1)
        gU_zr += sw(a_zr) @ o
        carry = go * (1.0 - z) + g_ro * r + a_zr @ U_zr
        ga[:, :, k, :2 * d] = a_zr
        ga[:, :, k, 2 * d:] = a_h
    Vx = np.concatenate([W_z[:, :, d:], W_r[:, :, d:], W[:, :, d:]], axis=1)
    gX = ga @ Vx[:, None]
    gVx = np.einsum("gbkd,gbkf->gdf", ga, X)
    gWz = np.concatenate([gU_zr[:, :d], gVx[:, :d]], axis=-1)
    gWr = np.concatenate([gU_zr[:, d:], gVx[:, d:2 * d]], axis=-1)
    gW = np.concatenate([gU_h, gVx[:, 2 * d:]], axis=-1)
    return gX, gWz, gWr, gW


register_primitive("gru", _gru_forward, _gru_backward)


def gru_encode(X, p: GruParams) -> np.ndarray:
    """Run the GRU over the rows of `X` (region order, zero initial state).

    `X` is ``(M, M)`` or batched ``(B, M, M)``; returns ``(M, d)`` or
    ``(B, M, d)`` where row ``k`` is the hidden state after region ``k``.
    """
    X = as_tensor(X)
    single = X.ndim == 2
    Xb = (X[None] if single else X)[None]
    out, _ = _gru_forward(Xb, as_tensor(p.W_z)[None], as_tensor(p.W_r)[None],
                          as_tensor(p.W)[None])
    return out[0, 0] if single else out[0]


# --------------------------------------------------------------------------
# correspondence and Sinkhorn
# --------------------------------------------------------------------------

def correspondence(h_f, h_s) -> np.ndarray:
    """Symmetric correspondence scores ``(h_f h_s^T + h_s h_f^T) / 2``."""
    h_f, h_s = as_tensor(h_f), as_tensor(h_s)
    if h_f.shape != h_s.shape:
        raise ShapeError(f"embedding shapes differ: {h_f.shape} vs {h_s.shape}")
    P = matmul(h_f, np.swapaxes(h_s, -1, -2))
    return (P + np.swapaxes(P, -1, -2)) * 0.5


def _alternating_scale(A, max_iters, tol):
    """Classic Sinkhorn-Knopp: row then column normalisation per sweep."""
    B = A.shape[0]
    active = np.ones(B, dtype=bool)
    iters = np.zeros(B, dtype=int)
    residual = np.full(B, np.inf)
    history = []
    for _ in range(max_iters):
        r = A.sum(axis=-1, keepdims=True)
        Y = A / r
        c = Y.sum(axis=-2, keepdims=True)
        Z = Y / c
        history.append((r, Y, c, active.copy()))
        A = np.where(active[:, None, None], Z, A)
        iters += active
        res = _doubly_stochastic_residual(A)
        residual = np.where(active, res, residual)
        active &= res > tol
        if not active.any():
            break
    return A, iters, residual, active, {"history": history}


def _doubly_stochastic_residual(P):
    return np.maximum(np.abs(P.sum(axis=-1) - 1.0).max(axis=-1),
                      np.abs(P.sum(axis=-2) - 1.0).max(axis=-1))


def _symmetric_scale(A, max_iters, tol):
    """Symmetric scaling ``D A D`` by damped Newton on the log-scalings.

    Minimises ``F(u) = 0.5 * sum_ij A_ij exp(u_i + u_j) - sum_i u_i``, which
    is strictly convex for positive `A`; its stationary point makes every
    row (hence every column) of ``D A D`` sum to one.
    """
    B, M, _ = A.shape
    u = -0.5 * np.log(A.sum(axis=-1))
    eye = np.eye(M)

    def scaled(u):
        with np.errstate(over="ignore", invalid="ignore"):
            return A * np.exp(u[:, :, None] + u[:, None, :])

    def objective(P, u):
        return 0.5 * P.sum(axis=(-1, -2)) - u.sum(axis=-1)

    P = scaled(u)
    residual = _doubly_stochastic_residual(P)
    active = residual > tol
    iters = np.zeros(B, dtype=int)
    for _ in range(max_iters):
        if not active.any():
            break
        r = P.sum(axis=-1)
        grad = r - 1.0
        H = P + eye * r[:, None, :]
        step = -np.linalg.solve(H, grad[..., None])[..., 0]
        slope = (grad * step).sum(axis=-1)
        f0 = objective(P, u)
        t = np.ones(B)
        todo = active.copy()
        u_new, P_new = u.copy(), P.copy()
        for _ in range(60):
            cand = u + t[:, None] * step
            Pc = scaled(cand)
            fc = objective(Pc, cand)
            # near the optimum F is flat to rounding; fall back to the residual
            with np.errstate(invalid="ignore"):
                better = _doubly_stochastic_residual(Pc) < residual
            ok = todo & np.isfinite(fc) & ((fc <= f0 + 1e-4 * t * slope) | better)
            u_new[ok], P_new[ok] = cand[ok], Pc[ok]
            todo &= ~ok
            if not todo.any():
                break
            t = np.where(todo, 0.5 * t, t)
        u, P = u_new, P_new
        iters += active
        res = _doubly_stochastic_residual(P)
        residual = np.where(active, res, residual)
        active &= res > tol
    return P, iters, residual, active, {"u": u}


def _sinkhorn_forward(phi, *, max_iters, tol, clamp, raise_on_fail=True):
    single = phi.ndim == 2
    if phi.ndim not in (2, 3) or phi.shape[-1] != phi.shape[-2]:
        raise ShapeError(f"Sinkhorn needs square matrices, got {phi.shape}")
    if not np.all(np.isfinite(phi)):
        raise ValueError("Sinkhorn input contains non-finite entries")
    P = phi[None] if single else phi
    if clamp is None:
        if np.any(P <= 0):
            raise ValueError("Sinkhorn scaling without lift needs positive entries")
        A0, inside, clamped = P, None, False
    else:
        clipped = np.clip(P, -clamp, clamp)
        inside = clipped == P
        clamped = not inside.all()
        A0 = np.exp(clipped)
    symmetric = np.array_equal(A0, np.swapaxes(A0, -1, -2))
    scale = _symmetric_scale if symmetric else _alternating_scale
    out, iters, residual, failed, extra = scale(A0, max_iters, tol)
    if raise_on_fail and failed.any():
        raise SinkhornConvergenceError(residual.max(), max_iters)
    ctx = {"A0": A0, "inside": inside, "single": single, "symmetric": symmetric,
           "iterations": iters, "residual": residual, "clamped": clamped,
           "out": out, **extra}
    return (out[0] if single else out), ctx


def _sinkhorn_backward(g, ctx, inputs, out, *, max_iters, tol, clamp, raise_on_fail=True):
    gP = g[None] if ctx["single"] else g
    A0 = ctx["A0"]
    if ctx["symmetric"]:
        # implicit differentiation of the row-sum equations at the solution
        P = ctx["out"]
        E = P / A0
        g_u = ((gP + np.swapaxes(gP, -1, -2)) * P).sum(axis=-1)
        H = P + np.eye(P.shape[-1]) * P.sum(axis=-1)[:, None, :]
        lam = np.linalg.solve(H, g_u[..., None])[..., 0]
        gA = (gP - lam[:, :, None]) * E
    else:
        gA = gP
        for r, Y, c, act in reversed(ctx["history"]):
            Z = Y / c
            gY = (gA - (gA * Z).sum(axis=-2, keepdims=True)) / c
            gPrev = (gY - (gY * Y).sum(axis=-1, keepdims=True)) / r
            gA = np.where(act[:, None, None], gPrev, gA)
    if clamp is not None:
        gA = gA * A0 * ctx["inside"]
    return ((gA[0] if ctx["single"] else gA),)


register_primitive("sinkhorn", _sinkhorn_forward, _sinkhorn_backward)


@dataclass
class CorrespondenceMatrix:
    raw: np.ndarray
    normalized: np.ndarray
    iterations: int
    residual: float


def sinkhorn_scale(A, max_iters: int = 200, tol: float = 1e-6) -> CorrespondenceMatrix:
    """Alternate row/column normalisation of a strictly positive matrix."""
    A = as_tensor(A)
    if max_iters < 1 or not tol > 0:
        raise ValueError("max_iters >= 1 and tol > 0 required")
    out, ctx = _sinkhorn_forward(A, max_iters=max_iters, tol=tol, clamp=None)
    return CorrespondenceMatrix(A, out, int(ctx["iterations"].max()),
                                float(ctx["residual"].max()))


def sinkhorn_normalize(phi, max_iters: int = 200, tol: float = 1e-6,
                       clamp: float = 30.0) -> CorrespondenceMatrix:
    """Doubly-stochastic normalisation of ``exp(phi)``.

    Entries are clipped to ``[-clamp, clamp]`` before the exponential; a
    :class:`SinkhornClampWarning` is emitted when that happens. Raises
    :class:`SinkhornConvergenceError` when the largest row/column sum
    deviation is still above `tol` after `max_iters` sweeps.
    """
    phi = as_tensor(phi)
    if max_iters < 1 or not tol > 0:
        raise ValueError("max_iters >= 1 and tol > 0 required")
    out, ctx = _sinkhorn_forward(phi, max_iters=max_iters, tol=tol, clamp=clamp)
    if ctx["clamped"]:
        warnings.warn(f"correspondence entries clipped to +/-{clamp} before exp",
                      SinkhornClampWarning, stacklevel=2)
    return CorrespondenceMatrix(phi, out, int(ctx["iterations"].max()),
                                float(ctx["residual"].max()))


def cross_project(phi_hat, h_f, h_s) -> tuple[np.ndarray, np.ndarray]:
    """Project each modality's embedding onto the other: ``phi_hat^T h``."""
    phi_hat, h_f, h_s = as_tensor(phi_hat), as_tensor(h_f), as_tensor(h_s)
    if h_f.shape != h_s.shape:
        raise ShapeError(f"embedding shapes differ: {h_f.shape} vs {h_s.shape}")
    pt = np.swapaxes(phi_hat, -1, -2)
    return matmul(pt, h_s), matmul(pt, h_f)


def bgc_layer(H, phi_hat, W) -> np.ndarray:
    """One graph convolution ``sigmoid(phi_hat @ H @ W)``."""
    return expit(matmul(matmul(phi_hat, H), W))


def softmax(logits) -> np.ndarray:
    z = as_tensor(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def readout_classify(H_f, H_s, params: ModelParams, dropout_active: bool = False,
                     rng: np.random.Generator | None = None) -> np.ndarray:
    """Readout of final node features followed by the MLP head.

    ``H_f`` and ``H_s`` are ``(M, w)`` (or batched). The readout respects
    ``params.hyper.readout_mode`` and ``pooling``.
    """
    hyper = params.hyper
    H_f, H_s = as_tensor(H_f), as_tensor(H_s)
    single = H_f.ndim == 2
    if single:
        H_f, H_s = H_f[None], H_s[None]
    if H_f.shape != H_s.shape:
        raise ShapeError(f"readout inputs differ: {H_f.shape} vs {H_s.shape}")
    R = {"both": lambda: np.concatenate([H_f, H_s], axis=-1),
         "functional_only": lambda: H_f,
         "structural_only": lambda: H_s}[hyper.readout_mode]()
    x = R.reshape(len(R), -1) if hyper.pooling == "flatten" else R.mean(axis=1)
    w = params.weights
    if x.shape[1] != w["mlp.W0"].shape[0]:
        raise ShapeError(
            f"readout width {x.shape[1]} does not match MLP input {w['mlp.W0'].shape[0]}")
    if dropout_active and hyper.dropout_rate > 0 and rng is None:
        raise ValueError("dropout needs an rng")
    slope = hyper.leaky_slope if hyper.activation == "leaky_relu" else 0.0
    for i in range(3):
        x = x @ w[f"mlp.W{i}"] + w[f"mlp.b{i}"]
        if i < 2:
            x = np.where(x > 0, x, slope * x)
            if dropout_active and hyper.dropout_rate > 0:
                x = x * ((rng.random(x.shape) >= hyper.dropout_rate)
                         / (1.0 - hyper.dropout_rate))
    p = softmax(x)
    return p[0] if single else p


# --------------------------------------------------------------------------
# full forward pass on a DiffGraph
# --------------------------------------------------------------------------

def prepare_inputs(functional, structural, hyper: Hyper) -> tuple[np.ndarray, np.ndarray]:
    """Stack matrices into ``(B, M, M)`` arrays, max-normalising structural rows.

    Each structural matrix is divided by its own largest entry (left as is
    when that entry is 0).
    """
    xf = as_tensor(functional)
    xs = as_tensor(structural)
    if xf.ndim == 2:
        xf, xs = xf[None], xs[None]
    if xf.shape != xs.shape or xf.shape[1:] != (hyper.n_regions, hyper.n_regions):
        raise ShapeError(
            f"inputs {xf.shape} / {xs.shape} do not match n_regions={hyper.n_regions}")
    if hyper.normalize_structural:
        peak = xs.max(axis=(1, 2), keepdims=True)
        xs = xs / np.where(peak > 0, peak, 1.0)
    return xf, xs


def _act(g: DiffGraph, x: Var, hyper: Hyper) -> Var:
    slope = hyper.leaky_slope if hyper.activation == "leaky_relu" else 0.0
    return g.apply("leaky_relu", x, slope=slope)


def _dropout(g: DiffGraph, x: Var, rate: float, rng: np.random.Generator) -> Var:
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * g.constant(keep)


def build_forward(g: DiffGraph, xf: np.ndarray, xs: np.ndarray,
                  w: Mapping[str, Var], hyper: Hyper, train: bool = False,
                  rng: np.random.Generator | None = None) -> dict[str, object]:
    """Record the forward pass for a batch on `g`.

    `xf`, `xs` come from :func:`prepare_inputs`; `w` maps parameter names
    to graph leaves. Returns the intermediate handles by name.
    """
    if train and hyper.dropout_rate > 0 and rng is None:
        raise ValueError("training-mode dropout needs an rng")
    B, M, _ = xf.shape
    t = {}
    # both modalities run through one stacked GRU call, separate weights
    X = g.constant(np.stack([xf, xs]))
    stacked = [g.apply("stack", w[f"gru_f.{n}"], w[f"gru_s.{n}"]) for n in ("W_z", "W_r", "W")]
    h = g.apply("gru", X, *stacked)
    h_f = g.apply("take", h, index=0)
    h_s = g.apply("take", h, index=1)
    P = h_f @ h_s.T
    phi = (P + P.T) * 0.5
    phi_hat = g.apply("sinkhorn", phi, max_iters=hyper.sinkhorn_max_iters,
                      tol=hyper.sinkhorn_tol, clamp=hyper.exp_clamp)
    phi_t = phi_hat.T
    hh_f = phi_t @ h_s
    hh_s = phi_t @ h_f
    t.update(h_f=h_f, h_s=h_s, phi=phi, phi_hat=phi_hat, hh_f=hh_f, hh_s=hh_s)

    H_f = g.apply("concat", hh_f, h_f, axis=-1)
    H_s = g.apply("concat", hh_s, h_s, axis=-1)
    layers_f, layers_s = [H_f], [H_s]
    for l in range(hyper.n_layers):
        H_f = g.apply("sigmoid", (phi_hat @ H_f) @ w[f"bgc_f.{l}"])
        H_s = g.apply("sigmoid", (phi_hat @ H_s) @ w[f"bgc_s.{l}"])
        layers_f.append(H_f)
        layers_s.append(H_s)
    t.update(H_f=layers_f, H_s=layers_s)

    if hyper.readout_mode == "both":
        R = g.apply("concat", H_f, H_s, axis=-1)
    elif hyper.readout_mode == "functional_only":
        R = H_f
    else:
        R = H_s
    if hyper.pooling == "flatten":
        x = R.reshape(B, -1)
    else:
        x = R.mean(axis=1)
    t["readout"] = x

    for i in range(3):
        x = x @ w[f"mlp.W{i}"] + w[f"mlp.b{i}"]
        if i < 2:
            x = _act(g, x, hyper)
            if train and hyper.dropout_rate > 0:
                x = _dropout(g, x, hyper.dropout_rate, rng)
    t["logits"] = x
    t["probs"] = g.apply("softmax_row", x)
    return t


def cross_entropy_var(g: DiffGraph, probs: Var, labels: Sequence[int]) -> Var:
    """Mean ``-log(max(p[label], 1e-12))`` over the batch, on the graph."""
    labels = np.asarray(labels, dtype=int)
    onehot = np.zeros(probs.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = (probs * g.constant(onehot)).sum(axis=-1)
    return -(g.apply("log", picked, floor=1e-12).mean())


def leaves_for(g: DiffGraph, params: ModelParams, trainable: bool = True) -> dict[str, Var]:
    return {k: g.leaf(v, name=k, trainable=trainable) for k, v in params.weights.items()}


@dataclass
class ForwardTrace:
    h_f: np.ndarray
    h_s: np.ndarray
    hh_f: np.ndarray
    hh_s: np.ndarray
    phi: np.ndarray
    phi_hat: np.ndarray
    H_f: list[np.ndarray]
    H_s: list[np.ndarray]
    readout: np.ndarray
    probs: np.ndarray
    sinkhorn_iterations: int
    sinkhorn_residual: float


def model_forward(sample, params: ModelParams, mode: str = "eval",
                  rng: np.random.Generator | None = None) -> ForwardTrace:
    """Forward pass for one :class:`~mdgcn.data.MultiModalSample`."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    hyper = params.hyper
    if sample.n_regions != hyper.n_regions:
        raise ShapeError(
            f"sample has {sample.n_regions} regions, model expects {hyper.n_regions}")
    xf, xs = prepare_inputs(sample.functional.matrix, sample.structural.matrix, hyper)
    g = DiffGraph()
    w = leaves_for(g, params, trainable=False)
    t = build_forward(g, xf, xs, w, hyper, train=(mode == "train"), rng=rng)
    ctx = g.context(t["phi_hat"])
    return ForwardTrace(
        h_f=t["h_f"].value[0], h_s=t["h_s"].value[0],
        hh_f=t["hh_f"].value[0], hh_s=t["hh_s"].value[0],
        phi=t["phi"].value[0], phi_hat=t["phi_hat"].value[0],
        H_f=[v.value[0] for v in t["H_f"]], H_s=[v.value[0] for v in t["H_s"]],
        readout=t["readout"].value[0], probs=t["probs"].value[0],
        sinkhorn_iterations=int(ctx["iterations"][0]),
        sinkhorn_residual=float(ctx["residual"][0]),
    )


def _eval_outputs(params: ModelParams, xf, xs, key: str, batch_size: int) -> np.ndarray:
    out = []
    for start in range(0, len(xf), batch_size):
        g = DiffGraph()
        w = leaves_for(g, params, trainable=False)
        t = build_forward(g, xf[start:start + batch_size], xs[start:start + batch_size],
                          w, params.hyper)
        out.append(t[key].value)
    return np.concatenate(out, axis=0)


def predict_proba(params: ModelParams, functional, structural,
                  batch_size: int = 16) -> np.ndarray:
    """Eval-mode class probabilities ``(N, 2)`` for stacked matrices."""
    xf, xs = prepare_inputs(functional, structural, params.hyper)
    return _eval_outputs(params, xf, xs, "probs", batch_size)


def correspondence_batch(params: ModelParams, functional, structural,
                         batch_size: int = 16) -> np.ndarray:
    """Eval-mode normalised correspondence matrices ``(N, M, M)``."""
    xf, xs = prepare_inputs(functional, structural, params.hyper)
    return _eval_outputs(params, xf, xs, "phi_hat", batch_size)
