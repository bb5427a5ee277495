"""Novelty scorers. Higher score means more In-distribution.

Each ``score_*`` function is a pure function of ``(snapshot, x, ctx)``:
``x`` is one input vector (returns a float) or a batch (returns an array).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .metrics import auc
from .models import ModelSnapshot, Setting
from .tensor import Tensor
from .vae import VAE

SCORERS = ("softmax", "odin", "mahalanobis", "vae", "b1", "b2")
HEAD_FREE = ("mahalanobis", "vae")
PROTOTYPE_SCORERS = ("b1", "b2")

ODIN_EPSILONS = (0.0, 5e-4, 1e-3, 2e-3, 5e-3)
ODIN_TEMPERATURES = (1.0, 10.0, 100.0, 1000.0)


class ScorerStateError(RuntimeError):
    pass


class ScorerConfigError(ValueError):
    pass


@dataclass
class ClassStats:
    """Class means and a tied, ridge-regularised covariance for one layer."""

    class_ids: list
    mu: np.ndarray  # [k, n]
    scatter: np.ndarray  # pooled within-class scatter, [n, n]
    count: int
    ridge: float
    sigma: np.ndarray = field(init=False)
    sigma_inv: np.ndarray = field(init=False)

    def __post_init__(self):
        self.refresh()

    def refresh(self) -> None:
        n = self.scatter.shape[0]
        sigma = self.scatter / max(self.count, 1)
        self.sigma = 0.5 * (sigma + sigma.T)
        reg = self.sigma + self.ridge * np.eye(n)
        try:
            np.linalg.cholesky(reg)
        except np.linalg.LinAlgError:
            raise T.NumericError("covariance not positive definite despite ridge") from None
        self.sigma_inv = np.linalg.inv(reg)

    def to_dict(self) -> dict:
        return {"class_ids": self.class_ids, "mu": self.mu.tolist(), "sigma": self.sigma.tolist(),
                "ridge": self.ridge, "count": self.count}


def mahalanobis_layer_score(f: np.ndarray, mu: np.ndarray, sigma_inv: np.ndarray) -> np.ndarray:
    """``-min_c (f - mu_c)^T S^-1 (f - mu_c)`` for each row of ``f``."""
    f = np.atleast_2d(f)
    diff = f[:, None, :] - mu[None, :, :]
    d2 = np.einsum("bkn,nm,bkm->bk", diff, sigma_inv, diff)
    return -d2.min(axis=1)


@dataclass
class MahalanobisState:
    layers: list  # ClassStats per selected layer
    layer_indices: list  # which hidden outputs (0-based); -1 = last = phi(x)
    weights: np.ndarray

    def to_dict(self) -> dict:
        return {"layer_indices": self.layer_indices, "weights": self.weights.tolist(),
                "layers": [s.to_dict() for s in self.layers]}


@dataclass
class ScorerContext:
    active_head: Optional[int] = None
    odin_epsilon: float = 0.0
    odin_temperature: float = 1.0
    mahalanobis: Optional[MahalanobisState] = None
    vae: Optional[VAE] = None
    vae_input: str = "raw"
    vae_samples: int = 8
    vae_seed: int = 0
    b2_n: int = 2
    calibration_auc: dict = field(default_factory=dict)

    def head(self) -> int:
        return 0 if self.active_head is None else self.active_head

    def with_head(self, h: int) -> "ScorerContext":
        from dataclasses import replace

        return replace(self, active_head=h)

    def to_dict(self) -> dict:
        return {
            "active_head": self.active_head,
            "odin": {"epsilon": self.odin_epsilon, "temperature": self.odin_temperature},
            "mahalanobis": self.mahalanobis.to_dict() if self.mahalanobis else None,
            "vae": self.vae.to_dict() if self.vae else None,
            "vae_input": self.vae_input,
            "vae_samples": self.vae_samples,
            "vae_seed": self.vae_seed,
            "b2_n": self.b2_n,
            "calibration_auc": self.calibration_auc,
        }


def _batch(x):
    arr = np.asarray(x, dtype=np.float64)
    return (arr[None, :], True) if arr.ndim == 1 else (arr, False)


def _out(scores: np.ndarray, single: bool):
    return float(scores[0]) if single else scores


# ---------------------------------------------------------------------------
# output-probability scorers


def score_softmax(snapshot: ModelSnapshot, x, ctx: ScorerContext):
    """Maximum softmax probability of the active head."""
    xb, single = _batch(x)
    p = T.softmax(snapshot.logits(xb, ctx.head()), 1.0).data
    return _out(p.max(axis=1), single)


def odin_perturb(snapshot: ModelSnapshot, x: np.ndarray, head: int, epsilon: float, temperature: float) -> np.ndarray:
    """``x - eps * sign(-grad_x log softmax(f(x)/T)[y_hat])``."""
    if epsilon == 0.0:
        return x
    model = snapshot.model
    pred = np.argmax(snapshot.logits(x, head), axis=1)
    rows = np.arange(len(x))

    def objective(xt: Tensor) -> Tensor:
        z = model.forward_logits(model.forward_features(xt), head)
        logp = T.log_softmax(z, temperature)
        mask = np.zeros(logp.shape)
        mask[rows, pred] = 1.0
        # rows are independent, so the summed objective gives per-row gradients
        return T.sum_all(T.mul(logp, Tensor._wrap(mask)))

    g = T.grad_wrt_input(objective, x)
    return x - epsilon * np.sign(-g)


def score_odin(snapshot: ModelSnapshot, x, ctx: ScorerContext, epsilon: float | None = None,
               temperature: float | None = None):
    eps = ctx.odin_epsilon if epsilon is None else epsilon
    temp = ctx.odin_temperature if temperature is None else temperature
    if eps < 0 or temp <= 0:
        raise ScorerConfigError("ODIN needs epsilon >= 0 and temperature > 0")
    xb, single = _batch(x)
    xt = odin_perturb(snapshot, xb, ctx.head(), eps, temp)
    p = T.softmax(snapshot.logits(xt, ctx.head()), temp).data
    return _out(p.max(axis=1), single)


# ---------------------------------------------------------------------------
# Mahalanobis


def _layer_features(snapshot: ModelSnapshot, x: np.ndarray, layer_indices) -> list[np.ndarray]:
    hidden = snapshot.hidden(x)
    return [hidden[i] for i in layer_indices]


def mahalanobis_layer_scores(snapshot: ModelSnapshot, x: np.ndarray, state: MahalanobisState) -> np.ndarray:
    """Per-layer scores, shape ``[B, n_layers]``."""
    feats = _layer_features(snapshot, x, state.layer_indices)
    return np.stack([mahalanobis_layer_score(f, s.mu, s.sigma_inv) for f, s in zip(feats, state.layers)], axis=1)


def fit_mahalanobis(snapshot: ModelSnapshot, x: np.ndarray, y: np.ndarray,
                    previous: Optional[MahalanobisState] = None,
                    layer_indices=(-2, -1), ridge: float = 1e-3) -> MahalanobisState:
    """Add class statistics for the classes in ``y`` not already known.

    Known classes keep their frozen means and scatter contribution; the tied
    covariance pools the scatter of every class fitted so far.  ``ridge`` is
    relative to the mean feature variance of the layer.  Combiner weights are
    reset to uniform; :func:`calibrate` refits them.
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y)
    known = set(previous.layers[0].class_ids) if previous else set()
    new = [c for c in np.unique(y).tolist() if c not in known]
    for c in new:
        if np.sum(y == c) < 2:
            raise ScorerStateError(f"class {c}: need at least 2 samples")
    if previous is not None:
        layer_indices = previous.layer_indices
    feats = _layer_features(snapshot, x, layer_indices)
    layers = []
    for li, f in enumerate(feats):
        n = f.shape[1]
        mus, scatter, count = [], np.zeros((n, n)), 0
        for c in new:
            fc = f[y == c]
            mu = fc.mean(axis=0)
            d = fc - mu
            mus.append(mu)
            scatter += d.T @ d
            count += len(fc)
        if previous is not None:
            old = previous.layers[li]
            ids = old.class_ids + new
            mu_all = np.vstack([old.mu, *mus]) if mus else old.mu
            scatter, count = old.scatter + scatter, old.count + count
            rel = old.ridge
        else:
            ids, mu_all = list(new), np.vstack(mus)
            rel = ridge * max(float(np.trace(scatter)) / (n * max(count, 1)), 1e-12)
        layers.append(ClassStats(ids, mu_all, scatter, count, rel))
    weights = np.full(len(layers), 1.0 / len(layers))
    return MahalanobisState(layers, list(layer_indices), weights)


def score_mahalanobis(snapshot: ModelSnapshot, x, ctx: ScorerContext):
    if ctx.mahalanobis is None:
        raise ScorerStateError("Mahalanobis statistics not fitted")
    xb, single = _batch(x)
    s = mahalanobis_layer_scores(snapshot, xb, ctx.mahalanobis) @ ctx.mahalanobis.weights
    return _out(s, single)


def logistic_weights(pos: np.ndarray, neg: np.ndarray, l2: float = 1e-2, iters: int = 50) -> np.ndarray:
    """Newton-fitted logistic regression (In=1, Out=0); returns raw-scale feature weights."""
    X = np.vstack([pos, neg])
    y = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    mean, sd = X.mean(axis=0), X.std(axis=0) + 1e-12
    Z = np.hstack([(X - mean) / sd, np.ones((len(X), 1))])
    w = np.zeros(Z.shape[1])
    reg = np.full(Z.shape[1], l2)
    reg[-1] = 0.0
    for _ in range(iters):
        p = 1.0 / (1.0 + np.exp(-np.clip(Z @ w, -50, 50)))
        grad = Z.T @ (p - y) + reg * w
        hess = (Z * (p * (1 - p))[:, None]).T @ Z + np.diag(reg) + 1e-9 * np.eye(len(w))
        step = np.linalg.solve(hess, grad)
        w -= step
        if np.abs(step).max() < 1e-10:
            break
    return w[:-1] / sd


# ---------------------------------------------------------------------------
# VAE


def vae_input(snapshot: ModelSnapshot, x: np.ndarray, which: str) -> np.ndarray:
    if which == "raw":
        return x
    if which == "features":
        return snapshot.features(x)
    raise ScorerConfigError(f"unknown VAE input {which!r}")


def score_vae(snapshot: ModelSnapshot, x, ctx: ScorerContext):
    if ctx.vae is None:
        raise ScorerStateError("VAE not trained")
    xb, single = _batch(x)
    v = vae_input(snapshot, xb, ctx.vae_input)
    return _out(ctx.vae.elbo(v, ctx.vae_samples, ctx.vae_seed), single)


# ---------------------------------------------------------------------------
# prototype baselines


def _prototype_head(snapshot: ModelSnapshot, head: int):
    h = snapshot.model.heads[head]
    if h.bias is not None:
        raise ScorerConfigError("prototype scorers need a bias-free final layer")
    theta = h.theta.data
    return theta, theta / np.linalg.norm(theta, axis=1, keepdims=True)


def _unit_rows(f: np.ndarray):
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    zero = norms[:, 0] == 0
    return np.where(norms > 0, f / np.where(norms > 0, norms, 1.0), 0.0), zero


def _b1(snapshot: ModelSnapshot, feats: np.ndarray, head: int):
    _, proto = _prototype_head(snapshot, head)
    z = snapshot.model.forward_logits(feats, head).data
    p = T.softmax(z, 1.0).data
    unit, zero = _unit_rows(feats)
    s = np.einsum("bn,bn->b", unit, p @ proto)
    return np.where(zero, -1.0, s), z, p, unit, zero


def score_b1(snapshot: ModelSnapshot, x, ctx: ScorerContext):
    """``phi*(x) . (p_x theta*)``: probability-weighted cosine to the prototypes."""
    xb, single = _batch(x)
    s, *_ = _b1(snapshot, snapshot.features(xb), ctx.head())
    return _out(s, single)


def b2_perturbation(snapshot: ModelSnapshot, feats: np.ndarray, head: int, labels: np.ndarray) -> np.ndarray:
    """Per-row gradient of the cross-entropy w.r.t. the features, through the final layer only."""
    model = snapshot.model
    return T.grad_wrt_input(lambda f: T.cross_entropy(model.forward_logits(f, head), labels, reduction="sum"), feats)


def score_b2(snapshot: ModelSnapshot, x, ctx: ScorerContext):
    """B1 plus the cosine margin between the predicted and the n-th closest
    prototype, measured after moving the features by ``-grad`` toward the latter."""
    xb, single = _batch(x)
    head = ctx.head()
    _, proto = _prototype_head(snapshot, head)
    k = proto.shape[0]
    n = ctx.b2_n
    if k < 2 or not 2 <= n <= k:
        raise ScorerConfigError(f"B2 needs 2 <= n <= k classes (n={n}, k={k})")
    feats = snapshot.features(xb)
    s1, z, _, unit, zero = _b1(snapshot, feats, head)
    cos = unit @ proto.T
    # stable sort keeps the lower class index first among equal cosines
    y_n = np.argsort(-cos, axis=1, kind="stable")[:, n - 1]
    c = np.argmax(z, axis=1)
    moved = feats - b2_perturbation(snapshot, feats, head, y_n)
    moved_unit, _ = _unit_rows(moved)
    cos_m = moved_unit @ proto.T
    rows = np.arange(len(feats))
    delta = cos_m[rows, c] - cos_m[rows, y_n]
    return _out(np.where(zero, -1.0, s1 + delta), single)


SCORE_FUNCS: dict[str, Callable] = {
    "softmax": score_softmax,
    "odin": score_odin,
    "mahalanobis": score_mahalanobis,
    "vae": score_vae,
    "b1": score_b1,
    "b2": score_b2,
}


# ---------------------------------------------------------------------------
# multi-head pooling and calibration


def combined_scores(name: str, snapshot: ModelSnapshot, x: np.ndarray, ctx: ScorerContext,
                    heads: Optional[np.ndarray] = None, **kw) -> np.ndarray:
    """Score a batch; ``heads[i] >= 0`` uses that (oracle) head, ``-1`` takes the max over heads.

    Shared-head snapshots and head-free scorers ignore ``heads``.
    """
    fn = SCORE_FUNCS[name]
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if name in HEAD_FREE or snapshot.setting is Setting.SHARED_HEAD or snapshot.num_heads == 1:
        return np.asarray(fn(snapshot, x, ctx.with_head(0), **kw), dtype=np.float64)
    heads = np.full(len(x), -1) if heads is None else np.asarray(heads)
    out = np.full(len(x), -np.inf)
    pooled = heads < 0
    for h in range(snapshot.num_heads):
        sel = (heads == h) | pooled
        if sel.any():
            s = np.asarray(fn(snapshot, x[sel], ctx.with_head(h), **kw))
            out[sel] = np.maximum(out[sel], s)
    return out


def calibrate(scorers, snapshot: ModelSnapshot, in_x: np.ndarray, in_heads: np.ndarray, ood_x: np.ndarray,
              ctx: ScorerContext) -> ScorerContext:
    """Tune ODIN (grid) and the Mahalanobis combiner on In-train vs OOD-calibration.

    Candidates are tried in grid order and only a strictly better AUC
    replaces the incumbent, so (eps=0, T=1) wins ties.
    """
    from dataclasses import replace

    ctx = replace(ctx, calibration_auc={})
    if len(ood_x) == 0 or len(in_x) == 0:
        return ctx
    if "odin" in scorers:
        best = (-1.0, 0.0, 1.0)
        for eps in ODIN_EPSILONS:
            for temp in ODIN_TEMPERATURES:
                a = auc(combined_scores("odin", snapshot, in_x, ctx, in_heads, epsilon=eps, temperature=temp),
                        combined_scores("odin", snapshot, ood_x, ctx, None, epsilon=eps, temperature=temp))
                if a > best[0]:
                    best = (a, eps, temp)
        ctx = replace(ctx, odin_epsilon=best[1], odin_temperature=best[2])
        ctx.calibration_auc["odin"] = best[0]
    if "mahalanobis" in scorers and ctx.mahalanobis is not None:
        m = ctx.mahalanobis
        pos = mahalanobis_layer_scores(snapshot, in_x, m)
        neg = mahalanobis_layer_scores(snapshot, ood_x, m)
        weights = logistic_weights(pos, neg)
        ctx = replace(ctx, mahalanobis=MahalanobisState(m.layers, m.layer_indices, weights))
    for name in scorers:
        if name == "odin":
            continue
        if name == "mahalanobis" and ctx.mahalanobis is None or name == "vae" and ctx.vae is None:
            continue
        ctx.calibration_auc[name] = auc(combined_scores(name, snapshot, in_x, ctx, in_heads),
                                        combined_scores(name, snapshot, ood_x, ctx, None))
    return ctx
