"""Losses, the EWC/MEIL regularizers, Fisher estimation and Adam."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from nerfcl.errors import DomainError, TrainingError
from nerfcl.field import FieldParams

EWC_LAMBDA = 1e5
CHARBONNIER_EPS = 1e-3
FAST_GROUPS = ("grid", "emb_app", "emb_geo")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "nerf"
    ewc_lambda: float = EWC_LAMBDA
    charbonnier_eps: float = CHARBONNIER_EPS

    def __post_init__(self):
        if self.kind not in ("nerf", "ewc", "meil"):
            raise DomainError(f"unknown loss kind {self.kind!r}")
        if self.ewc_lambda < 0:
            raise DomainError("ewc_lambda must be >= 0")
        if not self.charbonnier_eps > 0:
            raise DomainError("charbonnier_eps must be > 0")


def nerf_loss(pred, target) -> float:
    """Mean squared error over every ray and channel."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise DomainError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.astype(np.float64) - target
    return float(np.mean(diff * diff))


def nerf_loss_grad(pred, target) -> np.ndarray:
    return (2.0 / pred.size) * (pred - target.astype(pred.dtype))


# ---------------------------------------------------------------------------
# EWC


@dataclass
class FisherDiag:
    """Diagonal Fisher values and the parameter snapshot they were taken at."""

    values: dict
    reference: dict

    def __post_init__(self):
        for name, v in self.values.items():
            if np.any(v < 0):
                raise DomainError(f"negative Fisher entry in {name}")

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self.values.values()))


def _aligned(params: FieldParams, fisher: FisherDiag):
    """Yield (name, current slice, fisher, reference); new embedding rows are skipped."""
    if list(params.arrays) != list(fisher.values):
        raise DomainError("Fisher layout does not match parameter layout")
    for name, cur in params.arrays.items():
        f, ref = fisher.values[name], fisher.reference[name]
        if name.startswith("emb_"):
            if cur.shape[0] < f.shape[0] or cur.shape[1:] != f.shape[1:]:
                raise DomainError(f"{name}: embedding table shrank since the Fisher snapshot")
            cur = cur[: f.shape[0]]
        elif cur.shape != f.shape:
            raise DomainError(f"{name}: shape {cur.shape} does not match Fisher {f.shape}")
        yield name, cur, f, ref


def ewc_penalty(params: FieldParams, fisher: FisherDiag, lam: float) -> float:
    total = 0.0
    for _, cur, f, ref in _aligned(params, fisher):
        d = cur.astype(np.float64) - ref
        total += float(np.sum(f * d * d))
    return 0.5 * lam * total


def ewc_loss(base: float, params: FieldParams, fisher: FisherDiag, lam: float) -> float:
    if lam == 0:
        list(_aligned(params, fisher))
        return base
    return base + ewc_penalty(params, fisher, lam)


def ewc_grad(params: FieldParams, fisher: FisherDiag, lam: float) -> dict:
    grads = params.zeros_like()
    for name, cur, f, ref in _aligned(params, fisher):
        g = (lam * f * (cur.astype(np.float64) - ref)).astype(cur.dtype)
        grads[name][: g.shape[0]] = g
    return grads


def estimate_fisher(params: FieldParams, batch_loss_grad, n_batches: int) -> FisherDiag:
    """Average squared gradient of the data loss over ``n_batches`` batches.

    ``batch_loss_grad(params, i)`` returns the gradient dict of the batch-mean
    loss on batch ``i``. Squares are summed in sorted order, so the result does
    not depend on batch order.
    """
    if n_batches < 1:
        raise DomainError("n_batches must be >= 1")
    squares = {name: [] for name in params.arrays}
    for i in range(n_batches):
        grads = batch_loss_grad(params, i)
        for name in params.arrays:
            g = grads[name].astype(np.float64)
            squares[name].append(g * g)
    values = {}
    for name, sq in squares.items():
        stack = np.sort(np.stack(sq), axis=0)
        values[name] = stack.sum(axis=0) / n_batches
    reference = {k: v.astype(np.float64).copy() for k, v in params.arrays.items()}
    return FisherDiag(values, reference)


# ---------------------------------------------------------------------------
# MEIL


def charbonnier(x, eps: float = CHARBONNIER_EPS):
    if not eps > 0:
        raise DomainError("eps must be > 0")
    return np.sqrt(np.square(x) + eps * eps)


def meil_lambda(r: float) -> float:
    """Cosine ramp from 0 at the start of a timestep to 1 at its end."""
    if not 0 <= r <= 1:
        raise DomainError(f"progress must lie in [0, 1], got {r}")
    return (math.cos(math.pi * (1 + r)) + 1) / 2


def meil_loss(new_pred, new_target, old_pred=None, old_teacher=None, r: float = 0.0,
              eps: float = CHARBONNIER_EPS):
    """MSE on new rays plus the ramped Charbonnier distillation term on old rays.

    The Charbonnier penalty is applied per channel and summed over channels,
    then averaged over old rays. Teacher colors are constants. Returns
    ``(loss, d_new_pred, d_old_pred)``; ``d_old_pred`` is None without old rays.
    """
    loss = nerf_loss(new_pred, new_target)
    d_new = nerf_loss_grad(new_pred, new_target)
    if old_pred is None or len(old_pred) == 0:
        return loss, d_new, None
    lam = meil_lambda(r)
    resid = old_teacher.astype(np.float64) - old_pred
    rho = charbonnier(resid, eps)
    n_old = old_pred.shape[0]
    loss += lam * float(rho.sum()) / n_old
    # d rho / d pred = -(teacher - pred) / rho
    d_old = (lam / n_old * (-resid / rho)).astype(old_pred.dtype)
    return loss, d_new, d_old


# ---------------------------------------------------------------------------
# Adam


class NonFiniteGradient(TrainingError):
    pass


@dataclass
class OptimState:
    m: dict
    v: dict
    lr: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15
    skipped: int = 0

    def meta(self) -> dict:
        return {"step": self.step, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "skipped": self.skipped}

    @classmethod
    def from_meta(cls, meta, m, v) -> "OptimState":
        return cls(m=m, v=v, lr=dict(meta["lr"]), step=meta["step"], beta1=meta["beta1"],
                   beta2=meta["beta2"], eps=meta["eps"], skipped=meta.get("skipped", 0))


def init_optim(params: FieldParams, lr_fast: float = 1e-2, lr_slow: float = 1e-3,
               beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-15) -> OptimState:
    """Grid tables and embeddings use ``lr_fast``; decoder weights ``lr_slow``."""
    lr = {k: (lr_fast if k in FAST_GROUPS else lr_slow) for k in params.arrays}
    return OptimState(params.zeros_like(), params.zeros_like(), lr, 0, beta1, beta2, eps)


def _sync_shapes(state: OptimState, params: FieldParams):
    # embedding tables can grow between steps; new rows start with zero moments
    for name, arr in params.arrays.items():
        for moments in (state.m, state.v):
            cur = moments.get(name)
            if cur is None or cur.shape != arr.shape:
                grown = np.zeros_like(arr)
                if cur is not None:
                    grown[: cur.shape[0]] = cur
                moments[name] = grown
        state.lr.setdefault(name, state.lr.get("sigma_w1", 1e-3))


def adam_step(state: OptimState, params: FieldParams, grads: dict):
    """One bias-corrected Adam update, in place. Raises NonFiniteGradient untouched."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in {name}")
    _sync_shapes(state, params)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, p in params.arrays.items():
        g = grads[name].astype(p.dtype, copy=False)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step_size = state.lr[name] / c1
        p -= (step_size * m / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params, state
