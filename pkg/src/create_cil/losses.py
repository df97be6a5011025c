"""Training objective for the auto-encoder classifier.

Errors enter every softmax as logits ``-alpha * eps``.  The confusion
weights of the separation loss are treated as constants within a step.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import Tensor, ops


@dataclass
class LossConfig:
    alpha: float = 0.1
    tau_d: float = 2.0
    tau_r: float = 0.1
    beta: float = 2.0
    lam: float = 1.0
    normalize_latents: bool = False
    # whether the anchor itself sits in the contrastive denominator
    include_anchor: bool = False

    def __post_init__(self):
        for name in ("alpha", "tau_d", "tau_r", "beta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lam < 0:
            raise ValueError(f"lam must be nonnegative, got {self.lam}")


class LossError(FloatingPointError):
    pass


def _zero() -> Tensor:
    return Tensor(0.0)


# -- classification -------------------------------------------------------------


def ce_loss(p: Tensor, y: Sequence[int] | np.ndarray) -> Tensor:
    """Mean of -log p[n, y_n] over the batch."""
    y = np.asarray(y, dtype=np.intp)
    target = ops.pick(p, y)
    if np.any(target.data < 1e-300):
        raise LossError("ce_loss: zero probability at a target class")
    return ops.scale(ops.mean(ops.log(target)), -1.0)


def cross_entropy_logits(logits: Tensor, y: Sequence[int] | np.ndarray) -> Tensor:
    """Same value as ``ce_loss(softmax(logits), y)`` through a log-softmax."""
    y = np.asarray(y, dtype=np.intp)
    return ops.scale(ops.mean(ops.pick(ops.log_softmax(logits, axis=1), y)), -1.0)


def ce_from_errors(eps: Tensor, y, alpha: float) -> Tensor:
    return cross_entropy_logits(ops.scale(eps, -alpha), y)


# -- distillation -----------------------------------------------------------------


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def kd_loss_logits(new_logits: Tensor, old_logits, tau: float) -> Tensor:
    """Batch-mean cross-entropy from softmax(old/tau) to softmax(new/tau)."""
    old = old_logits.data if isinstance(old_logits, Tensor) else np.asarray(old_logits, dtype=np.float64)
    if new_logits.shape != old.shape:
        raise ValueError(f"kd_loss: new slice {new_logits.shape} vs old slice {old.shape}")
    if new_logits.ndim != 2 or new_logits.shape[1] == 0:
        return _zero()
    target = Tensor(_softmax_rows(old / tau))
    logp = ops.log_softmax(ops.scale(new_logits, 1.0 / tau), axis=1)
    per_sample = ops.sum(ops.mul(target, logp), axis=1)
    return ops.scale(ops.mean(per_sample), -1.0)


def kd_loss(eps_new: Tensor, eps_old, alpha: float, tau_d: float) -> Tensor:
    """Distillation over the old-class error columns.

    Both slices must cover exactly the classes of the previous phase;
    ``eps_old`` comes from the frozen snapshot and carries no gradient.
    """
    if eps_new.ndim == 2 and eps_new.shape[1] == 0:
        return _zero()
    old = eps_old.data if isinstance(eps_old, Tensor) else np.asarray(eps_old, dtype=np.float64)
    return kd_loss_logits(ops.scale(eps_new, -alpha), -alpha * old, tau_d)


# -- confusion ------------------------------------------------------------------------


def confusion_score(eps_row) -> float:
    """Gap between the two smallest errors relative to the full error range.

    Returns 0 (maximal confusion) when every entry is equal.
    """
    e = np.asarray(eps_row, dtype=np.float64).ravel()
    if e.size < 2:
        raise ValueError(f"confusion_score needs at least 2 classes, got {e.size}")
    if not np.all(np.isfinite(e)):
        raise ValueError("confusion_score: non-finite errors")
    two = np.partition(e, 1)[:2]
    spread = e.max() - two[0]
    if spread <= 0:
        return 0.0
    return float(abs(two[1] - two[0]) / spread)


def confusion_scores(eps) -> np.ndarray:
    """Row-wise :func:`confusion_score` for an (n, C) error matrix."""
    e = eps.data if isinstance(eps, Tensor) else np.asarray(eps, dtype=np.float64)
    if e.ndim != 2 or e.shape[1] < 2:
        raise ValueError(f"confusion_scores needs an (n, C>=2) matrix, got {e.shape}")
    two = np.partition(e, 1, axis=1)[:, :2]
    spread = e.max(axis=1) - two[:, 0]
    gap = np.abs(two[:, 1] - two[:, 0])
    out = np.zeros(e.shape[0])
    ok = spread > 0
    out[ok] = gap[ok] / spread[ok]
    return out


def confusion_weight(s, beta: float):
    """1 + exp(-beta * s); lies in (1, 2] for s >= 0."""
    s_arr = np.asarray(s, dtype=np.float64)
    if np.any(s_arr < 0):
        raise ValueError("confusion_weight: scores must be nonnegative")
    w = 1.0 + np.exp(-beta * s_arr)
    return float(w) if w.ndim == 0 else w


# -- latent separation ------------------------------------------------------------------


def _unit_rows(z: Tensor) -> Tensor:
    return ops.scale_rows(z, ops.reciprocal(ops.norm(z, axis=1)))


def cr_loss(
    latents: Sequence[Tensor],
    labels: Sequence[int] | np.ndarray,
    eps=None,
    config: LossConfig | None = None,
    weights=None,
) -> Tensor:
    """Confusion-weighted supervised contrastive loss in class subspaces.

    ``latents[c]`` holds the codes of every batch sample under class c's
    encoder.  Each sample is an anchor in its own class's subspace; its
    positives are the other samples of that class and its negatives the
    samples of other classes.  The weighted per-anchor terms are summed
    class by class and divided by the batch size; an anchor without
    positives contributes 0.

    Weights come from ``weights`` when given, otherwise from the confusion
    scores of ``eps`` (rows aligned with the batch); with neither, or with
    a single-class ``eps`` where confusion is undefined, every weight is 1.
    """
    config = config or LossConfig()
    labels = np.asarray(labels, dtype=np.intp)
    n = labels.shape[0]
    if n == 0:
        raise ValueError("cr_loss: empty batch")
    if weights is None:
        if eps is None or np.shape(eps)[1] < 2:
            weights = np.ones(n)
        else:
            weights = confusion_weight(confusion_scores(eps), config.beta)
    weights = np.asarray(weights, dtype=np.float64).reshape(n)

    total = None
    for c in np.unique(labels):
        anchors = np.flatnonzero(labels == c)
        if anchors.size < 2:
            continue
        z = latents[int(c)]
        if z.shape[0] != n:
            raise ValueError(f"cr_loss: latents for class {c} have {z.shape[0]} rows, batch has {n}")
        if config.normalize_latents:
            z = _unit_rows(z)
        za = ops.index_select(z, anchors, axis=0)
        sim = ops.scale(ops.matmul(za, ops.transpose(z)), 1.0 / config.tau_r)
        denom_mask = np.ones((anchors.size, n), dtype=bool)
        if not config.include_anchor:
            denom_mask[np.arange(anchors.size), anchors] = False
        logp = ops.log_softmax(sim, axis=1, mask=denom_mask)
        pos = (labels[None, :] == c) & denom_mask
        pos[np.arange(anchors.size), anchors] = False
        coef = pos / pos.sum(axis=1, keepdims=True)
        coef *= weights[anchors, None] / n
        term = ops.scale(ops.sum(ops.mul(logp, Tensor(coef))), -1.0)
        total = term if total is None else ops.add(total, term)
    return _zero() if total is None else total


def cst_loss(latents: Sequence[Tensor], labels, config: LossConfig | None = None) -> Tensor:
    """Unweighted separation loss (all confusion weights equal to 1)."""
    return cr_loss(latents, labels, None, config, weights=np.ones(len(labels)))


def total_loss(ce: Tensor, kd: Tensor | None, cr: Tensor | None, lam: float) -> Tensor:
    """CE + KD + lam * CR; a missing part counts as zero."""
    out = ce
    if kd is not None:
        out = ops.add(out, kd)
    if cr is not None and lam != 0:
        out = ops.add(out, ops.scale(cr, lam))
    return out
