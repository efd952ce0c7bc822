"""Detection losses with analytic gradients.

All functions return ``(loss, grad...)`` with gradients taken w.r.t. the
inputs they are given, so the detector can chain them by hand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .detection import Box, Detection, GaussianBox
from .schedule import Mode, blended_confidence

VAR_FLOOR = 1e-3
_EPS = 1e-12


@dataclass(frozen=True)
class LossBreakdown:
    l_box: float = 0.0
    l_obj: float = 0.0
    l_cl: float = 0.0
    l_det: float = 0.0
    l_cons: float = 0.0
    gamma: float = 0.0
    l_total: float = 0.0


@dataclass(frozen=True)
class MatchedPair:
    pred: GaussianBox
    target: Box
    class_id: int
    objectness: float = 1.0
    class_scores: Sequence[float] = ()


def gaussian_box_loss(mu, sigma, y, raw_pdf: bool = False, var_floor: float = VAR_FLOOR):
    """``mean_i(1 - mean_k p(y_ik | mu_ik, sigma_ik))`` and its gradients.

    ``mu``, ``sigma`` and ``y`` are ``(N, 4)`` arrays; ``sigma`` holds variances.
    With ``raw_pdf=False`` the likelihood is the unnormalised kernel
    ``exp(-(y - mu)^2 / (2 sigma))`` so the loss stays in [0, 1). With
    ``raw_pdf=True`` it is the normal density clamped to [0, 1]; clamped
    entries carry no gradient. Variances below ``var_floor`` are floored
    and receive no gradient.

    Returns ``(loss, dloss/dmu, dloss/dsigma)``.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    y = np.asarray(y, dtype=float)
    n = mu.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(mu), np.zeros_like(sigma)

    s = np.maximum(sigma, var_floor)
    err = y - mu
    sq = err * err
    k = np.exp(-sq / (2.0 * s))
    if raw_pdf:
        p = k / np.sqrt(2.0 * math.pi * s)
        dp_dmu = p * err / s
        dp_ds = p * (sq / (2.0 * s * s) - 0.5 / s)
        live = p < 1.0
        p = np.minimum(p, 1.0)
        dp_dmu = np.where(live, dp_dmu, 0.0)
        dp_ds = np.where(live, dp_ds, 0.0)
    else:
        p = k
        dp_dmu = k * err / s
        dp_ds = k * sq / (2.0 * s * s)

    loss = float(np.mean(1.0 - p.mean(axis=1)))
    scale = -1.0 / p.size
    dmu = scale * dp_dmu
    dsigma = np.where(sigma > var_floor, scale * dp_ds, 0.0)
    return loss, dmu, dsigma


def box_loss_from_pairs(pairs: Iterable[MatchedPair], raw_pdf: bool = False, var_floor: float = VAR_FLOOR):
    """Convenience wrapper over :func:`gaussian_box_loss` for object pairs."""
    pairs = list(pairs)
    mu = np.array([p.pred.mu.as_tuple() for p in pairs], dtype=float).reshape(-1, 4)
    sigma = np.array([p.pred.sigma for p in pairs], dtype=float).reshape(-1, 4)
    y = np.array([p.target.as_tuple() for p in pairs], dtype=float).reshape(-1, 4)
    return gaussian_box_loss(mu, sigma, y, raw_pdf=raw_pdf, var_floor=var_floor)


def objectness_loss(pred, target):
    """Mean binary cross-entropy over cells; gradient w.r.t. the probabilities."""
    p = np.clip(np.asarray(pred, dtype=float), _EPS, 1.0 - _EPS)
    y = np.asarray(target, dtype=float)
    if p.size == 0:
        return 0.0, np.zeros_like(p)
    loss = -np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    grad = (p - y) / (p * (1.0 - p)) / p.size
    return float(loss), grad


def bce_with_logits(logits, target):
    """Mean BCE computed from logits; gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=float)
    y = np.asarray(target, dtype=float)
    if z.size == 0:
        return 0.0, np.zeros_like(z)
    loss = np.mean(np.logaddexp(0.0, z) - y * z)
    grad = (sigmoid(z) - y) / z.size
    return float(loss), grad


def one_hot(class_ids, num_classes: int) -> np.ndarray:
    ids = np.asarray(class_ids, dtype=int).reshape(-1)
    out = np.zeros((ids.size, num_classes))
    out[np.arange(ids.size), ids] = 1.0
    return out


def classification_loss(pred_cls, target):
    """One-vs-all BCE between ``(M, K)`` class probabilities and class ids."""
    p = np.asarray(pred_cls, dtype=float)
    if p.ndim == 1:
        p = p.reshape(1, -1)
    if p.shape[0] == 0:
        return 0.0, np.zeros_like(p)
    return objectness_loss(p, one_hot(target, p.shape[1]))


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def consistency_weight(
    combined: Sequence[Detection],
    c_th_gamma: float = 0.5,
    delta: float = 0.0,
    mode: Mode | str = Mode.DET_TO_COMB_DELTA,
) -> float:
    """Fraction of merged pseudo detections whose blended confidence reaches ``c_th_gamma``."""
    if not combined:
        return 0.0
    mode = Mode(mode)
    hits = sum(1 for d in combined if blended_confidence(d, delta, mode) >= c_th_gamma)
    return hits / len(combined)


def total_loss(l_det: float, l_cons: float, gamma: float) -> float:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    return l_det + gamma * l_cons
