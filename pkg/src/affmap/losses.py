"""Class-weighted BCE and asymmetric focal loss with analytic gradients.

Reductions use ``math.fsum`` so results do not depend on array layout and
scale exactly under power-of-two weight changes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError, DomainError, ShapeMismatch

DEFAULT_EPS = 1e-7
W_MIN, W_MAX = 0.05, 20.0


@dataclass(frozen=True)
class LossConfig:
    gamma_plus: float = 4.0
    gamma_minus: float = 1.0
    class_weights: tuple[float, ...] | None = None
    epsilon: float = DEFAULT_EPS

    def __post_init__(self):
        if self.gamma_plus < 0 or self.gamma_minus < 0:
            raise DataError("focusing exponents must be >= 0")
        if not 0 < self.epsilon < 1e-3:
            raise DataError("epsilon must lie in (0, 1e-3)")
        if self.class_weights is not None:
            w = tuple(float(x) for x in self.class_weights)
            if any(not (x > 0) for x in w):
                raise DataError("class weights must be positive")
            object.__setattr__(self, "class_weights", w)

    def weights(self, K: int) -> np.ndarray:
        if self.class_weights is None:
            return np.ones(K)
        if len(self.class_weights) != K:
            raise ShapeMismatch(f"{len(self.class_weights)} weights for {K} classes")
        return np.array(self.class_weights)


def _clamp(p, eps: float) -> np.ndarray:
    return np.clip(np.asarray(p, dtype=float), eps, 1.0 - eps)


def asl_term(p, y, gamma_plus: float = 4.0, gamma_minus: float = 1.0,
             eps: float = DEFAULT_EPS) -> np.ndarray:
    """Elementwise asymmetric loss, the negated log-likelihood form (>= 0)."""
    p = _clamp(p, eps)
    y = np.asarray(y)
    pos = -np.log(p) * (1.0 - p) ** gamma_plus
    neg = -np.log(1.0 - p) * p ** gamma_minus
    return np.where(y == 1, pos, neg)


def asl_term_grad(p, y, gamma_plus: float = 4.0, gamma_minus: float = 1.0,
                  eps: float = DEFAULT_EPS) -> np.ndarray:
    """d(asl_term)/dp; zero where the clamp is active."""
    raw = np.asarray(p, dtype=float)
    p = _clamp(raw, eps)
    y = np.asarray(y)
    q = 1.0 - p
    with np.errstate(divide="ignore", invalid="ignore"):
        pos = -(q ** gamma_plus) / p
        if gamma_plus > 0:
            pos = pos + gamma_plus * np.log(p) * q ** (gamma_plus - 1.0)
        neg = p ** gamma_minus / q
        if gamma_minus > 0:
            neg = neg - gamma_minus * np.log(q) * p ** (gamma_minus - 1.0)
    g = np.where(y == 1, pos, neg)
    inside = (raw >= eps) & (raw <= 1.0 - eps)
    return np.where(inside, g, 0.0)


def _check(P, Y) -> tuple[np.ndarray, np.ndarray]:
    P = np.asarray(P, dtype=float)
    Y = np.asarray(Y)
    if P.shape != Y.shape:
        raise ShapeMismatch(f"probabilities {P.shape} vs labels {Y.shape}")
    if P.ndim < 1 or P.shape[0] == 0:
        raise DomainError("no classes")
    if P.size == 0:
        raise DomainError("empty field (N = 0)")
    return P, Y


def _P(P):
    return getattr(P, "values", P)


def _reduce(terms: np.ndarray, w: np.ndarray) -> float:
    K = terms.shape[0]
    N = terms[0].size
    weighted = terms * w.reshape((K,) + (1,) * (terms.ndim - 1))
    return math.fsum(weighted.ravel()) / (N * K)


def asym_loss(P, Y, cfg: LossConfig = LossConfig()) -> float:
    """Mean over pixels of the class-weighted average asymmetric loss."""
    P, Y = _check(_P(P), _P(Y))
    terms = asl_term(P, Y, cfg.gamma_plus, cfg.gamma_minus, cfg.epsilon)
    return _reduce(terms, cfg.weights(P.shape[0]))


def asym_loss_grad(P, Y, cfg: LossConfig = LossConfig()) -> np.ndarray:
    P, Y = _check(_P(P), _P(Y))
    K = P.shape[0]
    N = P[0].size
    w = cfg.weights(K).reshape((K,) + (1,) * (P.ndim - 1))
    return asl_term_grad(P, Y, cfg.gamma_plus, cfg.gamma_minus, cfg.epsilon) * w / (N * K)


def weighted_bce(P, Y, weights: Sequence[float] | None = None, eps: float = DEFAULT_EPS) -> float:
    P, Y = _check(_P(P), _P(Y))
    p = _clamp(P, eps)
    terms = np.where(Y == 1, -np.log(p), -np.log(1.0 - p))
    w = np.ones(P.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (P.shape[0],):
        raise ShapeMismatch(f"{w.shape} weights for {P.shape[0]} classes")
    return _reduce(terms, w)


def class_weights_from_counts(positive_counts, negative_counts,
                              w_min: float = W_MIN, w_max: float = W_MAX) -> np.ndarray:
    """Balanced-frequency weights ``(neg + pos) / (2 pos)``, clamped."""
    pos = np.asarray(positive_counts, dtype=float)
    neg = np.asarray(negative_counts, dtype=float)
    if pos.shape != neg.shape:
        raise ShapeMismatch("count arrays differ in shape")
    if np.any(pos < 0) or np.any(neg < 0):
        raise DomainError("counts must be >= 0")
    with np.errstate(divide="ignore", invalid="ignore"):
        w = (neg + pos) / (2.0 * pos)
    w = np.where(pos == 0, w_max, w)
    return np.clip(w, w_min, w_max)


def counts_from_labels(Y) -> tuple[np.ndarray, np.ndarray]:
    Y = np.asarray(_P(Y))
    K = Y.shape[0]
    flat = Y.reshape(K, -1)
    pos = flat.sum(axis=1).astype(np.int64)
    return pos, flat.shape[1] - pos
