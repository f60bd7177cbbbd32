"""Training objectives: focal classification loss, stop-gradient symmetric
KLD, feature/prediction consistency terms, and their combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

# probabilities are clipped here before any log
PROB_FLOOR = 1e-7


@dataclass
class FocalConfig:
    alpha_t: float = 0.25
    gamma_prime: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha_t < 1.0:
            raise ValueError("alpha_t must lie in (0, 1)")
        if self.gamma_prime < 0:
            raise ValueError("gamma_prime must be >= 0")


@dataclass
class LossBundle:
    l_cls: float
    l_ccr: float
    l_pdr: float
    l_cons: float
    l_total: float
    l_phi: float


def _clamped(probs: Tensor) -> Tensor:
    return T.clamp(probs, PROB_FLOOR, 1.0 - PROB_FLOOR)


def focal_loss(probs: Tensor, labels, cfg: FocalConfig) -> Tensor:
    """Mean focal loss over every (sample, class) element.

    ``labels`` is a binary array matching ``probs``; hard zeros/ones in
    ``probs`` are clipped to the probability floor first.
    """
    lab = np.asarray(labels, dtype=np.float64)
    if lab.shape != probs.shape:
        raise ValueError(f"labels shape {lab.shape} != probs shape {probs.shape}")
    if not np.all((lab == 0) | (lab == 1)):
        raise ValueError("labels must be binary")
    p = _clamped(probs)
    pos = Tensor(lab)
    neg = Tensor(1.0 - lab)
    p_t = T.add(T.mul(p, pos), T.mul(1.0 - p, neg))
    alpha_t = Tensor(cfg.alpha_t * lab + (1.0 - cfg.alpha_t) * (1.0 - lab))
    modulator = T.power(1.0 - p_t, cfg.gamma_prime)
    elems = T.mul(alpha_t, T.mul(modulator, T.log(p_t)))
    return T.neg(T.reduce_mean(elems))


def _bernoulli_kl(a: Tensor, b: Tensor) -> Tensor:
    # KL(a || b) per coordinate, treating each as a Bernoulli parameter
    return T.add(
        T.mul(a, T.log(T.div(a, b))),
        T.mul(1.0 - a, T.log(T.div(1.0 - a, 1.0 - b))),
    )


def kld_sym(p1: Tensor, p2: Tensor) -> Tensor:
    """Symmetric per-coordinate Bernoulli KLD with stop-gradient.

    Each half freezes one side: gradients reach ``p2`` only through
    KL(stop(p1) || p2) and ``p1`` only through KL(stop(p2) || p1).  The
    value itself is symmetric in its arguments.
    """
    if p1.shape != p2.shape:
        raise ValueError(f"shape mismatch: {p1.shape} vs {p2.shape}")
    c1, c2 = _clamped(p1), _clamped(p2)
    s1, s2 = T.stop_gradient(c1), T.stop_gradient(c2)
    half_sum = T.add(_bernoulli_kl(s1, c2), _bernoulli_kl(s2, c1))
    return T.reduce_mean(T.mul(half_sum, 0.5))


def content_consistency(f_s: Tensor, f: Tensor) -> Tensor:
    """Mean squared feature difference between the two branches.

    Elementwise mean rather than a per-instance sum: summed over a few
    thousand map entries this term dwarfs the classification loss by
    orders of magnitude and training from scratch collapses the features
    to erase it.  Gradients flow into both branches.
    """
    if f_s.shape != f.shape:
        raise ValueError(f"shape mismatch: {f_s.shape} vs {f.shape}")
    diff = T.sub(f_s, f)
    return T.reduce_mean(T.mul(diff, diff))


def pdr_loss(p_s: Tensor, p: Tensor) -> Tensor:
    """Predictive-distribution regularizer; exactly ``kld_sym(p_s, p)``."""
    return kld_sym(p_s, p)


def combine(l_cls: float, l_ccr: float, l_pdr: float, l_phi: float) -> LossBundle:
    """Assemble the reported bundle: consistency is the mean of its two
    parts, the total adds it to the classification loss."""
    vals = (l_cls, l_ccr, l_pdr, l_phi)
    if not all(np.isfinite(v) for v in vals):
        raise ValueError(f"non-finite loss values: {vals}")
    l_cons = (l_ccr + l_pdr) / 2.0
    return LossBundle(
        l_cls=l_cls, l_ccr=l_ccr, l_pdr=l_pdr,
        l_cons=l_cons, l_total=l_cls + l_cons, l_phi=l_phi,
    )
