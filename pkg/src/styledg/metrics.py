"""Evaluation-protocol primitives: rank-based AUC, the paired t-test with a
series/continued-fraction Student-t CDF, and multi-label stratified k-fold
splitting."""

from __future__ import annotations

from dataclasses import dataclass
from math import exp, lgamma, log
from typing import List, Optional

import numpy as np


# -- ROC AUC ------------------------------------------------------------------


def _tied_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, labels) -> Optional[float]:
    """Probability that a random positive outranks a random negative.

    Ties count one half (Mann-Whitney convention).  Returns ``None`` when
    only one class is present, so callers can exclude the class from means.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _tied_ranks(s)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# -- Student-t machinery -----------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    # modified Lentz continued fraction for the incomplete beta
    max_iter, tiny, eps = 300, 1e-300, 3e-14
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise FloatingPointError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    ln_front = lgamma(a + b) - lgamma(a) - lgamma(b) + a * log(x) + b * log(1.0 - x)
    front = exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, df: int) -> float:
    """Two-tailed tail probability of Student's t with ``df`` degrees of freedom."""
    if df < 1:
        raise ValueError("df must be >= 1")
    if not np.isfinite(t):
        return 0.0
    return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))


@dataclass
class TTestResult:
    t: float
    p_value: float
    df: int
    degenerate: bool = False


def paired_t_test(a, b) -> TTestResult:
    """Two-tailed paired t-test on equal-length samples.

    Zero-variance differences are reported with ``degenerate=True`` and
    p=1 by convention instead of raising, so sweeps never crash.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be equal-length vectors")
    k = len(a)
    if k < 2:
        raise ValueError("need at least two pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    df = k - 1
    if sd == 0.0:
        t = 0.0 if mean == 0.0 else float(np.sign(mean)) * float("inf")
        return TTestResult(t=t, p_value=1.0, df=df, degenerate=True)
    t = mean / (sd / np.sqrt(k))
    return TTestResult(t=float(t), p_value=student_t_two_sided_p(float(t), df), df=df)


# -- multi-label stratified k-fold ------------------------------------------------------


def stratified_kfold(labels, k: int, seed: int = 0) -> List[List[int]]:
    """Iterative stratification of a [B,N] binary label matrix into k folds.

    Greedy phase: repeatedly take the label with the fewest remaining
    positives and assign its samples to the fold wanting that label most;
    ties fall back to greatest total remaining desire, then a random draw.
    Label-free samples fill folds up to even sizes.  A bounded swap
    refinement then irons out the residual per-label imbalance the greedy
    leaves on dense label matrices.
    """
    y = np.asarray(labels)
    if y.ndim != 2 or not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be a [B,N] binary matrix")
    n_samples, n_labels = y.shape
    if k < 2:
        raise ValueError("k must be >= 2")
    if n_samples < k:
        raise ValueError(f"cannot split {n_samples} samples into {k} folds")

    rng = np.random.default_rng(seed)
    desire = np.tile(y.sum(axis=0) / k, (k, 1)).astype(np.float64)  # [k, N]
    capacity = np.full(k, n_samples / k, dtype=np.float64)
    fold_of = np.full(n_samples, -1, dtype=np.intp)

    def pick_fold(scores: np.ndarray) -> int:
        best = np.flatnonzero(scores == scores.max())
        if len(best) > 1:
            totals = capacity[best]
            best = best[np.flatnonzero(totals == totals.max())]
        if len(best) > 1:
            return int(rng.choice(best))
        return int(best[0])

    while True:
        unassigned = fold_of == -1
        remaining_pos = (y[unassigned] == 1).sum(axis=0)
        candidates = np.flatnonzero(remaining_pos > 0)
        if len(candidates) == 0:
            break
        label = candidates[np.argmin(remaining_pos[candidates])]
        samples = np.flatnonzero(unassigned & (y[:, label] == 1))
        rng.shuffle(samples)
        for s in samples:
            f = pick_fold(desire[:, label])
            fold_of[s] = f
            desire[f, y[s] == 1] -= 1.0
            capacity[f] -= 1.0

    for s in rng.permutation(np.flatnonzero(fold_of == -1)):
        best = np.flatnonzero(capacity == capacity.max())
        f = int(rng.choice(best)) if len(best) > 1 else int(best[0])
        fold_of[s] = f
        capacity[f] -= 1.0

    if n_labels > 0:
        _refine_by_swaps(y, fold_of, k, rng)
    return [sorted(np.flatnonzero(fold_of == f).tolist()) for f in range(k)]


def _refine_by_swaps(y: np.ndarray, fold_of: np.ndarray, k: int,
                     rng: np.random.Generator, max_rounds: int = 400,
                     candidate_cap: int = 48) -> None:
    """Hill-climb on squared per-fold label-count error via same-size swaps."""
    n_labels = y.shape[1]
    counts = np.zeros((k, n_labels))
    for f in range(k):
        counts[f] = y[fold_of == f].sum(axis=0)
    targets = y.sum(axis=0) / k

    def delta_for(f_hi: int, f_lo: int, d: np.ndarray) -> float:
        # swap moves label vector difference d from f_hi to f_lo
        hi, lo = counts[f_hi], counts[f_lo]
        return float(
            ((hi - d - targets) ** 2 - (hi - targets) ** 2
             + (lo + d - targets) ** 2 - (lo - targets) ** 2).sum())

    for _ in range(max_rounds):
        spreads = counts.max(axis=0) - counts.min(axis=0)
        order = np.argsort(spreads)[::-1]
        improved = False
        for j in order[:3]:
            if spreads[j] <= 1:
                break
            f_hi = int(np.argmax(counts[:, j]))
            f_lo = int(np.argmin(counts[:, j]))
            donors = np.flatnonzero((fold_of == f_hi) & (y[:, j] == 1))
            takers = np.flatnonzero((fold_of == f_lo) & (y[:, j] == 0))
            if len(donors) == 0 or len(takers) == 0:
                continue
            if len(donors) > candidate_cap:
                donors = rng.choice(donors, size=candidate_cap, replace=False)
            if len(takers) > candidate_cap:
                takers = rng.choice(takers, size=candidate_cap, replace=False)
            best_delta, best_pair = -1e-9, None
            for s1 in donors:
                for s2 in takers:
                    d = y[s1] - y[s2]
                    delta = delta_for(f_hi, f_lo, d)
                    if delta < best_delta:
                        best_delta, best_pair = delta, (s1, s2, d)
            if best_pair is not None:
                s1, s2, d = best_pair
                fold_of[s1], fold_of[s2] = f_lo, f_hi
                counts[f_hi] -= d
                counts[f_lo] += d
                improved = True
                break
        if not improved:
            break
