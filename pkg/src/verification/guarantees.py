"""
Exact probability calculus behind the ownership decision.

A model that never learned the watermark labels each key sample y^w with probability
p = 1/K, so its hit count over n samples is Binomial(n, 1/K). The tails below are
summed in log space, smallest term first.
"""

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Sequence

import numpy as np
from scipy.special import gammaln

from .ownership import DEFAULT_THRESHOLD

NEGLIGIBLE = 1e-30
MAX_KEY_SIZE = 1_000_000


def tail_start(n: int, threshold: float) -> int:
    """Smallest hit count k with k/n >= T, computed exactly (ceil(nT); nT itself when integral)."""
    return math.ceil(Fraction(str(threshold)) * n)


def _validate(n: int, class_count: int, threshold: float) -> None:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if class_count < 2:
        raise ValueError(f"class count K must be >= 2, got {class_count}")
    if not 0 <= threshold <= 1:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")


def _log_tail(n: int, class_count: int, threshold: float) -> float:
    """Natural log of P(X >= ceil(nT)), X ~ Binomial(n, 1/K); -inf for an empty tail."""
    _validate(n, class_count, threshold)
    start = tail_start(n, threshold)
    if start <= 0:
        return 0.0
    if start > n:
        return -math.inf

    k = np.arange(start, n + 1, dtype=np.float64)
    p = 1.0 / class_count
    log_terms = (
        gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)
        + k * math.log(p) + (n - k) * math.log1p(-p)
    )
    shift = float(log_terms.max())
    total = math.fsum(np.sort(np.exp(log_terms - shift)))
    return min(0.0, shift + math.log(total))


def false_positive_tail(n: int, class_count: int, threshold: float = DEFAULT_THRESHOLD) -> float:
    """
    Probability that a non-watermarked model reaches WSR >= T on n key samples.

    Args:
        n: Key sample count
        class_count: K, number of classes (chance hit rate 1/K)
        threshold: Ownership threshold T

    Returns:
        P(X >= ceil(nT)) for X ~ Binomial(n, 1/K)
    """
    return math.exp(_log_tail(n, class_count, threshold))


def false_positive_log10_tail(n: int, class_count: int, threshold: float = DEFAULT_THRESHOLD) -> float:
    return _log_tail(n, class_count, threshold) / math.log(10)


def false_trigger_tail(n: int, class_count: int, threshold: float = DEFAULT_THRESHOLD) -> float:
    """
    Probability that n arbitrary samples built without the secret make the watermarked
    model answer y^w often enough to claim it. Each hit has probability 1/K.
    """
    return false_positive_tail(n, class_count, threshold)


def minimum_key_size(class_count: int, threshold: float = DEFAULT_THRESHOLD, alpha: float = 1e-6) -> int:
    """Smallest n whose false-positive tail is at most alpha."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    if Fraction(str(threshold)) <= Fraction(1, class_count):
        raise ValueError(
            f"threshold {threshold} does not exceed the chance rate 1/{class_count}; no key size suffices"
        )
    log_alpha = math.log(alpha)
    for n in range(1, MAX_KEY_SIZE + 1):
        if _log_tail(n, class_count, threshold) <= log_alpha:
            return n
    raise ValueError(f"no key size up to {MAX_KEY_SIZE} reaches alpha={alpha}")


@dataclass(frozen=True)
class CrackProbabilities:
    """Chance of guessing the source-class combination (r1), the target label (r2), and both (r)."""
    class_count: int
    r1: Fraction
    r2: Fraction
    r: Fraction

    def as_floats(self) -> Dict[str, float]:
        return {"r1": float(self.r1), "r2": float(self.r2), "r": float(self.r)}


def crack_probabilities(class_count: int) -> CrackProbabilities:
    if class_count < 4:
        raise ValueError(f"need at least 4 classes to pick source classes, got K={class_count}")
    r1 = Fraction(1, math.comb(class_count, 4))
    r2 = Fraction(1, class_count)
    return CrackProbabilities(class_count=class_count, r1=r1, r2=r2, r=r1 * r2)


def format_probability(log10_value: float) -> str:
    """Decimal for ordinary values; log10 plus '≈0' for anything below 1e-30."""
    if log10_value == -math.inf:
        return "0"
    if log10_value < math.log10(NEGLIGIBLE):
        return f"≈0 (10^{log10_value:.1f})"
    return f"{10 ** log10_value:.6g}"


def guarantees_table(ns: Sequence[int],
                     class_counts: Sequence[int],
                     thresholds: Sequence[float]) -> List[Dict]:
    """
    One row per (n, K, T) with the false-positive and crack probabilities.

    The false-trigger tail follows the same law, so it has no column of its own.
    """
    rows = []
    for class_count in class_counts:
        crack = crack_probabilities(class_count) if class_count >= 4 else None
        for n in ns:
            for threshold in thresholds:
                log10_tail = false_positive_log10_tail(n, class_count, threshold)
                rows.append({
                    "n": n,
                    "K": class_count,
                    "T": threshold,
                    "false_positive": format_probability(log10_tail),
                    "log10_tail": log10_tail,
                    "r1": f"{float(crack.r1):.3e}" if crack else "-",
                    "r": f"{float(crack.r):.3e}" if crack else "-",
                })
    return rows
