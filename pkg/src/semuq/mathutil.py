"""Small log-space helpers; inputs here are short Python lists, so plain math beats array overhead."""
from __future__ import annotations

import math
from typing import Iterable, Sequence


def logsumexp(values: Iterable[float]) -> float:
    vals = list(values)
    if not vals:
        raise ValueError("logsumexp of an empty sequence")
    top = max(vals)
    if top == -math.inf:
        return -math.inf
    if math.isinf(top) or math.isnan(top):
        return top
    return top + math.log(math.fsum(math.exp(v - top) for v in vals))


def log_normalize(values: Sequence[float]) -> list[float]:
    """Log-probabilities of ``values`` after normalizing their exponentials to sum to one."""
    z = logsumexp(values)
    return [v - z for v in values]


def entropy_from_logprobs(log_probs: Sequence[float]) -> float:
    """Entropy in nats of the normalized distribution exp(log_probs); 0·ln 0 counts as 0."""
    if not log_probs:
        return 0.0
    terms = []
    for lp in log_normalize(log_probs):
        if lp == -math.inf:
            continue
        terms.append(-math.exp(lp) * lp)
    return max(0.0, math.fsum(terms))


def entropy_from_counts(counts: Sequence[int]) -> float:
    n = sum(counts)
    if n <= 0:
        raise ValueError("counts must sum to a positive number")
    return max(0.0, math.fsum(-(c / n) * math.log(c / n) for c in counts if c > 0))


def log_sigmoid(x: float) -> float:
    """ln σ(x) = −ln(1 + e^{−x}), stable for large |x|."""
    if x >= 0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)
