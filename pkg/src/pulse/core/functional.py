"""Plain-array versions of the scalar ops used across the pipeline."""
from __future__ import annotations

import math

import numpy as np

from pulse.errors import DegenerateVector, InvalidArgument, NumericError


def softmax(logits) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise InvalidArgument("softmax of an empty vector")
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax input contains non-finite values")
    e = np.exp(x - x.max())
    return e / e.sum()


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise InvalidArgument(f"length mismatch: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateVector("cosine similarity of a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def logsumexp(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    m = x.max()
    return float(m + math.log(np.exp(x - m).sum()))


def cross_entropy(logits, label: int) -> float:
    x = np.asarray(logits, dtype=np.float64).reshape(-1)
    if not 0 <= int(label) < x.size:
        raise InvalidArgument(f"label {label} out of range for {x.size} logits")
    if not np.all(np.isfinite(x)):
        raise NumericError("cross_entropy input contains non-finite values")
    return max(0.0, logsumexp(x) - float(x[int(label)]))


def argmax_first(scores) -> int:
    """Index of the maximum; the lowest index wins exact ties."""
    x = np.asarray(scores).reshape(-1)
    if x.size == 0:
        raise InvalidArgument("argmax of an empty vector")
    return int(np.argmax(x))
