"""Dense vector arithmetic, probability-vector primitives, and gradient oracles.

Everything downstream (network, selection, training) is built on these
few float64 functions.  Probability vectors are plain 1-D numpy arrays
whose entries lie in [0, 1] and sum to 1 within 1e-9.
"""

from __future__ import annotations

import hashlib
from typing import Callable

import numpy as np

# Floor applied to probabilities before any log so confident predictions
# keep losses finite.
LOG_CLAMP = 1e-12

PROB_SUM_TOL = 1e-9


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax along the last axis (max-subtraction; argmax preserved)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise ValueError("empty logits")
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=-1, keepdims=True)


def cross_entropy(p: np.ndarray, y: np.ndarray) -> float:
    """-sum_k y_k * log(p_k), with p clamped to LOG_CLAMP before the log."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: p has shape {p.shape}, y has shape {y.shape}")
    return float(-np.sum(y * np.log(np.maximum(p, LOG_CLAMP))))


def entropy(p: np.ndarray) -> float:
    """-sum_i p_i * log(p_i) in [0, log K], with the same log clamping."""
    p = np.asarray(p, dtype=np.float64)
    return float(-np.sum(p * np.log(np.maximum(p, LOG_CLAMP))))


def l1_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Sum of absolute coordinate differences."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.sum(np.abs(a - b)))


def is_prob_vec(p: np.ndarray, tol: float = PROB_SUM_TOL) -> bool:
    """Check the probability-vector invariants: entries in [0,1], sum 1 within tol."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0 or not np.all(np.isfinite(p)):
        return False
    if np.any(p < -tol) or np.any(p > 1.0 + tol):
        return False
    return abs(float(np.sum(p)) - 1.0) <= tol


def finite_diff_grad(
    scalar_fn: Callable[[np.ndarray], float],
    params: np.ndarray,
    eps: float = 1e-5,
) -> np.ndarray:
    """Central-difference gradient (f(x+eps*e_i) - f(x-eps*e_i)) / 2eps per coordinate.

    The oracle against which every analytic gradient in the package is
    checked.  ``scalar_fn`` must be deterministic.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = np.asarray(params, dtype=np.float64)
    grad = np.empty_like(params)
    for i in range(params.size):
        bumped = params.copy()
        bumped[i] = params[i] + eps
        up = scalar_fn(bumped)
        bumped[i] = params[i] - eps
        down = scalar_fn(bumped)
        grad[i] = (up - down) / (2.0 * eps)
    return grad


def _substream_entropy(seed: int, names: tuple[str, ...]) -> list[int]:
    """Derive SeedSequence entropy from (seed, substream path) via sha256.

    Hashing the path keeps every named substream independent of draw order
    on any other stream: module A consuming its stream never perturbs
    module B's draws.
    """
    digest = hashlib.sha256(("/".join(names)).encode("utf-8")).digest()
    return [int(seed) & 0xFFFFFFFFFFFFFFFF, int.from_bytes(digest[:16], "big")]


def seeded_rng(seed: int, *substream: str) -> np.random.Generator:
    """Deterministic PCG64 generator for ``seed``, optionally on a named substream.

    ``seeded_rng(s)`` is the root stream; ``seeded_rng(s, "data")``,
    ``seeded_rng(s, "batch", "stage1")`` etc. are isolated substreams.
    """
    return np.random.default_rng(np.random.SeedSequence(_substream_entropy(seed, substream)))
