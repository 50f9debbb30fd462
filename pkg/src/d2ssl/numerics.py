"""Numerically stable softmax-family primitives and seeded RNG.

Everything operates on float64 numpy arrays. Probability vectors are
expected to sum to one; log-probabilities are preferred over raw
probabilities wherever a log would otherwise be taken, so log(0) never
occurs. When only probabilities are available they are clamped below at
TINY before taking logs.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError

# Smallest clamp applied before log() when the caller has probabilities only.
TINY = 1e-300


def softmax(z: np.ndarray) -> np.ndarray:
    """Softmax along the last axis, computed with max-subtraction."""
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0:
        raise DimensionError("softmax of empty vector")
    m = np.max(z, axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    """log(softmax(z)) along the last axis without overflow."""
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0:
        raise DimensionError("log_softmax of empty vector")
    m = np.max(z, axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def entropy(p: np.ndarray, log_p: np.ndarray | None = None) -> np.ndarray:
    """-sum p*log(p) along the last axis, with 0*log(0) = 0.

    Pass log_p when log-probabilities are already available (exact);
    otherwise p is clamped at TINY before the log.
    """
    p = np.asarray(p, dtype=np.float64)
    if log_p is None:
        log_p = np.log(np.maximum(p, TINY))
    return -np.sum(np.where(p > 0.0, p * log_p, 0.0), axis=-1)


def kl_divergence(log_p: np.ndarray, log_q: np.ndarray) -> np.ndarray:
    """KL(p || q) from log-probabilities, along the last axis."""
    log_p = np.asarray(log_p, dtype=np.float64)
    log_q = np.asarray(log_q, dtype=np.float64)
    if log_p.shape[-1] != log_q.shape[-1]:
        raise DimensionError(
            f"KL length mismatch: {log_p.shape[-1]} vs {log_q.shape[-1]}"
        )
    p = np.exp(log_p)
    return np.sum(np.where(p > 0.0, p * (log_p - log_q), 0.0), axis=-1)


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic PCG64 stream; identical seed, identical sequence.

    PCG64 has period 2^128 and reproduces bit-identically across
    platforms for a fixed numpy major version.
    """
    return np.random.Generator(np.random.PCG64(seed))


def check_prob_vector(p: np.ndarray, atol: float = 1e-12) -> None:
    """Raise DimensionError if p is not a valid probability vector."""
    p = np.asarray(p)
    if p.size == 0:
        raise DimensionError("empty probability vector")
    if not np.all(np.isfinite(p)):
        raise DimensionError("non-finite entries in probability vector")
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise DimensionError("probability entries outside [0, 1]")
    if abs(float(np.sum(p)) - 1.0) > atol:
        raise DimensionError("probability entries do not sum to 1")
