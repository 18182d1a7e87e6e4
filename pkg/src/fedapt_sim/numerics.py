"""Dense float64 numerics shared by every other module.

Covers stable softmax / log-softmax, cosine similarity, seeded RNG streams,
and a central finite-difference gradient oracle used to check every analytic
gradient in the training code.

All tensors are plain ``numpy.ndarray`` objects in float64. Named RNG streams
are derived from ``(seed, stream-name)`` so that changing one experiment knob
(say, client sampling) never perturbs unrelated draws (say, key init).
"""

from __future__ import annotations

import zlib
from typing import Callable, Sequence

import numpy as np


class InvalidArgumentError(ValueError):
    """An argument violates an operation's preconditions."""


class DegenerateInputError(ValueError):
    """Numerically degenerate input, e.g. a zero-norm vector."""


# ---------------------------------------------------------------------------
# Seeded RNG streams
# ---------------------------------------------------------------------------

def stream(seed: int, *stream_ids: int) -> np.random.Generator:
    """Deterministic generator for ``(seed, stream_ids...)``.

    Identical arguments yield bit-identical draw sequences across runs and
    platforms (PCG64 seeded through a SeedSequence).
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(i) & 0xFFFFFFFFFFFFFFFF for i in stream_ids]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def named_stream(seed: int, name: str, *stream_ids: int) -> np.random.Generator:
    """Stream keyed by a human-readable name ("data", "keys", "sampling", ...)."""
    return stream(seed, zlib.crc32(name.encode("ascii")), *stream_ids)


# ---------------------------------------------------------------------------
# Stable softmax family
# ---------------------------------------------------------------------------

def softmax(v: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax of a vector, computed with max-subtraction.

    Returns softmax(v / temperature); the output is nonnegative and sums
    to 1 within 1e-12.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise InvalidArgumentError("softmax input must be nonempty")
    if not temperature > 0:
        raise InvalidArgumentError(f"temperature must be positive, got {temperature}")
    z = v / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(v: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Log of :func:`softmax`, kept stable for saturated logits."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise InvalidArgumentError("log_softmax input must be nonempty")
    if not temperature > 0:
        raise InvalidArgumentError(f"temperature must be positive, got {temperature}")
    z = v / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_vjp(probs: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Backprop ``upstream`` through a softmax that produced ``probs``.

    Works row-wise on matching shapes: J^T u = p * (u - <u, p>).
    """
    inner = (probs * upstream).sum(axis=-1, keepdims=True)
    return probs * (upstream - inner)


# ---------------------------------------------------------------------------
# Cosine similarity and normalization
# ---------------------------------------------------------------------------

def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two nonzero vectors, clipped into [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine of a zero-norm vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def l2_normalize(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Unit-normalize along ``axis``; zero-norm input raises."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(n == 0.0):
        raise DegenerateInputError("cannot normalize a zero-norm vector")
    return v / n


# ---------------------------------------------------------------------------
# Finite-difference gradient oracle
# ---------------------------------------------------------------------------

def finite_diff_grad(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    h: float = 1e-5,
) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function.

    Evaluates (f(x + h e_i) - f(x - h e_i)) / (2 h) per coordinate. This is
    the independent oracle every analytic gradient is checked against; it
    never shares code with the path it verifies.
    """
    if not h > 0:
        raise InvalidArgumentError(f"step size must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def grad_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst per-coordinate error |a - n| / max(1, |a|)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_finite(arr: np.ndarray, what: str = "tensor") -> np.ndarray:
    """Raise if ``arr`` contains NaN or Inf; returns the array unchanged."""
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{what} contains non-finite entries")
    return arr


def freeze(arr: np.ndarray) -> np.ndarray:
    """Mark an array immutable (used for frozen weights and keys)."""
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr
