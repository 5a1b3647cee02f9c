"""Dense numeric primitives shared by the rest of the package.

Matrices are plain ``float64`` numpy arrays. Reductions that feed into
checked results are written as explicit left-to-right accumulations so the
summation order does not depend on numpy's internal blocking.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

STREAMS = ("data", "init", "sampling", "eval")


def as_matrix(x, name="matrix") -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def pairwise_sq_dist(a, b) -> np.ndarray:
    """Squared Euclidean distances between every row of ``a`` and of ``b``.

    Computed from explicit differences (not the ``|a|^2 + |b|^2 - 2ab``
    expansion), so the result is exactly non-negative and the diagonal of
    ``pairwise_sq_dist(a, a)`` is exactly zero.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"column mismatch: a has {a.shape[1]}, b has {b.shape[1]}")
    out = np.zeros((a.shape[0], b.shape[0]))
    for k in range(a.shape[1]):
        diff = a[:, k, None] - b[None, :, k]
        out += diff * diff
    return out


def row_sq_norms(m) -> np.ndarray:
    m = as_matrix(m)
    out = np.zeros(m.shape[0])
    for k in range(m.shape[1]):
        out += m[:, k] * m[:, k]
    return out


def stable_softmax(logits) -> np.ndarray:
    """Softmax over the last axis with max-subtraction.

    Accepts a single vector or a batch of row vectors.
    """
    z = np.asarray(logits, dtype=np.float64)
    if np.isnan(z).any():
        raise ValueError("softmax input contains NaN")
    if not np.isfinite(z).all():
        raise ValueError("softmax input must be finite")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(z).all():
        raise ValueError("log_softmax input must be finite")
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def l2_normalize_rows(m) -> np.ndarray:
    m = as_matrix(m)
    norms = np.sqrt(row_sq_norms(m))
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValueError(f"row {int(zero[0])} has zero norm")
    return m / norms[:, None]


def make_rng(seed: int, stream: str) -> np.random.Generator:
    """Independent PCG64 generator for one named purpose.

    Streams are derived with ``SeedSequence(seed, spawn_key=(i,))`` where ``i``
    is the position of ``stream`` in :data:`STREAMS`; the mapping is part of
    the reproducibility contract and must not be reordered.
    """
    if stream not in STREAMS:
        raise ValueError(f"unknown rng stream {stream!r}; expected one of {STREAMS}")
    seq = np.random.SeedSequence(int(seed), spawn_key=(STREAMS.index(stream),))
    return np.random.Generator(np.random.PCG64(seq))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_state(state: dict) -> np.random.Generator:
    if state.get("bit_generator") != "PCG64":
        raise ValueError(f"unsupported bit generator {state.get('bit_generator')!r}")
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)
