import numpy as np
import pytest


def central_diff(fn, x, eps=1e-5):
    """Central-difference gradient of scalar ``fn`` at every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        fp = fn(x)
        flat[k] = orig - eps
        fm = fn(x)
        flat[k] = orig
        g[k] = (fp - fm) / (2 * eps)
    return grad


def max_rel_err(analytic, numeric, floor=1e-8):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def central_diff_guarded(fn, x, eps=1e-5):
    """Like :func:`central_diff` but ``fn`` returns ``(value, branch)``.

    Returns ``(grad, stable)`` where ``stable`` is False if any perturbation
    crossed a kink or changed a discrete selection.
    """
    x = np.array(x, dtype=np.float64)
    _, base = fn(x)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    stable = True
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        fp, bp = fn(x)
        flat[k] = orig - eps
        fm, bm = fn(x)
        flat[k] = orig
        stable = stable and bp == base and bm == base
        g[k] = (fp - fm) / (2 * eps)
    return grad, stable
