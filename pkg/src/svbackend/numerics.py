"""Dense float64 matrix helpers, stable nonlinearities, deterministic RNG,
and a finite-difference gradient checker.

Matrices are plain 2-D ``numpy.ndarray`` objects in float64, row-major.
All functions here are pure; generators returned by :func:`make_rng` are
single-owner (one per thread of work).
"""

import numpy as np

__all__ = [
    "as_matrix",
    "as_vector",
    "matmul",
    "softmax_rows",
    "tanh_elem",
    "sigmoid",
    "grad_check",
    "make_rng",
    "spawn_rng",
]


def as_matrix(x, name="matrix") -> np.ndarray:
    """Validate and convert to a finite 2-D float64 array."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def as_vector(x, name="vector") -> np.ndarray:
    """Validate and convert to a finite 1-D float64 array."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite entries")
    return v


def matmul(a, b) -> np.ndarray:
    """Matrix product with an explicit inner-dimension check."""
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul dimension mismatch: {a.shape[0]}x{a.shape[1]} times "
            f"{b.shape[0]}x{b.shape[1]}"
        )
    return a @ b


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with max-subtraction for overflow safety."""
    m = as_matrix(m, "softmax input")
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def tanh_elem(m) -> np.ndarray:
    """Elementwise hyperbolic tangent."""
    return np.tanh(as_matrix(m, "tanh input"))


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def grad_check(f, point, analytic_grad, eps=1e-5) -> float:
    """Max relative error between `analytic_grad` and central differences of `f`.

    Per coordinate i the error is
    ``|(f(x+eps*e_i) - f(x-eps*e_i)) / (2*eps) - g_i| / max(1, |g_i|)``.
    Raises if `f` returns a non-finite value, naming the coordinate.
    """
    point = as_vector(point, "point").copy()
    g = as_vector(analytic_grad, "analytic gradient")
    if point.shape != g.shape:
        raise ValueError(
            f"gradient shape {g.shape} does not match point shape {point.shape}"
        )
    if eps <= 0:
        raise ValueError("eps must be positive")
    worst = 0.0
    for i in range(point.size):
        orig = point[i]
        point[i] = orig + eps
        f_hi = float(f(point))
        point[i] = orig - eps
        f_lo = float(f(point))
        point[i] = orig
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise ValueError(
                f"non-finite function value while perturbing coordinate {i}"
            )
        numeric = (f_hi - f_lo) / (2.0 * eps)
        err = abs(numeric - g[i]) / max(1.0, abs(g[i]))
        worst = max(worst, err)
    return worst


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic counter-based generator (Philox 4x64-10).

    Identical seeds give bit-identical streams on every platform. The seed
    is used directly as the 128-bit Philox key, so streams are reproducible
    from the documented algorithm alone.
    """
    return np.random.Generator(np.random.Philox(key=int(seed) & ((1 << 128) - 1)))


def spawn_rng(seed: int, stream: int) -> np.random.Generator:
    """Independent substream `stream` of the generator family keyed by `seed`.

    Key layout: ``(seed mod 2^64) + 2^64 * (stream + 1)``, so stream -1 is
    the base stream of :func:`make_rng`.
    """
    key = (int(seed) & ((1 << 64) - 1)) + ((int(stream) + 1) << 64)
    return np.random.Generator(np.random.Philox(key=key & ((1 << 128) - 1)))
