"""Shared float64 numerics: row softmax, angular distances, top-k statistics,
and a central-difference gradient checker.

Everything operates on plain C-contiguous numpy float64 arrays and is a pure
function of its inputs.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

# Lower clamp for sin(theta) in angular gradient denominators; the derivative
# of arccos is singular at theta in {0, pi}.
SIN_FLOOR = 1e-6

# Denominator floor of the relative-error metric used by the gradient checker.
REL_ERR_FLOOR = 1e-8


def as_matrix(values, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Validate ``values`` as a finite 2-D float64 matrix and return it.

    Raises ValueError on wrong rank, a shape mismatch against ``rows``/``cols``,
    or non-finite entries.
    """
    m = np.ascontiguousarray(values, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if rows is not None and m.shape[0] != rows:
        raise ValueError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ValueError(f"expected {cols} columns, got {m.shape[1]}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite entries")
    return m


def as_vector(values, size: int | None = None) -> np.ndarray:
    """Validate ``values`` as a finite 1-D float64 vector and return it."""
    v = np.ascontiguousarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got ndim={v.ndim}")
    if size is not None and v.size != size:
        raise ValueError(f"expected length {size}, got {v.size}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector contains non-finite entries")
    return v


def softmax_rows(m, scale: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``scale * m``, computed with max-subtraction.

    Every output row is a probability vector. ``scale`` acts as an inverse
    temperature: values below 1 flatten the rows toward uniform.
    """
    m = as_matrix(m)
    if not (np.isfinite(scale) and scale > 0):
        raise ValueError(f"scale must be positive and finite, got {scale!r}")
    z = scale * m
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(p: np.ndarray, g_p: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Backward of softmax_rows: gradient wrt the logits given ``p`` = softmax output."""
    inner = (g_p * p).sum(axis=1, keepdims=True)
    return scale * p * (g_p - inner)


def angular_distance(u, v) -> float:
    """Angle in [0, pi] between two nonzero vectors.

    The cosine is clamped to [-1, 1] before arccos so collinear inputs cannot
    produce NaN from rounding.
    """
    u = as_vector(u)
    v = as_vector(v, size=u.size)
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("angular distance of a zero-norm vector is undefined")
    cos = float(np.dot(u, v)) / (nu * nv)
    return float(math.acos(min(1.0, max(-1.0, cos))))


def angular_distance_grad(v: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Gradient of ``angular_distance(v, w)`` with respect to ``v``.

    sin(theta) in the denominator is clamped below at SIN_FLOOR, so the result
    stays finite when the vectors are (anti)parallel.
    """
    nv = float(np.linalg.norm(v))
    nw = float(np.linalg.norm(w))
    if nv == 0.0 or nw == 0.0:
        raise ValueError("angular distance gradient of a zero-norm vector is undefined")
    vhat = v / nv
    what = w / nw
    cos = min(1.0, max(-1.0, float(np.dot(vhat, what))))
    sin = max(math.sqrt(max(0.0, 1.0 - cos * cos)), SIN_FLOOR)
    return -(what - cos * vhat) / (sin * nv)


def topk_mean(row, k: int) -> float:
    """Mean of the ``k`` largest entries of ``row``; ties are irrelevant by value."""
    row = as_vector(row)
    if not 1 <= k <= row.size:
        raise ValueError(f"k={k} out of range for row of length {row.size}")
    return float(np.partition(row, row.size - k)[row.size - k:].mean())


def topk_indices(row: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries; ties break toward the lower index."""
    if not 1 <= k <= row.size:
        raise ValueError(f"k={k} out of range for row of length {row.size}")
    return np.argsort(-row, kind="stable")[:k]


def fd_gradient(f: Callable[[np.ndarray], float], x0, eps: float) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x0``.

    Raises ValueError (naming the coordinate) if any evaluation of ``f`` is
    non-finite.
    """
    x0 = as_vector(x0)
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps!r}")
    g = np.empty_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xp[i] += eps
        fp = float(f(xp))
        xm = x0.copy()
        xm[i] -= eps
        fm = float(f(xm))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ValueError(f"function returned a non-finite value at coordinate {i}")
        g[i] = (fp - fm) / (2.0 * eps)
    return g


def grad_rel_errors(fd: np.ndarray, analytic) -> np.ndarray:
    """Per-coordinate relative disagreement |fd - analytic| / max(floor, |fd|+|analytic|)."""
    fd = np.asarray(fd, dtype=np.float64).ravel()
    an = np.asarray(analytic, dtype=np.float64).ravel()
    if fd.size != an.size:
        raise ValueError(f"gradient size mismatch: {fd.size} vs {an.size}")
    return np.abs(fd - an) / np.maximum(REL_ERR_FLOOR, np.abs(fd) + np.abs(an))


def fd_grad_check(f: Callable[[np.ndarray], float], x0, eps: float, analytic) -> float:
    """Max relative error between the central-difference gradient of ``f`` at
    ``x0`` and the supplied ``analytic`` gradient."""
    return float(grad_rel_errors(fd_gradient(f, x0, eps), analytic).max())
