"""Lorentz-model primitives and the Poincare-ball distance.

Points are plain float64 arrays whose last axis holds coordinates, so every
function broadcasts over leading batch axes. A hyperboloid point of an
ambient ``d``-vector has ``d + 1`` coordinates with the zeroth component in
front: ``(x0, x1, ..., xd)``.
"""

from __future__ import annotations

import numpy as np

BALL_MAX_NORM = 1.0 - 1e-5


def _as_float(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _check_same_dim(u: np.ndarray, v: np.ndarray) -> None:
    if u.shape[-1] != v.shape[-1]:
        raise ValueError(f"dimension mismatch: {u.shape[-1]} vs {v.shape[-1]}")


def _check_beta(beta: float) -> None:
    if not beta > 0:
        raise ValueError(f"curvature beta must be positive, got {beta}")


def origin(dim: int, beta: float = 1.0) -> np.ndarray:
    """Hyperboloid point with zero spatial part, ``(sqrt(beta), 0, ..., 0)``."""
    _check_beta(beta)
    out = np.zeros(dim + 1)
    out[0] = np.sqrt(beta)
    return out


def lorentz_inner(u, v) -> np.ndarray:
    """Lorentzian inner product ``-u0*v0 + sum_i ui*vi`` over the last axis."""
    u, v = _as_float(u), _as_float(v)
    _check_same_dim(u, v)
    return -u[..., 0] * v[..., 0] + np.einsum("...i,...i->...", u[..., 1:], v[..., 1:])


def lift(x, beta: float = 1.0) -> np.ndarray:
    """Map ambient vectors onto the hyperboloid: ``x -> (sqrt(beta + |x|^2), x)``."""
    _check_beta(beta)
    x = _as_float(x)
    if not np.all(np.isfinite(x)):
        raise ValueError("lift requires finite coordinates")
    x0 = np.sqrt(beta + np.einsum("...i,...i->...", x, x))
    return np.concatenate([x0[..., None], x], axis=-1)


def geodesic_distance(u, v) -> np.ndarray:
    """``arccosh(-<u, v>_L)`` with the argument clamped at 1."""
    arg = -lorentz_inner(u, v)
    return np.arccosh(np.maximum(arg, 1.0))


def squared_lorentz_distance(u, v, beta: float = 1.0) -> np.ndarray:
    """``-2*beta - 2*<u, v>_L``, i.e. the Lorentzian self-product of ``u - v``.

    Zero for identical points and nonnegative on the hyperboloid. It is not a
    metric: the triangle inequality can fail.
    """
    _check_beta(beta)
    return -2.0 * beta - 2.0 * lorentz_inner(u, v)


def lorentz_score(u, v) -> np.ndarray:
    """Normalized triangle defect of the squared distance through the origin.

    ``0.5 * (d2(u, v) - d2(o, u) - d2(o, v)) / (<o, u>_L * <o, v>_L)`` where
    ``o = (1, 0, ..., 0)``. Points must have been lifted with ``beta = 1``.
    """
    u, v = _as_float(u), _as_float(v)
    _check_same_dim(u, v)
    for p in (u, v):
        off = np.abs(lorentz_inner(p, p) + 1.0)
        if np.any(off > 1e-9 * np.maximum(1.0, p[..., 0] ** 2)):
            raise ValueError("lorentz_score needs points on the beta = 1 hyperboloid")
    o = origin(u.shape[-1] - 1)
    d_uv = squared_lorentz_distance(u, v)
    d_ou = squared_lorentz_distance(o, u)
    d_ov = squared_lorentz_distance(o, v)
    # summing the origin terms first keeps the result exactly symmetric
    return 0.5 * (d_uv - (d_ou + d_ov)) / (lorentz_inner(o, u) * lorentz_inner(o, v))


def clip_to_ball(x, max_norm: float = BALL_MAX_NORM) -> np.ndarray:
    """Radially shrink rows whose Euclidean norm exceeds ``max_norm``."""
    x = _as_float(x)
    norm = np.sqrt(np.einsum("...i,...i->...", x, x))
    scale = np.where(norm > max_norm, max_norm / np.maximum(norm, 1e-300), 1.0)
    return x * scale[..., None]


def poincare_distance(x, y) -> np.ndarray:
    """Poincare-ball geodesic distance; inputs are clipped into the ball first."""
    x, y = _as_float(x), _as_float(y)
    _check_same_dim(x, y)
    x, y = clip_to_ball(x), clip_to_ball(y)
    diff = x - y
    sq = np.einsum("...i,...i->...", diff, diff)
    xx = np.einsum("...i,...i->...", x, x)
    yy = np.einsum("...i,...i->...", y, y)
    arg = 1.0 + 2.0 * sq / ((1.0 - xx) * (1.0 - yy))
    return np.arccosh(np.maximum(arg, 1.0))
