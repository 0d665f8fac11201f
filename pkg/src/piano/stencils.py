"""Finite-difference operators on uniform grids.

Each stencil is assembled once as a dense matrix acting along one axis of a
field laid out as ``field[x_index, t_index]``. Applying it is then a single
(differentiable) matrix product, and its adjoint is the transposed matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .numerics import Tensor, apply_left, apply_right

BOUNDARY_RULES = ("one-sided", "periodic")


class StencilError(ValueError):
    pass


@dataclass(frozen=True)
class StencilSpec:
    """Accuracy order (1 or 2) and edge treatment of a stencil.

    ``accuracy=1`` only changes first derivatives; second derivatives always
    use the centred three-point stencil.
    """

    accuracy: int = 2
    boundary: str = "one-sided"

    def __post_init__(self):
        if self.accuracy not in (1, 2):
            raise StencilError(f"accuracy order must be 1 or 2, got {self.accuracy}")
        if self.boundary not in BOUNDARY_RULES:
            raise StencilError(f"unknown boundary rule {self.boundary!r}")

    @property
    def periodic(self):
        return self.boundary == "periodic"


@lru_cache(maxsize=64)
def first_derivative_matrix(n, h, accuracy=2, periodic=False):
    """Dense ``n x n`` matrix approximating d/dz with spacing ``h``."""
    if h <= 0:
        raise StencilError("spacing must be positive")
    need = 2 if accuracy == 1 else 3
    if n < need:
        raise StencilError(f"{n} nodes is too few for an order-{accuracy} first derivative")
    D = np.zeros((n, n))
    idx = np.arange(n)
    if accuracy == 1:
        if periodic:
            D[idx, idx] = -1.0
            D[idx, (idx + 1) % n] = 1.0
        else:
            D[idx[:-1], idx[:-1]] = -1.0
            D[idx[:-1], idx[1:]] = 1.0
            D[n - 1, n - 2:] = (-1.0, 1.0)
        D /= h
    else:
        if periodic:
            D[idx, (idx + 1) % n] = 0.5
            D[idx, (idx - 1) % n] = -0.5
        else:
            inner = idx[1:-1]
            D[inner, inner + 1] = 0.5
            D[inner, inner - 1] = -0.5
            D[0, :3] = (-1.5, 2.0, -0.5)
            D[n - 1, n - 3:] = (0.5, -2.0, 1.5)
        D /= h
    D.setflags(write=False)
    return D


@lru_cache(maxsize=64)
def second_derivative_matrix(n, h, periodic=False):
    """Dense ``n x n`` matrix approximating d2/dz2 with spacing ``h``."""
    if h <= 0:
        raise StencilError("spacing must be positive")
    if n < 4:
        raise StencilError(f"{n} nodes is too few for a second derivative")
    D = np.zeros((n, n))
    idx = np.arange(n)
    if periodic:
        D[idx, idx] = -2.0
        D[idx, (idx + 1) % n] = 1.0
        D[idx, (idx - 1) % n] = 1.0
    else:
        inner = idx[1:-1]
        D[inner, inner] = -2.0
        D[inner, inner + 1] = 1.0
        D[inner, inner - 1] = 1.0
        D[0, :4] = (2.0, -5.0, 4.0, -1.0)
        D[n - 1, n - 4:] = (-1.0, 4.0, -5.0, 2.0)
    D /= h * h
    D.setflags(write=False)
    return D


def _apply(field, op, axis):
    if isinstance(field, Tensor):
        return apply_left(op, field) if axis == 0 else apply_right(field, op)
    field = np.asarray(field, dtype=float)
    if axis == 0:
        return np.tensordot(op, field, axes=(1, 0))
    return field @ op.T


def _extent(field, axis):
    # axis 1 is the last axis, so a bare time series is accepted too
    return field.shape[0] if axis == 0 else field.shape[-1]


def diff_time(field, dt, spec=StencilSpec()):
    """First time derivative of ``field[x, t]``; time is never periodic."""
    n = _extent(field, 1)
    op = first_derivative_matrix(n, float(dt), spec.accuracy, False)
    return _apply(field, op, 1)


def diff_space(field, dx, spec=StencilSpec()):
    """First spatial derivative along axis 0."""
    n = _extent(field, 0)
    op = first_derivative_matrix(n, float(dx), spec.accuracy, spec.periodic)
    return _apply(field, op, 0)


def second_derivative(field, step, axis, spec=StencilSpec()):
    n = _extent(field, axis)
    periodic = spec.periodic and axis == 0
    op = second_derivative_matrix(n, float(step), periodic)
    return _apply(field, op, axis)
