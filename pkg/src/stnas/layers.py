"""Composite tensor helpers built from the primitive set.

The primitives never broadcast, so the usual affine-layer conveniences
(bias addition, scalar-tensor products) are spelled out here once with
explicit ones-matrix expansions and reused everywhere.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def constant(values) -> Tensor:
    """Wrap an array as a non-differentiable tensor."""
    return Tensor(np.asarray(values, dtype=np.float64))


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


def broadcast_scalar(s: Tensor, shape) -> Tensor:
    """Expand a one-element tensor to ``shape`` with gradient flow intact."""
    n = math.prod(shape) if shape else 1
    col = ad.matmul(constant(np.ones((n, 1))), ad.reshape(s, (1, 1)))
    return ad.reshape(col, shape)


def scale_by(x: Tensor, s: Tensor) -> Tensor:
    """Multiply ``x`` elementwise by a one-element tensor ``s``."""
    return ad.mul(x, broadcast_scalar(s, x.shape))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-D bias to every row of an (R, D) tensor."""
    rows = x.shape[0]
    expanded = ad.matmul(constant(np.ones((rows, 1))), ad.reshape(b, (1, b.size)))
    return ad.add(x, expanded)


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """(R, A) @ (A, B) plus optional bias."""
    out = ad.matmul(x, w)
    return out if b is None else add_bias(out, b)


def neg(x: Tensor) -> Tensor:
    return ad.scale(x, -1.0)


def abs_val(x: Tensor) -> Tensor:
    # |x| = relu(x) + relu(-x); the subgradient at 0 is taken as 0.
    return ad.add(ad.relu(x), ad.relu(neg(x)))


def sum_all(x: Tensor) -> Tensor:
    return ad.sum_axis(ad.reshape(x, (x.size,)), 0)


def mean_all(x: Tensor) -> Tensor:
    return ad.mean_axis(ad.reshape(x, (x.size,)), 0)


def add_many(parts: list[Tensor]) -> Tensor:
    """Left-fold addition in list order (fixed accumulation order)."""
    if not parts:
        raise ValueError("add_many needs at least one tensor")
    acc = parts[0]
    for p in parts[1:]:
        acc = ad.add(acc, p)
    return acc


def row_broadcast(row: Tensor, n_rows: int) -> Tensor:
    """Tile a (1, D) or (D,) tensor into (n_rows, D)."""
    flat = ad.reshape(row, (1, row.size))
    return ad.matmul(constant(np.ones((n_rows, 1))), flat)


def left_apply_matrix(a: Tensor, x: Tensor) -> Tensor:
    """Compute ``a @ x[b]`` for every batch entry of x (B, N, D) with a (N, N).

    Routed through one 2-d matmul: the batch and feature axes are folded
    together on the right-hand side.
    """
    b, n, d = x.shape
    xt = ad.reshape(ad.transpose(x, (1, 0, 2)), (n, b * d))
    yt = ad.matmul(a, xt)
    return ad.transpose(ad.reshape(yt, (n, b, d)), (1, 0, 2))
