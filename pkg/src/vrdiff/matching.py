"""Linear assignment and the bipartite point-set reconstruction loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ShapeError


@dataclass(frozen=True)
class Assignment:
    """permutation[i] = column assigned to row i; total_cost is the sum."""

    permutation: np.ndarray
    total_cost: float

    def __post_init__(self):
        perm = np.asarray(self.permutation, dtype=int)
        n = perm.shape[0]
        if sorted(perm.tolist()) != list(range(n)):
            raise ShapeError("permutation is not a bijection")
        object.__setattr__(self, "permutation", perm)


def hungarian(cost: np.ndarray) -> Assignment:
    """Globally optimal assignment for a square, finite cost matrix."""
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ShapeError(f"cost matrix must be square, got {cost.shape}")
    if not np.isfinite(cost).all():
        raise ShapeError("cost matrix has non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(cost.shape[0], dtype=int)
    perm[rows] = cols
    return Assignment(permutation=perm, total_cost=float(cost[rows, cols].sum()))


def _positions(x) -> np.ndarray:
    # accepts an AtomCloud or a bare (n, 3) array
    pos = getattr(x, "positions", x)
    return np.asarray(pos, dtype=float)


def squared_distance_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def bipartite_loss(x, x_hat):
    """min over permutations pi of sum_i ||x_i - x_hat_pi(i)||^2.

    Returns (loss, Assignment). Both arguments must hold the same number
    of points.
    """
    a = _positions(x)
    b = _positions(x_hat)
    if a.shape != b.shape:
        raise ShapeError(f"point sets differ in shape: {a.shape} vs {b.shape}")
    assignment = hungarian(squared_distance_matrix(a, b))
    return assignment.total_cost, assignment


def bipartite_loss_gradient(x, x_hat) -> np.ndarray:
    """Gradient of bipartite_loss with respect to x_hat.

    The optimal assignment is held fixed (it defines the subgradient at
    ties): d/dx_hat_j = 2 (x_hat_j - x_i) for the row i matched to j.
    """
    a = _positions(x)
    b = _positions(x_hat)
    _, assignment = bipartite_loss(a, b)
    grad = np.zeros_like(b)
    for i, j in enumerate(assignment.permutation):
        grad[j] = 2.0 * (b[j] - a[i])
    return grad
