"""Fixed-support categorical value distributions.

The critics in this package represent long-term reward and long-term cost as
probability mass on a fixed, evenly spaced grid of scalar atoms. This module
owns that grid, the Bellman shift of atom locations, the projection of
shifted mass back onto the grid (clamp, then linear split between the two
bracketing atoms), and the cross-entropy loss that fits predicted logits to a
projected target.

Everything here is a pure value computation: no shared state, safe to call
from any number of threads on distinct data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

__all__ = [
    "AtomGrid",
    "CategoricalDistribution",
    "make_grid",
    "expectation",
    "bellman_shift",
    "project",
    "project_batch",
    "cross_entropy_loss",
    "log_softmax",
    "softmax",
]


@dataclass(frozen=True)
class AtomGrid:
    """Evenly spaced support ``atoms[i] = v_min + i * delta_z``."""

    v_min: float
    v_max: float
    n_atoms: int
    atoms: np.ndarray
    delta_z: float


@dataclass
class CategoricalDistribution:
    """Probability mass over the atoms of a fixed grid."""

    grid: AtomGrid
    probs: np.ndarray

    def validate(self, tol: float = 1e-9) -> None:
        if self.probs.shape != (self.grid.n_atoms,):
            raise ValueError(
                f"probs shape {self.probs.shape} does not match grid with "
                f"{self.grid.n_atoms} atoms"
            )
        if abs(float(self.probs.sum()) - 1.0) > tol:
            raise ValueError(f"probs sum to {self.probs.sum()!r}, expected 1")
        if np.any(self.probs < -tol) or np.any(self.probs > 1.0 + tol):
            raise ValueError("probs must lie in [0, 1]")


def make_grid(v_min: float, v_max: float, n_atoms: int) -> AtomGrid:
    """Build the atom grid spanning [v_min, v_max] with ``n_atoms`` points.

    Raises:
        ConfigError: if ``n_atoms < 2`` or ``v_max <= v_min``.
    """
    if n_atoms < 2:
        raise ConfigError(f"n_atoms must be >= 2, got {n_atoms}")
    if not v_max > v_min:
        raise ConfigError(f"v_max ({v_max}) must exceed v_min ({v_min})")
    delta_z = (v_max - v_min) / (n_atoms - 1)
    atoms = v_min + delta_z * np.arange(n_atoms, dtype=np.float64)
    return AtomGrid(float(v_min), float(v_max), int(n_atoms), atoms, float(delta_z))


def expectation(dist: CategoricalDistribution) -> float:
    """Mean of the categorical distribution: sum of probs[i] * atoms[i]."""
    return float(dist.probs @ dist.grid.atoms)


def bellman_shift(
    signal: float, gamma: float, next_dist: CategoricalDistribution
) -> tuple[np.ndarray, np.ndarray]:
    """Shift the next-state atoms through one Bellman backup.

    Returns the shifted locations ``signal + gamma * atoms`` and the
    probabilities carried unchanged from ``next_dist``.
    """
    locations = signal + gamma * next_dist.grid.atoms
    return locations, next_dist.probs


def project_batch(grid: AtomGrid, locations: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Project rows of (locations, probs) mass onto the grid.

    Each mass is clamped into [v_min, v_max] and split linearly between the
    two bracketing atoms. ``locations`` and ``probs`` have shape (B, M);
    the result has shape (B, n_atoms) and each row sums to its input mass.
    """
    locations = np.atleast_2d(np.asarray(locations, dtype=np.float64))
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if locations.shape != probs.shape:
        raise ValueError("locations and probs must have matching shapes")
    n = grid.n_atoms
    b = (np.clip(locations, grid.v_min, grid.v_max) - grid.v_min) / grid.delta_z
    b = np.clip(b, 0.0, n - 1)
    low = np.floor(b).astype(np.int64)
    frac = b - low
    high = np.minimum(low + 1, n - 1)

    out = np.zeros((locations.shape[0], n), dtype=np.float64)
    rows = np.repeat(np.arange(locations.shape[0]), locations.shape[1])
    np.add.at(out, (rows, low.ravel()), (probs * (1.0 - frac)).ravel())
    np.add.at(out, (rows, high.ravel()), (probs * frac).ravel())
    return out


def project(grid: AtomGrid, locations: np.ndarray, probs: np.ndarray) -> CategoricalDistribution:
    """Project one set of located masses onto the grid."""
    out = project_batch(grid, locations, probs)[0]
    return CategoricalDistribution(grid, out)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable log-softmax over the last axis."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy_loss(
    target: CategoricalDistribution, logits: np.ndarray
) -> tuple[float, np.ndarray]:
    """Cross entropy of ``softmax(logits)`` against a target distribution.

    Returns the loss ``-sum_i target[i] * log softmax(logits)[i]`` and its
    gradient with respect to the logits, ``softmax(logits) - target``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != target.probs.shape:
        raise ValueError("logits width must match the target's atom count")
    ls = log_softmax(logits)
    loss = -float(target.probs @ ls)
    grad = np.exp(ls) - target.probs
    return loss, grad
