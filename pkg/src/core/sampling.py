"""
Seeded quasi-random sample sets for residual checks.

Scrambled Halton points are reproducible for a given seed, so the maxima
reported by residual checks are too.
"""
from typing import Sequence, Tuple

import numpy as np
from scipy.stats import qmc

from src.utils.error_handler import InvalidInputError
from src.utils.settings import DEFAULT_ANNULUS, DEFAULT_SAMPLE_COUNT, DEFAULT_SEED


def _halton(dim: int, seed: int) -> qmc.Halton:
    return qmc.Halton(d=dim, scramble=True, seed=seed)


def annulus_samples(
    dim: int,
    count: int = DEFAULT_SAMPLE_COUNT,
    radii: Tuple[float, float] = DEFAULT_ANNULUS,
    seed: int = DEFAULT_SEED,
) -> np.ndarray:
    """`count` points with r_in <= |q| <= r_out, by rejection from the enclosing cube."""
    r_in, r_out = (float(r) for r in radii)
    if dim < 1 or count < 1:
        raise InvalidInputError("annulus samples need dim >= 1 and count >= 1")
    if not 0.0 <= r_in < r_out:
        raise InvalidInputError(f"invalid annulus radii ({r_in:g}, {r_out:g})")

    engine = _halton(dim, seed)
    accepted = []
    total = 0
    while total < count:
        batch = qmc.scale(engine.random(max(64, 4 * count)), -r_out * np.ones(dim), r_out * np.ones(dim))
        radius = np.linalg.norm(batch, axis=1)
        keep = batch[(radius >= r_in) & (radius <= r_out)]
        accepted.append(keep)
        total += len(keep)
    return np.vstack(accepted)[:count]


def box_samples(
    lower: Sequence[float],
    upper: Sequence[float],
    count: int = DEFAULT_SAMPLE_COUNT,
    seed: int = DEFAULT_SEED,
) -> np.ndarray:
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    if lower.shape != upper.shape or not np.all(upper > lower):
        raise InvalidInputError("box samples need lower < upper componentwise")
    return qmc.scale(_halton(lower.size, seed).random(count), lower, upper)


def circle_samples(
    radius: float = 1.0,
    count: int = DEFAULT_SAMPLE_COUNT,
    seed: int = DEFAULT_SEED,
) -> np.ndarray:
    """Points on the planar circle |q| = radius."""
    angles = 2.0 * np.pi * _halton(1, seed).random(count)[:, 0]
    return radius * np.column_stack([np.cos(angles), np.sin(angles)])
