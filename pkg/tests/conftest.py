"""Shared fixtures and independent oracles used across the test suite.

Oracles here deliberately avoid the library's fast paths: nearest distances
go through scipy's cdist, point-in-polygon uses exact rational arithmetic,
and containment checks loop per point.
"""

from __future__ import annotations

import logging
from fractions import Fraction

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from pcm_toolkit import synth

logging.getLogger("pcm_toolkit").setLevel(logging.ERROR)


def brute_nearest(sources: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """O(N*M) nearest distances via a full distance matrix."""
    return cdist(sources, targets).min(axis=1)


def inside_convex_exact(polygon, px: float, py: float) -> bool:
    """Exact inclusive point-in-convex-polygon test (CCW vertex order)."""
    poly = [(Fraction(float(a)), Fraction(float(b))) for a, b in polygon]
    qx, qy = Fraction(float(px)), Fraction(float(py))
    n = len(poly)
    for i in range(n):
        ax, ay = poly[i]
        bx, by = poly[(i + 1) % n]
        cross = (bx - ax) * (qy - ay) - (by - ay) * (qx - ax)
        if cross < 0:
            return False
    return True


def cuboid_contains_oracle(point, center, dims, rotation) -> bool:
    """Per-point transform-to-cuboid-frame containment, inclusive of faces."""
    local = np.asarray(rotation).T @ (np.asarray(point, float) - np.asarray(center, float))
    half = np.asarray(dims, float) / 2.0
    return bool(np.all(np.abs(local) <= half))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    A = rng.normal(size=(3, 3))
    Q, R = np.linalg.qr(A)
    Q = Q * np.sign(np.diag(R))
    if np.linalg.det(Q) < 0:
        Q[:, 2] *= -1
    return Q


@pytest.fixture(scope="session")
def clean_bundle():
    return synth.generate(synth.clean_view_recipe(seed=11))


@pytest.fixture(scope="session")
def generic_bundle():
    return synth.generate(
        synth.SceneRecipe(
            seed=5,
            family="generic",
            extent=24.0,
            n_buildings=3,
            n_poles=3,
            n_dynamic=2,
            n_new_objects=1,
            n_demolished=1,
            n_cameras=2,
            image_width=320,
            image_height=240,
            focal_px=200.0,
        )
    )
