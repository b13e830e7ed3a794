"""Shared brute-force oracles for the test suite.

Everything here is deliberately independent of the library under test:
vertex enumeration by basis inspection, closed-form box supports, and
explicit Minkowski sums of box vertex clouds.
"""

import itertools

import numpy as np


def box_vertices(lo, hi):
    """All corners of an axis-aligned box."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    return np.array(list(itertools.product(*zip(lo, hi))))


def box_support(center, half, a):
    """h of an axis-aligned box at direction a: a'c + |a|'half."""
    return float(np.dot(a, center) + np.dot(np.abs(a), half))


def vertices_2d(A, b, tol=1e-7):
    """Vertices of {x in R^2 : A x <= b} by enumerating row pairs."""
    verts = []
    k = A.shape[0]
    for i, j in itertools.combinations(range(k), 2):
        M = np.array([A[i], A[j]])
        if abs(np.linalg.det(M)) < 1e-12:
            continue
        v = np.linalg.solve(M, [b[i], b[j]])
        if np.all(A @ v <= b + tol):
            verts.append(v)
    return np.array(verts)


def minkowski_sum_vertices(V1, V2):
    """Vertex cloud of the Minkowski sum of two vertex sets (superset)."""
    return np.array([v1 + v2 for v1 in V1 for v2 in V2])
