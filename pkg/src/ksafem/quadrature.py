"""Quadrature rules on the reference tetrahedron and triangle.

Points are stored in barycentric coordinates so that a rule can be mapped
onto any simplex without knowing its affine map. Tetrahedron weights sum to
the reference volume 1/6, triangle weights to the reference area 1/2; to
integrate over a physical cell multiply by ``|det J|`` (6|T| or 2|F|).
"""
from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import roots_jacobi

REF_TET_VOLUME = 1.0 / 6.0
REF_TRI_AREA = 0.5


@dataclass(frozen=True)
class QuadratureRule:
    """Positive-weight rule on a reference simplex.

    Attributes
    ----------
    points : ndarray, shape (nq, dim + 1)
        Barycentric coordinates of the nodes.
    weights : ndarray, shape (nq,)
        Weights summing to the reference measure.
    degree : int
        Polynomial degree integrated exactly.
    """

    points: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def size(self) -> int:
        return len(self.weights)


def _collapsed_gauss(dim: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    # Conical product (Duffy) rule: exact to degree 2n - 1, all weights > 0.
    factors = []
    for k in range(dim):
        alpha = dim - 1 - k
        x, w = roots_jacobi(n, alpha, 0.0)
        factors.append(((x + 1.0) / 2.0, w / 2.0 ** (alpha + 1)))
    pts, wts = [], []
    for idx in itertools.product(range(n), repeat=dim):
        t = [factors[k][0][idx[k]] for k in range(dim)]
        w = math.prod(factors[k][1][idx[k]] for k in range(dim))
        scale = 1.0
        cart = []
        for k in range(dim):
            cart.append(t[k] * scale)
            scale *= 1.0 - t[k]
        pts.append([1.0 - sum(cart)] + cart)
        wts.append(w)
    return np.array(pts), np.array(wts)


def _tet_14() -> tuple[np.ndarray, np.ndarray]:
    # Symmetric 14-point degree-5 rule.
    pts, wts = [], []
    for a, w in ((0.0927352503108912, 0.0734930431163620),
                 (0.3108859192633006, 0.1126879257180159)):
        for i in range(4):
            p = [a] * 4
            p[i] = 1.0 - 3.0 * a
            pts.append(p)
            wts.append(w)
    c = 0.0455037041256496
    for i, j in itertools.combinations(range(4), 2):
        p = [0.5 - c] * 4
        p[i] = p[j] = c
        pts.append(p)
        wts.append(0.0425460207770815)
    return np.array(pts), np.array(wts) * REF_TET_VOLUME


def monomial_integral(exponents: tuple[int, ...]) -> float:
    """Exact integral of prod(lambda_i ** a_i) over the reference simplex."""
    dim = len(exponents) - 1
    num = math.prod(math.factorial(a) for a in exponents)
    return num / math.factorial(sum(exponents) + dim)


def _check_exactness(rule: QuadratureRule) -> None:
    nb = rule.points.shape[1]
    for deg in range(rule.degree + 1):
        for exps in itertools.product(range(deg + 1), repeat=nb):
            if sum(exps) != deg:
                continue
            approx = np.dot(rule.weights, np.prod(rule.points ** np.array(exps), axis=1))
            exact = monomial_integral(exps)
            if abs(approx - exact) > 1e-13 * exact:
                raise AssertionError(f"rule of degree {rule.degree} fails on {exps}")


@functools.lru_cache(maxsize=None)
def tet_rule(degree: int) -> QuadratureRule:
    """Tetrahedron rule exact for polynomials up to ``degree``."""
    if degree < 0:
        raise ValueError("degree must be nonnegative")
    if degree <= 1:
        pts, wts, exact = np.full((1, 4), 0.25), np.array([REF_TET_VOLUME]), 1
    elif degree == 2:
        a, b = 0.1381966011250105, 0.5854101966249685
        pts = np.full((4, 4), a)
        np.fill_diagonal(pts, b)
        wts, exact = np.full(4, REF_TET_VOLUME / 4), 2
    elif degree <= 5:
        (pts, wts), exact = _tet_14(), 5
    else:
        n = (degree + 2) // 2
        (pts, wts), exact = _collapsed_gauss(3, n), 2 * n - 1
    rule = QuadratureRule(pts, wts, exact)
    _check_exactness(rule)
    return rule


@functools.lru_cache(maxsize=None)
def tri_rule(degree: int) -> QuadratureRule:
    """Triangle rule exact for polynomials up to ``degree``."""
    if degree < 0:
        raise ValueError("degree must be nonnegative")
    if degree <= 1:
        pts, wts, exact = np.full((1, 3), 1.0 / 3.0), np.array([REF_TRI_AREA]), 1
    elif degree == 2:
        pts = np.full((3, 3), 1.0 / 6.0)
        np.fill_diagonal(pts, 2.0 / 3.0)
        wts, exact = np.full(3, REF_TRI_AREA / 3), 2
    else:
        n = (degree + 2) // 2
        (pts, wts), exact = _collapsed_gauss(2, n), 2 * n - 1
    rule = QuadratureRule(pts, wts, exact)
    _check_exactness(rule)
    return rule


@functools.lru_cache(maxsize=None)
def subdivision_centroids(levels: int = 2) -> np.ndarray:
    """Barycentric centroids of the 8**levels equal-volume red-refinement children.

    Two levels give the 64-cell uniform subdivision used by the near-field
    part of the direct Coulomb oracle.
    """
    cells = [np.eye(4)]
    for _ in range(levels):
        nxt = []
        for v in cells:
            m = {(i, j): 0.5 * (v[i] + v[j]) for i, j in itertools.combinations(range(4), 2)}
            nxt += [
                np.array([v[0], m[0, 1], m[0, 2], m[0, 3]]),
                np.array([m[0, 1], v[1], m[1, 2], m[1, 3]]),
                np.array([m[0, 2], m[1, 2], v[2], m[2, 3]]),
                np.array([m[0, 3], m[1, 3], m[2, 3], v[3]]),
                # octahedron split along the (0,2)-(1,3) midpoint diagonal
                np.array([m[0, 1], m[0, 2], m[0, 3], m[1, 3]]),
                np.array([m[0, 1], m[0, 2], m[1, 2], m[1, 3]]),
                np.array([m[0, 2], m[0, 3], m[1, 3], m[2, 3]]),
                np.array([m[0, 2], m[1, 2], m[1, 3], m[2, 3]]),
            ]
        cells = nxt
    return np.array([c.mean(axis=0) for c in cells])
