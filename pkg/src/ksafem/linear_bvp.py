"""Linear model problem ``a(u, v) = (F, v)`` with ``a(u, v) = 1/2 (grad u, grad v)``.

Provides the SPD linear solver used elsewhere (Hartree potential), and the
adaptive harness that exercises the estimator on problems with known
solutions.  Errors are measured in the gradient seminorm ``|| grad e ||``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConvergenceError, InvalidInputError, NumericalFailure
from .mesh import TetMesh, refine, refined_set
from .quadrature import tet_rule
from .space import FeSpace, transfer

DIRECT_LIMIT = 6000
SOLVE_RTOL = 1e-10

# Largest ratio eta^2(v) / ||grad v||^2 of the F = 0 estimator form
# (estimator_constant), maximized over randomly bisected cube meshes up to
# 1800 DOFs and rounded up.
ESTIMATOR_CONSTANT_SQ = {1: 12.65, 2: 103.6}


def quasi_error_weight(degree: int) -> float:
    """Weight ``gamma = 1 / (2 C*^2)`` of ``eta^2`` in the quasi-error."""
    return 1.0 / (2.0 * ESTIMATOR_CONSTANT_SQ[degree])


# -- sparse SPD solves ----------------------------------------------------

def solve_spd(a: sp.spmatrix, b: np.ndarray, rtol: float = SOLVE_RTOL, cache: dict | None = None,
              key=None) -> np.ndarray:
    """Solve ``a x = b`` for SPD ``a``; columns of ``b`` are solved independently.

    Small systems use a sparse LU factorization, larger ones conjugate
    gradients with a smoothed-aggregation AMG preconditioner (cached in
    ``cache[key]`` when given).  The relative residual is checked on return.
    """
    b = np.asarray(b, dtype=float)
    if b.shape[0] != a.shape[0]:
        raise InvalidInputError("right-hand side does not match the matrix")
    if a.shape[0] == 0:
        return np.zeros_like(b)
    cols = b.reshape(b.shape[0], -1)
    x = np.zeros_like(cols)
    if a.shape[0] <= DIRECT_LIMIT:
        lu = spla.splu(sp.csc_matrix(a))
        x = lu.solve(cols)
    else:
        from .eigensolve import smoothed_aggregation
        if cache is not None and key in cache:
            ml = cache[key]
        else:
            ml = smoothed_aggregation(a)
            if cache is not None:
                cache[key] = ml
        prec = ml.aspreconditioner(cycle="V")
        for j in range(cols.shape[1]):
            if not np.any(cols[:, j]):
                continue
            x[:, j], info = spla.cg(a, cols[:, j], rtol=rtol, atol=0.0, M=prec, maxiter=500)
            if info != 0:
                raise ConvergenceError(f"CG stopped after {info} iterations", term="linear_solve")
    for j in range(cols.shape[1]):
        bn = np.linalg.norm(cols[:, j])
        if bn == 0.0:
            continue
        res = np.linalg.norm(cols[:, j] - a @ x[:, j]) / bn
        if not np.isfinite(res) or res > 10 * rtol:
            raise ConvergenceError(f"relative residual {res:.2e} above {rtol:.0e}", term="linear_solve")
    return x.reshape(b.shape)


# -- problem data -----------------------------------------------------------

@dataclass(frozen=True)
class LinearProblem:
    """``-1/2 Lap u = F`` in the box, ``u = g`` on its boundary.

    ``source`` maps points (..., 3) to values (...) or (..., N).  ``dirichlet``
    (optional) gives boundary values the same way; without it the problem is
    homogeneous.  ``exact``/``exact_grad`` enable error reporting.
    """

    source: Callable[[np.ndarray], np.ndarray]
    n_components: int = 1
    dirichlet: Callable[[np.ndarray], np.ndarray] | None = None
    exact: Callable[[np.ndarray], np.ndarray] | None = None
    exact_grad: Callable[[np.ndarray], np.ndarray] | None = None
    name: str = field(default="linear", compare=False)


def source_load(space: FeSpace, problem: LinearProblem, full: bool = False) -> np.ndarray:
    from .assembly import load_vector
    f = np.asarray(problem.source(space.quad_points(space.rule_rich)), dtype=float)
    if not np.all(np.isfinite(f)):
        raise InvalidInputError("source is not finite at the quadrature points")
    if problem.n_components > 1:
        f = f.reshape(f.shape[:2] + (problem.n_components,))
    return load_vector(space, f, full=full)


def solve_dirichlet(space: FeSpace, load_full: np.ndarray, boundary: np.ndarray,
                    scale: float = 0.5) -> np.ndarray:
    """Full nodal solution of ``scale (grad u, grad v) = <load, v>`` with ``u = boundary`` on the boundary.

    ``load_full`` is indexed by all nodes; ``boundary`` holds values at the
    boundary nodes in node order.
    """
    from .assembly import stiffness
    k = stiffness(space, full=True)
    bmask = space.boundary_node_mask
    inner = space.dof_nodes
    u = np.zeros((space.nnodes,) + np.shape(load_full)[1:])
    u[bmask] = boundary
    kib = k[inner][:, bmask]
    rhs = np.asarray(load_full)[inner] - scale * (kib @ u[bmask])
    u[inner] = solve_spd(scale * stiffness(space), rhs, cache=space.cache, key=("amg", scale))
    return u


def solve_linear(space: FeSpace, problem: LinearProblem) -> np.ndarray:
    """Galerkin solution.

    Returns DOF coefficients (ndof[, N]) for homogeneous problems and full
    nodal values (nnodes[, N]) when ``problem.dirichlet`` is set.
    """
    from .assembly import stiffness
    if problem.dirichlet is None:
        return solve_spd(0.5 * stiffness(space), source_load(space, problem),
                         cache=space.cache, key=("amg", 0.5))
    g = np.asarray(problem.dirichlet(space.node_coords[space.boundary_node_mask]), dtype=float)
    return solve_dirichlet(space, source_load(space, problem, full=True), g)


# -- errors -------------------------------------------------------------------

def h1_seminorm_error(space: FeSpace, coeffs: np.ndarray, exact_grad: Callable,
                      degree: int | None = None) -> float:
    """``|| grad (u - u_h) ||^2`` by quadrature of the given degree (default ``2k + 4``)."""
    rule = tet_rule(2 * space.degree + 4 if degree is None else degree)
    g = np.asarray(exact_grad(space.quad_points(rule)), dtype=float)
    gh = space.grad_at(coeffs, rule.points)
    d2 = ((g.reshape(gh.shape) - gh) ** 2).reshape(gh.shape[0], gh.shape[1], -1).sum(axis=2)
    return float(np.sum(space.quad_weights(rule) * d2))


def gradient_distance(coarse: FeSpace, c_coarse: np.ndarray, fine: FeSpace, c_fine: np.ndarray) -> float:
    """``|| grad (u_H - u_h) ||^2`` for nested spaces (exact)."""
    from .assembly import stiffness
    d = transfer(coarse, fine, c_coarse) - np.asarray(c_fine, dtype=float)
    return float(np.sum(d * (stiffness(fine) @ d)))


# -- estimator constant ------------------------------------------------------

def estimator_constant(space: FeSpace) -> float:
    """``max_v eta^2(v; F = 0) / || grad v ||^2`` on the given space (dense; small meshes only)."""
    import scipy.linalg as sla
    from .assembly import stiffness
    from .estimator import LinearResidual, estimator_gram
    if space.ndof > 2000:
        raise InvalidInputError("estimator_constant is meant for small spaces")
    zero = lambda x: np.zeros(x.shape[:-1])
    q = estimator_gram(space, LinearResidual(space, zero, np.eye(space.ndof)))
    return float(sla.eigh(q, stiffness(space).toarray(), eigvals_only=True)[-1])


# -- adaptive loop -----------------------------------------------------------

@dataclass
class LinearStep:
    ndof: int
    nelem: int
    eta2: float
    osc2: float
    error2: float | None
    quasi_error: float | None
    wall_s: float
    energy: float = float("nan")


@dataclass
class LinearAfemResult:
    steps: list[LinearStep]
    spaces: list[FeSpace]
    solutions: list[np.ndarray]
    indicators: list

    def contraction_ratios(self) -> np.ndarray:
        q = np.array([s.quasi_error for s in self.steps], dtype=float)
        return q[1:] / q[:-1]

    def effectivity(self) -> np.ndarray:
        return np.array([np.sqrt(s.eta2 / s.error2) for s in self.steps])


def afem_linear(mesh: TetMesh, problem: LinearProblem, theta: float = 0.5, n_iters: int = 8,
                degree: int = 2, gamma: float | None = None, uniform: bool = False,
                max_ndof: int | None = None, callback=None) -> LinearAfemResult:
    """Solve, estimate, mark (Dorfler) and refine ``n_iters`` times.

    Records ``e^2 + gamma eta^2`` with ``e = || grad (u - u_h) ||`` when the
    exact gradient is known.  ``uniform=True`` refines every element instead
    (the comparison run).  ``energy`` is ``1/2 a(u_h, u_h) - (f, u_h)``;
    ``callback(step, space, u)`` runs after each solve.
    """
    from .assembly import stiffness
    from .estimator import linear_indicators
    from .marking import mark_dorfler
    if not 0.0 < theta < 1.0:
        raise InvalidInputError(f"theta={theta} outside (0, 1)")
    if problem.dirichlet is not None:
        raise InvalidInputError("the adaptive harness handles homogeneous problems only")
    gamma = quasi_error_weight(degree) if gamma is None else gamma
    out = LinearAfemResult([], [], [], [])
    for _ in range(n_iters):
        t0 = time.perf_counter()
        space = FeSpace(mesh, degree)
        u = solve_linear(space, problem)
        ind = linear_indicators(space, problem.source, u)
        err = None if problem.exact_grad is None else h1_seminorm_error(space, u, problem.exact_grad)
        quasi = None if err is None else err + gamma * ind.eta2_total
        for v in (ind.eta2_total, err if err is not None else 0.0):
            if not np.isfinite(v):
                raise NumericalFailure("non-finite estimator or error", term="estimate")
        energy = 0.25 * float(np.sum(u * (stiffness(space) @ u))) - float(np.sum(source_load(space, problem) * u))
        step = LinearStep(space.ndof, mesh.ntets, ind.eta2_total, ind.osc2_total, err, quasi,
                          time.perf_counter() - t0, energy)
        out.steps.append(step)
        if callback is not None:
            callback(step, space, u)
        out.spaces.append(space)
        out.solutions.append(u)
        out.indicators.append(ind)
        if ind.eta2_total == 0.0 or (max_ndof is not None and space.ndof >= max_ndof):
            break
        if uniform:
            mesh = refine(mesh, np.arange(mesh.ntets))
        else:
            mesh = refine(mesh, mark_dorfler(ind, theta).indices)
    return out


def localized_bound_check(coarse: FeSpace, c_coarse: np.ndarray, fine: FeSpace, c_fine: np.ndarray,
                          indicators_coarse) -> tuple[float, float]:
    """``(|| grad (u_H - u_h) ||^2, sum over refined coarse elements of eta_H^2)``."""
    if coarse.degree != fine.degree:
        raise InvalidInputError("spaces must share the polynomial degree")
    r = refined_set(coarse.mesh, fine.mesh)
    dist = gradient_distance(coarse, c_coarse, fine, c_fine)
    return dist, float(np.asarray(indicators_coarse.eta2)[r].sum())
