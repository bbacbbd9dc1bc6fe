"""Sparse operator assembly and Kohn-Sham energy evaluation.

Matrices act on DOF coefficient vectors unless ``full=True`` is requested,
in which case boundary nodes are kept (needed for inhomogeneous Dirichlet
data).  ``stiffness`` is the plain gradient form (grad u, grad v); the
kinetic operator is half of it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import NumericalFailure
from .model import KohnShamModel, eval_vloc, projector_matrix, xc_eval
from .space import FeSpace, basis_bary_derivatives, basis_values


def _cached(space: FeSpace, key, build):
    if key not in space.cache:
        space.cache[key] = build()
    return space.cache[key]


def stiffness(space: FeSpace, full: bool = False) -> sp.csr_matrix:
    """Matrix of ``(grad psi_a, grad psi_b)``."""

    def build():
        rule = space.rule_matrix
        d = basis_bary_derivatives(space.degree, rule.points)  # (nq, nloc, 4)
        ref = np.einsum("q,qai,qbj->abij", rule.weights, d, d)
        g = space.mesh.barycentric_gradients
        gram = np.einsum("tid,tjd->tij", g, g) * (6.0 * space.mesh.volumes)[:, None, None]
        return space.assemble(np.einsum("abij,tij->tab", ref, gram), full=full)

    return _cached(space, ("stiffness", full), build)


def reference_mass(degree: int) -> np.ndarray:
    from .quadrature import tet_rule
    rule = tet_rule(2 * degree)
    psi = basis_values(degree, rule.points)
    return 6.0 * np.einsum("q,qa,qb->ab", rule.weights, psi, psi)


def mass(space: FeSpace, full: bool = False) -> sp.csr_matrix:
    """Matrix of ``(psi_a, psi_b)``."""

    def build():
        local = space.mesh.volumes[:, None, None] * reference_mass(space.degree)[None]
        return space.assemble(local, full=full)

    return _cached(space, ("mass", full), build)


def potential_matrix(space: FeSpace, v_quad: np.ndarray, full: bool = False) -> sp.csr_matrix:
    """Matrix of ``(v psi_a, psi_b)`` for ``v`` sampled at the rich quadrature points."""
    rule = space.rule_rich
    psi = basis_values(space.degree, rule.points)
    pp = np.einsum("qa,qb->qab", psi, psi).reshape(rule.size, -1)
    wv = np.asarray(v_quad) * space.quad_weights(rule)
    local = (wv @ pp).reshape(-1, space.nloc, space.nloc)
    return space.assemble(local, full=full)


def load_vector(space: FeSpace, f_quad: np.ndarray, full: bool = False) -> np.ndarray:
    """Vector of ``(f, psi_a)`` for ``f`` sampled at the rich quadrature points (nt, nq[, N])."""
    rule = space.rule_rich
    psi = basis_values(space.degree, rule.points)
    w = space.quad_weights(rule)
    fw = np.asarray(f_quad) * w.reshape(w.shape + (1,) * (np.ndim(f_quad) - 2))
    local = np.einsum("tq...,qa->ta...", fw, psi)
    return space.assemble_vector(local, full=full)


# -- density ---------------------------------------------------------------

@dataclass
class Density:
    """Electron density at the rich quadrature points plus its nodal interpolant.

    ``quad`` has shape (nt, nq); ``nodal`` holds values at every node of the
    full Lagrange space (zero on the boundary for H^1_0 orbitals).
    """

    quad: np.ndarray
    nodal: np.ndarray

    def mix(self, other: "Density", beta: float) -> "Density":
        return Density((1 - beta) * self.quad + beta * other.quad,
                       (1 - beta) * self.nodal + beta * other.nodal)

    @classmethod
    def zero(cls, space: FeSpace) -> "Density":
        return cls(np.zeros((space.mesh.ntets, space.rule_rich.size)), np.zeros(space.nnodes))


def density(space: FeSpace, coeffs: np.ndarray) -> Density:
    """``rho = sum_i phi_i^2`` for orbital coefficients of shape (ndof, N)."""
    c = np.asarray(coeffs, dtype=float).reshape(space.ndof, -1)
    vals = space.eval_at(c, space.rule_rich.points)
    nodal = np.zeros(space.nnodes)
    nodal[space.dof_nodes] = np.sum(c ** 2, axis=1)
    return Density(np.sum(vals ** 2, axis=-1), nodal)


def integrate(space: FeSpace, f_quad: np.ndarray) -> float:
    return float(np.sum(space.quad_weights(space.rule_rich) * f_quad))


# -- Hamiltonian -------------------------------------------------------------

@dataclass
class HamiltonianParts:
    """Pieces of the discrete Kohn-Sham Hamiltonian ``H = A_kin + B + P P^T``."""

    kinetic: sp.csr_matrix
    mass: sp.csr_matrix
    potential: sp.csr_matrix
    projectors: np.ndarray
    v_eff: np.ndarray
    hartree: object = None

    @property
    def sparse(self) -> sp.csr_matrix:
        return (self.kinetic + self.potential).tocsr()

    def matvec(self, x: np.ndarray) -> np.ndarray:
        y = self.kinetic @ x + self.potential @ x
        if self.projectors.shape[1]:
            y = y + self.projectors @ (self.projectors.T @ x)
        return y

    def dense(self) -> np.ndarray:
        h = self.sparse.toarray()
        return h + self.projectors @ self.projectors.T


def vloc_quad(space: FeSpace, model: KohnShamModel) -> np.ndarray:
    return _cached(space, ("vloc", model.coulomb_wells, model.gaussian_wells),
                   lambda: eval_vloc(model, space.quad_points(space.rule_rich)))


def hartree_field(space: FeSpace, model: KohnShamModel, rho: Density):
    from . import hartree
    if not model.hartree:
        return None
    if model.hartree_method == "direct":
        return hartree.hartree_direct(space, rho.nodal)
    return hartree.hartree_poisson(space, rho.nodal)


def effective_potential(space: FeSpace, model: KohnShamModel, rho: Density, vh=None) -> np.ndarray:
    """``V_loc + V_H + e_xc'(rho)`` at the rich quadrature points."""
    v = vloc_quad(space, model).copy()
    if vh is not None:
        v += space.eval_at(vh.values, space.rule_rich.points, full=True)
    if model.xc is not None:
        v += xc_eval(model.xc, rho.quad)[1]
    return v


def assemble_parts(space: FeSpace, model: KohnShamModel, rho: Density | None = None) -> HamiltonianParts:
    """Assemble the Hamiltonian at density ``rho`` (zero density when omitted)."""
    if rho is None:
        rho = Density.zero(space)
    vh = hartree_field(space, model, rho)
    v = effective_potential(space, model, rho, vh)
    return HamiltonianParts(
        kinetic=_cached(space, "kinetic", lambda: (0.5 * stiffness(space)).tocsr()),
        mass=mass(space),
        potential=potential_matrix(space, v),
        projectors=projector_matrix(space, model),
        v_eff=v,
        hartree=vh,
    )


@dataclass(frozen=True)
class EnergyTerms:
    kinetic: float
    local: float
    nonlocal_: float
    xc: float
    hartree: float

    @property
    def total(self) -> float:
        return self.kinetic + self.local + self.nonlocal_ + self.xc + self.hartree


def energy_terms(space: FeSpace, model: KohnShamModel, coeffs: np.ndarray) -> EnergyTerms:
    c = np.asarray(coeffs, dtype=float).reshape(space.ndof, -1)
    rho = density(space, c)
    kin = 0.5 * float(np.sum(c * (stiffness(space) @ c)))
    loc = integrate(space, vloc_quad(space, model) * rho.quad)
    p = projector_matrix(space, model)
    nl = float(np.sum((p.T @ c) ** 2))
    xc = integrate(space, xc_eval(model.xc, rho.quad)[0]) if model.xc is not None else 0.0
    eh = 0.0
    if model.hartree:
        from .hartree import coulomb_energy
        eh = coulomb_energy(space, rho.nodal, hartree_field(space, model, rho))
    terms = EnergyTerms(kin, loc, nl, xc, eh)
    for name, val in vars(terms).items():
        if not np.isfinite(val):
            raise NumericalFailure(f"non-finite {name} energy", term=name)
    return terms


def total_energy(space: FeSpace, model: KohnShamModel, coeffs: np.ndarray) -> float:
    """Kohn-Sham energy of the orbitals with coefficient columns ``coeffs``."""
    return energy_terms(space, model, coeffs).total


def lagrange_multiplier(space: FeSpace, model: KohnShamModel, coeffs: np.ndarray,
                        parts: HamiltonianParts | None = None) -> np.ndarray:
    """Symmetrized ``Lambda_ij = (H_Phi phi_i, phi_j)``."""
    c = np.asarray(coeffs, dtype=float).reshape(space.ndof, -1)
    if parts is None:
        parts = assemble_parts(space, model, density(space, c))
    lam = c.T @ parts.matvec(c)
    return 0.5 * (lam + lam.T)
