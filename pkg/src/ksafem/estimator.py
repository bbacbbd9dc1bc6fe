"""Residual a posteriori indicators, data oscillation and the residual functional.

Strong residuals use the operator-minus-data sign (``H phi - phi Lambda`` for
Kohn-Sham, ``-1/2 Lap u - F`` for the linear problem), so that elementwise
integration by parts reproduces the weak residual exactly.  Face jumps are
``J_e = 1/2 (grad u|_1 - grad u|_2) . n_1``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidInputError
from .mesh import TetMesh, ancestor_map
from .model import KohnShamModel, eval_vloc, projector_matrix, xc_eval
from .quadrature import QuadratureRule, tet_rule, tri_rule
from .space import FeSpace, basis_bary_derivatives, basis_values


@dataclass
class IndicatorField:
    """Per-element ``eta^2`` and ``osc^2`` plus the per-face jump terms."""

    eta2: np.ndarray
    osc2: np.ndarray
    residual2: np.ndarray
    face_jump2: np.ndarray

    @property
    def eta2_total(self) -> float:
        return float(self.eta2.sum())

    @property
    def osc2_total(self) -> float:
        return float(self.osc2.sum())


# -- geometry helpers --------------------------------------------------------

def _coefficients(orbitals) -> np.ndarray:
    c = np.asarray(getattr(orbitals, "coeffs", orbitals), dtype=float)
    return c.reshape(c.shape[0], -1)


def _bary_in(mesh: TetMesh, tets: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of points ``x`` (m, q, 3) in elements ``tets`` (m,)."""
    inv = np.linalg.inv(mesh.jacobians[tets])
    lam = np.einsum("mij,mqj->mqi", inv, x - mesh.vertices[mesh.tets[tets, 0]][:, None, :])
    return np.concatenate([1.0 - lam.sum(axis=2, keepdims=True), lam], axis=2)


@dataclass
class _Faces:
    tets: np.ndarray      # (nf, 2)
    points: np.ndarray    # (nf, nq, 3)
    weights: np.ndarray   # (nf, nq)
    normal: np.ndarray    # (nf, 3), outward from tets[:, 0]
    h: np.ndarray         # (nf,)


def _interior_faces(mesh: TetMesh, rule: QuadratureRule, select=None) -> _Faces:
    t = mesh.interior_faces
    loc = mesh.interior_face_local
    if select is not None:
        t, loc = t[select], loc[select]
    fv = mesh.face_vertices(t[:, 0], loc[:, 0])
    corners = mesh.vertices[fv]  # (nf, 3, 3)
    points = np.einsum("qk,fkd->fqd", rule.points, corners)
    area = mesh.face_areas[t[:, 0], loc[:, 0]]
    g = mesh.barycentric_gradients[t[:, 0], loc[:, 0]]
    normal = -g / np.linalg.norm(g, axis=1, keepdims=True)
    edges = corners[:, [1, 2, 2]] - corners[:, [0, 0, 1]]
    h = np.linalg.norm(edges, axis=2).max(axis=1)
    return _Faces(t, points, 2.0 * area[:, None] * rule.weights[None, :], normal, h)


def _normal_derivative(space: FeSpace, coeffs, tets, bary, normal) -> np.ndarray:
    """``grad u . n`` at per-element points, shape (m, q, N)."""
    d = basis_bary_derivatives(space.degree, bary)  # (m, q, nloc, 4)
    gn = np.einsum("mid,md->mi", space.mesh.barycentric_gradients[tets], normal)
    loc = space.local_coefficients(coeffs)[tets]
    return np.einsum("mqai,mi,maN->mqN", d, gn, loc)


def _jumps(space: FeSpace, coeffs, faces: _Faces, mesh_of_faces: TetMesh | None = None,
           anc: np.ndarray | None = None) -> np.ndarray:
    """Jump ``J_e`` at face quadrature points, shape (nf, nq, N).

    When the faces belong to a finer mesh, ``anc`` maps its elements to the
    elements of ``space.mesh`` that contain them.
    """
    t = faces.tets if anc is None else anc[faces.tets]
    out = 0.0
    for side, sign in ((0, 0.5), (1, -0.5)):
        bary = _bary_in(space.mesh, t[:, side], faces.points)
        out = out + sign * _normal_derivative(space, coeffs, t[:, side], bary, faces.normal)
    return out


def _project_lower(rule: QuadratureRule, degree: int, values: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Elementwise weighted L2 projection onto P^(degree-1) at the rule points."""
    if degree == 1:
        mean = np.einsum("tq,tqN->tN", w, values) / w.sum(axis=1)[:, None]
        return np.broadcast_to(mean[:, None, :], values.shape)
    basis = rule.points  # barycentric coordinates span P^1
    gram = np.einsum("tq,qa,qb->tab", w, basis, basis)
    rhs = np.einsum("tq,qa,tqN->taN", w, basis, values)
    coef = np.linalg.solve(gram, rhs)
    return np.einsum("qa,taN->tqN", basis, coef)


# -- residual evaluators -------------------------------------------------------

class KsResidual:
    """Strong Kohn-Sham residual ``H_Phi phi_i - sum_j lambda_ji phi_j`` of a discrete solution."""

    def __init__(self, space: FeSpace, model: KohnShamModel, orbitals, parts=None):
        from .assembly import assemble_parts, density, lagrange_multiplier
        self.space, self.model = space, model
        self.coeffs = _coefficients(orbitals)
        if parts is None:
            parts = assemble_parts(space, model, density(space, self.coeffs))
        self.hartree = parts.hartree
        self.lam = lagrange_multiplier(space, model, self.coeffs, parts)
        self.overlaps = projector_matrix(space, model).T @ self.coeffs  # (nproj, N)

    def _local(self, tets, bary):
        sp_ = self.space
        psi = basis_values(sp_.degree, bary)
        phi = np.einsum("mqa,maN->mqN", psi, sp_.local_coefficients(self.coeffs)[tets])
        x = np.einsum("mqi,mid->mqd", bary, sp_.mesh.vertices[sp_.mesh.tets[tets]])
        return psi, phi, x

    def potential(self, tets, bary) -> np.ndarray:
        """Effective local potential ``V_loc + V_H + e_xc'(rho)`` at per-element points."""
        psi, phi, x = self._local(tets, bary)
        v = eval_vloc(self.model, x)
        if self.hartree is not None:
            v = v + np.einsum("mqa,ma->mq", psi, self.space.local_full(self.hartree.values)[tets])
        if self.model.xc is not None:
            v = v + xc_eval(self.model.xc, np.sum(phi ** 2, axis=2))[1]
        return v

    def nonlocal_(self, x) -> np.ndarray:
        out = np.zeros(x.shape[:-1] + (self.coeffs.shape[1],))
        for j, proj in enumerate(self.model.projectors):
            out += proj(x)[..., None] * self.overlaps[j]
        return out

    def at(self, tets, bary) -> np.ndarray:
        _, phi, x = self._local(tets, bary)
        lap = np.einsum("ma,maN->mN", self.space.laplacians[tets],
                        self.space.local_coefficients(self.coeffs)[tets])
        return (-0.5 * lap[:, None, :] + self.potential(tets, bary)[..., None] * phi
                + self.nonlocal_(x) - phi @ self.lam)


class LinearResidual:
    """Strong residual ``-1/2 Lap u_h - F`` of the linear model problem."""

    def __init__(self, space: FeSpace, source: Callable, coeffs):
        self.space, self.source = space, source
        self.coeffs = _coefficients(coeffs)

    def at(self, tets, bary) -> np.ndarray:
        sp_ = self.space
        x = np.einsum("mqi,mid->mqd", bary, sp_.mesh.vertices[sp_.mesh.tets[tets]])
        f = np.asarray(self.source(x), dtype=float)
        f = f.reshape(f.shape[:2] + (-1,))
        lap = np.einsum("ma,maN->mN", sp_.laplacians[tets], sp_.local_coefficients(self.coeffs)[tets])
        return -0.5 * lap[:, None, :] - f


# -- indicators ---------------------------------------------------------------

def indicators_from_residual(space: FeSpace, residual) -> IndicatorField:
    mesh = space.mesh
    nt = mesh.ntets
    rule = space.rule_rich
    tets = np.arange(nt)
    bary = np.broadcast_to(rule.points, (nt,) + rule.points.shape)
    r = residual.at(tets, bary)
    w = space.quad_weights(rule)
    h2 = mesh.diameters ** 2
    res2 = h2 * np.einsum("tq,tqN->t", w, r ** 2)
    rbar = _project_lower(rule, space.degree, r, w)
    osc2 = h2 * np.einsum("tq,tqN->t", w, (r - rbar) ** 2)

    faces = _interior_faces(mesh, tri_rule(2 * space.degree))
    j = _jumps(space, residual.coeffs, faces)
    face2 = faces.h * np.einsum("fq,fqN->f", faces.weights, j ** 2)
    # every interior face is charged to both of its elements
    eta2 = (res2 + np.bincount(faces.tets[:, 0], face2, minlength=nt)
            + np.bincount(faces.tets[:, 1], face2, minlength=nt))
    return IndicatorField(eta2, osc2, res2, face2)


def estimator_gram(space: FeSpace, residual) -> np.ndarray:
    """Matrix ``Q`` with ``eta^2(Omega) = sum_ij Q_ij`` restricted to component pairs.

    ``Q_ij = sum_T h_T^2 (R_i, R_j)_T + 2 sum_e h_e (J_i, J_j)_e``; its trace is
    the total ``eta^2`` of all components.
    """
    mesh = space.mesh
    rule = space.rule_rich
    nt = mesh.ntets
    r = residual.at(np.arange(nt), np.broadcast_to(rule.points, (nt,) + rule.points.shape))
    scaled = (mesh.diameters[:, None] * np.sqrt(space.quad_weights(rule)))[..., None] * r
    faces = _interior_faces(mesh, tri_rule(2 * space.degree))
    j = _jumps(space, residual.coeffs, faces)
    fj = np.sqrt(2.0 * faces.h[:, None] * faces.weights)[..., None] * j
    a = scaled.reshape(-1, scaled.shape[-1])
    b = fj.reshape(-1, fj.shape[-1])
    return a.T @ a + b.T @ b


def ks_indicators(space: FeSpace, model: KohnShamModel, orbitals, parts=None) -> IndicatorField:
    """Indicators ``eta^2_T`` and ``osc^2_T`` of a discrete Kohn-Sham solution."""
    return indicators_from_residual(space, KsResidual(space, model, orbitals, parts))


def linear_indicators(space: FeSpace, source: Callable, coeffs) -> IndicatorField:
    """Indicators of a discrete solution of ``-1/2 Lap u = F``."""
    return indicators_from_residual(space, LinearResidual(space, source, coeffs))


# -- residual functional --------------------------------------------------------

def residual_pairing(residual, fine: FeSpace, gamma: np.ndarray) -> float:
    """``sum_T (R_T, Gamma)_T + sum_e (J_e, Gamma)_e`` over interior faces, each once.

    ``gamma`` holds coefficients in ``fine``, a space on a refinement of the
    residual's mesh (possibly the same mesh).
    """
    space = residual.space
    g = np.asarray(gamma, dtype=float).reshape(fine.ndof, -1)
    anc = np.arange(fine.mesh.ntets) if fine.mesh is space.mesh else ancestor_map(fine.mesh, space.mesh)
    rule = tet_rule(2 * fine.degree + 2)
    x = fine.quad_points(rule)
    r = residual.at(anc, _bary_in(space.mesh, anc, x))
    vals = fine.eval_at(g, rule.points)
    total = float(np.einsum("tq,tqN,tqN->", fine.quad_weights(rule), r, vals))

    # fine faces lying inside coarse faces
    ft = fine.mesh.interior_faces
    on_coarse = np.flatnonzero(anc[ft[:, 0]] != anc[ft[:, 1]])
    faces = _interior_faces(fine.mesh, tri_rule(2 * fine.degree + 2), select=on_coarse)
    j = _jumps(space, residual.coeffs, faces, anc=anc)
    gb = _bary_in(fine.mesh, faces.tets[:, 0], faces.points)
    gv = np.einsum("fqa,faN->fqN", basis_values(fine.degree, gb),
                   fine.local_coefficients(g)[faces.tets[:, 0]])
    return total + float(np.einsum("fq,fqN,fqN->", faces.weights, j, gv))


def residual_functional(space: FeSpace, model: KohnShamModel, orbitals, fine: FeSpace,
                        gamma: np.ndarray, parts=None) -> float:
    """Elementwise form of the weak Kohn-Sham residual tested with ``gamma`` in ``fine``."""
    return residual_pairing(KsResidual(space, model, orbitals, parts), fine, gamma)


def weak_residual(residual, fine: FeSpace, gamma: np.ndarray) -> float:
    """Weak form of the same residual, assembled on ``fine`` (independent of the face terms)."""
    from .assembly import mass, potential_matrix, stiffness
    from .space import transfer
    g = np.asarray(gamma, dtype=float).reshape(fine.ndof, -1)
    c = transfer(residual.space, fine, residual.coeffs)
    out = 0.5 * float(np.sum(g * (stiffness(fine) @ c)))
    anc = np.arange(fine.mesh.ntets) if fine.mesh is residual.space.mesh else \
        ancestor_map(fine.mesh, residual.space.mesh)
    rule = fine.rule_rich
    x = fine.quad_points(rule)
    bary = _bary_in(residual.space.mesh, anc, x)
    vals = fine.eval_at(g, rule.points)
    w = fine.quad_weights(rule)
    if isinstance(residual, KsResidual):
        v = residual.potential(anc, bary)
        out += float(np.sum(g * (potential_matrix(fine, v) @ c)))
        out += float(np.einsum("tq,tqN,tqN->", w, residual.nonlocal_(x), vals))
        out -= float(np.sum(g * (mass(fine) @ c @ residual.lam)))
    else:
        f = np.asarray(residual.source(x), dtype=float).reshape(x.shape[:2] + (-1,))
        out -= float(np.einsum("tq,tqN,tqN->", w, f, vals))
    return out


def estimator_transform_bound(space: FeSpace, model: KohnShamModel, orbitals, u: np.ndarray,
                              parts=None) -> tuple[float, float]:
    """Totals ``(eta^2(Phi U), eta^2(Phi))`` for an orthogonal ``U``."""
    u = np.asarray(u, dtype=float)
    if u.ndim != 2 or u.shape[0] != u.shape[1] or np.abs(u.T @ u - np.eye(len(u))).max() > 1e-10:
        raise InvalidInputError("U must be an orthogonal matrix")
    c = _coefficients(orbitals)
    rotated = ks_indicators(space, model, c @ u, parts).eta2_total
    return rotated, ks_indicators(space, model, c, parts).eta2_total
