"""Hartree potential ``V_H = rho * |x|^-1`` and Coulomb energy.

Two routes:

* ``hartree_poisson`` solves ``-Lap V = 4 pi rho`` with monopole + dipole
  boundary values about the charge centroid;
* ``hartree_direct`` sums the convolution by quadrature.  It is quadratic
  in the mesh size and serves as an oracle on small meshes.

Densities are passed as full nodal coefficient vectors (all nodes, boundary
included) of the space.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, InvalidInputError
from .quadrature import subdivision_centroids, tet_rule
from .space import FeSpace

DIRECT_MAX_ELEMENTS = 5000
# distance floor of the near-field rule, relative to the element diameter
NEAR_FLOOR = 1e-3


@dataclass
class HartreeField:
    """Full nodal values of ``V_H`` and the route that produced them."""

    values: np.ndarray
    method: str
    charge: float = 0.0
    centroid: np.ndarray | None = None


def _moments(space: FeSpace, rho_full: np.ndarray):
    from .assembly import mass
    m_rho = mass(space, full=True) @ rho_full
    q = float(m_rho.sum())
    first = space.node_coords.T @ m_rho  # exact: x is in the space
    return q, first


def hartree_poisson(space: FeSpace, rho_full: np.ndarray) -> HartreeField:
    """Solve ``1/2 (grad V, grad w) = 2 pi (rho, w)`` with far-field Dirichlet data."""
    from .assembly import mass
    from .linear_bvp import solve_dirichlet
    rho = np.asarray(rho_full, dtype=float)
    if rho.shape != (space.nnodes,):
        raise InvalidInputError("rho must be a full nodal vector")
    if not np.any(rho):
        return HartreeField(np.zeros(space.nnodes), "poisson")
    q, first = _moments(space, rho)
    box = space.mesh.domain_box
    if abs(q) > 1e-12 * np.abs(rho).max():
        center = first / q
    else:
        center = box.mean(axis=1)
    dipole = first - q * center
    d = space.node_coords[space.boundary_node_mask] - center
    r = np.linalg.norm(d, axis=1)
    g = q / r + (d @ dipole) / r ** 3
    load = 2.0 * np.pi * (mass(space, full=True) @ rho)
    v = solve_dirichlet(space, load, g)
    return HartreeField(v, "poisson", q, center)


def _check_size(space: FeSpace):
    if space.mesh.ntets > DIRECT_MAX_ELEMENTS:
        raise InvalidInputError(
            f"direct Coulomb sum refused on {space.mesh.ntets} elements (limit {DIRECT_MAX_ELEMENTS})")


def hartree_direct(space: FeSpace, rho_full: np.ndarray, chunk: int = 256) -> HartreeField:
    """Nodal ``V_H`` by direct quadrature of ``int rho(y) / |x - y| dy``.

    Elements touching the target node use the 64-cell centroid rule with the
    distance floored at ``NEAR_FLOOR * h_T``; all others use the degree-2k rule.
    """
    _check_size(space)
    rho = np.asarray(rho_full, dtype=float)
    if rho.shape != (space.nnodes,):
        raise InvalidInputError("rho must be a full nodal vector")
    mesh = space.mesh
    if not np.any(rho):
        return HartreeField(np.zeros(space.nnodes), "direct")
    rule = tet_rule(2 * space.degree)
    y = np.einsum("qi,tid->tqd", rule.points, mesh.vertices[mesh.tets])
    wf = space.quad_weights(rule) * space.eval_at(rho, rule.points, full=True)
    yf, wflat = y.reshape(-1, 3), wf.ravel()
    xs = space.node_coords
    v = np.empty(space.nnodes)
    for s in range(0, len(xs), chunk):
        v[s:s + chunk] = _inverse_distance(xs[s:s + chunk, None, :], yf[None]) @ wflat

    # replace the contribution of every (node, incident element) pair
    sub = subdivision_centroids(2)
    ys = np.einsum("qi,tid->tqd", sub, mesh.vertices[mesh.tets])
    ws = (mesh.volumes / len(sub))[:, None] * space.eval_at(rho, sub, full=True)
    node = space.element_nodes.ravel()
    elem = np.repeat(np.arange(mesh.ntets), space.nloc)
    floor = NEAR_FLOOR * mesh.diameters[elem]
    x = xs[node]
    far = np.sum(wf[elem] * _inverse_distance(x[:, None, :], y[elem]), axis=1)
    d_near = np.maximum(np.linalg.norm(x[:, None, :] - ys[elem], axis=2), floor[:, None])
    near = np.sum(ws[elem] / d_near, axis=1)
    v += np.bincount(node, near - far, minlength=space.nnodes)
    q = float(np.sum(wf))
    return HartreeField(v, "direct", q)


def _inverse_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``1 / |a - b|`` with coincident points mapped to zero."""
    d = np.linalg.norm(a - b, axis=-1)
    return np.where(d > 0, 1.0 / np.where(d > 0, d, 1.0), 0.0)


def coulomb_direct(space: FeSpace, f_full: np.ndarray, g_full: np.ndarray) -> float:
    """Symmetric double sum for ``D(f, g) = int int f(x) g(y) / |x - y|``.

    Element pairs are summed with the degree-2 rule, except that each element
    with itself and with its face neighbours uses the 64-cell centroid rule on
    both sides; coincident sub-cells take the self-interaction of a ball of
    the same volume, ``6/5 |B|^2 / R``.
    """
    _check_size(space)
    mesh = space.mesh
    f = np.asarray(f_full, dtype=float)
    g = np.asarray(g_full, dtype=float)
    rule = tet_rule(2)
    y = np.einsum("qi,tid->tqd", rule.points, mesh.vertices[mesh.tets])
    w = 6.0 * mesh.volumes[:, None] * rule.weights[None, :]
    fv = w * space.eval_at(f, rule.points, full=True)
    gv = w * space.eval_at(g, rule.points, full=True)
    yf, ff, gf = y.reshape(-1, 3), fv.ravel(), gv.ravel()
    total = 0.0
    for s in range(0, len(yf), 1024):
        k = _inverse_distance(yf[s:s + 1024, None, :], yf[None])
        total += float(ff[s:s + 1024] @ (k @ gf))

    pairs = np.vstack([np.column_stack([np.arange(mesh.ntets)] * 2),
                       mesh.interior_faces, mesh.interior_faces[:, ::-1]])
    sub = subdivision_centroids(2)
    cell = mesh.volumes / len(sub)
    ys = np.einsum("qi,tid->tqd", sub, mesh.vertices[mesh.tets])
    fs = cell[:, None] * space.eval_at(f, sub, full=True)
    gs = cell[:, None] * space.eval_at(g, sub, full=True)
    self_coef = 1.2 / (3.0 * cell / (4.0 * np.pi)) ** (1.0 / 3.0)
    for s in range(0, len(pairs), 128):
        ia, ib = pairs[s:s + 128, 0], pairs[s:s + 128, 1]
        near = np.einsum("ps,pst,pt->p", fs[ia], _inverse_distance(ys[ia][:, :, None], ys[ib][:, None]), gs[ib])
        near += np.where(ia == ib, self_coef[ia] * np.einsum("ps,ps->p", fs[ia], gs[ib]), 0.0)
        coarse = np.einsum("ps,pst,pt->p", fv[ia], _inverse_distance(y[ia][:, :, None], y[ib][:, None]), gv[ib])
        total += float(np.sum(near - coarse))
    return total


def coulomb_energy(space: FeSpace, rho_full: np.ndarray, field: HartreeField | None) -> float:
    """``1/2 int rho V_H`` for a nodal density and a consistent Hartree field."""
    from .assembly import mass
    if field is None:
        return 0.0
    rho = np.asarray(rho_full, dtype=float)
    e = 0.5 * float(rho @ (mass(space, full=True) @ field.values))
    if e < -1e-10 * max(1.0, abs(e)):
        raise ContractViolation(f"negative Coulomb energy {e:.3e}")
    return max(e, 0.0)


def coulomb_pairing(space: FeSpace, f_full: np.ndarray, field: HartreeField) -> float:
    """``D(f, g) = int f V_H[g]`` given the Hartree field of ``g``."""
    from .assembly import mass
    return float(np.asarray(f_full, dtype=float) @ (mass(space, full=True) @ field.values))
