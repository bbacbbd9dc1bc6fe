"""Continuous Lagrange P1/P2 spaces on tetrahedral meshes.

Global nodes are the mesh vertices followed (for P2) by the edge midpoints in
sorted endpoint order.  Nodes on the boundary carry no degree of freedom, so
coefficient vectors live in the H^1_0 subspace; the *full* node set is still
available for fields with nonzero boundary values (Hartree potential).
Local P2 ordering: four vertices, then edges (01, 02, 03, 12, 13, 23).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .errors import InvalidInputError
from .mesh import LOCAL_EDGES, TetMesh, ancestor_map
from .quadrature import QuadratureRule, tet_rule


# -- reference basis --------------------------------------------------------

def nlocal(degree: int) -> int:
    return 4 if degree == 1 else 10


def basis_values(degree: int, bary: np.ndarray) -> np.ndarray:
    """Basis functions at barycentric points, shape (..., nloc)."""
    lam = np.asarray(bary, dtype=float)
    if degree == 1:
        return lam.copy()
    vert = lam * (2.0 * lam - 1.0)
    edge = 4.0 * lam[..., LOCAL_EDGES[:, 0]] * lam[..., LOCAL_EDGES[:, 1]]
    return np.concatenate([vert, edge], axis=-1)


def basis_bary_derivatives(degree: int, bary: np.ndarray) -> np.ndarray:
    """Derivatives with respect to the four barycentric coordinates, shape (..., nloc, 4)."""
    lam = np.asarray(bary, dtype=float)
    shape = lam.shape[:-1]
    if degree == 1:
        return np.broadcast_to(np.eye(4), shape + (4, 4)).copy()
    d = np.zeros(shape + (10, 4))
    for i in range(4):
        d[..., i, i] = 4.0 * lam[..., i] - 1.0
    for k, (i, j) in enumerate(LOCAL_EDGES):
        d[..., 4 + k, i] = 4.0 * lam[..., j]
        d[..., 4 + k, j] = 4.0 * lam[..., i]
    return d


def basis_bary_hessians(degree: int) -> np.ndarray:
    """Constant second barycentric derivatives, shape (nloc, 4, 4)."""
    h = np.zeros((nlocal(degree), 4, 4))
    if degree == 2:
        for i in range(4):
            h[i, i, i] = 4.0
        for k, (i, j) in enumerate(LOCAL_EDGES):
            h[4 + k, i, j] = h[4 + k, j, i] = 4.0
    return h


def _node_bary(degree: int) -> np.ndarray:
    eye = np.eye(4)
    if degree == 1:
        return eye
    return np.vstack([eye, 0.5 * (eye[LOCAL_EDGES[:, 0]] + eye[LOCAL_EDGES[:, 1]])])


# -- the space -------------------------------------------------------------

class FeSpace:
    """Lagrange space of degree 1 or 2 with homogeneous Dirichlet DOFs removed."""

    def __init__(self, mesh: TetMesh, degree: int):
        if degree not in (1, 2):
            raise InvalidInputError(f"unsupported degree {degree}; expected 1 or 2")
        self.mesh = mesh
        self.degree = degree
        self.nloc = nlocal(degree)
        nv = mesh.nvertices
        if degree == 1:
            self.element_nodes = mesh.tets.copy()
            self.node_coords = mesh.vertices
            self.boundary_node_mask = mesh.boundary_vertex_mask
        else:
            self.element_nodes = np.hstack([mesh.tets, nv + mesh.tet_edges])
            e = mesh.edges
            self.node_coords = np.vstack([mesh.vertices,
                                          0.5 * (mesh.vertices[e[:, 0]] + mesh.vertices[e[:, 1]])])
            self.boundary_node_mask = np.concatenate([mesh.boundary_vertex_mask,
                                                      mesh.boundary_edge_mask])
        self.nnodes = len(self.node_coords)
        self.node_to_dof = np.full(self.nnodes, -1, dtype=np.int64)
        interior = np.flatnonzero(~self.boundary_node_mask)
        self.node_to_dof[interior] = np.arange(len(interior))
        self.dof_nodes = interior
        self.ndof = len(interior)
        self.element_dofs = self.node_to_dof[self.element_nodes]
        self.cache: dict = {}

    def __repr__(self) -> str:
        return f"FeSpace(P{self.degree}, ndof={self.ndof}, ntets={self.mesh.ntets})"

    # -- quadrature data ----------------------------------------------------
    @property
    def rule_matrix(self) -> QuadratureRule:
        """Rule for bilinear forms with polynomial data (degree 2k)."""
        return tet_rule(2 * self.degree)

    @property
    def rule_rich(self) -> QuadratureRule:
        """Rule for nonpolynomial coefficients and densities (degree 2k + 2)."""
        return tet_rule(2 * self.degree + 2)

    def quad_points(self, rule: QuadratureRule) -> np.ndarray:
        """Physical quadrature points, shape (nt, nq, 3)."""
        return np.einsum("qi,tid->tqd", rule.points, self.mesh.vertices[self.mesh.tets])

    def quad_weights(self, rule: QuadratureRule) -> np.ndarray:
        """Physical weights, shape (nt, nq)."""
        return 6.0 * self.mesh.volumes[:, None] * rule.weights[None, :]

    def physical_gradients(self, bary: np.ndarray) -> np.ndarray:
        """Basis gradients at reference points on every element, shape (nt, nq, nloc, 3)."""
        d = basis_bary_derivatives(self.degree, bary)  # (nq, nloc, 4)
        return np.einsum("qai,tid->tqad", d, self.mesh.barycentric_gradients)

    @cached_property
    def laplacians(self) -> np.ndarray:
        """Elementwise (constant) Laplacian of each local basis function, shape (nt, nloc)."""
        g = self.mesh.barycentric_gradients
        gram = np.einsum("tid,tjd->tij", g, g)
        return np.einsum("aij,tij->ta", basis_bary_hessians(self.degree), gram)

    # -- coefficient helpers -----------------------------------------------
    def local_coefficients(self, coeffs: np.ndarray) -> np.ndarray:
        """Gather DOF coefficients per element (zeros on boundary nodes): (nt, nloc[, N])."""
        c = np.asarray(coeffs, dtype=float)
        padded = np.concatenate([c, np.zeros((1,) + c.shape[1:])])
        return padded[self.element_dofs]

    def local_full(self, node_values: np.ndarray) -> np.ndarray:
        return np.asarray(node_values, dtype=float)[self.element_nodes]

    def to_full(self, coeffs: np.ndarray) -> np.ndarray:
        """Embed DOF coefficients into the full node vector (zero boundary values)."""
        c = np.asarray(coeffs, dtype=float)
        full = np.zeros((self.nnodes,) + c.shape[1:])
        full[self.dof_nodes] = c
        return full

    def eval_at(self, coeffs, bary: np.ndarray, full: bool = False) -> np.ndarray:
        """Values at reference points on every element, shape (nt, nq[, N])."""
        loc = self.local_full(coeffs) if full else self.local_coefficients(coeffs)
        psi = basis_values(self.degree, bary)
        return np.einsum("qa,ta...->tq...", psi, loc)

    def grad_at(self, coeffs, bary: np.ndarray, full: bool = False) -> np.ndarray:
        """Gradients at reference points, shape (nt, nq, 3[, N])."""
        loc = self.local_full(coeffs) if full else self.local_coefficients(coeffs)
        dpsi = self.physical_gradients(bary)
        return np.einsum("tqad,ta...->tqd...", dpsi, loc)

    def evaluate_points(self, coeffs, points: np.ndarray, full: bool = False) -> np.ndarray:
        """Point evaluation at arbitrary physical points (brute-force location)."""
        tets, bary = locate_points(self.mesh, points)
        loc = self.local_full(coeffs) if full else self.local_coefficients(coeffs)
        psi = basis_values(self.degree, bary)
        return np.einsum("pa,pa...->p...", psi, loc[tets])

    # -- sparse assembly -----------------------------------------------------
    def _pattern(self, full: bool):
        key = ("pattern", full)
        if key not in self.cache:
            idx = self.element_nodes if full else self.element_dofs
            n = self.nnodes if full else self.ndof
            rows = np.repeat(idx[:, :, None], self.nloc, axis=2).ravel()
            cols = np.repeat(idx[:, None, :], self.nloc, axis=1).ravel()
            valid = (rows >= 0) & (cols >= 0)
            lin = rows[valid] * n + cols[valid]
            uniq, slot = np.unique(lin, return_inverse=True)
            r, c = uniq // n, uniq % n
            indptr = np.searchsorted(r, np.arange(n + 1))
            self.cache[key] = (valid, slot, indptr, c, n)
        return self.cache[key]

    def assemble(self, local: np.ndarray, full: bool = False) -> sp.csr_matrix:
        """Sum element matrices (nt, nloc, nloc) into a CSR matrix.

        Contributions are reduced in element-index order, so results are
        bitwise reproducible.
        """
        valid, slot, indptr, cols, n = self._pattern(full)
        data = np.bincount(slot, weights=np.asarray(local).ravel()[valid], minlength=len(cols))
        return sp.csr_matrix((data, cols.copy(), indptr.copy()), shape=(n, n))

    def assemble_vector(self, local: np.ndarray, full: bool = False) -> np.ndarray:
        """Sum element vectors (nt, nloc[, N]) into a global vector."""
        idx = (self.element_nodes if full else self.element_dofs).ravel()
        n = self.nnodes if full else self.ndof
        loc = np.asarray(local).reshape((idx.size,) + np.shape(local)[2:])
        valid = idx >= 0
        if loc.ndim == 1:
            return np.bincount(idx[valid], weights=loc[valid], minlength=n)
        return np.stack([np.bincount(idx[valid], weights=loc[valid, j], minlength=n)
                         for j in range(loc.shape[1])], axis=1)


def make_space(mesh: TetMesh, degree: int) -> FeSpace:
    return FeSpace(mesh, degree)


def locate_points(mesh: TetMesh, points: np.ndarray, chunk: int = 256):
    """Containing element and barycentric coordinates of each point (brute force)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    inv = np.linalg.inv(mesh.jacobians)
    x0 = mesh.vertices[mesh.tets[:, 0]]
    tets = np.empty(len(pts), dtype=np.int64)
    bary = np.empty((len(pts), 4))
    for s in range(0, len(pts), chunk):
        p = pts[s:s + chunk]
        lam = np.einsum("tij,ptj->pti", inv, p[:, None, :] - x0[None])
        full = np.concatenate([1.0 - lam.sum(axis=2, keepdims=True), lam], axis=2)
        worst = full.min(axis=2)
        best = worst.argmax(axis=1)
        if np.any(worst[np.arange(len(p)), best] < -1e-10):
            raise InvalidInputError("point outside the mesh")
        tets[s:s + chunk] = best
        bary[s:s + chunk] = full[np.arange(len(p)), best]
    return tets, bary


def interpolate(space: FeSpace, f: Callable[[np.ndarray], np.ndarray], full: bool = False) -> np.ndarray:
    """Nodal interpolant of a vectorized field ``f(points) -> values``.

    With ``full=False`` only interior nodes are sampled (H^1_0 coefficients).
    """
    nodes = np.arange(space.nnodes) if full else space.dof_nodes
    vals = np.asarray(f(space.node_coords[nodes]), dtype=float)
    if not np.all(np.isfinite(vals)):
        bad = nodes[np.flatnonzero(~np.isfinite(vals.reshape(len(nodes), -1)).all(axis=1))[0]]
        raise InvalidInputError(f"non-finite value at node {space.node_coords[bad].tolist()}")
    return vals


def transfer(coarse: FeSpace, fine: FeSpace, coeffs: np.ndarray) -> np.ndarray:
    """Exact embedding of a coarse-space function into a nested finer space."""
    if coarse.degree != fine.degree:
        raise InvalidInputError("spaces must have the same degree")
    c = np.asarray(coeffs, dtype=float)
    if fine.mesh is coarse.mesh:
        return c.copy()
    anc = ancestor_map(fine.mesh, coarse.mesh)
    cm = coarse.mesh
    inv = np.linalg.inv(cm.jacobians[anc])
    x0 = cm.vertices[cm.tets[anc, 0]]
    xf = fine.node_coords[fine.element_nodes]  # (ntf, nloc, 3)
    lam = np.einsum("tij,taj->tai", inv, xf - x0[:, None, :])
    bary = np.concatenate([1.0 - lam.sum(axis=2, keepdims=True), lam], axis=2)
    psi = basis_values(coarse.degree, bary)  # (ntf, nloc_f, nloc_c)
    loc = coarse.local_coefficients(c)[anc]
    vals = np.einsum("tab,tb...->ta...", psi, loc)
    out = np.zeros((fine.ndof,) + c.shape[1:])
    dofs = fine.element_dofs.ravel()
    ok = dofs >= 0
    out[dofs[ok]] = vals.reshape((-1,) + c.shape[1:])[ok]
    return out


# -- local L2 projection -----------------------------------------------------

@dataclass(frozen=True)
class LocalPolynomial:
    """Polynomial in scaled monomials ``((x - center) / scale) ** e``."""

    center: np.ndarray
    scale: float
    exponents: np.ndarray
    coeffs: np.ndarray

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return _monomials(points, self.center, self.scale, self.exponents) @ self.coeffs


def _exponents(d: int) -> np.ndarray:
    return np.array([e for k in range(d + 1)
                     for e in itertools.product(range(k + 1), repeat=3) if sum(e) == k])


def _monomials(points, center, scale, exps):
    y = (np.atleast_2d(points) - center) / scale
    return np.prod(y[:, None, :] ** exps[None, :, :], axis=2)


def project_poly(vertices: np.ndarray, g: Callable[[np.ndarray], np.ndarray], degree: int,
                 data_degree: int | None = None) -> LocalPolynomial:
    """L2 projection of ``g`` onto P^degree on a single tetrahedron.

    The Gram matrix is integrated exactly; ``data_degree`` sets the exactness of
    the right-hand side rule (default ``degree + 4``).
    """
    if degree < 0:
        raise InvalidInputError("degree must be nonnegative")
    v = np.asarray(vertices, dtype=float)
    center = v.mean(axis=0)
    scale = float(np.max(np.linalg.norm(v - center, axis=1)))
    exps = _exponents(degree)
    vol6 = abs(np.linalg.det((v[1:] - v[0]).T))
    gram_rule = tet_rule(2 * degree)
    rhs_rule = tet_rule(degree + (4 if data_degree is None else data_degree))
    xg = gram_rule.points @ v
    pg = _monomials(xg, center, scale, exps)
    gram = (pg * (gram_rule.weights * vol6)[:, None]).T @ pg
    xr = rhs_rule.points @ v
    pr = _monomials(xr, center, scale, exps)
    rhs = pr.T @ (rhs_rule.weights * vol6 * np.asarray(g(xr), dtype=float))
    return LocalPolynomial(center, scale, exps, np.linalg.solve(gram, rhs))
