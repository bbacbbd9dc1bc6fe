"""Conforming tetrahedral meshes of a box with tagged-edge bisection.

Each tetrahedron is stored as an ordered vertex tuple ``(x0, x1, x2, x3)``
together with a type tag ``t`` in {0, 1, 2}.  The refinement edge is always
``x0 x3``.  Bisection follows the Maubach/Kossaczky rule in the tagged form:
with ``z`` the midpoint of ``x0 x3`` the children are

    (x0, z, x1, x2)  and  (x3, z, x2, x1)   if t == 0,
    (x0, z, x1, x2)  and  (x3, z, x1, x2)   otherwise,

both carrying tag ``(t + 1) % 3``.  The initial Kuhn (Freudenthal) split of
every cube cell into six tetrahedra around the main diagonal, all with tag 0,
is compatible with this rule, so the recursive closure terminates and
every third generation reproduces scaled copies of the initial shapes.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import InvalidInputError

# local vertex pairs of the six edges, and the vertices of the face opposite vertex i
LOCAL_EDGES = np.array([(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)])
LOCAL_FACES = np.array([(1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2)])

_SHIFT = np.int64(32)


def edge_keys(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Order-independent int64 key for the edge ``{a, b}``."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    return (np.minimum(a, b) << _SHIFT) | np.maximum(a, b)


def _face_keys(tri: np.ndarray, nv: int) -> np.ndarray:
    s = np.sort(tri, axis=-1).astype(np.int64)
    return (s[..., 0] * nv + s[..., 1]) * nv + s[..., 2]


@dataclass(frozen=True)
class ElementPatch:
    """Elements sharing at least one edge with ``center`` (``center`` included)."""

    center: int
    neighbors: np.ndarray


class TetMesh:
    """Immutable conforming tetrahedral mesh.

    Parameters
    ----------
    vertices : array_like, shape (nv, 3)
    tets : array_like, shape (nt, 4)
        Vertex indices in bisection order (refinement edge ``tets[:, [0, 3]]``).
    tags : array_like, shape (nt,)
        Bisection type of every element.
    generation : array_like, shape (nt,)
        Number of bisections separating the element from the initial mesh.
    domain_box : array_like, shape (3, 2)
        ``[[xmin, xmax], [ymin, ymax], [zmin, zmax]]``.
    parent : array_like, optional
        Index of the containing element in ``parent_mesh``.
    """

    def __init__(self, vertices, tets, tags, generation, domain_box,
                 parent=None, parent_mesh=None):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.tets = np.ascontiguousarray(tets, dtype=np.int64)
        self.tags = np.asarray(tags, dtype=np.int8)
        self.generation = np.asarray(generation, dtype=np.int32)
        self.domain_box = np.asarray(domain_box, dtype=float)
        self.parent = None if parent is None else np.asarray(parent, dtype=np.int64)
        self.parent_mesh = parent_mesh
        for a in (self.vertices, self.tets, self.tags, self.generation):
            a.setflags(write=False)
        if self.tets.size and (self.tets.min() < 0 or self.tets.max() >= len(self.vertices)):
            raise InvalidInputError("vertex index out of range")

    @classmethod
    def from_arrays(cls, vertices, tets, domain_box=None) -> "TetMesh":
        """Mesh from raw arrays; all elements get tag 0 and generation 0."""
        vertices = np.asarray(vertices, dtype=float)
        tets = np.asarray(tets, dtype=np.int64)
        if domain_box is None:
            domain_box = np.stack([vertices.min(axis=0), vertices.max(axis=0)], axis=1)
        return cls(vertices, tets, np.zeros(len(tets)), np.zeros(len(tets)), domain_box)

    def __repr__(self) -> str:
        return f"TetMesh(nvertices={self.nvertices}, ntets={self.ntets})"

    @property
    def nvertices(self) -> int:
        return len(self.vertices)

    @property
    def ntets(self) -> int:
        return len(self.tets)

    @property
    def diameter(self) -> float:
        """Diameter of the domain box."""
        return float(np.linalg.norm(self.domain_box[:, 1] - self.domain_box[:, 0]))

    # -- geometry ---------------------------------------------------------
    @cached_property
    def jacobians(self) -> np.ndarray:
        """Columns ``x1 - x0, x2 - x0, x3 - x0`` for every element, shape (nt, 3, 3)."""
        p = self.vertices[self.tets]
        return np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]], axis=2)

    @cached_property
    def volumes(self) -> np.ndarray:
        return np.abs(np.linalg.det(self.jacobians)) / 6.0

    @cached_property
    def barycentric_gradients(self) -> np.ndarray:
        """Constant gradients of the four barycentric coordinates, shape (nt, 4, 3)."""
        inv = np.linalg.inv(self.jacobians)  # rows are grad(lambda_1..3)
        g = np.empty((self.ntets, 4, 3))
        g[:, 1:] = inv
        g[:, 0] = -inv.sum(axis=1)
        return g

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        p = self.vertices[self.tets]
        d = p[:, LOCAL_EDGES[:, 0]] - p[:, LOCAL_EDGES[:, 1]]
        return np.linalg.norm(d, axis=2)

    @cached_property
    def diameters(self) -> np.ndarray:
        """Element diameters ``h_tau`` (longest edge)."""
        return self.edge_lengths.max(axis=1)

    @cached_property
    def face_areas(self) -> np.ndarray:
        """Area of the face opposite each local vertex, shape (nt, 4)."""
        p = self.vertices[self.tets]
        f = p[:, LOCAL_FACES]
        return 0.5 * np.linalg.norm(np.cross(f[:, :, 1] - f[:, :, 0], f[:, :, 2] - f[:, :, 0]), axis=2)

    @cached_property
    def inradius_diameters(self) -> np.ndarray:
        """Diameter ``rho_tau`` of the inscribed ball."""
        return 6.0 * self.volumes / self.face_areas.sum(axis=1)

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.tets].mean(axis=1)

    # -- topology ---------------------------------------------------------
    @cached_property
    def _face_data(self):
        nt = self.ntets
        tri = self.tets[:, LOCAL_FACES].reshape(-1, 3)
        keys = _face_keys(tri, self.nvertices)
        order = np.argsort(keys, kind="stable")
        ks = keys[order]
        start = np.flatnonzero(np.r_[True, ks[1:] != ks[:-1]])
        counts = np.diff(np.r_[start, len(ks)])
        if counts.max(initial=1) > 2:
            raise InvalidInputError("face shared by more than two elements")
        owner = order // 4
        local = order % 4
        inner = start[counts == 2]
        outer = start[counts == 1]
        interior = np.stack([owner[inner], owner[inner + 1]], axis=1)
        interior_local = np.stack([local[inner], local[inner + 1]], axis=1)
        boundary = owner[outer]
        boundary_local = local[outer]
        return interior, interior_local, boundary, boundary_local, nt

    @property
    def interior_faces(self) -> np.ndarray:
        """Pairs ``(tet_a, tet_b)`` of elements sharing a face, shape (nif, 2)."""
        return self._face_data[0]

    @property
    def interior_face_local(self) -> np.ndarray:
        """Local index (opposite vertex) of each interior face in both elements."""
        return self._face_data[1]

    @property
    def boundary_faces(self) -> np.ndarray:
        """Element owning each boundary face."""
        return self._face_data[2]

    @property
    def boundary_face_local(self) -> np.ndarray:
        return self._face_data[3]

    def face_vertices(self, tets: np.ndarray, local: np.ndarray) -> np.ndarray:
        """Sorted global vertex triples of the given (element, local face) pairs."""
        return np.sort(self.tets[tets[:, None], LOCAL_FACES[local]], axis=1)

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique edges as sorted vertex pairs, ordered by key, shape (ne, 2)."""
        return self._edge_data[0]

    @cached_property
    def tet_edges(self) -> np.ndarray:
        """Edge index of each local edge, shape (nt, 6)."""
        return self._edge_data[1]

    @cached_property
    def _edge_data(self):
        a = self.tets[:, LOCAL_EDGES[:, 0]]
        b = self.tets[:, LOCAL_EDGES[:, 1]]
        keys = edge_keys(a, b).ravel()
        uk, inv = np.unique(keys, return_inverse=True)
        lo = uk >> _SHIFT
        hi = uk & np.int64(0xFFFFFFFF)
        return np.stack([lo, hi], axis=1), inv.reshape(-1, 6)

    @cached_property
    def boundary_vertex_mask(self) -> np.ndarray:
        mask = np.zeros(self.nvertices, dtype=bool)
        tri = self.face_vertices(self.boundary_faces, self.boundary_face_local)
        mask[tri.ravel()] = True
        return mask

    @cached_property
    def boundary_edge_mask(self) -> np.ndarray:
        tri = self.face_vertices(self.boundary_faces, self.boundary_face_local)
        keys = np.concatenate([edge_keys(tri[:, i], tri[:, j]) for i, j in ((0, 1), (0, 2), (1, 2))])
        ek = edge_keys(self.edges[:, 0], self.edges[:, 1])
        return np.isin(ek, keys)

    @cached_property
    def _edge_to_tets(self):
        flat = self.tet_edges.ravel()
        order = np.argsort(flat, kind="stable")
        ptr = np.searchsorted(flat[order], np.arange(len(self.edges) + 1))
        return ptr, order // 6

    def edge_neighbors(self, edge: int) -> np.ndarray:
        ptr, tets = self._edge_to_tets
        return tets[ptr[edge]:ptr[edge + 1]]


# -- construction ---------------------------------------------------------

def _as_box(box) -> np.ndarray:
    b = np.asarray(box, dtype=float)
    if b.shape == (6,):
        b = b.reshape(3, 2)
    if b.shape != (3, 2):
        raise InvalidInputError("box must be [[xmin, xmax], [ymin, ymax], [zmin, zmax]]")
    if not np.all(np.isfinite(b)) or np.any(b[:, 1] <= b[:, 0]):
        raise InvalidInputError(f"degenerate box {b.tolist()}")
    return b


def build_box_mesh(box, n: int) -> TetMesh:
    """Kuhn mesh of an axis-aligned box with ``n`` cells per axis (6 n^3 elements)."""
    b = _as_box(box)
    n = int(n)
    if n < 1:
        raise InvalidInputError("n must be at least 1")
    axes = [np.linspace(b[d, 0], b[d, 1], n + 1) for d in range(3)]
    z, y, x = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    vertices = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
    stride = np.array([1, n + 1, (n + 1) ** 2])
    cells = np.stack(np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij"), axis=-1)
    base = (cells.reshape(-1, 3) * stride).sum(axis=1)
    tets = []
    for perm in itertools.permutations(range(3)):
        steps = np.cumsum(stride[list(perm)])
        tets.append(np.stack([base, base + steps[0], base + steps[1], base + steps[2]], axis=1))
    tets = np.stack(tets, axis=1).reshape(-1, 4)
    return TetMesh(vertices, tets, np.zeros(len(tets)), np.zeros(len(tets)), b)


def single_tet_mesh(vertices=None) -> TetMesh:
    """One-element mesh, by default the reference tetrahedron."""
    if vertices is None:
        vertices = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]
    return TetMesh.from_arrays(vertices, [[0, 1, 2, 3]])


# -- refinement -----------------------------------------------------------

def _bisect(tets, tags, mid):
    x0, x1, x2, x3 = tets.T
    flip = tags == 0
    c1 = np.stack([x0, mid, x1, x2], axis=1)
    c2 = np.stack([x3, mid, np.where(flip, x2, x1), np.where(flip, x1, x2)], axis=1)
    return c1, c2, (tags + 1) % 3


def refine(mesh: TetMesh, marked, max_rounds: int = 200) -> TetMesh:
    """Bisect every marked element once and close the mesh to conformity.

    Returns ``mesh`` itself when ``marked`` is empty.  The new mesh records the
    containing coarse element of every child in ``parent``.
    """
    marked = np.unique(np.asarray(list(marked) if isinstance(marked, (set, frozenset)) else marked,
                                  dtype=np.int64).ravel())
    if marked.size == 0:
        return mesh
    if marked[0] < 0 or marked[-1] >= mesh.ntets:
        raise InvalidInputError("marked element index out of range")

    verts = [mesh.vertices]
    nv = mesh.nvertices
    tets = mesh.tets.copy()
    tags = mesh.tags.astype(np.int8)
    gen = mesh.generation.copy()
    origin = np.arange(mesh.ntets)
    split_keys = np.empty(0, dtype=np.int64)
    split_mid = np.empty(0, dtype=np.int64)
    coords = mesh.vertices

    need = np.zeros(mesh.ntets, dtype=bool)
    need[marked] = True
    for _ in range(max_rounds):
        if not need.any():
            break
        sel = np.flatnonzero(need)
        keys = edge_keys(tets[sel, 0], tets[sel, 3])
        uk, inv = np.unique(keys, return_inverse=True)
        pos = np.searchsorted(split_keys, uk)
        found = pos < len(split_keys)
        found[found] = split_keys[pos[found]] == uk[found]
        mids = np.empty(len(uk), dtype=np.int64)
        mids[found] = split_mid[pos[found]]
        fresh = uk[~found]
        if fresh.size:
            lo, hi = fresh >> _SHIFT, fresh & np.int64(0xFFFFFFFF)
            new_pts = 0.5 * (coords[lo] + coords[hi])
            verts.append(new_pts)
            coords = np.concatenate([coords, new_pts])
            ids = np.arange(nv, nv + len(fresh))
            nv += len(fresh)
            mids[~found] = ids
            split_keys = np.concatenate([split_keys, fresh])
            split_mid = np.concatenate([split_mid, ids])
            o = np.argsort(split_keys)
            split_keys, split_mid = split_keys[o], split_mid[o]
        c1, c2, ctag = _bisect(tets[sel], tags[sel], mids[inv])
        keep = ~need
        tets = np.concatenate([tets[keep], c1, c2])
        tags = np.concatenate([tags[keep], ctag, ctag])
        gen = np.concatenate([gen[keep], gen[sel] + 1, gen[sel] + 1])
        origin = np.concatenate([origin[keep], origin[sel], origin[sel]])
        ek = edge_keys(tets[:, LOCAL_EDGES[:, 0]], tets[:, LOCAL_EDGES[:, 1]])
        need = np.isin(ek, split_keys).any(axis=1)
    else:
        raise RuntimeError("conformity closure did not terminate")

    order = np.argsort(origin, kind="stable")
    return TetMesh(coords, tets[order], tags[order], gen[order], mesh.domain_box,
                   parent=origin[order], parent_mesh=mesh)


def refine_uniform(mesh: TetMesh, times: int = 1) -> TetMesh:
    """Bisect every element ``times`` times (three bisections halve h)."""
    for _ in range(times):
        mesh = refine(mesh, np.arange(mesh.ntets))
    return mesh


def refined_set(coarse: TetMesh, fine: TetMesh) -> np.ndarray:
    """Coarse elements not present in ``fine`` (the refined set R)."""
    anc = ancestor_map(fine, coarse)
    counts = np.bincount(anc, minlength=coarse.ntets)
    return np.flatnonzero(counts != 1)


def ancestor_map(fine: TetMesh, coarse: TetMesh) -> np.ndarray:
    """Index of the coarse element containing every fine element."""
    anc = np.arange(fine.ntets)
    m = fine
    while m is not coarse:
        if m.parent_mesh is None:
            raise InvalidInputError("meshes are not nested")
        anc = m.parent[anc]
        m = m.parent_mesh
    return anc


# -- diagnostics ----------------------------------------------------------

def shape_regularity(mesh: TetMesh) -> float:
    """Largest ratio of element diameter to inscribed-ball diameter."""
    return float(np.max(mesh.diameters / mesh.inradius_diameters))


def patch(mesh: TetMesh, tau: int) -> ElementPatch:
    """Elements sharing an edge with ``tau``."""
    if not 0 <= tau < mesh.ntets:
        raise InvalidInputError(f"element index {tau} out of range")
    nb = np.unique(np.concatenate([mesh.edge_neighbors(e) for e in mesh.tet_edges[tau]]))
    return ElementPatch(int(tau), nb)


def check_conformity(mesh: TetMesh, rtol: float = 1e-12) -> list[str]:
    """Face-pairing audit; returns a list of problems (empty when conforming)."""
    problems = []
    try:
        _ = mesh.interior_faces
    except InvalidInputError as exc:
        return [str(exc)]
    if np.any(mesh.volumes <= 0):
        problems.append(f"{int(np.sum(mesh.volumes <= 0))} elements with nonpositive volume")
    root = mesh
    while root.parent_mesh is not None:
        root = root.parent_mesh
    box = mesh.domain_box
    box_vol = float(np.prod(box[:, 1] - box[:, 0]))
    domain_vol = float(root.volumes.sum())
    scale = mesh.diameter
    if abs(domain_vol - box_vol) <= 1e-10 * box_vol:
        normals = np.repeat(np.eye(3), 2, axis=0)
        offsets = box.ravel()
    else:
        # non-box domain: the boundary planes of the initial mesh
        rt = root.vertices[root.face_vertices(root.boundary_faces, root.boundary_face_local)]
        normals = np.cross(rt[:, 1] - rt[:, 0], rt[:, 2] - rt[:, 0])
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        offsets = np.einsum("fi,fi->f", normals, rt[:, 0])
    pts = mesh.vertices[mesh.face_vertices(mesh.boundary_faces, mesh.boundary_face_local)]
    dist = np.abs(np.einsum("fki,pi->fkp", pts, normals) - offsets)
    on_plane = np.any(np.all(dist <= rtol * scale, axis=1), axis=1)
    if not on_plane.all():
        problems.append(f"{int(np.sum(~on_plane))} unpaired faces inside the domain")
    if abs(mesh.volumes.sum() - domain_vol) > 1e-10 * domain_vol:
        problems.append("element volumes do not tile the domain")
    return problems
