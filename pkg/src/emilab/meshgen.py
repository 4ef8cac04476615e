"""Structured meshes and subdomain partitions for the two idealized geometries.

The domain is always the unit square, tessellated by ``nh x nh`` grid cells,
each split into two right triangles by the lower-left to upper-right diagonal.
Two cell layouts are supported:

* model A (nervous tissue): N square cells embedded in extracellular space,
  never touching each other, N of the form ((2^(2k)-1)/3)^2;
* model B (cardiac tissue): a sqrt(N) x sqrt(N) grid of square cells in
  direct contact filling (1/8, 7/8)^2, surrounded by an extracellular frame.

Potentials may jump across membranes, so a vertex on an interface owns one
degree of freedom per incident subdomain; the :class:`DofMap` realizes that
duplication with membrane dofs ordered last inside every subdomain block.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = [
    "GeometryError",
    "StructuredMesh",
    "SubdomainLabeling",
    "DofMap",
    "build_mesh",
    "label_model_a",
    "label_model_b",
    "build_dofmap",
    "model_a_scale",
    "admissible_cells_model_a",
]


class GeometryError(ValueError):
    """Raised for inadmissible mesh sizes or incompatible (nh, N) pairs."""


@dataclass(frozen=True)
class StructuredMesh:
    """Uniform right-triangular tessellation of the unit square.

    Vertices are numbered row-by-row (x fastest), triangles cell-by-cell with
    the lower triangle (right angle at the south-east vertex) first.
    """

    nh: int
    vertices: np.ndarray  # ((nh+1)^2, 2)
    triangles: np.ndarray  # (2*nh^2, 3) vertex indices, positively oriented
    h: float

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def barycenters(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)


@dataclass(frozen=True)
class SubdomainLabeling:
    """Assignment of triangles to subdomains plus the membrane edge list.

    ``membrane_edges`` has one row ``(v0, v1, i, j)`` per mesh edge lying on
    an interface, with ``v0 < v1`` the vertex pair and ``i < j`` the two
    incident subdomains.  Edges on the outer boundary are never membranes.
    """

    model: str
    n_cells: int
    cell_of: np.ndarray  # (n_triangles,) values in 0..N
    membrane_edges: np.ndarray  # (n_membrane_edges, 4)

    @property
    def n_subdomains(self) -> int:
        return self.n_cells + 1


@dataclass(frozen=True)
class DofMap:
    """Per-subdomain dof enumeration with membrane dofs ordered last.

    Global dofs are grouped subdomain-major (extracellular block first).
    Within each block, interior dofs come first and membrane dofs occupy the
    trailing index range; both groups are sorted by mesh vertex id.
    """

    n_subdomains: int
    subdomain: np.ndarray  # (n,) owning subdomain per dof
    vertex: np.ndarray  # (n,) mesh vertex per dof
    is_membrane: np.ndarray  # (n,) bool
    block_start: np.ndarray  # (n_subdomains + 1,) block offsets
    n_gamma_per: np.ndarray  # (n_subdomains,) membrane dof count per block

    @property
    def n(self) -> int:
        return int(self.block_start[-1])

    @property
    def block_sizes(self) -> np.ndarray:
        return np.diff(self.block_start)

    @property
    def n0(self) -> int:
        return int(self.block_start[1])

    @property
    def n_in(self) -> int:
        return self.n - self.n0

    @property
    def n_gamma(self) -> int:
        """Total membrane dof count over the cell blocks (block 0 excluded)."""
        return int(self.n_gamma_per[1:].sum())

    def block_range(self, i: int) -> tuple[int, int]:
        return int(self.block_start[i]), int(self.block_start[i + 1])

    @cached_property
    def _vertex_order(self) -> np.ndarray:
        # within-block permutation sorting dofs by vertex id, for lookups
        return np.lexsort((self.vertex, self.subdomain))

    def local_dofs(self, i: int, verts: np.ndarray) -> np.ndarray:
        """Local indices (within block i) of the dofs at the given vertices."""
        s, e = self.block_range(i)
        idx = self._vertex_order[s:e]
        sorted_verts = self.vertex[idx]
        pos = np.searchsorted(sorted_verts, verts)
        if np.any(pos >= len(sorted_verts)) or np.any(sorted_verts[np.minimum(pos, len(sorted_verts) - 1)] != verts):
            raise KeyError(f"vertex not present in subdomain {i}")
        return idx[pos] - s

    def global_dofs(self, i: int, verts: np.ndarray) -> np.ndarray:
        return self.block_start[i] + self.local_dofs(i, verts)

    def coords(self, mesh: StructuredMesh) -> np.ndarray:
        """Coordinates of every global dof."""
        return mesh.vertices[self.vertex]


def _is_power_of_two(m: int) -> bool:
    return m >= 1 and (m & (m - 1)) == 0


def build_mesh(nh: int) -> StructuredMesh:
    """Tessellate the unit square with ``nh`` elements per side.

    ``nh`` must be a power of two and at least 4 so that the model geometries
    can align with grid lines.
    """
    if nh < 4 or not _is_power_of_two(nh):
        raise GeometryError(f"nh must be a power of two >= 4, got {nh}")
    ticks = np.arange(nh + 1) / nh
    x, y = np.meshgrid(ticks, ticks, indexing="xy")
    vertices = np.column_stack([x.ravel(), y.ravel()])

    cx, cy = np.meshgrid(np.arange(nh), np.arange(nh), indexing="xy")
    cx, cy = cx.ravel(), cy.ravel()
    sw = cy * (nh + 1) + cx
    se = sw + 1
    ne = se + nh + 1
    nw = sw + nh + 1
    triangles = np.empty((2 * nh * nh, 3), dtype=np.int64)
    triangles[0::2] = np.column_stack([sw, se, ne])  # below the diagonal
    triangles[1::2] = np.column_stack([sw, ne, nw])  # above the diagonal
    return StructuredMesh(nh=nh, vertices=vertices, triangles=triangles, h=1.0 / nh)


def model_a_scale(n_cells: int) -> int:
    """Partition scale 3*sqrt(N)+1 for an admissible model-A cell count."""
    root = int(round(np.sqrt(n_cells)))
    if root * root != n_cells:
        raise GeometryError(f"model A requires a square cell count, got {n_cells}")
    scale = 3 * root + 1
    # admissible N = ((2^(2k)-1)/3)^2  <=>  scale = 4^k
    k = scale.bit_length() - 1
    if scale != 1 << k or k % 2 != 0:
        raise GeometryError(
            f"model A cell count must be of the form ((4^k-1)/3)^2; got N={n_cells}"
        )
    return scale


def admissible_cells_model_a(nh: int) -> list[int]:
    """Model-A cell counts compatible with an nh-element tessellation."""
    counts = []
    k = 1
    while (1 << (2 * k)) <= nh:
        root = ((1 << (2 * k)) - 1) // 3
        counts.append(root * root)
        k += 1
    return counts


def _membrane_edges(triangles: np.ndarray, cell_of: np.ndarray) -> np.ndarray:
    """Edges shared by two triangles with different subdomain labels."""
    edges = np.concatenate(
        [triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]]
    )
    edges.sort(axis=1)
    owner = np.tile(np.arange(len(triangles)), 3)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    edges, owner = edges[order], owner[order]
    paired = (edges[:-1] == edges[1:]).all(axis=1)
    t_a, t_b = owner[:-1][paired], owner[1:][paired]
    lab_a, lab_b = cell_of[t_a], cell_of[t_b]
    cross = lab_a != lab_b
    ev = edges[:-1][paired][cross]
    lo = np.minimum(lab_a[cross], lab_b[cross])
    hi = np.maximum(lab_a[cross], lab_b[cross])
    out = np.column_stack([ev, lo, hi])
    # canonical order for reproducibility
    return out[np.lexsort((out[:, 1], out[:, 0]))]


def label_model_a(mesh: StructuredMesh, n_cells: int) -> SubdomainLabeling:
    """Partition for the nervous-system layout: isolated square cells.

    A triangle belongs to a cell iff its barycenter (x, y) satisfies
    ``min(x*s mod 3, y*s mod 3) >= 1`` with ``s = 3*sqrt(N)+1``; the cells are
    the N squares of side 2/s so obtained, numbered row-major from the
    lower-left.  The scale s must divide nh so that membranes follow mesh
    lines.
    """
    if n_cells == 0:
        cell_of = np.zeros(mesh.n_triangles, dtype=np.int64)
        return SubdomainLabeling("A", 0, cell_of, np.empty((0, 4), dtype=np.int64))
    scale = model_a_scale(n_cells)
    if mesh.nh % scale != 0:
        raise GeometryError(
            f"model A with N={n_cells} needs scale {scale} | nh, got nh={mesh.nh}"
        )
    root = int(round(np.sqrt(n_cells)))
    bary = mesh.barycenters()
    psi = np.mod(bary * scale, 3.0)
    inside = psi.min(axis=1) >= 1.0
    col = np.floor((bary[:, 0] * scale - 1.0) / 3.0).astype(np.int64)
    row = np.floor((bary[:, 1] * scale - 1.0) / 3.0).astype(np.int64)
    cell_of = np.where(inside, 1 + row * root + col, 0)

    ids = np.unique(cell_of)
    if len(ids) != n_cells + 1 or ids[0] != 0:
        raise GeometryError("model A labeling did not produce N cells")
    membrane = _membrane_edges(mesh.triangles, cell_of)
    if membrane.size and membrane[:, 2].max() != 0:
        raise GeometryError("model A cells must touch only the extracellular space")
    return SubdomainLabeling("A", n_cells, cell_of, membrane)


def label_model_b(mesh: StructuredMesh, n_cells: int) -> SubdomainLabeling:
    """Partition for the cardiac layout: a cell grid filling (1/8, 7/8)^2.

    The sqrt(N) x sqrt(N) cells are in direct contact, so interior interfaces
    are gap junctions between pairs of cells; the scale must align every cell
    edge with mesh lines.
    """
    if n_cells == 0:
        cell_of = np.zeros(mesh.n_triangles, dtype=np.int64)
        return SubdomainLabeling("B", 0, cell_of, np.empty((0, 4), dtype=np.int64))
    root = int(round(np.sqrt(n_cells)))
    if root * root != n_cells:
        raise GeometryError(f"model B requires a square cell count, got {n_cells}")
    if mesh.nh % 8 != 0:
        raise GeometryError(f"model B needs 8 | nh, got nh={mesh.nh}")
    side_cells = 3 * mesh.nh // 4  # mesh cells across the intracellular block
    if side_cells % root != 0:
        raise GeometryError(
            f"model B with N={n_cells} needs sqrt(N) | 3*nh/4 = {side_cells}"
        )
    bary = mesh.barycenters()
    inside = ((bary > 0.125) & (bary < 0.875)).all(axis=1)
    width = 0.75 / root
    col = np.floor((bary[:, 0] - 0.125) / width).astype(np.int64)
    row = np.floor((bary[:, 1] - 0.125) / width).astype(np.int64)
    cell_of = np.where(inside, 1 + row * root + col, 0)
    membrane = _membrane_edges(mesh.triangles, cell_of)
    return SubdomainLabeling("B", n_cells, cell_of, membrane)


def build_dofmap(mesh: StructuredMesh, labeling: SubdomainLabeling) -> DofMap:
    """Enumerate dofs subdomain-major, duplicating membrane vertices.

    A vertex incident to triangles of k distinct subdomains owns k dofs, one
    per subdomain.  Membrane dofs of subdomain i are exactly the vertices
    incident to a membrane edge of its interface.
    """
    n_sub = labeling.n_subdomains
    nv = mesh.n_vertices
    tri = mesh.triangles
    # (subdomain, vertex) incidence, encoded to sort/unique quickly
    keys = np.unique(np.repeat(labeling.cell_of, 3) * nv + tri.ravel())
    sub = keys // nv
    vert = keys % nv

    me = labeling.membrane_edges
    if len(me):
        mkeys = np.unique(
            np.concatenate(
                [
                    me[:, 2] * nv + me[:, 0],
                    me[:, 2] * nv + me[:, 1],
                    me[:, 3] * nv + me[:, 0],
                    me[:, 3] * nv + me[:, 1],
                ]
            )
        )
        is_mem = np.isin(keys, mkeys, assume_unique=True)
    else:
        is_mem = np.zeros(len(keys), dtype=bool)

    order = np.lexsort((vert, is_mem.astype(np.int8), sub))
    sub, vert, is_mem = sub[order], vert[order], is_mem[order]
    counts = np.bincount(sub, minlength=n_sub)
    block_start = np.concatenate([[0], np.cumsum(counts)])
    n_gamma_per = np.bincount(sub[is_mem], minlength=n_sub)
    return DofMap(
        n_subdomains=n_sub,
        subdomain=sub,
        vertex=vert,
        is_membrane=is_mem,
        block_start=block_start,
        n_gamma_per=n_gamma_per,
    )
