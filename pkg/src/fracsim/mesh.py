"""Evolving quadratic surface mesh of one or more fracture surfaces.

The mesh owns nodes (never-recycled integer ids; removed nodes are simply
dropped from the table), mixed quadratic elements (8-node serendipity quads,
6-node triangles and 9-node front elements), per-fracture front loops, element
update flags for incremental assembly, and the element-order permutation used
to cluster geometrically stationary elements.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import shapefn
from .errors import ElementQualityError, MeshInvariantError
from .shapefn import LOCAL_EDGES, NCORNER, NSHAPE, QUAD8, TIP9, TRI6, TIP_FRONT_EDGE

logger = logging.getLogger(__name__)

# Update flags (see incremental assembly): 0 = stationary since last commit,
# 1 = geometry changed this step, 2 = unchanged this step but not yet folded
# into the stationary cache.
STATIONARY = 0
UPDATED = 1
NEWLY_STATIONARY = 2


@dataclass
class Node:
    id: int
    position: np.ndarray
    age: float = 0.0  # exposure time t_S for leak-off
    is_front: bool = False

    def copy(self):
        return Node(self.id, self.position.copy(), self.age, self.is_front)


@dataclass
class Element:
    id: int
    kind: str
    conn: list  # node ids, local ordering per shapefn.LOCAL_EDGES
    normal_orientation: int = 1
    update_flag: int = UPDATED

    def copy(self):
        return Element(self.id, self.kind, list(self.conn),
                       self.normal_orientation, self.update_flag)

    @property
    def corners(self):
        return self.conn[: NCORNER[self.kind]]


@dataclass
class MeshArrays:
    """Flat numpy view of the mesh for the integration kernels."""

    elem_ids: np.ndarray        # element ids in permutation order
    kinds: np.ndarray           # int8 codes: 0 quad8, 1 tri6, 2 tip9
    coords: np.ndarray          # (nel, 9, 3), padded with zeros
    conn: np.ndarray            # (nel, 9) node indices into node_order, -1 pad
    corner_ids: np.ndarray      # (nel, 4) global node ids, -1 pad
    centers: np.ndarray         # (nel, 3)
    diameters: np.ndarray       # (nel,)
    node_order: np.ndarray      # global node ids in dof order (first touch)
    node_index: dict            # node id -> position in node_order
    elem_index: dict            # element id -> row in arrays

    @property
    def n_elements(self):
        return len(self.elem_ids)

    @property
    def n_nodes(self):
        return len(self.node_order)


KIND_CODE = {QUAD8: 0, TRI6: 1, TIP9: 2}


class Mesh:
    """Fracture-surface mesh with front topology and update bookkeeping."""

    def __init__(self):
        self.nodes = {}
        self.elements = {}
        self.fracture_of_element = {}
        self.front_loops = []       # per fracture, ordered tip element ids
        self.permutation = []       # element ids, assembly processing order
        self._next_node = 0
        self._next_elem = 0
        self.version = 0
        self._arrays = None
        self._arrays_version = -1

    # ------------------------------------------------------------------
    # construction / mutation
    # ------------------------------------------------------------------
    def add_node(self, position, age=0.0, is_front=False):
        nid = self._next_node
        self._next_node += 1
        self.nodes[nid] = Node(nid, np.asarray(position, dtype=float).copy(),
                               age, is_front)
        self.touch()
        return nid

    def add_element(self, kind, conn, fracture=0, update_flag=UPDATED):
        if len(conn) != NSHAPE[kind]:
            raise MeshInvariantError(
                f"{kind} element needs {NSHAPE[kind]} nodes, got {len(conn)}")
        if len(set(conn)) != len(conn):
            raise MeshInvariantError(f"repeated node in element connectivity {conn}")
        for nid in conn:
            if nid not in self.nodes:
                raise MeshInvariantError(f"element references missing node {nid}")
        eid = self._next_elem
        self._next_elem += 1
        self.elements[eid] = Element(eid, kind, list(conn), 1, update_flag)
        self.fracture_of_element[eid] = fracture
        self.permutation.append(eid)
        self.touch()
        return eid

    def remove_element(self, eid):
        del self.elements[eid]
        del self.fracture_of_element[eid]
        self.permutation.remove(eid)
        self.touch()

    def remove_node(self, nid):
        # Tombstoned: the id is never reused.
        del self.nodes[nid]
        self.touch()

    def touch(self):
        self.version += 1

    def copy(self):
        m = Mesh()
        m.nodes = {nid: n.copy() for nid, n in self.nodes.items()}
        m.elements = {eid: e.copy() for eid, e in self.elements.items()}
        m.fracture_of_element = dict(self.fracture_of_element)
        m.front_loops = [list(loop) for loop in self.front_loops]
        m.permutation = list(self.permutation)
        m._next_node = self._next_node
        m._next_elem = self._next_elem
        m.version = self.version
        return m

    # ------------------------------------------------------------------
    # queries
    # ------------------------------------------------------------------
    @property
    def n_fractures(self):
        return len(self.front_loops)

    def element_coords(self, eid):
        e = self.elements[eid]
        return np.array([self.nodes[n].position for n in e.conn])

    def tip_elements(self):
        return [eid for loop in self.front_loops for eid in loop]

    def front_edge_nodes(self, eid):
        """(corner, mid, corner) node ids of a tip element's front edge."""
        e = self.elements[eid]
        c1, c2, mid = LOCAL_EDGES[TIP9][TIP_FRONT_EDGE]
        return e.conn[c1], e.conn[mid], e.conn[c2]

    def edge_table(self):
        """Map frozenset{corner, corner} -> list of (eid, local_edge, mid id)."""
        table = {}
        for eid, e in self.elements.items():
            for le, (c1, c2, m) in enumerate(LOCAL_EDGES[e.kind]):
                key = frozenset((e.conn[c1], e.conn[c2]))
                table.setdefault(key, []).append((eid, le, e.conn[m]))
        return table

    def fracture_elements(self, fracture):
        return [eid for eid, f in self.fracture_of_element.items() if f == fracture]

    # ------------------------------------------------------------------
    # invariants
    # ------------------------------------------------------------------
    def validate(self):
        """Raise MeshInvariantError on any violated mesh invariant."""
        for n in self.nodes.values():
            if not np.all(np.isfinite(n.position)):
                raise MeshInvariantError(f"node {n.id} has non-finite position")
        if sorted(self.permutation) != sorted(self.elements):
            raise MeshInvariantError("permutation is not a bijection on element ids")

        table = {}
        for eid, e in self.elements.items():
            for c1, c2, m in (
                (e.conn[a], e.conn[b], e.conn[mm]) for a, b, mm in LOCAL_EDGES[e.kind]
            ):
                key = frozenset((c1, c2))
                table.setdefault(key, []).append((eid, c1, c2, m))
        for key, users in table.items():
            if len(users) > 2:
                raise MeshInvariantError(
                    f"edge {sorted(key)} shared by {len(users)} elements")
            if len(users) == 2:
                (ea, a1, a2, ma), (eb, b1, b2, mb) = users
                if ma != mb:
                    raise MeshInvariantError(
                        f"edge {sorted(key)} has mismatched mid nodes "
                        f"{ma}/{mb} (elements {ea}, {eb})")
                if (a1, a2) == (b1, b2):
                    raise MeshInvariantError(
                        f"elements {ea}, {eb} traverse edge {sorted(key)} in the "
                        "same direction (inconsistent orientation)")

        # Free edges must be exactly the tip front edges, and front loops must
        # be closed cycles of tip elements.
        free = {key for key, users in table.items() if len(users) == 1}
        front_keys = set()
        for loop in self.front_loops:
            if not loop:
                raise MeshInvariantError("empty front loop")
            for eid in loop:
                e = self.elements.get(eid)
                if e is None or e.kind != TIP9:
                    raise MeshInvariantError(f"front loop entry {eid} is not a tip element")
                c1, mid, c2 = self.front_edge_nodes(eid)
                front_keys.add(frozenset((c1, c2)))
            # closed cycle: consecutive tips share a side edge
            for ea, eb in zip(loop, loop[1:] + loop[:1]):
                ca = set(self.elements[ea].corners)
                cb = set(self.elements[eb].corners)
                if len(ca & cb) != 2:
                    raise MeshInvariantError(
                        f"front loop breaks between tips {ea} and {eb}")
        if free != front_keys:
            raise MeshInvariantError(
                "free boundary does not coincide with tip front edges")
        for eid in self.elements:
            self.element_quality(eid)

    # ------------------------------------------------------------------
    # quality metrics
    # ------------------------------------------------------------------
    def _edge_length(self, e, local_edge):
        c1, c2, m = LOCAL_EDGES[e.kind][local_edge]
        xa = self.nodes[e.conn[c1]].position
        xm = self.nodes[e.conn[m]].position
        xb = self.nodes[e.conn[c2]].position
        return np.linalg.norm(xa - xm) + np.linalg.norm(xm - xb)

    def element_quality(self, eid):
        """Aspect ratio, lateral side lengths and sharpest-corner cosine.

        For tip elements the aspect ratio is front-length / depth and the side
        lengths are the two lateral edges; for quads the lateral edges are the
        u = +/-1 chart edges.  Raises ElementQualityError when the Jacobian is
        non-positive anywhere on a 3x3 sample grid.
        """
        e = self.elements[eid]
        coords = self.element_coords(eid)
        g = np.linspace(-0.9, 0.9, 3)
        u, v = np.meshgrid(g, g, indexing="ij")
        _, _, _, _, J = shapefn.chart_geometry(e.kind, coords, u.ravel(), v.ravel())
        if not np.all(np.isfinite(J)) or np.any(J <= 0):
            raise ElementQualityError(eid, "non-positive Jacobian")

        corners = [self.nodes[n].position for n in e.corners]
        ncorner = len(corners)
        cosines = []
        for i in range(ncorner):
            a = corners[(i - 1) % ncorner] - corners[i]
            b = corners[(i + 1) % ncorner] - corners[i]
            cosines.append(float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))))
        min_corner_cos = min(cosines)

        if e.kind == TIP9:
            d_l = self._edge_length(e, TIP_FRONT_EDGE)
            front_mid = self.nodes[e.conn[6]].position
            back_mid = self.nodes[e.conn[4]].position
            d_w = float(np.linalg.norm(front_mid - back_mid))
            aspect = d_l / d_w
            side_lengths = (self._edge_length(e, 3), self._edge_length(e, 1))
        elif e.kind == QUAD8:
            l0, l1 = self._edge_length(e, 0), self._edge_length(e, 1)
            l2, l3 = self._edge_length(e, 2), self._edge_length(e, 3)
            aspect = (l0 + l2) / (l1 + l3)
            side_lengths = (l3, l1)
        else:
            lens = [self._edge_length(e, k) for k in range(3)]
            aspect = max(lens) / min(lens)
            side_lengths = (lens[2], lens[1])
        return {"aspect_ratio": aspect, "side_lengths": side_lengths,
                "min_corner_cos": min_corner_cos}

    # ------------------------------------------------------------------
    # front metrics and ordering
    # ------------------------------------------------------------------
    def characteristic_tip_length(self):
        """Mean front-edge length over all active tip elements."""
        tips = self.tip_elements()
        if not tips:
            raise MeshInvariantError("mesh has no tip elements (malformed front)")
        return float(np.mean([
            self._edge_length(self.elements[eid], TIP_FRONT_EDGE) for eid in tips
        ]))

    def reorder_for_update(self):
        """Stable-partition the permutation: stationary elements first.

        Returns the new permutation (list of element ids) after storing it on
        the mesh.  Applying it twice is a no-op.
        """
        stat = [eid for eid in self.permutation
                if self.elements[eid].update_flag == STATIONARY]
        moved = [eid for eid in self.permutation
                 if self.elements[eid].update_flag != STATIONARY]
        self.permutation = stat + moved
        self._arrays_version = -1
        return list(self.permutation)

    # ------------------------------------------------------------------
    # compiled arrays
    # ------------------------------------------------------------------
    def compile(self):
        """Flat arrays in permutation order; cached until the mesh mutates."""
        if self._arrays is not None and self._arrays_version == self.version \
                and self._arrays.elem_ids.tolist() == self.permutation:
            return self._arrays
        nel = len(self.permutation)
        kinds = np.zeros(nel, dtype=np.int8)
        coords = np.zeros((nel, 9, 3))
        conn = np.full((nel, 9), -1, dtype=np.int32)
        corner_ids = np.full((nel, 4), -1, dtype=np.int64)
        # canonical dof ordering: sorted active node ids (stable across
        # element reordering, so solutions are permutation-invariant)
        node_order = sorted(self.nodes)
        node_index = {nid: i for i, nid in enumerate(node_order)}
        elem_index = {}
        for row, eid in enumerate(self.permutation):
            e = self.elements[eid]
            elem_index[eid] = row
            kinds[row] = KIND_CODE[e.kind]
            for a, nid in enumerate(e.conn):
                conn[row, a] = node_index[nid]
                coords[row, a] = self.nodes[nid].position
            for c, nid in enumerate(e.corners):
                corner_ids[row, c] = nid
        centers = np.zeros((nel, 3))
        diam = np.zeros(nel)
        for row, eid in enumerate(self.permutation):
            nc = NCORNER[self.elements[eid].kind]
            pts = coords[row, :nc]
            centers[row] = pts.mean(axis=0)
            d = 0.0
            for i in range(nc):
                for j in range(i + 1, nc):
                    d = max(d, float(np.linalg.norm(pts[i] - pts[j])))
            diam[row] = d
        self._arrays = MeshArrays(
            elem_ids=np.array(self.permutation, dtype=np.int64),
            kinds=kinds, coords=coords, conn=conn, corner_ids=corner_ids,
            centers=centers, diameters=diam,
            node_order=np.array(node_order, dtype=np.int64),
            node_index=node_index, elem_index=elem_index)
        self._arrays_version = self.version
        return self._arrays


# ----------------------------------------------------------------------
# builders
# ----------------------------------------------------------------------
def _disc_frame(normal):
    n = np.asarray(normal, dtype=float)
    ln = np.linalg.norm(n)
    if ln < 1e-12:
        raise ValueError("degenerate normal vector")
    n = n / ln
    seed = np.array([1.0, 0.0, 0.0])
    if abs(np.dot(seed, n)) > 0.9:
        seed = np.array([0.0, 1.0, 0.0])
    e1 = seed - np.dot(seed, n) * n
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    return e1, e2, n


def build_penny_mesh(radius, rings, center=(0.0, 0.0, 0.0), normal=(0.0, 0.0, 1.0),
                     mesh=None, fracture=None):
    """Structured conforming disc mesh whose outer ring is tip elements.

    The disc has ``4 * rings`` angular sectors: a fan of tri6 around the
    center, ``rings - 2`` layers of quad8, and one outer layer of tip9.  Node
    positions sit exactly on circles so the quadratic edges track the
    boundary curve.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    if rings < 2:
        raise ValueError("need at least 2 rings")
    e1, e2, _ = _disc_frame(normal)
    center = np.asarray(center, dtype=float)
    sectors = 4 * rings
    mesh = mesh if mesh is not None else Mesh()
    fracture = mesh.n_fractures if fracture is None else fracture

    nt = 2 * rings        # radial stations 0..nt
    npang = 2 * sectors   # angular stations, periodic

    def pos(t, p):
        r = radius * t / nt
        th = 2.0 * np.pi * p / npang
        return center + r * (np.cos(th) * e1 + np.sin(th) * e2)

    grid = {}

    def node(t, p):
        p = p % npang
        if t == 0:
            p = 0
        key = (t, p)
        if key not in grid:
            grid[key] = mesh.add_node(pos(t, p), is_front=(t == nt))
        return grid[key]

    # center fan of triangles
    for j in range(sectors):
        a, b = 2 * j, 2 * j + 2
        conn = [node(0, 0), node(2, a), node(2, b),
                node(1, a), node(2, a + 1), node(1, b)]
        mesh.add_element(TRI6, conn, fracture)
    # interior quad layers
    for k in range(2, rings):
        ti, to = 2 * (k - 1), 2 * k
        for j in range(sectors):
            a, b = 2 * j, 2 * j + 2
            conn = [node(ti, a), node(to, a), node(to, b), node(ti, b),
                    node(ti + 1, a), node(to, a + 1), node(ti + 1, b), node(ti, a + 1)]
            mesh.add_element(QUAD8, conn, fracture)
    # tip layer
    loop = []
    ti, to = nt - 2, nt
    for j in range(sectors):
        a, b = 2 * j, 2 * j + 2
        conn = [node(ti, b), node(ti, a), node(to, a), node(to, b),
                node(ti, a + 1), node(ti + 1, a), node(to, a + 1), node(ti + 1, b),
                node(ti + 1, a + 1)]
        mesh.add_element(TIP9, conn, fracture)
        loop.append(mesh.permutation[-1])
    mesh.front_loops.append(loop)
    return mesh


def build_layout(fractures):
    """Build several penny fractures into one mesh.

    ``fractures`` is an iterable of dicts with keys radius, rings, center,
    normal.  Returns the combined mesh; fracture indices follow input order.
    """
    mesh = Mesh()
    for spec in fractures:
        build_penny_mesh(spec["radius"], spec["rings"],
                         spec.get("center", (0, 0, 0)),
                         spec.get("normal", (0, 0, 1)), mesh=mesh)
    return mesh


def mesh_area(mesh):
    """Total surface area by quadrature of the chart Jacobians."""
    u, v, w = shapefn.gauss2d(4)
    total = 0.0
    for eid, e in mesh.elements.items():
        coords = mesh.element_coords(eid)
        _, _, _, _, J = shapefn.chart_geometry(e.kind, coords, u, v)
        total += float(np.sum(w * J))
    return total


def fracture_area(mesh, fracture):
    u, v, w = shapefn.gauss2d(4)
    total = 0.0
    for eid in mesh.fracture_elements(fracture):
        e = mesh.elements[eid]
        coords = mesh.element_coords(eid)
        _, _, _, _, J = shapefn.chart_geometry(e.kind, coords, u, v)
        total += float(np.sum(w * J))
    return total
