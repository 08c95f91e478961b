"""Fracture front kinematics and adaptive remeshing.

Front advancement follows the local-symmetry kink angle and a bilinear
velocity law in the effective opening-mode intensity.  Tip elements translate
forward as rigid columns (front, mid and back rows move together), so the
elements behind the band absorb the stretch; the remesher then restores
quality: lateral tip splits when the front edge outgrows the tip depth,
horizontal splits of behind-band elements stretched on both sides, one-sided
triangular transitions, or nothing; flattened triangle/quad pairs left behind
by earlier transitions are merged back into larger quads.  Solution fields
are projected onto the new mesh by inverse isoparametric mapping with a
displacement regularization for nodes beyond the old front.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import shapefn
from .errors import HostSearchError, MeshInvariantError, TimeStepRejected
from .mesh import UPDATED, Mesh
from .newton import FieldState
from .shapefn import LOCAL_EDGES, NSHAPE, QUAD8, TIP9, TRI6

logger = logging.getLogger(__name__)


@dataclass
class GrowthLaw:
    toughness: float          # K_Ic, Pa sqrt(m)
    rate_scale: float = 1.0   # reference crack speed a_dot_o, m/s
    k_scale: float = 1e6      # intensity normalization K_o, Pa sqrt(m)
    exponent: float = 1.0     # m

    def __post_init__(self):
        if self.rate_scale <= 0 or self.k_scale <= 0 or self.exponent <= 0:
            raise ValueError("growth law constants must be positive")


@dataclass
class RemeshConfig:
    tip_aspect_tol: float = 2.0
    d_smax_factor: float = 1.5
    merge_cos_tol: float = float(np.cos(np.pi / 4))
    advance_fraction: float = 0.5

    def __post_init__(self):
        if min(self.tip_aspect_tol, self.d_smax_factor,
               self.advance_fraction) <= 0:
            raise ValueError("remesh tolerances must be positive")
        if not 0.0 < self.merge_cos_tol < 1.0:
            raise ValueError("merge_cos_tol must lie in (0, 1)")


def growth_direction(K_I, K_II):
    """Kink angle that locally cancels the mode-II loading (radians)."""
    if K_I == 0.0 and K_II == 0.0:
        raise ValueError("growth direction undefined for zero SIFs")
    if abs(K_II) < 1e-9 * abs(K_I):
        return 0.0
    ratio = K_I / K_II
    return 2.0 * np.arctan(0.25 * (ratio - np.sign(K_II)
                                   * np.sqrt(ratio * ratio + 8.0)))


def effective_KI(K_I, K_II, theta_g):
    """Opening-mode intensity on the kinked plane."""
    h = 0.5 * theta_g
    return K_I * np.cos(h) ** 3 - 1.5 * K_II * np.cos(h) * np.sin(theta_g)


def growth_increment(K_eff, dt, law):
    """Advance distance over dt: zero below toughness, power law above."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if K_eff <= law.toughness:
        return 0.0
    return dt * law.rate_scale * \
        ((K_eff - law.toughness) / law.k_scale) ** law.exponent


def front_velocities(sif_records, law):
    """Per front node: (speed, advance unit vector)."""
    out = {}
    for rec in sif_records:
        theta = growth_direction(rec.K_I, rec.K_II) \
            if (rec.K_I, rec.K_II) != (0.0, 0.0) else 0.0
        keff = effective_KI(rec.K_I, rec.K_II, theta)
        speed = growth_increment(keff, 1.0, law)
        direction = np.cos(theta) * rec.e1 + np.sin(theta) * rec.e2
        out[rec.front_node] = (speed, direction)
    return out


def advance_front(mesh, sif_records, dt, law, config):
    """Move the front by the growth law over dt (in place).

    Returns (moved node ids, max advance).  Raises TimeStepRejected if the
    advance would leave a touched element with a degenerate Jacobian.
    """
    vel = front_velocities(sif_records, law)
    moved = {}
    for loop in mesh.front_loops:
        for eid in loop:
            c = mesh.elements[eid].conn
            for front_local, followers in ((2, (1, 5)), (3, (0, 7)), (6, (4, 8))):
                nid = c[front_local]
                if nid not in vel:
                    raise MeshInvariantError(f"missing SIFs at front node {nid}")
                speed, direction = vel[nid]
                adv = speed * dt
                if adv == 0.0:
                    continue
                moved.setdefault(nid, []).append(adv * direction)
                for fl in followers:
                    moved.setdefault(c[fl], []).append(adv * direction)
    if not moved:
        return set(), 0.0
    max_adv = 0.0
    for nid, vecs in moved.items():
        v = np.mean(vecs, axis=0)
        mesh.nodes[nid].position = mesh.nodes[nid].position + v
        max_adv = max(max_adv, float(np.linalg.norm(v)))
    mesh.touch()
    for eid, e in mesh.elements.items():
        if any(n in moved for n in e.conn):
            e.update_flag = UPDATED
            try:
                mesh.element_quality(eid)
            except Exception as exc:
                raise TimeStepRejected(
                    f"front advance degenerates element {eid}") from exc
    return set(moved), max_adv


# ----------------------------------------------------------------------
# remeshing
# ----------------------------------------------------------------------
def _ekey(a, b):
    return (a, b) if a < b else (b, a)


class _Remesher:
    """One remeshing pass over the mesh (split passes, then merges)."""

    def __init__(self, mesh, config):
        self.mesh = mesh
        self.config = config
        self.l_c = mesh.characteristic_tip_length()
        self.d_smax = config.d_smax_factor * self.l_c
        self.new_nodes = set()
        self.created_elements = set()
        self.half_mids = {}   # canonical edge key -> (mid near lo id, near hi)
        self.counts = {"case1": 0, "case2": 0, "case3": 0, "case4": 0,
                       "merge": 0}

    # geometric helpers --------------------------------------------------
    def _pos(self, nid):
        return self.mesh.nodes[nid].position

    def _curve_point(self, c1, m, c2, t):
        x1, xm, x2 = self._pos(c1), self._pos(m), self._pos(c2)
        return 0.5 * t * (t - 1) * x1 + (1 - t * t) * xm + 0.5 * t * (t + 1) * x2

    def _edge_len(self, c1, m, c2):
        return float(np.linalg.norm(self._pos(c1) - self._pos(m))
                     + np.linalg.norm(self._pos(m) - self._pos(c2)))

    def _new_node(self, position, is_front=False):
        nid = self.mesh.add_node(position, age=0.0, is_front=is_front)
        self.new_nodes.add(nid)
        return nid

    def _half_mids(self, c1, m, c2):
        """(mid of c1-half, mid of c2-half) of edge (c1, m, c2), registered
        canonically so the elements on both sides reuse the same nodes."""
        key = _ekey(c1, c2)
        if key not in self.half_mids:
            front = all(self.mesh.nodes[n].is_front for n in (c1, m, c2))
            lo, hi = key
            # parametrize lo -> hi
            mm = m
            m_lo = self._new_node(self._curve_point(lo, mm, hi, -0.5), front)
            m_hi = self._new_node(self._curve_point(lo, mm, hi, 0.5), front)
            self.half_mids[key] = (m_lo, m_hi)
        m_lo, m_hi = self.half_mids[key]
        return (m_lo, m_hi) if c1 < c2 else (m_hi, m_lo)

    def _interior_point(self, eid, u, v):
        e = self.mesh.elements[eid]
        coords = self.mesh.element_coords(eid)
        x, _, _, _, _ = shapefn.chart_geometry(e.kind, coords,
                                               np.array([float(u)]),
                                               np.array([float(v)]))
        return x[0]

    def _replace(self, old_eid, new_specs, fracture):
        self.mesh.remove_element(old_eid)
        out = []
        for kind, conn in new_specs:
            eid = self.mesh.add_element(kind, conn, fracture, UPDATED)
            self.created_elements.add(eid)
            out.append(eid)
        return out

    def _behind_element(self, tip_eid, table=None):
        e = self.mesh.elements[tip_eid]
        key = frozenset((e.conn[0], e.conn[1]))
        table = table or self.mesh.edge_table()
        users = [u for u in table.get(key, []) if u[0] != tip_eid]
        if len(users) != 1:
            raise MeshInvariantError(
                f"tip {tip_eid} back edge shared by {len(users)} other elements")
        return users[0]

    # case 1: lateral tip split -------------------------------------------
    def _split_tip(self, tip_eid):
        mesh = self.mesh
        e = mesh.elements[tip_eid]
        frac = mesh.fracture_of_element[tip_eid]
        c = e.conn
        bl, br, fr, fl = c[0], c[1], c[2], c[3]
        bm, sr, fm, sl, ctr = c[4], c[5], c[6], c[7], c[8]
        nb_l, nb_r = self._half_mids(bl, bm, br)[0], self._half_mids(br, bm, bl)[0]
        nf_l = self._half_mids(fl, fm, fr)[0]
        nf_r = self._half_mids(fr, fm, fl)[0]
        # tip charts run through q = (1-v)/2, eta = 1-2q^2: the geometric
        # mid row (eta = 0) sits at chart v = 1 - sqrt(2)
        v_mid = 1.0 - np.sqrt(2.0)
        ctr_l = self._new_node(self._interior_point(tip_eid, -0.5, v_mid))
        ctr_r = self._new_node(self._interior_point(tip_eid, 0.5, v_mid))
        left = [bl, bm, fm, fl, nb_l, ctr, nf_l, sl, ctr_l]
        right = [bm, br, fr, fm, nb_r, sr, nf_r, ctr, ctr_r]
        new_ids = self._replace(tip_eid, [(TIP9, left), (TIP9, right)], frac)
        self.counts["case1"] += 1
        for loop in mesh.front_loops:
            if tip_eid in loop:
                k = loop.index(tip_eid)
                order = list(new_ids)
                prev_tip = loop[(k - 1) % len(loop)]
                if len(loop) > 1:
                    pc = set(mesh.elements[prev_tip].corners)
                    if not (pc & set(mesh.elements[order[0]].corners)):
                        order = order[::-1]
                loop[k: k + 1] = order
                break
        return new_ids

    # transitions for elements with split edges -----------------------------
    def _transition(self, eid, split_keys, induced=False):
        e = self.mesh.elements[eid]
        conn = e.conn
        kind = e.kind
        edges = LOCAL_EDGES[kind]
        split_local = [le for le, (a, b, m) in enumerate(edges)
                       if _ekey(conn[a], conn[b]) in split_keys]
        if not split_local:
            return False
        if kind == QUAD8 and len(split_local) == 2 \
                and abs(split_local[0] - split_local[1]) == 2:
            self._quad_parallel_split(eid, split_local)
            self.counts["case2"] += 1
        elif kind == TRI6 and len(split_local) == 2:
            self._tri_double_split(eid, split_local)
            self.counts["case2"] += 1
        else:
            self._fan_transition(eid, split_local)
            if not induced:
                self.counts["case3"] += 1
        return True

    def _quad_parallel_split(self, eid, split_local):
        """Quad stretched on both lateral sides: insert one new quad."""
        e = self.mesh.elements[eid]
        conn = e.conn
        frac = self.mesh.fracture_of_element[eid]
        rot = 1 if 0 in split_local else 0   # bring split edges to locals 1,3
        corners = [conn[(rot + k) % 4] for k in range(4)]
        mids = [conn[4 + (rot + k) % 4] for k in range(4)]
        c0, c1, c2, c3 = corners
        m01, m12, m23, m30 = mids
        r_lo, r_hi = self._half_mids(c1, m12, c2)
        l_hi, l_lo = self._half_mids(c3, m30, c0)
        center = self._new_node(self._interior_point(eid, 0.0, 0.0))
        lower = [c0, c1, m12, m30, m01, r_lo, center, l_lo]
        upper = [m30, m12, c2, c3, center, r_hi, m23, l_hi]
        self._replace(eid, [(QUAD8, lower), (QUAD8, upper)], frac)

    def _tri_double_split(self, eid, split_local):
        e = self.mesh.elements[eid]
        conn = e.conn
        frac = self.mesh.fracture_of_element[eid]
        le_a, le_b = split_local
        shared = (set(LOCAL_EDGES[TRI6][le_a][:2])
                  & set(LOCAL_EDGES[TRI6][le_b][:2]))
        rot = shared.pop()   # apex corner -> local 0
        corners = [conn[(rot + k) % 3] for k in range(3)]
        mids = [conn[3 + (rot + k) % 3] for k in range(3)]
        a, b1, b2 = corners
        m01, m12, m20 = mids
        s1a, s1b = self._half_mids(a, m01, b1)
        s2a, s2b = self._half_mids(a, m20, b2)
        M1, M2 = m01, m20
        dm = self._new_node(0.5 * (self._pos(M1) + self._pos(M2)))
        self._replace(eid, [
            (TRI6, [a, M1, M2, s1a, dm, s2a]),
            (QUAD8, [M1, b1, b2, M2, s1b, m12, s2b, dm]),
        ], frac)

    def _fan_transition(self, eid, split_local):
        """Generic conforming transition: fan triangles about a center node.

        Handles any split pattern; the boundary walk inserts the split edges'
        old mid nodes as corners and reuses the registered half mids.
        """
        e = self.mesh.elements[eid]
        conn = e.conn
        kind = e.kind
        frac = self.mesh.fracture_of_element[eid]
        edges = LOCAL_EDGES[kind]
        ring = []  # list of (corner, mid_to_next)
        for le, (a, b, m) in enumerate(edges):
            ca, cb, cm = conn[a], conn[b], conn[m]
            if le in split_local:
                h_a, h_b = self._half_mids(ca, cm, cb)
                ring.append((ca, h_a))
                ring.append((cm, h_b))
            else:
                ring.append((ca, cm))
        if kind == QUAD8:
            center = self._new_node(self._interior_point(eid, 0.0, 0.0))
        else:
            center = self._new_node(self._interior_point(eid, 0.0, -1.0 / 3.0))
        spoke = {}
        def spoke_mid(corner):
            if corner not in spoke:
                spoke[corner] = self._new_node(
                    0.5 * (self._pos(corner) + self._pos(center)))
            return spoke[corner]
        specs = []
        nring = len(ring)
        for i in range(nring):
            P, mid = ring[i]
            Q = ring[(i + 1) % nring][0]
            specs.append((TRI6, [P, Q, center, mid, spoke_mid(Q), spoke_mid(P)]))
        self._replace(eid, specs, frac)

    # passes ---------------------------------------------------------------
    def split_pass(self):
        mesh = self.mesh
        acted = False
        # case 1 batch: all tips over the aspect tolerance
        to_split = []
        for loop in mesh.front_loops:
            for tip in loop:
                q = mesh.element_quality(tip)
                if q["aspect_ratio"] > self.config.tip_aspect_tol:
                    to_split.append(tip)
        if to_split:
            table = mesh.edge_table()
            behinds = {tip: self._behind_element(tip, table) for tip in to_split}
            for tip in to_split:
                behind_eid, behind_le, _ = behinds[tip]
                e_b = mesh.elements[behind_eid]
                a, b, m = LOCAL_EDGES[e_b.kind][behind_le]
                key = _ekey(e_b.conn[a], e_b.conn[b])
                self._split_tip(tip)
                self._transition(behind_eid, {key}, induced=True)
            return True
        # cases 2/3: mark long lateral edges of the behind band
        table = mesh.edge_table()
        split_edges = set()
        for loop in mesh.front_loops:
            for tip in loop:
                behind_eid, behind_le, _ = self._behind_element(tip, table)
                e = mesh.elements[behind_eid]
                edges = LOCAL_EDGES[e.kind]
                if e.kind == QUAD8:
                    lateral = [(behind_le + 1) % 4, (behind_le + 3) % 4]
                else:
                    lateral = [le for le in range(len(edges)) if le != behind_le]
                for le in lateral:
                    a, b, m = edges[le]
                    if self._edge_len(e.conn[a], e.conn[m], e.conn[b]) > self.d_smax:
                        split_edges.add(_ekey(e.conn[a], e.conn[b]))
        if not split_edges:
            return acted
        for eid in list(mesh.elements):
            e = mesh.elements.get(eid)
            if e is None:
                continue
            if e.kind == TIP9:
                keys = {_ekey(e.conn[a], e.conn[b])
                        for a, b, _ in LOCAL_EDGES[TIP9]}
                if keys & split_edges:
                    raise MeshInvariantError(
                        "marked band edge touches a tip element")
                continue
            if self._transition(eid, split_edges):
                acted = True
        return acted

    def merge_pass(self):
        mesh = self.mesh
        tips = set(mesh.tip_elements())
        table = mesh.edge_table()
        band = set()
        for tip in tips:
            band.add(self._behind_element(tip, table)[0])
        changed = False
        for eid in list(mesh.elements):
            e = mesh.elements.get(eid)
            if e is None or e.kind != TRI6 or eid in self.created_elements \
                    or eid in band:
                continue
            if self._try_merge(eid, tips, band):
                changed = True
                table = mesh.edge_table()
        return changed

    def _try_merge(self, tri_eid, tips, band):
        mesh = self.mesh
        t = mesh.elements[tri_eid]
        frac = mesh.fracture_of_element[tri_eid]
        table = mesh.edge_table()
        for le, (a_l, b_l, m_l) in enumerate(LOCAL_EDGES[TRI6]):
            s1, s2 = t.conn[a_l], t.conn[b_l]
            users = [u for u in table.get(frozenset((s1, s2)), [])
                     if u[0] != tri_eid]
            if not users:
                continue
            qid = users[0][0]
            q = mesh.elements.get(qid)
            if q is None or q.kind != QUAD8 or qid in self.created_elements \
                    or qid in band or qid in tips:
                continue
            apex = [cn for cn in t.corners if cn not in (s1, s2)][0]
            qc = q.corners
            for B in (s1, s2):
                C = s2 if B == s1 else s1
                kb = qc.index(B)
                if qc[(kb - 1) % 4] != C:
                    continue
                D = qc[(kb + 1) % 4]
                E = qc[(kb + 2) % 4]
                u = self._pos(apex) - self._pos(B)
                v = self._pos(D) - self._pos(B)
                cosang = float(np.dot(u, v)
                               / (np.linalg.norm(u) * np.linalg.norm(v)))
                if cosang > -self.config.merge_cos_tol:
                    continue
                if self._do_merge(tri_eid, qid, apex, B, C, D, E, frac):
                    return True
        return False

    def _do_merge(self, tri_eid, qid, A, B, C, D, E, frac):
        mesh = self.mesh
        t, q = mesh.elements[tri_eid], mesh.elements[qid]

        def mid_of(e, c1, c2):
            for a_l, b_l, m_l in LOCAL_EDGES[e.kind]:
                if {e.conn[a_l], e.conn[b_l]} == {c1, c2}:
                    return e.conn[m_l]
            return None

        mDE, mEC = mid_of(q, D, E), mid_of(q, E, C)
        mBD, mBC = mid_of(q, B, D), mid_of(q, B, C)
        mAB, mCA = mid_of(t, A, B), mid_of(t, C, A)
        if None in (mDE, mEC, mBD, mBC, mAB, mCA):
            return False
        new_conn = [A, D, E, C, B, mDE, mEC, mCA]
        # quality gate before committing
        coords = np.array([self._pos(n) for n in new_conn])
        g = np.linspace(-0.9, 0.9, 3)
        uu, vv = np.meshgrid(g, g, indexing="ij")
        _, xu, xv, _, J = shapefn.chart_geometry(QUAD8, coords,
                                                 uu.ravel(), vv.ravel())
        if np.any(J <= 0) or not np.all(np.isfinite(J)):
            return False
        mesh.remove_element(tri_eid)
        mesh.remove_element(qid)
        eid = mesh.add_element(QUAD8, new_conn, frac, UPDATED)
        self.created_elements.add(eid)
        for nid in (mAB, mBD, mBC):
            mesh.remove_node(nid)
        self.counts["merge"] += 1
        return True

    def run(self):
        for _ in range(16):
            if not self.split_pass():
                break
        else:
            raise MeshInvariantError("remesh split passes did not terminate")
        self.merge_pass()
        if all(v == 0 for v in self.counts.values()):
            self.counts["case4"] = 1
        return self.counts


def remesh(mesh, config):
    """Adaptive element management (in place); returns (counts, new nodes)."""
    r = _Remesher(mesh, config)
    counts = r.run()
    return counts, r.new_nodes


# ----------------------------------------------------------------------
# solution projection
# ----------------------------------------------------------------------
class _HostLocator:
    """Spatial-hash broad phase + inverse isoparametric narrow phase."""

    def __init__(self, mesh, tol_param=1e-10):
        self.mesh = mesh
        self.tol_param = tol_param
        self.cell = mesh.characteristic_tip_length()
        self.table = {}
        self.bboxes = {}
        for eid in mesh.elements:
            coords = mesh.element_coords(eid)
            lo = coords.min(axis=0) - 1.0 * self.cell
            hi = coords.max(axis=0) + 1.0 * self.cell
            self.bboxes[eid] = (lo, hi)
            for key in self._cells(lo, hi):
                self.table.setdefault(key, []).append(eid)

    def _cells(self, lo, hi):
        ilo = np.floor(lo / self.cell).astype(int)
        ihi = np.floor(hi / self.cell).astype(int)
        for i in range(ilo[0], ihi[0] + 1):
            for j in range(ilo[1], ihi[1] + 1):
                for k in range(ilo[2], ihi[2] + 1):
                    yield (i, j, k)

    def _invert(self, eid, x):
        """Gauss-Newton for the chart coordinates of the closest point."""
        e = self.mesh.elements[eid]
        coords = self.mesh.element_coords(eid)
        u = np.array([0.0, 0.0 if e.kind != TRI6 else -0.3])
        for _ in range(40):
            xx, xu, xv, _, _ = shapefn.chart_geometry(
                e.kind, coords, np.array([u[0]]), np.array([u[1]]))
            r = xx[0] - x
            Jc = np.stack([xu[0], xv[0]], axis=1)
            g = Jc.T @ r
            H = Jc.T @ Jc
            try:
                step = np.linalg.solve(H + 1e-14 * np.eye(2), -g)
            except np.linalg.LinAlgError:
                return None
            u = np.clip(u + step, -1.2, 1.2)
            if np.linalg.norm(step) < self.tol_param:
                break
        xx, _, _, _, _ = shapefn.chart_geometry(
            e.kind, coords, np.array([u[0]]), np.array([u[1]]))
        dist = float(np.linalg.norm(xx[0] - x))
        return u, dist

    def find(self, x, inside_tol):
        x = np.asarray(x, dtype=float)
        key = tuple(np.floor(x / self.cell).astype(int))
        cands = []
        for di in (0, -1, 1):
            for dj in (0, -1, 1):
                for dk in (0, -1, 1):
                    cands.extend(self.table.get(
                        (key[0] + di, key[1] + dj, key[2] + dk), []))
        best = None
        for eid in dict.fromkeys(cands):
            lo, hi = self.bboxes[eid]
            if np.any(x < lo) or np.any(x > hi):
                continue
            out = self._invert(eid, x)
            if out is None:
                continue
            u, dist = out
            inside = np.all(np.abs(u) <= 1.0 + 1e-8)
            score = (0 if inside else 1, dist)
            if best is None or score < best[0]:
                best = (score, eid, np.clip(u, -1.0, 1.0), dist)
        if best is None:
            return None
        _, eid, u, dist = best
        if dist <= inside_tol:
            return eid, u, dist, True
        return eid, u, dist, False


def project_solution(old_mesh, old_state, new_mesh, current_time=None,
                     moved_nodes=(), new_nodes=()):
    """Transfer (jump, pressure, age) fields onto the remeshed surface.

    Unmoved surviving nodes copy their values; moved and newly created nodes
    interpolate inside their host element of the old mesh.  Nodes beyond the
    old front (freshly exposed rock) take the boundary value scaled by a
    heuristic factor shrinking with the overhang distance, and their exposure
    age resets to the current simulation time.
    """
    current_time = old_state.time if current_time is None else current_time
    old_ids = {int(n): i for i, n in enumerate(old_state.node_ids)}
    ids = np.array(sorted(new_mesh.nodes))
    n = len(ids)
    jump = np.zeros((n, 3))
    pressure = np.zeros(n)
    ages = np.zeros(n)
    moved_nodes = set(moved_nodes)
    new_nodes = set(new_nodes)
    if old_state.node_ids.tolist() == ids.tolist() and not moved_nodes \
            and not new_nodes:
        out = old_state.copy()
        out.time = current_time
        for i, nid in enumerate(ids):
            ages[i] = old_mesh.nodes[int(nid)].age
        _apply_ages(new_mesh, ids, ages)
        return out

    locator = _HostLocator(old_mesh)
    l_c = old_mesh.characteristic_tip_length()
    inside_tol = 1e-6 * l_c

    # element-max jump magnitude for the regularization bound
    def elem_max_jump(eid):
        e = old_mesh.elements[eid]
        vals = [np.linalg.norm(old_state.displacement_jump[old_ids[nid]])
                for nid in e.conn if nid in old_ids]
        return max(vals) if vals else 0.0

    for i, nid in enumerate(ids):
        nid = int(nid)
        node = new_mesh.nodes[nid]
        if nid in old_ids and nid not in moved_nodes and nid not in new_nodes:
            j = old_ids[nid]
            jump[i] = old_state.displacement_jump[j]
            pressure[i] = old_state.pressure[j]
            ages[i] = old_mesh.nodes[nid].age
            continue
        found = locator.find(node.position, inside_tol)
        if found is None:
            raise HostSearchError(nid)
        eid, uv, dist, inside = found
        e = old_mesh.elements[eid]
        Nd, _, _ = shapefn.basis(e.kind, "disp",
                                 np.array([uv[0]]), np.array([uv[1]]))
        Np, _, _ = shapefn.basis(e.kind, "pressure",
                                 np.array([uv[0]]), np.array([uv[1]]))
        nsh = NSHAPE[e.kind]
        rows = [old_ids.get(cn) for cn in e.conn]
        if any(r is None for r in rows):
            raise HostSearchError(nid, "host references unknown nodes")
        uj = np.array([old_state.displacement_jump[r] for r in rows])
        pj = np.array([old_state.pressure[r] for r in rows])
        aj = np.array([old_mesh.nodes[cn].age for cn in e.conn])
        jv = Nd[0, :nsh] @ uj
        pv = Np[0, :nsh] @ pj
        av = Np[0, :nsh] @ aj
        if not inside:
            if not node.is_front and dist > 0.75 * l_c:
                raise HostSearchError(
                    nid, f"interior node {dist:.3g} m outside the old surface")
            # freshly exposed: damp the extrapolated opening and reset age
            diam = float(np.linalg.norm(
                old_mesh.element_coords(eid).max(0)
                - old_mesh.element_coords(eid).min(0)))
            scale = max(0.0, 1.0 - dist / max(diam, 1e-300))
            cap = elem_max_jump(eid)
            jv = jv * scale
            nv = np.linalg.norm(jv)
            if nv > cap > 0:
                jv = jv * (cap / nv)
            av = current_time
        if node.is_front:
            jv = np.zeros(3)
            av = current_time
        jump[i] = jv
        pressure[i] = pv
        ages[i] = min(float(av), current_time)

    _apply_ages(new_mesh, ids, ages)
    return FieldState(ids, jump, pressure, current_time)


def _apply_ages(mesh, ids, ages):
    for i, nid in enumerate(ids):
        mesh.nodes[int(nid)].age = float(ages[i])
