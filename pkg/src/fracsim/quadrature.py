"""Quadrature planning for weakly singular double-surface Galerkin integrals.

Every element pair is decomposed into tasks the compute backends execute:

* ``SELF``      -- coincident pair; integrated with a polar transform in the
  relative chart coordinates, which cancels the 1/r singularity exactly and
  converges exponentially on non-degenerate charts.
* ``EDGE``      -- pair sharing an edge; a Duffy-type cone decomposition of
  the three transverse coordinates removes the line singularity.
* ``VERTEX``    -- pair sharing one corner; a four-dimensional cone transform
  removes the point singularity.
* ``SEPARATED`` -- tensor Gauss with distance-adaptive order: 3x3 in the far
  field, escalating to 6x6 once the center distance drops below twice the
  combined element diameter, plus a 10x10 guard tier for nearly touching
  non-adjacent pairs (curved fractures approaching each other).

Tip elements carry a chart that degenerates along the front edge (this is what
absorbs the square-root behaviour of the displacement shape functions), so
singular tip-tip and tip-self configurations are first split into chart strips
geometrically graded toward the front; each strip pair is then regular enough
for the transforms above.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import MeshInvariantError
from .shapefn import NCORNER

TASK_SELF = 0
TASK_EDGE = 1
TASK_VERTEX = 2
TASK_SEP = 3

# Chart-edge local maps (s, w) -> (u, v): point = P0 + s * S + w * W with
# s in [-1, 1] along the edge (traversal corner e -> e+1) and w in [0, 2]
# spanning the chart inward.
EDGE_MAPS = {
    0: ((0.0, -1.0), (1.0, 0.0), (0.0, 1.0)),
    1: ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0)),
    2: ((0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)),
    3: ((-1.0, 0.0), (0.0, -1.0), (1.0, 0.0)),
}

# Chart-corner local maps (a, b) in [0, 2]^2 -> (u, v): P0 + a * W1 + b * W2.
CORNER_MAPS = {
    0: ((-1.0, -1.0), (1.0, 0.0), (0.0, 1.0)),
    1: ((1.0, -1.0), (-1.0, 0.0), (0.0, 1.0)),
    2: ((1.0, 1.0), (-1.0, 0.0), (0.0, -1.0)),
    3: ((-1.0, 1.0), (1.0, 0.0), (0.0, -1.0)),
}

# Corner-pair -> local edge index tables (corner indices within the element).
_EDGE_OF_CORNERS = {
    4: {frozenset((0, 1)): 0, frozenset((1, 2)): 1,
        frozenset((2, 3)): 2, frozenset((3, 0)): 3},
    3: {frozenset((0, 1)): 0, frozenset((1, 2)): 1, frozenset((2, 0)): 2},
}

FULL_RECT = (-1.0, 1.0, -1.0, 1.0)


@dataclass(frozen=True)
class QuadratureConfig:
    """Gauss orders for the pair-integration rules."""

    order_far: int = 3
    order_near: int = 6
    near_ratio: float = 2.0       # centers closer than ratio*(diam_a+diam_b)
    order_guard: int = 10
    guard_ratio: float = 0.25     # on minimum corner distance
    polar_theta: int = 8
    polar_rho: int = 8
    polar_inner: int = 4
    edge_t: int = 6
    edge_cross: int = 5
    edge_s: int = 6
    vertex_t: int = 6
    vertex_cross: int = 5
    tip_strip_levels: int = 4
    strip_theta_boost: int = 4

    def refined(self, factor=2):
        """Scaled copy with all orders multiplied (spacing halved)."""
        return replace(
            self,
            order_far=self.order_far * factor,
            order_near=self.order_near * factor,
            order_guard=self.order_guard * factor,
            polar_theta=self.polar_theta * factor,
            polar_rho=self.polar_rho * factor,
            polar_inner=self.polar_inner * factor,
            edge_t=self.edge_t * factor,
            edge_cross=self.edge_cross * factor,
            edge_s=self.edge_s * factor,
            vertex_t=self.vertex_t * factor,
            vertex_cross=self.vertex_cross * factor,
        )


class TaskPlan:
    """Flat task arrays consumed by the compute backends."""

    def __init__(self):
        self.ttype = []
        self.row_a = []
        self.row_b = []
        self.rot_a = []
        self.rot_b = []
        self.params = []
        self.orders = []
        self.slot = []
        self.pair_rows = []  # one (row_a, row_b) per slot

    def new_slot(self, row_a, row_b):
        self.pair_rows.append((row_a, row_b))
        return len(self.pair_rows) - 1

    def add(self, ttype, slot, row_a, row_b, rot_a, rot_b, params, orders):
        p = np.zeros(12)
        p[: len(params)] = params
        o = np.zeros(4, dtype=np.int32)
        o[: len(orders)] = orders
        self.ttype.append(ttype)
        self.slot.append(slot)
        self.row_a.append(row_a)
        self.row_b.append(row_b)
        self.rot_a.append(rot_a)
        self.rot_b.append(rot_b)
        self.params.append(p)
        self.orders.append(o)

    def finalize(self):
        self.ttype = np.asarray(self.ttype, dtype=np.int8)
        self.slot = np.asarray(self.slot, dtype=np.int64)
        self.row_a = np.asarray(self.row_a, dtype=np.int64)
        self.row_b = np.asarray(self.row_b, dtype=np.int64)
        self.rot_a = np.asarray(self.rot_a, dtype=np.int8)
        self.rot_b = np.asarray(self.rot_b, dtype=np.int8)
        self.params = np.asarray(self.params) if self.params else np.zeros((0, 12))
        self.orders = (np.asarray(self.orders, dtype=np.int32)
                       if self.orders else np.zeros((0, 4), dtype=np.int32))
        self.pair_rows = (np.asarray(self.pair_rows, dtype=np.int64)
                          if self.pair_rows else np.zeros((0, 2), dtype=np.int64))
        return self

    @property
    def n_slots(self):
        return len(self.pair_rows)


def _corner_set(arrays, row):
    ids = arrays.corner_ids[row]
    return set(int(i) for i in ids if i >= 0)


def _local_edge(arrays, row, ga, gb):
    ids = arrays.corner_ids[row]
    nc = 4 if ids[3] >= 0 else 3
    la = lb = None
    for i in range(nc):
        if ids[i] == ga:
            la = i
        if ids[i] == gb:
            lb = i
    edge = _EDGE_OF_CORNERS[nc].get(frozenset((la, lb)))
    if edge is None:
        raise MeshInvariantError(
            f"elements share two non-adjacent corners ({ga}, {gb})")
    return edge, la, lb


def _local_corner(arrays, row, g):
    ids = arrays.corner_ids[row]
    for i in range(4):
        if ids[i] == g:
            return i
    raise MeshInvariantError(f"corner {g} not found in element row {row}")


def _is_tri(arrays, row):
    return arrays.kinds[row] == 1


def _is_tip(arrays, row):
    return arrays.kinds[row] == 2


def _edge_task_params(arrays, row, local_edge):
    """(P0, S, W, rot, start_corner, end_corner_ids) for one side."""
    if _is_tri(arrays, row):
        rot = local_edge
        P0, S, W = EDGE_MAPS[0]
    else:
        rot = 0
        P0, S, W = EDGE_MAPS[local_edge]
    return np.array(P0), np.array(S), np.array(W), rot


def _corner_task_params(arrays, row, local_corner):
    if _is_tri(arrays, row):
        rot = local_corner
        P0, W1, W2 = CORNER_MAPS[0]
    else:
        rot = 0
        P0, W1, W2 = CORNER_MAPS[local_corner]
    return np.array(P0), np.array(W1), np.array(W2), rot


def _strip_breaks(levels):
    b = [-1.0, 0.0]
    for k in range(1, levels):
        b.append(1.0 - 2.0 ** (-k))
    b.append(1.0)
    return b


def _rect_points(arrays, row, rect, field_rot=0, n=3):
    from . import shapefn
    u0, u1, v0, v1 = rect
    g = np.linspace(-0.92, 0.92, n)
    uu, vv = np.meshgrid(0.5 * (u0 + u1) + 0.5 * (u1 - u0) * g,
                         0.5 * (v0 + v1) + 0.5 * (v1 - v0) * g, indexing="ij")
    kind = ("quad8", "tri6", "tip9")[arrays.kinds[row]]
    from .shapefn import NSHAPE as _NSH
    coords = arrays.coords[row, : _NSH[kind]]
    x, _, _, _, _ = shapefn.chart_geometry(kind, coords, uu.ravel(), vv.ravel(),
                                           rot=field_rot)
    return x


def _sep_order(arrays, row_a, row_b, cfg, rect_a=FULL_RECT, rect_b=FULL_RECT):
    if rect_a == FULL_RECT and rect_b == FULL_RECT:
        ca, cb = arrays.centers[row_a], arrays.centers[row_b]
        da, db = arrays.diameters[row_a], arrays.diameters[row_b]
        dc = float(np.linalg.norm(ca - cb))
        if dc >= cfg.near_ratio * (da + db):
            return cfg.order_far
        pa = _rect_points(arrays, row_a, rect_a)
        pb = _rect_points(arrays, row_b, rect_b)
        dmin = float(np.sqrt(
            ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1).min()))
        if dmin < cfg.guard_ratio * (da + db):
            return cfg.order_guard
        return cfg.order_near
    pa = _rect_points(arrays, row_a, rect_a)
    pb = _rect_points(arrays, row_b, rect_b)
    diff = pa[:, None, :] - pb[None, :, :]
    dmin = float(np.sqrt((diff ** 2).sum(-1).min()))
    size = max(float(np.linalg.norm(pa.max(0) - pa.min(0))),
               float(np.linalg.norm(pb.max(0) - pb.min(0))))
    if dmin >= cfg.near_ratio * size:
        return cfg.order_far
    if dmin < cfg.guard_ratio * size:
        return cfg.order_guard
    return cfg.order_near


def _add_self(plan, slot, arrays, row, cfg, rect=FULL_RECT, theta_boost=0):
    plan.add(TASK_SELF, slot, row, row, 0, 0, list(rect),
             (cfg.polar_theta + theta_boost, cfg.polar_rho, cfg.polar_inner))


def _add_strip_edge_same_elem(plan, slot, row, vline, ha_signed, hb_signed, cfg):
    """EDGE task across an internal chart line v = vline of one element.

    The signed heights point from the line into each side's strip (negative
    for the strip below the line).
    """
    params = [0.0, vline, 1.0, 0.0, 0.0, ha_signed / 2.0,
              0.0, vline, 1.0, 0.0, 0.0, hb_signed / 2.0]
    plan.add(TASK_EDGE, slot, row, row, 0, 0, params,
             (cfg.edge_t, cfg.edge_cross, cfg.edge_s))


def _tip_self_tasks(plan, slot, arrays, row, cfg):
    """Self pair of a tip element: all ordered strip pairs of the graded
    chart decomposition (the front edge degenerates, so the strips keep the
    singular rules on well-behaved sub-charts)."""
    breaks = _strip_breaks(cfg.tip_strip_levels)
    rects = [(-1.0, 1.0, breaks[i], breaks[i + 1]) for i in range(len(breaks) - 1)]
    n = len(rects)
    for i, rect in enumerate(rects):
        _add_self(plan, slot, arrays, row, cfg, rect, cfg.strip_theta_boost)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            hi = breaks[i + 1] - breaks[i]
            hj = breaks[j + 1] - breaks[j]
            if abs(i - j) == 1:
                vline = breaks[max(i, j)]
                sa = -hi if i < j else hi
                sb = -hj if j < i else hj
                _add_strip_edge_same_elem(plan, slot, row, vline, sa, sb, cfg)
            else:
                order = _sep_order(arrays, row, row, cfg, rects[i], rects[j])
                plan.add(TASK_SEP, slot, row, row, 0, 0,
                         list(rects[i]) + list(rects[j]), (order, order))


def _tip_side_edge_tasks(plan, slot, arrays, row_a, row_b, edge_a, edge_b, cfg):
    """Two tips sharing a lateral (front-reaching) edge: graded in v."""
    breaks = _strip_breaks(cfg.tip_strip_levels)
    nst = len(breaks) - 1
    ua = 1.0 if edge_a == 1 else -1.0
    ub = 1.0 if edge_b == 1 else -1.0
    for i in range(nst):
        lo, hi = breaks[i], breaks[i + 1]
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        # shared sub-edge parametrized by v; conforming tips are v-aligned
        params = [ua, mid, 0.0, half, -ua, 0.0,
                  ub, mid, 0.0, half, -ub, 0.0]
        plan.add(TASK_EDGE, slot, row_a, row_b, 0, 0, params,
                 (cfg.edge_t, cfg.edge_cross, cfg.edge_s))
    for i in range(nst):
        for j in range(nst):
            if i == j:
                continue
            if abs(i - j) == 1:
                vb = breaks[max(i, j)]
                ha = breaks[i + 1] - breaks[i]
                hb = breaks[j + 1] - breaks[j]
                sa = 1.0 if j > i else -1.0   # strip a sits below the corner?
                sb = 1.0 if i > j else -1.0
                params = [ua, vb, -ua, 0.0, 0.0, -sa * ha / 2.0,
                          ub, vb, -ub, 0.0, 0.0, -sb * hb / 2.0]
                plan.add(TASK_VERTEX, slot, row_a, row_b, 0, 0, params,
                         (cfg.vertex_t, cfg.vertex_cross))
            else:
                ra = (-1.0, 1.0, breaks[i], breaks[i + 1])
                rb = (-1.0, 1.0, breaks[j], breaks[j + 1])
                order = _sep_order(arrays, row_a, row_b, cfg, ra, rb)
                plan.add(TASK_SEP, slot, row_a, row_b, 0, 0,
                         list(ra) + list(rb), (order, order))


def build_plan(arrays, pairs, cfg=None):
    """Build the task plan for the given (row_a, row_b) element pairs.

    ``pairs`` is an iterable of row-index pairs into ``arrays``; one output
    block slot is created per pair, in order.
    """
    cfg = cfg or QuadratureConfig()
    plan = TaskPlan()
    for row_a, row_b in pairs:
        row_a, row_b = int(row_a), int(row_b)
        slot = plan.new_slot(row_a, row_b)
        if row_a == row_b:
            if _is_tip(arrays, row_a):
                _tip_self_tasks(plan, slot, arrays, row_a, cfg)
            else:
                _add_self(plan, slot, arrays, row_a, cfg)
            continue
        shared = _corner_set(arrays, row_a) & _corner_set(arrays, row_b)
        if len(shared) > 2:
            raise MeshInvariantError(
                f"element rows {row_a}, {row_b} share {len(shared)} corners")
        if len(shared) == 2:
            ga, gb = sorted(shared)
            edge_a, a1, a2 = _local_edge(arrays, row_a, ga, gb)
            edge_b, b1, b2 = _local_edge(arrays, row_b, ga, gb)
            if (_is_tip(arrays, row_a) and _is_tip(arrays, row_b)
                    and edge_a in (1, 3) and edge_b in (1, 3)):
                _tip_side_edge_tasks(plan, slot, arrays, row_a, row_b,
                                     edge_a, edge_b, cfg)
                continue
            P0a, Sa, Wa, rot_a = _edge_task_params(arrays, row_a, edge_a)
            P0b, Sb, Wb, rot_b = _edge_task_params(arrays, row_b, edge_b)
            # orient side b's s so both sides trace the edge identically
            ids_a = arrays.corner_ids[row_a]
            ids_b = arrays.corner_ids[row_b]
            nca = NCORNER[("quad8", "tri6", "tip9")[arrays.kinds[row_a]]]
            ncb = NCORNER[("quad8", "tri6", "tip9")[arrays.kinds[row_b]]]
            ea = _EDGE_TRAVERSAL[nca][edge_a]
            eb = _EDGE_TRAVERSAL[ncb][edge_b]
            start_a = ids_a[ea[0]]
            start_b = ids_b[eb[0]]
            flip = 1.0 if start_a == start_b else -1.0
            params = list(P0a) + list(Sa) + list(Wa) + \
                list(P0b) + list(flip * Sb) + list(Wb)
            plan.add(TASK_EDGE, slot, row_a, row_b, rot_a, rot_b, params,
                     (cfg.edge_t, cfg.edge_cross, cfg.edge_s))
            continue
        if len(shared) == 1:
            g = shared.pop()
            ca = _local_corner(arrays, row_a, g)
            cb = _local_corner(arrays, row_b, g)
            P0a, W1a, W2a, rot_a = _corner_task_params(arrays, row_a, ca)
            P0b, W1b, W2b, rot_b = _corner_task_params(arrays, row_b, cb)
            params = list(P0a) + list(W1a) + list(W2a) + \
                list(P0b) + list(W1b) + list(W2b)
            plan.add(TASK_VERTEX, slot, row_a, row_b, rot_a, rot_b, params,
                     (cfg.vertex_t, cfg.vertex_cross))
            continue
        order = _sep_order(arrays, row_a, row_b, cfg)
        plan.add(TASK_SEP, slot, row_a, row_b, 0, 0,
                 list(FULL_RECT) + list(FULL_RECT), (order, order))
    return plan.finalize()


_EDGE_TRAVERSAL = {
    4: ((0, 1), (1, 2), (2, 3), (3, 0)),
    3: ((0, 1), (1, 2), (2, 0)),
}


def lower_pairs(n):
    """All unordered pairs (a >= b) over n rows, diagonal included."""
    out = []
    for a in range(n):
        for b in range(a + 1):
            out.append((a, b))
    return out


def flagged_pairs(flags):
    """Pairs (a >= b) where at least one member has a nonzero flag."""
    n = len(flags)
    nz = np.flatnonzero(flags)
    nzset = set(nz.tolist())
    out = []
    for a in range(n):
        a_hot = a in nzset
        for b in range(a + 1):
            if a_hot or b in nzset:
                out.append((a, b))
    return out
