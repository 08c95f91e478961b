"""Lubrication channel flow inside the fracture: sparse FEM operators.

Conductance uses the cubic-width law w^3/(12 eta) with a Newtonian or
power-law effective viscosity; leak-off follows Carter's square-root decay in
exposure time.  The solid-fluid coupling matrix maps pressure dofs to
displacement-jump equations through the face normal.

Pressure fields interpolate with standard quadratic bases everywhere; width
(a derived displacement quantity) interpolates with the displacement basis so
the square-root opening is represented on tip elements.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import shapefn
from .shapefn import NSHAPE

# shear-rate floor regularizing the n < 1 viscosity singularity (SI units)
SHEAR_FLOOR = 1e-8
NEWTONIAN = "newtonian"
POWER_LAW = "power_law"

_GAUSS_N = 4


@dataclass
class FluidModel:
    kind: str = NEWTONIAN
    consistency: float = 1e-3     # K, Pa s^n
    exponent: float = 1.0         # n
    # minimum hydraulic aperture for the conductance: keeps thin regions
    # fluid-connected so startup/seed-scale apertures admit pressure
    # communication (lubrication regularization, conductance only)
    min_aperture: float = 1e-6    # m

    def __post_init__(self):
        if self.kind not in (NEWTONIAN, POWER_LAW):
            raise ValueError(f"unknown fluid kind {self.kind!r}")
        if self.kind == NEWTONIAN:
            self.exponent = 1.0
        if self.consistency <= 0:
            raise ValueError("consistency must be positive")
        if not 0.0 < self.exponent <= 2.0:
            raise ValueError("exponent must lie in (0, 2]")
        if self.min_aperture < 0:
            raise ValueError("min_aperture must be non-negative")

    @property
    def is_newtonian(self):
        return self.kind == NEWTONIAN or self.exponent == 1.0


@dataclass
class LeakoffModel:
    coefficient: float = 0.0      # c_L, m/sqrt(s)

    def __post_init__(self):
        if self.coefficient < 0:
            raise ValueError("leak-off coefficient must be non-negative")


@dataclass
class InjectionSchedule:
    """Per-fracture constant injection rate applied at perforation nodes."""

    rates: dict = field(default_factory=dict)   # fracture -> m^3/s
    nodes: dict = field(default_factory=dict)   # fracture -> [node ids]

    def validate(self, mesh):
        for frac, nids in self.nodes.items():
            for nid in nids:
                if nid not in mesh.nodes:
                    raise ValueError(f"injection node {nid} not in mesh")
        for frac, q in self.rates.items():
            if q < 0:
                raise ValueError("injection rate must be non-negative")

    def total_rate(self):
        return float(sum(self.rates.values()))


def effective_viscosity(w, grad_p, fluid):
    """Apparent viscosity for channel flow.

    Newtonian fluids return the consistency unconditionally.  For power-law
    fluids the shear magnitude ||w grad p|| is floored at SHEAR_FLOOR so the
    n < 1 branch stays finite when pressure gradients vanish at startup.
    """
    if fluid.is_newtonian:
        return fluid.consistency
    n = fluid.exponent
    gamma = max(float(np.linalg.norm(np.atleast_1d(w * np.asarray(grad_p)))),
                SHEAR_FLOOR)
    return ((2 * n + 1) / (6 * n)) * (2 * fluid.consistency) ** (1.0 / n) \
        * gamma ** (1.0 - 1.0 / n)


def carter_leakoff(c_L, t, t_S):
    """Carter leak-off rate 2 c_L / sqrt(t - t_S); requires t > t_S."""
    if t <= t_S:
        raise ValueError(f"point not yet exposed: t={t} <= t_S={t_S}")
    return 2.0 * c_L / np.sqrt(t - t_S)


# ----------------------------------------------------------------------
# pointwise conductance and its derivatives
# ----------------------------------------------------------------------
def _conductance(w, gradp_norm, fluid):
    """c = w^3/(12 eta) with width clamps; returns (c, dc/dw, dc/dgradp).

    Negative widths clamp to zero displacement-side effect free; widths below
    the minimum hydraulic aperture use the floor value with zero width
    sensitivity.
    """
    if w < fluid.min_aperture:
        if fluid.min_aperture == 0.0:
            return 0.0, 0.0, 0.0
        c, _, dcdg = _conductance(fluid.min_aperture, gradp_norm, fluid)
        return c, 0.0, dcdg
    n = fluid.exponent
    gamma = w * gradp_norm
    if fluid.is_newtonian:
        c = w ** 3 / (12.0 * fluid.consistency)
        return c, 3.0 * c / w, 0.0
    floored = gamma <= SHEAR_FLOOR
    eta = ((2 * n + 1) / (6 * n)) * (2 * fluid.consistency) ** (1.0 / n) \
        * max(gamma, SHEAR_FLOOR) ** (1.0 - 1.0 / n)
    c = w ** 3 / (12.0 * eta)
    if floored:
        return c, 3.0 * c / w, 0.0
    # c ~ w^(2+1/n) |grad p|^(1/n - 1)
    dcdw = (2.0 + 1.0 / n) * c / w
    dcdg = (1.0 / n - 1.0) * c / gradp_norm if gradp_norm > 0 else 0.0
    return c, dcdw, dcdg


# ----------------------------------------------------------------------
# nodal helpers
# ----------------------------------------------------------------------
def canonical_ids(mesh):
    return np.array(sorted(mesh.nodes))


def nodal_normals(mesh):
    """Area-weighted unit normals at nodes, aligned with sorted node ids."""
    ids = canonical_ids(mesh)
    pos = {int(n): i for i, n in enumerate(ids)}
    acc = np.zeros((len(ids), 3))
    for eid, e in mesh.elements.items():
        coords = mesh.element_coords(eid)
        nsh = NSHAPE[e.kind]
        # local chart coordinates of each node
        uv = _node_chart_coords(e.kind)
        _, xu, xv, nrm, J = shapefn.chart_geometry(
            e.kind, coords, uv[:, 0], uv[:, 1])
        for a in range(nsh):
            acc[pos[e.conn[a]]] += nrm[a] * e.normal_orientation
    norms = np.linalg.norm(acc, axis=1)
    norms[norms == 0] = 1.0
    return acc / norms[:, None]


def _node_chart_coords(kind):
    if kind in (shapefn.QUAD8, shapefn.TIP9):
        pts = [(-1, -1), (1, -1), (1, 1), (-1, 1),
               (0, -1), (1, 0), (0, 1), (-1, 0), (0, 0)]
        # avoid the degenerate tip front edge when sampling normals
        if kind == shapefn.TIP9:
            pts = [(u, min(v, 0.999)) for u, v in pts]
        return np.array(pts[: NSHAPE[kind]], dtype=float)
    # tri6: corners then mids in barycentric -> chart (rot 0)
    bary = [(1, 0, 0), (0, 1, 0), (0, 0, 1),
            (0.5, 0.5, 0), (0, 0.5, 0.5), (0.5, 0, 0.5)]
    out = []
    for l0, l1, l2 in bary:
        v = 2.0 * l2 - 1.0
        v = min(v, 0.999)
        den = 1.0 - 0.5 * (1.0 + v)
        u = (l1 - l0) / den if den > 1e-12 else 0.0
        out.append((u, v))
    return np.array(out, dtype=float)


def width_field(mesh, displacement_jump):
    """Nodal width w = jump . n, aligned with sorted node ids."""
    normals = nodal_normals(mesh)
    return np.einsum("ij,ij->i", displacement_jump, normals)


# ----------------------------------------------------------------------
# element loop infrastructure
# ----------------------------------------------------------------------
def _elem_quad(kind):
    u, v, w = shapefn.gauss2d(_GAUSS_N)
    return u, v, w


def _pressure_maps(mesh):
    ids = canonical_ids(mesh)
    pos = {int(n): i for i, n in enumerate(ids)}
    return ids, pos


def assemble_C(mesh, width, pressure, fluid):
    """Conductance matrix: integral of c(w, grad p) grad(phi_i) . grad(phi_j).

    ``width`` and ``pressure`` are nodal arrays in sorted-id order.  Negative
    widths are clamped to zero inside the conductance only.  The constant
    pressure field lies in the null space by construction.
    """
    ids, pos = _pressure_maps(mesh)
    n = len(ids)
    rows, cols, vals = [], [], []
    uq, vq, wq = _elem_quad(None)
    for eid, e in mesh.elements.items():
        coords = mesh.element_coords(eid)
        nsh = NSHAPE[e.kind]
        gidx = np.array([pos[nid] for nid in e.conn])
        grad, J, _, _ = shapefn.surface_gradient(e.kind, "pressure",
                                                 coords, uq, vq)
        grad = grad[:, :nsh, :]
        # width interpolates with the displacement row basis on tips
        Nw, _, _ = shapefn.basis(e.kind, "disp", uq, vq)
        wpt = Nw[:, :nsh] @ width[gidx]
        ppt_grad = np.einsum("a,pac->pc", pressure[gidx], grad)
        local = np.zeros((nsh, nsh))
        for p in range(len(wq)):
            gnorm = float(np.linalg.norm(ppt_grad[p]))
            c, _, _ = _conductance(float(wpt[p]), gnorm, fluid)
            if c == 0.0:
                continue
            local += wq[p] * J[p] * c * (grad[p] @ grad[p].T)
        rows.append(np.repeat(gidx, nsh))
        cols.append(np.tile(gidx, nsh))
        vals.append(local.ravel())
    if not rows:
        return sp.csr_matrix((n, n))
    M = sp.coo_matrix((np.concatenate(vals),
                       (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n))
    return M.tocsr()


def conductance_jacobian_terms(mesh, width, pressure, displacement_jump, fluid):
    """Derivative blocks of (C P): d/dU (rows: pressure eq, cols: 3N disp
    dofs) and the non-symmetric part of d/dP beyond C itself."""
    ids, pos = _pressure_maps(mesh)
    n = len(ids)
    normals = nodal_normals(mesh)
    rows_u, cols_u, vals_u = [], [], []
    rows_p, cols_p, vals_p = [], [], []
    uq, vq, wq = _elem_quad(None)
    for eid, e in mesh.elements.items():
        coords = mesh.element_coords(eid)
        nsh = NSHAPE[e.kind]
        gidx = np.array([pos[nid] for nid in e.conn])
        grad, J, _, _ = shapefn.surface_gradient(e.kind, "pressure",
                                                 coords, uq, vq)
        grad = grad[:, :nsh, :]
        Nw, _, _ = shapefn.basis(e.kind, "disp", uq, vq)
        Nw = Nw[:, :nsh]
        wpt = Nw @ width[gidx]
        gp = np.einsum("a,pac->pc", pressure[gidx], grad)
        nrm_nodes = normals[gidx]
        loc_u = np.zeros((nsh, 3 * nsh))
        loc_p = np.zeros((nsh, nsh))
        for p in range(len(wq)):
            gnorm = float(np.linalg.norm(gp[p]))
            c, dcdw, dcdg = _conductance(float(wpt[p]), gnorm, fluid)
            gi_dot_gp = grad[p] @ gp[p]          # (nsh,)
            if dcdw != 0.0:
                # dw at the point = sum_j Nw[j] * (n_j . dU_j)
                dw = (Nw[p][:, None] * nrm_nodes).reshape(-1)
                loc_u += wq[p] * J[p] * dcdw * np.outer(gi_dot_gp, dw)
            if dcdg != 0.0 and gnorm > 0.0:
                # d||gp||/dP_j = (gp . grad_j)/||gp||
                dg = (grad[p] @ gp[p]) / gnorm
                loc_p += wq[p] * J[p] * dcdg * np.outer(gi_dot_gp, dg)
        rows_u.append(np.repeat(gidx, 3 * nsh))
        cols_u.append(np.tile((3 * gidx[:, None] + np.arange(3)).ravel(), nsh))
        vals_u.append(loc_u.ravel())
        rows_p.append(np.repeat(gidx, nsh))
        cols_p.append(np.tile(gidx, nsh))
        vals_p.append(loc_p.ravel())
    DU = sp.coo_matrix((np.concatenate(vals_u),
                        (np.concatenate(rows_u), np.concatenate(cols_u))),
                       shape=(n, 3 * n)).tocsr()
    DP = sp.coo_matrix((np.concatenate(vals_p),
                        (np.concatenate(rows_p), np.concatenate(cols_p))),
                       shape=(n, n)).tocsr()
    return DU, DP


def assemble_B(mesh):
    """Coupling matrix B[(i,k),(j)] = -integral( psi_i n_k phi_j ) dS.

    Geometry-only; maps pressure dofs into the displacement equations, and
    its transpose gives (minus) width moments needed by mass balance.
    """
    ids, pos = _pressure_maps(mesh)
    n = len(ids)
    rows, cols, vals = [], [], []
    uq, vq, wq = _elem_quad(None)
    for eid, e in mesh.elements.items():
        coords = mesh.element_coords(eid)
        nsh = NSHAPE[e.kind]
        gidx = np.array([pos[nid] for nid in e.conn])
        _, xu, xv, nrm, J = shapefn.chart_geometry(e.kind, coords, uq, vq)
        nrm = nrm * e.normal_orientation
        Npsi, _, _ = shapefn.basis(e.kind, "disp", uq, vq)
        Nphi, _, _ = shapefn.basis(e.kind, "pressure", uq, vq)
        Npsi, Nphi = Npsi[:, :nsh], Nphi[:, :nsh]
        # local[(a,k), b] = -sum_p w J psi_a n_k phi_b
        loc = -np.einsum("p,pa,pk,pb->akb",
                         wq * J, Npsi, nrm, Nphi).reshape(3 * nsh, nsh)
        dof_u = (3 * gidx[:, None] + np.arange(3)).ravel()
        rows.append(np.repeat(dof_u, nsh))
        cols.append(np.tile(gidx, 3 * nsh))
        vals.append(loc.ravel())
    B = sp.coo_matrix((np.concatenate(vals),
                       (np.concatenate(rows), np.concatenate(cols))),
                      shape=(3 * n, n))
    return B.tocsr()


def normal_moment_vector(mesh):
    """m[(i,k)] = integral( psi_i n_k ) dS = -(B @ 1)."""
    B = assemble_B(mesh)
    return -np.asarray(B @ np.ones(B.shape[1])).ravel()


def insitu_load(mesh, sigma0):
    """R_c contribution of the in-situ stress: integral( psi_i sigma_lk n_l )."""
    ids, pos = _pressure_maps(mesh)
    n = len(ids)
    out = np.zeros(3 * n)
    sigma0 = np.asarray(sigma0, dtype=float)
    uq, vq, wq = _elem_quad(None)
    for eid, e in mesh.elements.items():
        coords = mesh.element_coords(eid)
        nsh = NSHAPE[e.kind]
        gidx = np.array([pos[nid] for nid in e.conn])
        _, _, _, nrm, J = shapefn.chart_geometry(e.kind, coords, uq, vq)
        nrm = nrm * e.normal_orientation
        trac = nrm @ sigma0            # t_k = sigma_lk n_l
        Npsi, _, _ = shapefn.basis(e.kind, "disp", uq, vq)
        loc = np.einsum("p,pa,pk->ak", wq * J, Npsi[:, :nsh], trac)
        dof_u = (3 * gidx[:, None] + np.arange(3)).ravel()
        np.add.at(out, dof_u, loc.ravel())
    return out


def opening_volume(mesh, displacement_jump, per_fracture=False):
    """Fracture volume = integral of (jump . n) dS, via the B-quadrature."""
    ids, pos = _pressure_maps(mesh)
    uq, vq, wq = _elem_quad(None)
    vols = {}
    for eid, e in mesh.elements.items():
        coords = mesh.element_coords(eid)
        nsh = NSHAPE[e.kind]
        gidx = np.array([pos[nid] for nid in e.conn])
        _, _, _, nrm, J = shapefn.chart_geometry(e.kind, coords, uq, vq)
        nrm = nrm * e.normal_orientation
        Npsi, _, _ = shapefn.basis(e.kind, "disp", uq, vq)
        upt = np.einsum("pa,ac->pc", Npsi[:, :nsh], displacement_jump[gidx])
        w = np.einsum("pc,pc->p", upt, nrm)
        frac = mesh.fracture_of_element[eid]
        vols[frac] = vols.get(frac, 0.0) + float(np.sum(wq * J * w))
    if per_fracture:
        return vols
    return float(sum(vols.values()))


def assemble_fluid_rhs(mesh, schedule, leakoff, ages, t, history):
    """Unscaled fluid load: injection point sources minus leak-off integrals
    plus the width-history term (pass B^T U_prev / dt as ``history``).

    Injection is lumped at the perforation nodes so the total equals the
    scheduled volumetric rate exactly.  Leak-off integrates the Carter decay
    with nodal exposure ages interpolated to quadrature points; exposure is
    floored at a small positive value to guard quadratic interpolation
    overshoot near freshly created nodes.
    """
    ids, pos = _pressure_maps(mesh)
    n = len(ids)
    out = np.zeros(n)
    for frac, q in schedule.rates.items():
        nodes = schedule.nodes.get(frac, [])
        if not nodes or q == 0.0:
            continue
        share = q / len(nodes)
        for nid in nodes:
            out[pos[nid]] += share
    if leakoff.coefficient > 0.0:
        uq, vq, wq = _elem_quad(None)
        floor = max(1e-6 * t, 1e-12)
        for eid, e in mesh.elements.items():
            coords = mesh.element_coords(eid)
            nsh = NSHAPE[e.kind]
            gidx = np.array([pos[nid] for nid in e.conn])
            _, _, _, _, J = shapefn.chart_geometry(e.kind, coords, uq, vq)
            Nphi, _, _ = shapefn.basis(e.kind, "pressure", uq, vq)
            Nphi = Nphi[:, :nsh]
            age_pt = Nphi @ ages[gidx]
            expo = np.maximum(t - age_pt, floor)
            ql = 2.0 * leakoff.coefficient / np.sqrt(expo)
            loc = np.einsum("p,pa->a", wq * J * ql, Nphi)
            np.add.at(out, gidx, loc)
    if history is not None:
        out = out + history
    return out


def leak_rate_total(mesh, leakoff, ages, t):
    """Instantaneous total leak-off rate (m^3/s) for mass accounting."""
    if leakoff.coefficient == 0.0:
        return 0.0
    ids, pos = _pressure_maps(mesh)
    uq, vq, wq = _elem_quad(None)
    floor = max(1e-6 * t, 1e-12)
    total = 0.0
    for eid, e in mesh.elements.items():
        coords = mesh.element_coords(eid)
        nsh = NSHAPE[e.kind]
        gidx = np.array([pos[nid] for nid in e.conn])
        _, _, _, _, J = shapefn.chart_geometry(e.kind, coords, uq, vq)
        Nphi, _, _ = shapefn.basis(e.kind, "pressure", uq, vq)
        age_pt = Nphi[:, :nsh] @ ages[gidx]
        expo = np.maximum(t - age_pt, floor)
        total += float(np.sum(wq * J * 2.0 * leakoff.coefficient / np.sqrt(expo)))
    return total
