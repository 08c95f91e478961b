"""Numpy reference backend for the pair-integration task plans.

Slower than the compiled core but dependency-free; used as the import-time
fallback and as a cross-check in the test suite.  Tasks are grouped by
(type, orders, kinds, rots) so each group evaluates as fixed-shape batched
einsums.
"""

import numpy as np

from .. import shapefn
from ..errors import QuadratureError
from ..quadrature import TASK_EDGE, TASK_SELF, TASK_SEP, TASK_VERTEX

_KINDNAME = ("quad8", "tri6", "tip9")


def _gauss(n):
    return np.polynomial.legendre.leggauss(int(n))


def _eval_side(arrays, rows, rot, u, v, field):
    """Densities and positions for one side of a task batch.

    rows: (T,) element rows (all same kind/rot); u, v: (T, P).
    Returns x (T,P,3) and densities: (T,P,9,3) for 'disp', (T,P,9) for 'flux'.
    """
    kind = _KINDNAME[arrays.kinds[rows[0]]]
    coords = arrays.coords[rows]  # (T, 9, 3)
    nsh = shapefn.NSHAPE[kind]
    c = coords[:, :nsh, :]
    Ng, Ngu, Ngv = shapefn.basis(kind, "geom", u, v, rot)
    x = np.einsum("tpa,tac->tpc", Ng, c)
    xu = np.einsum("tpa,tac->tpc", Ngu, c)
    xv = np.einsum("tpa,tac->tpc", Ngv, c)
    if field == "disp":
        _, Nu, Nv = shapefn.basis(kind, "disp", u, v, rot)
        dens = np.zeros(u.shape + (9, 3))
        dens[..., :nsh, :] = (Nu[..., :, None] * xv[..., None, :]
                              - Nv[..., :, None] * xu[..., None, :])
        return x, dens
    if field in ("flux", "pressure"):
        N, _, _ = shapefn.basis(kind, field, u, v, rot)
        J = np.linalg.norm(np.cross(xu, xv), axis=-1)
        dens = np.zeros(u.shape + (9,))
        dens[..., :nsh] = N * J[..., None]
        return x, dens
    raise ValueError(field)


def _contract(kernel, wts, xa, xb, da, db):
    """Weighted kernel contraction over quadrature points -> (T, dmax, dmax)."""
    R = xb - xa
    r = np.sqrt(np.einsum("tpc,tpc->tp", R, R))
    if kernel[0] == "elastic":
        _, mu, nu, sign = kernel
        c = wts * (sign * mu / (4.0 * np.pi * (1.0 - nu)) / r)
        Rh = R / r[..., None]
        G = np.matmul(da, np.swapaxes(db, -1, -2))      # (T,P,9,9)
        caf = (c[..., None, None] * da).reshape(*da.shape[:2], 27)
        dbf = db.reshape(*db.shape[:2], 27)
        # term 1: (1-nu) V_k W_j as flattened (a k) x (b j) point outer products
        E1 = (1.0 - nu) * np.matmul(caf.transpose(0, 2, 1), dbf)
        E1 = E1.reshape(-1, 9, 3, 9, 3)
        # term 2: 2 nu V_j W_k = term-1 layout with component axes swapped
        E2 = 2.0 * nu / (1.0 - nu) * E1.transpose(0, 1, 4, 3, 2)
        cG = c[..., None] * G.reshape(*G.shape[:2], 81)
        S3 = cG.sum(axis=1).reshape(-1, 9, 9)
        RR = (Rh[..., :, None] * Rh[..., None, :]).reshape(*Rh.shape[:2], 9)
        E4 = np.matmul(cG.transpose(0, 2, 1), RR).reshape(-1, 9, 9, 3, 3)
        E4 = E4.transpose(0, 1, 3, 2, 4)
        out = E1 + E2 - E4
        for k in range(3):
            out[:, :, k, :, k] -= S3
        return out.reshape(out.shape[0], 27, 27)
    if kernel[0] == "darcy":
        _, coef = kernel
        c = wts * (coef / r)
        out = np.matmul((c[..., None] * da).transpose(0, 2, 1), db)
        return out
    raise ValueError(kernel[0])


def _self_points(params, orders):
    """Polar-in-relative-coordinates points for coincident rect pairs.

    Returns (za, zb, w) in normalized chart coords, shapes (P, 2), (P, 2), (P,).
    """
    ntheta, nrho, nin = int(orders[0]), int(orders[1]), int(orders[2])
    gt, wt = _gauss(ntheta)
    gr, wr = _gauss(nrho)
    gz, wz = _gauss(nin)
    pts_a, pts_b, wts = [], [], []
    # eight half-sectors bounded by the mu-axes so the inner-rectangle extents
    # stay smooth (no |mu| kink inside a sector)
    for c in range(8):
        theta = (c + 0.5) * np.pi / 4 + (np.pi / 8) * gt
        wth = (np.pi / 8) * wt
        rmax = 2.0 / np.maximum(np.abs(np.cos(theta)), np.abs(np.sin(theta)))
        th, rg = np.meshgrid(theta, gr, indexing="ij")
        wthg, wrg = np.meshgrid(wth, wr, indexing="ij")
        rmaxg = np.repeat(rmax[:, None], nrho, axis=1)
        rho = 0.5 * rmaxg * (rg + 1.0)
        wrho = 0.5 * rmaxg * wrg
        mu1 = rho * np.cos(th)
        mu2 = rho * np.sin(th)
        base_w = (wthg * wrho * rho).ravel()
        mu1 = mu1.ravel()
        mu2 = mu2.ravel()
        lo1 = np.maximum(-1.0, -1.0 - mu1)
        hi1 = np.minimum(1.0, 1.0 - mu1)
        lo2 = np.maximum(-1.0, -1.0 - mu2)
        hi2 = np.minimum(1.0, 1.0 - mu2)
        z1g, z2g = np.meshgrid(gz, gz, indexing="ij")
        wz1, wz2 = np.meshgrid(wz, wz, indexing="ij")
        z1 = 0.5 * ((hi1 + lo1)[:, None, None] + (hi1 - lo1)[:, None, None] * z1g)
        z2 = 0.5 * ((hi2 + lo2)[:, None, None] + (hi2 - lo2)[:, None, None] * z2g)
        ww = (base_w[:, None, None] * wz1 * wz2
              * 0.25 * (hi1 - lo1)[:, None, None] * (hi2 - lo2)[:, None, None])
        za = np.stack([z1.ravel(), z2.ravel()], axis=-1)
        zb = np.stack([(z1 + mu1[:, None, None]).ravel(),
                       (z2 + mu2[:, None, None]).ravel()], axis=-1)
        pts_a.append(za)
        pts_b.append(zb)
        wts.append(ww.ravel())
    return np.concatenate(pts_a), np.concatenate(pts_b), np.concatenate(wts)


_EDGE_CONES = (0, 1, 2, 3, 4, 5)


def _edge_points(orders):
    """Cone/Duffy points for edge-adjacent pairs in (s, wa, s+delta, wb).

    Returns (s, wa, sb, wb, w) flat arrays in the edge-local frame; the caller
    applies the affine chart maps.
    """
    nt, nc, ns = int(orders[0]), int(orders[1]), int(orders[2])
    gt, wt = _gauss(nt)
    gc, wc = _gauss(nc)
    gs, ws = _gauss(ns)
    t = 0.5 * (gt + 1.0)
    wtt = 0.5 * wt
    beta = 0.5 * (gc + 1.0)
    wbeta = 0.5 * wc
    S, WA, SB, WB, W = [], [], [], [], []
    # six cones: the relative edge coordinate keeps one sign inside each so
    # the s-extent (2 - |delta|) stays smooth
    for cone in _EDGE_CONES:
        tt, p1, p2 = np.meshgrid(t, beta, beta, indexing="ij")
        w3 = np.einsum("i,j,k->ijk", wtt, wbeta, wbeta)
        if cone == 0:
            d, wa, wb = tt * p1, tt, tt * p2
        elif cone == 1:
            d, wa, wb = -tt * p1, tt, tt * p2
        elif cone == 2:
            d, wa, wb = tt * p1, tt * p2, tt
        elif cone == 3:
            d, wa, wb = -tt * p1, tt * p2, tt
        else:
            sgn = 1.0 if cone == 4 else -1.0
            d, wa, wb = sgn * tt, tt * p1, tt * p2
        jac = 8.0 * tt * tt
        delta = 2.0 * d
        w_a = 2.0 * wa
        w_b = 2.0 * wb
        lo = np.maximum(-1.0, -1.0 - delta)
        hi = np.minimum(1.0, 1.0 - delta)
        s = 0.5 * ((hi + lo)[..., None] + (hi - lo)[..., None] * gs)
        wss = 0.5 * (hi - lo)[..., None] * ws
        wtot = (w3 * jac)[..., None] * wss
        S.append(s.ravel())
        WA.append(np.broadcast_to(w_a[..., None], s.shape).ravel())
        SB.append((s + delta[..., None]).ravel())
        WB.append(np.broadcast_to(w_b[..., None], s.shape).ravel())
        W.append(wtot.ravel())
    return (np.concatenate(S), np.concatenate(WA), np.concatenate(SB),
            np.concatenate(WB), np.concatenate(W))


def _vertex_points(orders):
    """Cone points for vertex-adjacent pairs in (a1, a2, b1, b2) in [0,2]^4."""
    nt, nc = int(orders[0]), int(orders[1])
    gt, wt = _gauss(nt)
    gc, wc = _gauss(nc)
    t = gt + 1.0            # (0, 2]
    wtt = wt
    beta = 0.5 * (gc + 1.0)
    wbeta = 0.5 * wc
    pts = []
    wts = []
    for cone in range(4):
        tt, b1, b2, b3 = np.meshgrid(t, beta, beta, beta, indexing="ij")
        w4 = np.einsum("i,j,k,l->ijkl", wtt, wbeta, wbeta, wbeta)
        others = [tt * b1, tt * b2, tt * b3]
        coords = []
        oi = 0
        for k in range(4):
            if k == cone:
                coords.append(tt)
            else:
                coords.append(others[oi])
                oi += 1
        jac = tt ** 3
        pts.append(np.stack([c.ravel() for c in coords], axis=-1))
        wts.append((w4 * jac).ravel())
    return np.concatenate(pts), np.concatenate(wts)


def _sep_points(params, orders):
    na, nb = int(orders[0]), int(orders[1])
    ga, wa = _gauss(na)
    gb, wb = _gauss(nb)
    u1, v1 = np.meshgrid(ga, ga, indexing="ij")
    w1 = np.einsum("i,j->ij", wa, wa)
    u2, v2 = np.meshgrid(gb, gb, indexing="ij")
    w2 = np.einsum("i,j->ij", wb, wb)
    return (u1.ravel(), v1.ravel(), w1.ravel(), u2.ravel(), v2.ravel(), w2.ravel())


def _rect_map(rect, z1, z2):
    u0, u1, v0, v1 = rect
    su, sv = 0.5 * (u1 - u0), 0.5 * (v1 - v0)
    return (0.5 * (u0 + u1) + su * z1, 0.5 * (v0 + v1) + sv * z2, su * sv)


def execute_plan(plan, arrays, field, kernel, nthreads=1):
    """Execute all tasks; returns blocks (n_slots, dmax, dmax).

    ``nthreads`` is accepted for interface parity; this backend runs serial.
    """
    dmax = 27 if field == "disp" else 9
    blocks = np.zeros((plan.n_slots, dmax, dmax))
    n = len(plan.ttype)
    if n == 0:
        return blocks
    kind_a = arrays.kinds[plan.row_a]
    kind_b = arrays.kinds[plan.row_b]
    keys = {}
    for i in range(n):
        key = (int(plan.ttype[i]), tuple(plan.orders[i]), int(kind_a[i]),
               int(kind_b[i]), int(plan.rot_a[i]), int(plan.rot_b[i]))
        keys.setdefault(key, []).append(i)

    budget = 4_000_000  # point-evaluations per chunk
    for key, idx in keys.items():
        ttype, orders = key[0], key[1]
        idx = np.asarray(idx)
        if ttype == TASK_SELF:
            za, zb, w = _self_points(plan.params[idx[0]], orders)
        elif ttype == TASK_EDGE:
            s, wa_, sb, wb_, w = _edge_points(orders)
        elif ttype == TASK_VERTEX:
            pts, w = _vertex_points(orders)
        else:
            u1, v1, w1, u2, v2, w2 = _sep_points(plan.params[idx[0]], orders)
        P = len(w) if ttype != TASK_SEP else len(w1) * len(w2)
        step = max(1, budget // max(P, 1))
        for lo in range(0, len(idx), step):
            sub = idx[lo:lo + step]
            rows_a = plan.row_a[sub]
            rows_b = plan.row_b[sub]
            T = len(sub)
            if ttype == TASK_SELF:
                # all tasks in the group share the rect shape only through
                # params; map per task
                rects = plan.params[sub][:, :4]
                ua = np.empty((T, P))
                va = np.empty((T, P))
                ub = np.empty((T, P))
                vb = np.empty((T, P))
                wts = np.empty((T, P))
                for k in range(T):
                    uu, vv, jac = _rect_map(rects[k], za[:, 0], za[:, 1])
                    ua[k], va[k] = uu, vv
                    uu, vv, _ = _rect_map(rects[k], zb[:, 0], zb[:, 1])
                    ub[k], vb[k] = uu, vv
                    wts[k] = w * jac * jac
            elif ttype == TASK_EDGE:
                prm = plan.params[sub]
                P0a, Sa, Wa = prm[:, 0:2], prm[:, 2:4], prm[:, 4:6]
                P0b, Sb, Wb = prm[:, 6:8], prm[:, 8:10], prm[:, 10:12]
                ua = P0a[:, None, 0] + s[None, :] * Sa[:, None, 0] + wa_[None, :] * Wa[:, None, 0]
                va = P0a[:, None, 1] + s[None, :] * Sa[:, None, 1] + wa_[None, :] * Wa[:, None, 1]
                ub = P0b[:, None, 0] + sb[None, :] * Sb[:, None, 0] + wb_[None, :] * Wb[:, None, 0]
                vb = P0b[:, None, 1] + sb[None, :] * Sb[:, None, 1] + wb_[None, :] * Wb[:, None, 1]
                ja = np.abs(Sa[:, 0] * Wa[:, 1] - Sa[:, 1] * Wa[:, 0])
                jb = np.abs(Sb[:, 0] * Wb[:, 1] - Sb[:, 1] * Wb[:, 0])
                wts = w[None, :] * (ja * jb)[:, None]
            elif ttype == TASK_VERTEX:
                prm = plan.params[sub]
                P0a, W1a, W2a = prm[:, 0:2], prm[:, 2:4], prm[:, 4:6]
                P0b, W1b, W2b = prm[:, 6:8], prm[:, 8:10], prm[:, 10:12]
                a1, a2, b1, b2 = pts[:, 0], pts[:, 1], pts[:, 2], pts[:, 3]
                ua = P0a[:, None, 0] + a1[None, :] * W1a[:, None, 0] + a2[None, :] * W2a[:, None, 0]
                va = P0a[:, None, 1] + a1[None, :] * W1a[:, None, 1] + a2[None, :] * W2a[:, None, 1]
                ub = P0b[:, None, 0] + b1[None, :] * W1b[:, None, 0] + b2[None, :] * W2b[:, None, 0]
                vb = P0b[:, None, 1] + b1[None, :] * W1b[:, None, 1] + b2[None, :] * W2b[:, None, 1]
                ja = np.abs(W1a[:, 0] * W2a[:, 1] - W1a[:, 1] * W2a[:, 0])
                jb = np.abs(W1b[:, 0] * W2b[:, 1] - W1b[:, 1] * W2b[:, 0])
                wts = w[None, :] * (ja * jb)[:, None]
            else:
                prm = plan.params[sub]
                Pa, Pb = len(w1), len(w2)
                ua = np.empty((T, P))
                va = np.empty((T, P))
                ub = np.empty((T, P))
                vb = np.empty((T, P))
                wts = np.empty((T, P))
                for k in range(T):
                    au, av, ajac = _rect_map(prm[k, 0:4], u1, v1)
                    bu, bv, bjac = _rect_map(prm[k, 4:8], u2, v2)
                    ua[k] = np.repeat(au, Pb)
                    va[k] = np.repeat(av, Pb)
                    ub[k] = np.tile(bu, Pa)
                    vb[k] = np.tile(bv, Pa)
                    wts[k] = np.repeat(w1, Pb) * np.tile(w2, Pa) * (ajac * bjac)
            xa, da = _eval_side(arrays, rows_a, key[4], ua, va, field)
            xb, db = _eval_side(arrays, rows_b, key[5], ub, vb, field)
            contrib = _contract(kernel, wts, xa, xb, da, db)
            if not np.all(np.isfinite(contrib)):
                bad = int(np.flatnonzero(
                    ~np.isfinite(contrib.reshape(T, -1)).all(axis=1))[0])
                pr = plan.pair_rows[plan.slot[sub[bad]]]
                raise QuadratureError(
                    int(arrays.elem_ids[pr[0]]), int(arrays.elem_ids[pr[1]]))
            np.add.at(blocks, plan.slot[sub], contrib)
    return blocks
