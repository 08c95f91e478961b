# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled pair-integration core (OpenMP).

Mirrors the numpy backend task-for-task: same Gauss tables, same transforms,
same contraction.  Work is distributed over pair slots with dynamic
scheduling; every slot's tasks run on a single thread and scatter happens in
Python afterwards, so results are identical for any thread count.
"""

import numpy as np

cimport numpy as cnp
from cython.parallel import prange
from libc.math cimport sqrt, cos, sin, fabs, M_PI
from libc.stdlib cimport malloc, free

cnp.import_array()

DEF NSH_MAX = 9
DEF DMAX = 27

cdef int KIND_QUAD8 = 0
cdef int KIND_TRI6 = 1
cdef int KIND_TIP9 = 2

cdef int FIELD_GEOM = 0
cdef int FIELD_DISP = 1
cdef int FIELD_PRESSURE = 2
cdef int FIELD_FLUX = 3

cdef double QM = 0.7071067811865476  # sqrt(1/2)

cdef int TT_SELF = 0
cdef int TT_EDGE = 1
cdef int TT_VERTEX = 2
cdef int TT_SEP = 3


# ----------------------------------------------------------------------
# basis functions
# ----------------------------------------------------------------------
cdef inline void lag1d(double t, double* v, double* d) noexcept nogil:
    v[0] = 0.5 * t * (t - 1.0)
    v[1] = 1.0 - t * t
    v[2] = 0.5 * t * (t + 1.0)
    d[0] = t - 0.5
    d[1] = -2.0 * t
    d[2] = t + 0.5


# tensor (a, b) -> local node id for the 9-node layout, a, b in {0,1,2}
cdef int* L9_ID = [0, 7, 3,
                   4, 8, 6,
                   1, 5, 2]  # index (a*3 + b)


cdef void quad8_basis(double u, double v, double* N, double* Nu, double* Nv) noexcept nogil:
    cdef double a, b
    cdef int i
    cdef double ca[4]
    cdef double cb[4]
    ca[0] = -1; cb[0] = -1
    ca[1] = 1; cb[1] = -1
    ca[2] = 1; cb[2] = 1
    ca[3] = -1; cb[3] = 1
    for i in range(4):
        a = ca[i]; b = cb[i]
        N[i] = 0.25 * (1 + a * u) * (1 + b * v) * (a * u + b * v - 1)
        Nu[i] = 0.25 * a * (1 + b * v) * (2 * a * u + b * v)
        Nv[i] = 0.25 * b * (1 + a * u) * (a * u + 2 * b * v)
    # mids: (0,-1), (1,0), (0,1), (-1,0)
    N[4] = 0.5 * (1 - u * u) * (1 - v)
    Nu[4] = -u * (1 - v)
    Nv[4] = -0.5 * (1 - u * u)
    N[5] = 0.5 * (1 + u) * (1 - v * v)
    Nu[5] = 0.5 * (1 - v * v)
    Nv[5] = -v * (1 + u)
    N[6] = 0.5 * (1 - u * u) * (1 + v)
    Nu[6] = -u * (1 + v)
    Nv[6] = 0.5 * (1 - u * u)
    N[7] = 0.5 * (1 - u) * (1 - v * v)
    Nu[7] = -0.5 * (1 - v * v)
    Nv[7] = -v * (1 - u)


cdef void lagrange9_basis(double u, double v, double* N, double* Nu, double* Nv) noexcept nogil:
    cdef double lu[3]
    cdef double du[3]
    cdef double lv[3]
    cdef double dv[3]
    cdef int a, b, k
    lag1d(u, lu, du)
    lag1d(v, lv, dv)
    for a in range(3):
        for b in range(3):
            k = L9_ID[a * 3 + b]
            N[k] = lu[a] * lv[b]
            Nu[k] = du[a] * lv[b]
            Nv[k] = lu[a] * dv[b]


cdef void tri6_basis(double u, double v, int rot, double* N, double* Nu, double* Nv) noexcept nogil:
    cdef double lh[3]
    cdef double lhu[3]
    cdef double lhv[3]
    cdef double lam[3]
    cdef double lu[3]
    cdef double lv[3]
    cdef int i, j, c, m
    lh[0] = 0.25 * (1 - u) * (1 - v)
    lh[1] = 0.25 * (1 + u) * (1 - v)
    lh[2] = 0.5 * (1 + v)
    lhu[0] = -0.25 * (1 - v)
    lhu[1] = 0.25 * (1 - v)
    lhu[2] = 0.0
    lhv[0] = -0.25 * (1 - u)
    lhv[1] = -0.25 * (1 + u)
    lhv[2] = 0.5
    for i in range(3):
        j = (i + rot) % 3
        lam[j] = lh[i]
        lu[j] = lhu[i]
        lv[j] = lhv[i]
    for c in range(3):
        N[c] = lam[c] * (2 * lam[c] - 1)
        Nu[c] = (4 * lam[c] - 1) * lu[c]
        Nv[c] = (4 * lam[c] - 1) * lv[c]
    # mids between corners (0,1), (1,2), (2,0)
    cdef int pairs[6]
    pairs[0] = 0; pairs[1] = 1
    pairs[2] = 1; pairs[3] = 2
    pairs[4] = 2; pairs[5] = 0
    for m in range(3):
        i = pairs[2 * m]
        j = pairs[2 * m + 1]
        N[3 + m] = 4 * lam[i] * lam[j]
        Nu[3 + m] = 4 * (lu[i] * lam[j] + lam[i] * lu[j])
        Nv[3 + m] = 4 * (lv[i] * lam[j] + lam[i] * lv[j])


cdef void tip9_geom_basis(double u, double v, double* N, double* Nu, double* Nv) noexcept nogil:
    cdef double q = 0.5 * (1.0 - v)
    cdef double eta = 1.0 - 2.0 * q * q
    cdef int k
    lagrange9_basis(u, eta, N, Nu, Nv)
    # d eta / d v = 2 q
    for k in range(9):
        Nv[k] = Nv[k] * (2.0 * q)


cdef void tip9_row_disp(double q, double* m, double* dm) noexcept nogil:
    # rows ordered back (eta=-1), mid (eta=0), front (eta=+1)
    m[0] = q * (q - QM) / (1.0 - QM)
    m[1] = q * (q - 1.0) / (QM * (QM - 1.0))
    m[2] = (q - 1.0) * (q - QM) / QM
    dm[0] = (2 * q - QM) / (1.0 - QM)
    dm[1] = (2 * q - 1.0) / (QM * (QM - 1.0))
    dm[2] = (2 * q - 1.0 - QM) / QM


cdef void tip9_row_flux(double q, double* m, double* dm) noexcept nogil:
    m[0] = (q - QM) / (1.0 - QM)
    m[1] = (1.0 - q) / (1.0 - QM)
    m[2] = 1.0 / q - (1.0 + 1.0 / QM) + q / QM
    dm[0] = 1.0 / (1.0 - QM)
    dm[1] = -1.0 / (1.0 - QM)
    dm[2] = -1.0 / (q * q) + 1.0 / QM


cdef void tip9_field_basis(double u, double v, int field, double* N, double* Nu, double* Nv) noexcept nogil:
    cdef double q = 0.5 * (1.0 - v)
    cdef double lu[3]
    cdef double du[3]
    cdef double rows[3]
    cdef double drows[3]
    cdef int a, b, k
    lag1d(u, lu, du)
    if field == FIELD_DISP:
        tip9_row_disp(q, rows, drows)
    else:
        tip9_row_flux(q, rows, drows)
    for a in range(3):
        for b in range(3):
            k = L9_ID[a * 3 + b]
            N[k] = lu[a] * rows[b]
            Nu[k] = du[a] * rows[b]
            Nv[k] = lu[a] * drows[b] * (-0.5)


cdef void basis_eval(int kind, int field, double u, double v, int rot,
                     double* N, double* Nu, double* Nv) noexcept nogil:
    if kind == KIND_QUAD8:
        quad8_basis(u, v, N, Nu, Nv)
    elif kind == KIND_TRI6:
        tri6_basis(u, v, rot, N, Nu, Nv)
    else:
        if field == FIELD_GEOM or field == FIELD_PRESSURE:
            tip9_geom_basis(u, v, N, Nu, Nv)
        else:
            tip9_field_basis(u, v, field, N, Nu, Nv)


cdef inline int nshape_of(int kind) noexcept nogil:
    if kind == KIND_QUAD8:
        return 8
    if kind == KIND_TRI6:
        return 6
    return 9


cdef void side_eval(int kind, int field, int rot, const double* coords,
                    double u, double v, double* x, double* dens) noexcept nogil:
    """x[3]; dens: D[a*3+c] for disp, N_a * J for scalar fields."""
    cdef double N[NSH_MAX]
    cdef double Nu[NSH_MAX]
    cdef double Nv[NSH_MAX]
    cdef double xu[3]
    cdef double xv[3]
    cdef double cr[3]
    cdef double J
    cdef int nsh = nshape_of(kind)
    cdef int a, c
    basis_eval(kind, FIELD_GEOM, u, v, rot, N, Nu, Nv)
    for c in range(3):
        x[c] = 0.0
        xu[c] = 0.0
        xv[c] = 0.0
    for a in range(nsh):
        for c in range(3):
            x[c] = x[c] + N[a] * coords[3 * a + c]
            xu[c] = xu[c] + Nu[a] * coords[3 * a + c]
            xv[c] = xv[c] + Nv[a] * coords[3 * a + c]
    if field == FIELD_DISP:
        basis_eval(kind, FIELD_DISP, u, v, rot, N, Nu, Nv)
        for a in range(NSH_MAX):
            for c in range(3):
                dens[3 * a + c] = 0.0
        for a in range(nsh):
            for c in range(3):
                dens[3 * a + c] = Nu[a] * xv[c] - Nv[a] * xu[c]
    else:
        basis_eval(kind, field, u, v, rot, N, Nu, Nv)
        cr[0] = xu[1] * xv[2] - xu[2] * xv[1]
        cr[1] = xu[2] * xv[0] - xu[0] * xv[2]
        cr[2] = xu[0] * xv[1] - xu[1] * xv[0]
        J = sqrt(cr[0] * cr[0] + cr[1] * cr[1] + cr[2] * cr[2])
        for a in range(NSH_MAX):
            dens[a] = 0.0
        for a in range(nsh):
            dens[a] = N[a] * J


# ----------------------------------------------------------------------
# kernel contraction
# ----------------------------------------------------------------------
cdef void accum_elastic(double w, const double* xa, const double* xb,
                        const double* Da, const double* Db,
                        double mu, double nu, double sign,
                        double* block) noexcept nogil:
    cdef double R[3]
    cdef double Rh[3]
    cdef double r2 = 0.0, r, pref, g, va_k, va_j
    cdef int a, b, k, j, c
    for c in range(3):
        R[c] = xb[c] - xa[c]
        r2 += R[c] * R[c]
    r = sqrt(r2)
    pref = w * sign * mu / (4.0 * M_PI * (1.0 - nu) * r)
    for c in range(3):
        Rh[c] = R[c] / r
    cdef double c1 = (1.0 - nu) * pref
    cdef double c2 = 2.0 * nu * pref
    for a in range(NSH_MAX):
        for b in range(NSH_MAX):
            g = (Da[3 * a] * Db[3 * b] + Da[3 * a + 1] * Db[3 * b + 1]
                 + Da[3 * a + 2] * Db[3 * b + 2])
            for k in range(3):
                va_k = Da[3 * a + k]
                for j in range(3):
                    block[(3 * a + k) * DMAX + 3 * b + j] += (
                        c1 * va_k * Db[3 * b + j]
                        + c2 * Da[3 * a + j] * Db[3 * b + k]
                        - pref * g * ((1.0 if k == j else 0.0) + Rh[k] * Rh[j]))


cdef void accum_darcy(double w, const double* xa, const double* xb,
                      const double* Sa, const double* Sb,
                      double coef, double* block) noexcept nogil:
    cdef double r2 = 0.0, c
    cdef int a, b
    for a in range(3):
        c = xb[a] - xa[a]
        r2 += c * c
    c = w * coef / sqrt(r2)
    for a in range(NSH_MAX):
        for b in range(NSH_MAX):
            block[a * DMAX + b] += c * Sa[a] * Sb[b]


cdef inline void accum_point(int kern, double w, const double* xa, const double* xb,
                             const double* da, const double* db,
                             double p1, double p2, double p3,
                             double* block) noexcept nogil:
    if kern == 0:
        accum_elastic(w, xa, xb, da, db, p1, p2, p3, block)
    else:
        accum_darcy(w, xa, xb, da, db, p1, block)


# ----------------------------------------------------------------------
# task executors
# ----------------------------------------------------------------------
cdef void run_self(int kind, int field, const double* coords,
                   const double* prm, const int* orders,
                   const double* gx, const double* gw, int gmax,
                   int kern, double p1, double p2, double p3,
                   double* block) noexcept nogil:
    cdef int ntheta = orders[0], nrho = orders[1], nin = orders[2]
    cdef double u0 = prm[0], u1 = prm[1], v0 = prm[2], v1 = prm[3]
    cdef double su = 0.5 * (u1 - u0), sv = 0.5 * (v1 - v0)
    cdef double umid = 0.5 * (u0 + u1), vmid = 0.5 * (v0 + v1)
    cdef double jac2 = (su * sv) * (su * sv)
    cdef int c, it, ir, i1, i2
    cdef double theta, wth, ac, as_, rmax, rho, wrho, mu1, mu2, base
    cdef double lo1, hi1, lo2, hi2, z1, z2, w
    cdef double xa[3]
    cdef double xb[3]
    cdef double da[DMAX]
    cdef double db[DMAX]
    for c in range(8):
        for it in range(ntheta):
            theta = (c + 0.5) * M_PI / 4.0 + (M_PI / 8.0) * gx[ntheta * gmax + it]
            wth = (M_PI / 8.0) * gw[ntheta * gmax + it]
            ac = fabs(cos(theta))
            as_ = fabs(sin(theta))
            rmax = 2.0 / (ac if ac > as_ else as_)
            for ir in range(nrho):
                rho = 0.5 * rmax * (gx[nrho * gmax + ir] + 1.0)
                wrho = 0.5 * rmax * gw[nrho * gmax + ir]
                mu1 = rho * cos(theta)
                mu2 = rho * sin(theta)
                base = wth * wrho * rho
                lo1 = -1.0 if -1.0 > -1.0 - mu1 else -1.0 - mu1
                hi1 = 1.0 if 1.0 < 1.0 - mu1 else 1.0 - mu1
                lo2 = -1.0 if -1.0 > -1.0 - mu2 else -1.0 - mu2
                hi2 = 1.0 if 1.0 < 1.0 - mu2 else 1.0 - mu2
                if hi1 <= lo1 or hi2 <= lo2:
                    continue
                for i1 in range(nin):
                    z1 = 0.5 * ((hi1 + lo1) + (hi1 - lo1) * gx[nin * gmax + i1])
                    for i2 in range(nin):
                        z2 = 0.5 * ((hi2 + lo2) + (hi2 - lo2) * gx[nin * gmax + i2])
                        w = (base * gw[nin * gmax + i1] * gw[nin * gmax + i2]
                             * 0.25 * (hi1 - lo1) * (hi2 - lo2) * jac2)
                        side_eval(kind, field, 0, coords,
                                  umid + su * z1, vmid + sv * z2, xa, da)
                        side_eval(kind, field, 0, coords,
                                  umid + su * (z1 + mu1), vmid + sv * (z2 + mu2),
                                  xb, db)
                        accum_point(kern, w, xa, xb, da, db, p1, p2, p3, block)


cdef void run_edge(int kind_a, int kind_b, int field, int rot_a, int rot_b,
                   const double* ca, const double* cb,
                   const double* prm, const int* orders,
                   const double* gx, const double* gw, int gmax,
                   int kern, double p1, double p2, double p3,
                   double* block) noexcept nogil:
    cdef int nt = orders[0], nc = orders[1], ns = orders[2]
    cdef double P0a0 = prm[0], P0a1 = prm[1], Sa0 = prm[2], Sa1 = prm[3]
    cdef double Wa0 = prm[4], Wa1 = prm[5]
    cdef double P0b0 = prm[6], P0b1 = prm[7], Sb0 = prm[8], Sb1 = prm[9]
    cdef double Wb0 = prm[10], Wb1 = prm[11]
    cdef double ja = fabs(Sa0 * Wa1 - Sa1 * Wa0)
    cdef double jb = fabs(Sb0 * Wb1 - Sb1 * Wb0)
    cdef int cone, i, j, k, isv
    cdef double t, wt, b1, w1, b2, w2, d, wa, wb, delta, w_a, w_b
    cdef double lo, hi, s, wss, w, sb
    cdef double xa[3]
    cdef double xb[3]
    cdef double da[DMAX]
    cdef double db[DMAX]
    for cone in range(6):
        for i in range(nt):
            t = 0.5 * (gx[nt * gmax + i] + 1.0)
            wt = 0.5 * gw[nt * gmax + i]
            for j in range(nc):
                b1 = 0.5 * (gx[nc * gmax + j] + 1.0)
                w1 = 0.5 * gw[nc * gmax + j]
                for k in range(nc):
                    b2 = 0.5 * (gx[nc * gmax + k] + 1.0)
                    w2 = 0.5 * gw[nc * gmax + k]
                    if cone == 0:
                        d = t * b1; wa = t; wb = t * b2
                    elif cone == 1:
                        d = -t * b1; wa = t; wb = t * b2
                    elif cone == 2:
                        d = t * b1; wa = t * b2; wb = t
                    elif cone == 3:
                        d = -t * b1; wa = t * b2; wb = t
                    elif cone == 4:
                        d = t; wa = t * b1; wb = t * b2
                    else:
                        d = -t; wa = t * b1; wb = t * b2
                    delta = 2.0 * d
                    w_a = 2.0 * wa
                    w_b = 2.0 * wb
                    lo = -1.0 if -1.0 > -1.0 - delta else -1.0 - delta
                    hi = 1.0 if 1.0 < 1.0 - delta else 1.0 - delta
                    if hi <= lo:
                        continue
                    for isv in range(ns):
                        s = 0.5 * ((hi + lo) + (hi - lo) * gx[ns * gmax + isv])
                        wss = 0.5 * (hi - lo) * gw[ns * gmax + isv]
                        w = wt * w1 * w2 * 8.0 * t * t * wss * ja * jb
                        sb = s + delta
                        side_eval(kind_a, field, rot_a, ca,
                                  P0a0 + s * Sa0 + w_a * Wa0,
                                  P0a1 + s * Sa1 + w_a * Wa1, xa, da)
                        side_eval(kind_b, field, rot_b, cb,
                                  P0b0 + sb * Sb0 + w_b * Wb0,
                                  P0b1 + sb * Sb1 + w_b * Wb1, xb, db)
                        accum_point(kern, w, xa, xb, da, db, p1, p2, p3, block)


cdef void run_vertex(int kind_a, int kind_b, int field, int rot_a, int rot_b,
                     const double* ca, const double* cb,
                     const double* prm, const int* orders,
                     const double* gx, const double* gw, int gmax,
                     int kern, double p1, double p2, double p3,
                     double* block) noexcept nogil:
    cdef int nt = orders[0], nc = orders[1]
    cdef double ja = fabs(prm[2] * prm[5] - prm[3] * prm[4])
    cdef double jb = fabs(prm[8] * prm[11] - prm[9] * prm[10])
    cdef int cone, i, j1, j2, j3, m
    cdef double t, wt, b[3]
    cdef double wb3, co[4]
    cdef double w, a1, a2, bb1, bb2
    cdef double xa[3]
    cdef double xb[3]
    cdef double da[DMAX]
    cdef double db[DMAX]
    for cone in range(4):
        for i in range(nt):
            t = gx[nt * gmax + i] + 1.0
            wt = gw[nt * gmax + i]
            for j1 in range(nc):
                b[0] = 0.5 * (gx[nc * gmax + j1] + 1.0)
                for j2 in range(nc):
                    b[1] = 0.5 * (gx[nc * gmax + j2] + 1.0)
                    for j3 in range(nc):
                        b[2] = 0.5 * (gx[nc * gmax + j3] + 1.0)
                        wb3 = (0.125 * gw[nc * gmax + j1] * gw[nc * gmax + j2]
                               * gw[nc * gmax + j3])
                        m = 0
                        for j in range(4):
                            if j == cone:
                                co[j] = t
                            else:
                                co[j] = t * b[m]
                                m += 1
                        w = wt * wb3 * t * t * t * ja * jb
                        a1 = co[0]; a2 = co[1]; bb1 = co[2]; bb2 = co[3]
                        side_eval(kind_a, field, rot_a, ca,
                                  prm[0] + a1 * prm[2] + a2 * prm[4],
                                  prm[1] + a1 * prm[3] + a2 * prm[5], xa, da)
                        side_eval(kind_b, field, rot_b, cb,
                                  prm[6] + bb1 * prm[8] + bb2 * prm[10],
                                  prm[7] + bb1 * prm[9] + bb2 * prm[11], xb, db)
                        accum_point(kern, w, xa, xb, da, db, p1, p2, p3, block)


cdef void run_sep(int kind_a, int kind_b, int field, int rot_a, int rot_b,
                  const double* ca, const double* cb,
                  const double* prm, const int* orders,
                  const double* gx, const double* gw, int gmax,
                  int kern, double p1, double p2, double p3,
                  double* block, double* scratch) noexcept nogil:
    cdef int na = orders[0], nb = orders[1]
    cdef double u0a = prm[0], u1a = prm[1], v0a = prm[2], v1a = prm[3]
    cdef double u0b = prm[4], u1b = prm[5], v0b = prm[6], v1b = prm[7]
    cdef double sua = 0.5 * (u1a - u0a), sva = 0.5 * (v1a - v0a)
    cdef double sub = 0.5 * (u1b - u0b), svb = 0.5 * (v1b - v0b)
    cdef double jab = (sua * sva) * (sub * svb)
    cdef int i, j, pa, pb, npa = na * na, npb = nb * nb
    cdef double u, v, w
    # scratch layout: for each a-point: x[3], dens[DMAX], weight -> 31 doubles
    cdef double* pt
    cdef double xb[3]
    cdef double db[DMAX]
    pa = 0
    for i in range(na):
        for j in range(na):
            pt = scratch + pa * 31
            u = 0.5 * (u0a + u1a) + sua * gx[na * gmax + i]
            v = 0.5 * (v0a + v1a) + sva * gx[na * gmax + j]
            side_eval(kind_a, field, rot_a, ca, u, v, pt, pt + 3)
            pt[30] = gw[na * gmax + i] * gw[na * gmax + j]
            pa += 1
    for i in range(nb):
        for j in range(nb):
            u = 0.5 * (u0b + u1b) + sub * gx[nb * gmax + i]
            v = 0.5 * (v0b + v1b) + svb * gx[nb * gmax + j]
            side_eval(kind_b, field, rot_b, cb, u, v, xb, db)
            w = gw[nb * gmax + i] * gw[nb * gmax + j] * jab
            for pa in range(npa):
                pt = scratch + pa * 31
                accum_point(kern, pt[30] * w, pt, xb, pt + 3, db, p1, p2, p3, block)


# ----------------------------------------------------------------------
# driver
# ----------------------------------------------------------------------
def execute_plan(plan, arrays, field, kernel, nthreads=1):
    cdef int fld
    if field == "disp":
        fld = FIELD_DISP
    elif field == "flux":
        fld = FIELD_FLUX
    elif field == "pressure":
        fld = FIELD_PRESSURE
    else:
        raise ValueError(field)
    cdef int kern
    cdef double p1 = 0.0, p2 = 0.0, p3 = 0.0
    if kernel[0] == "elastic":
        kern = 0
        p1, p2, p3 = kernel[1], kernel[2], kernel[3]
    elif kernel[0] == "darcy":
        kern = 1
        p1 = kernel[1]
    else:
        raise ValueError(kernel[0])

    cdef cnp.ndarray[cnp.int8_t, ndim=1] kinds = np.ascontiguousarray(arrays.kinds, dtype=np.int8)
    cdef cnp.ndarray[cnp.float64_t, ndim=3] coords = np.ascontiguousarray(arrays.coords)

    cdef cnp.ndarray[cnp.int8_t, ndim=1] ttype = np.ascontiguousarray(plan.ttype, dtype=np.int8)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] row_a = np.ascontiguousarray(plan.row_a)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] row_b = np.ascontiguousarray(plan.row_b)
    cdef cnp.ndarray[cnp.int8_t, ndim=1] rot_a = np.ascontiguousarray(plan.rot_a, dtype=np.int8)
    cdef cnp.ndarray[cnp.int8_t, ndim=1] rot_b = np.ascontiguousarray(plan.rot_b, dtype=np.int8)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] params = np.ascontiguousarray(plan.params)
    cdef cnp.ndarray[cnp.int32_t, ndim=2] orders = np.ascontiguousarray(plan.orders, dtype=np.int32)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] slot = np.ascontiguousarray(plan.slot)

    cdef int nslots = plan.n_slots
    cdef int ntasks = len(plan.ttype)
    cdef cnp.ndarray[cnp.float64_t, ndim=3] blocks = np.zeros((nslots, DMAX, DMAX))

    # group tasks by slot (stable) for per-slot execution
    order_idx = np.argsort(plan.slot, kind="stable").astype(np.int64)
    counts = np.bincount(plan.slot, minlength=nslots) if ntasks else np.zeros(nslots, dtype=np.int64)
    ptr = np.zeros(nslots + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    cdef cnp.ndarray[cnp.int64_t, ndim=1] task_order = order_idx
    cdef cnp.ndarray[cnp.int64_t, ndim=1] slot_ptr = ptr

    # Gauss tables: row n holds the n-point rule in the first n slots
    cdef int gmax = int(np.max(orders)) if ntasks else 1
    gx_np = np.zeros((gmax + 1) * gmax)
    gw_np = np.zeros((gmax + 1) * gmax)
    for n in range(1, gmax + 1):
        x, w = np.polynomial.legendre.leggauss(n)
        gx_np[n * gmax: n * gmax + n] = x
        gw_np[n * gmax: n * gmax + n] = w
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gx = gx_np
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gw = gw_np

    cdef int nth = max(1, int(nthreads))
    cdef Py_ssize_t s, ti, tt
    cdef int ra, rb, ka, kb
    cdef double* scratch
    cdef int scratch_len = 31 * gmax * gmax

    with nogil:
        for s in prange(nslots, num_threads=nth, schedule="dynamic"):
            scratch = <double*> malloc(scratch_len * sizeof(double))
            for ti in range(slot_ptr[s], slot_ptr[s + 1]):
                tt = task_order[ti]
                ra = <int> row_a[tt]
                rb = <int> row_b[tt]
                ka = kinds[ra]
                kb = kinds[rb]
                if ttype[tt] == 0:
                    run_self(ka, fld, &coords[ra, 0, 0], &params[tt, 0],
                             <int*> &orders[tt, 0], &gx[0], &gw[0], gmax,
                             kern, p1, p2, p3, &blocks[s, 0, 0])
                elif ttype[tt] == 1:
                    run_edge(ka, kb, fld, rot_a[tt], rot_b[tt],
                             &coords[ra, 0, 0], &coords[rb, 0, 0],
                             &params[tt, 0], <int*> &orders[tt, 0],
                             &gx[0], &gw[0], gmax,
                             kern, p1, p2, p3, &blocks[s, 0, 0])
                elif ttype[tt] == 2:
                    run_vertex(ka, kb, fld, rot_a[tt], rot_b[tt],
                               &coords[ra, 0, 0], &coords[rb, 0, 0],
                               &params[tt, 0], <int*> &orders[tt, 0],
                               &gx[0], &gw[0], gmax,
                               kern, p1, p2, p3, &blocks[s, 0, 0])
                else:
                    run_sep(ka, kb, fld, rot_a[tt], rot_b[tt],
                            &coords[ra, 0, 0], &coords[rb, 0, 0],
                            &params[tt, 0], <int*> &orders[tt, 0],
                            &gx[0], &gw[0], gmax,
                            kern, p1, p2, p3, &blocks[s, 0, 0], scratch)
            free(scratch)

    if not np.all(np.isfinite(blocks)):
        from ..errors import QuadratureError
        bad = int(np.flatnonzero(~np.isfinite(
            blocks.reshape(nslots, -1)).all(axis=1))[0])
        pr = plan.pair_rows[bad]
        raise QuadratureError(int(arrays.elem_ids[pr[0]]),
                              int(arrays.elem_ids[pr[1]]))
    return blocks
