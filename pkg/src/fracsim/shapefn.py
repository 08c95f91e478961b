"""Shape functions and chart evaluation for quadratic surface elements.

Every element is evaluated on a square reference chart (u, v) in [-1, 1]^2:

* ``quad8``  -- serendipity quadrilateral, chart = natural coordinates.
* ``tri6``   -- quadratic triangle on a collapsed-square chart.  The chart
  corner layout can be rotated (``rot``) so that any element corner sits at
  chart corner 0; the v=+1 chart edge collapses onto element corner
  ``(2 + rot) % 3``.
* ``tip9``   -- 9-node Lagrange quadrilateral used along the fracture front.
  The front edge is the v=+1 chart edge by convention (local edge 2).  The
  geometry is standard biquadratic; the chart coordinate v is reparametrized
  through q = (1 - v)/2 with eta = 1 - 2 q^2 so that q is proportional to
  sqrt(distance-from-front).  Field bases on tip elements are built in q:
  displacement jumps interpolate {1, q, q^2} (square-root behaviour in
  physical distance) and production fluxes interpolate {1/q, 1, q}
  (inverse-square-root flux intensity at the front).

Chart derivatives returned by :func:`basis` are with respect to (u, v) and
include all chain-rule factors, so downstream code never needs to know about
the q reparametrization.
"""

import numpy as np

QUAD8 = "quad8"
TRI6 = "tri6"
TIP9 = "tip9"

NSHAPE = {QUAD8: 8, TRI6: 6, TIP9: 9}
NCORNER = {QUAD8: 4, TRI6: 3, TIP9: 4}

# Local edges as (corner, corner, mid) local indices, traversed so that the
# element boundary is walked counter-clockwise with respect to the normal.
LOCAL_EDGES = {
    QUAD8: ((0, 1, 4), (1, 2, 5), (2, 3, 6), (3, 0, 7)),
    TIP9: ((0, 1, 4), (1, 2, 5), (2, 3, 6), (3, 0, 7)),
    TRI6: ((0, 1, 3), (1, 2, 4), (2, 0, 5)),
}

# Chart edge index holding the fracture front for tip elements.
TIP_FRONT_EDGE = 2

_QM = np.sqrt(0.5)  # q at the tip mid-row

# Tensor index (a, b) with a, b in {-1, 0, 1} -> local node id for 9-node layout.
_L9_ID = {(-1, -1): 0, (1, -1): 1, (1, 1): 2, (-1, 1): 3,
          (0, -1): 4, (1, 0): 5, (0, 1): 6, (-1, 0): 7, (0, 0): 8}


def _lag1d(t):
    """1D quadratic Lagrange values/derivatives at nodes {-1, 0, +1}."""
    t = np.asarray(t, dtype=float)
    vals = np.empty(t.shape + (3,))
    ders = np.empty(t.shape + (3,))
    vals[..., 0] = 0.5 * t * (t - 1.0)
    vals[..., 1] = 1.0 - t * t
    vals[..., 2] = 0.5 * t * (t + 1.0)
    ders[..., 0] = t - 0.5
    ders[..., 1] = -2.0 * t
    ders[..., 2] = t + 0.5
    return vals, ders


def _quad8(u, v):
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    shp = u.shape + (8,)
    N = np.empty(shp)
    Nu = np.empty(shp)
    Nv = np.empty(shp)
    corners = ((-1, -1), (1, -1), (1, 1), (-1, 1))
    for i, (a, b) in enumerate(corners):
        N[..., i] = 0.25 * (1 + a * u) * (1 + b * v) * (a * u + b * v - 1)
        Nu[..., i] = 0.25 * a * (1 + b * v) * (2 * a * u + b * v)
        Nv[..., i] = 0.25 * b * (1 + a * u) * (a * u + 2 * b * v)
    mids = ((0, -1), (1, 0), (0, 1), (-1, 0))
    for i, (a, b) in enumerate(mids):
        k = 4 + i
        if a == 0:
            N[..., k] = 0.5 * (1 - u * u) * (1 + b * v)
            Nu[..., k] = -u * (1 + b * v)
            Nv[..., k] = 0.5 * b * (1 - u * u)
        else:
            N[..., k] = 0.5 * (1 + a * u) * (1 - v * v)
            Nu[..., k] = 0.5 * a * (1 - v * v)
            Nv[..., k] = -v * (1 + a * u)
    return N, Nu, Nv


def _lagrange9(u, v):
    lu, du = _lag1d(u)
    lv, dv = _lag1d(v)
    shp = np.asarray(u).shape + (9,)
    N = np.empty(shp)
    Nu = np.empty(shp)
    Nv = np.empty(shp)
    for (a, b), k in _L9_ID.items():
        ia, ib = a + 1, b + 1
        N[..., k] = lu[..., ia] * lv[..., ib]
        Nu[..., k] = du[..., ia] * lv[..., ib]
        Nv[..., k] = lu[..., ia] * dv[..., ib]
    return N, Nu, Nv


def _tri6(u, v, rot=0):
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    # Collapsed-square barycentric coordinates and chart derivatives.
    lam_hat = [0.25 * (1 - u) * (1 - v), 0.25 * (1 + u) * (1 - v), 0.5 * (1 + v)]
    dlam_du = [-0.25 * (1 - v), 0.25 * (1 - v), np.zeros_like(u)]
    dlam_dv = [-0.25 * (1 - u), -0.25 * (1 + u), np.full_like(u, 0.5)]
    lam = [None] * 3
    lu = [None] * 3
    lv = [None] * 3
    for i in range(3):
        j = (i + rot) % 3  # chart corner i carries element corner j
        lam[j] = lam_hat[i]
        lu[j] = dlam_du[i]
        lv[j] = dlam_dv[i]
    shp = u.shape + (6,)
    N = np.empty(shp)
    Nu = np.empty(shp)
    Nv = np.empty(shp)
    for c in range(3):
        N[..., c] = lam[c] * (2 * lam[c] - 1)
        Nu[..., c] = (4 * lam[c] - 1) * lu[c]
        Nv[..., c] = (4 * lam[c] - 1) * lv[c]
    for m, (i, j) in enumerate(((0, 1), (1, 2), (2, 0))):
        N[..., 3 + m] = 4 * lam[i] * lam[j]
        Nu[..., 3 + m] = 4 * (lu[i] * lam[j] + lam[i] * lu[j])
        Nv[..., 3 + m] = 4 * (lv[i] * lam[j] + lam[i] * lv[j])
    return N, Nu, Nv


def _tip_q(v):
    v = np.asarray(v, dtype=float)
    q = 0.5 * (1.0 - v)
    eta = 1.0 - 2.0 * q * q
    return q, eta


def _tip9_geom(u, v):
    q, eta = _tip_q(v)
    N, Nu, Ne = _lagrange9(u, eta)
    # d eta / d v = 2 q
    Nv = Ne * (2.0 * q)[..., None]
    return N, Nu, Nv


def _tip_row_disp(q):
    """Row basis in q for displacement-type fields: Lagrange on q = {1, qm, 0}.

    Index order matches the eta tensor index b in {-1, 0, +1}: back, mid, front.
    """
    qm = _QM
    m_back = q * (q - qm) / (1.0 - qm)
    m_mid = q * (q - 1.0) / (qm * (qm - 1.0))
    m_front = (q - 1.0) * (q - qm) / qm
    d_back = (2 * q - qm) / (1.0 - qm)
    d_mid = (2 * q - 1.0) / (qm * (qm - 1.0))
    d_front = (2 * q - 1.0 - qm) / qm
    return (m_back, m_mid, m_front), (d_back, d_mid, d_front)


def _tip_row_flux(q):
    """Row basis in q for flux fields: span {1/q, 1, q}.

    The front dof is the 1/q intensity coefficient; mid/back dofs are values.
    """
    qm = _QM
    m_front = 1.0 / q - (1.0 + 1.0 / qm) + q / qm
    m_mid = (1.0 - q) / (1.0 - qm)
    m_back = (q - qm) / (1.0 - qm)
    d_front = -1.0 / (q * q) + 1.0 / qm
    d_mid = -1.0 / (1.0 - qm) + np.zeros_like(q)
    d_back = 1.0 / (1.0 - qm) + np.zeros_like(q)
    return (m_back, m_mid, m_front), (d_back, d_mid, d_front)


def _tip9_field(u, v, row_fn):
    q, _ = _tip_q(v)
    lu, du = _lag1d(u)
    rows, drows = row_fn(q)
    shp = np.asarray(u).shape + (9,)
    N = np.empty(shp)
    Nu = np.empty(shp)
    Nv = np.empty(shp)
    for (a, b), k in _L9_ID.items():
        ia, ib = a + 1, b + 1
        N[..., k] = lu[..., ia] * rows[ib]
        Nu[..., k] = du[..., ia] * rows[ib]
        # d q / d v = -1/2
        Nv[..., k] = lu[..., ia] * drows[ib] * (-0.5)
    return N, Nu, Nv


def basis(kind, field, u, v, rot=0):
    """Shape function values and chart derivatives at points (u, v).

    Parameters
    ----------
    kind : one of "quad8", "tri6", "tip9"
    field : one of "geom", "disp", "pressure", "flux"
    u, v : arrays of chart coordinates in [-1, 1]
    rot : corner rotation for tri6 charts (ignored otherwise)

    Returns
    -------
    (N, Nu, Nv) each shaped points x nshape.
    """
    if kind == QUAD8:
        return _quad8(u, v)
    if kind == TRI6:
        return _tri6(u, v, rot)
    if kind == TIP9:
        if field in ("geom", "pressure"):
            return _tip9_geom(u, v)
        if field == "disp":
            return _tip9_field(u, v, _tip_row_disp)
        if field == "flux":
            return _tip9_field(u, v, _tip_row_flux)
        raise ValueError(f"unknown field {field!r}")
    raise ValueError(f"unknown element kind {kind!r}")


def chart_geometry(kind, coords, u, v, rot=0):
    """Position, chart tangents, normal and chart Jacobian at (u, v).

    coords is (nshape, 3).  Returns x, xu, xv with shape points x 3, the unit
    normal n and the chart area density J = ||xu x xv||.
    """
    N, Nu, Nv = basis(kind, "geom", u, v, rot)
    x = N @ coords
    xu = Nu @ coords
    xv = Nv @ coords
    cr = np.cross(xu, xv)
    J = np.linalg.norm(cr, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        n = cr / np.where(J > 0, J, 1.0)[..., None]
    return x, xu, xv, n, J


def curl_density(kind, field, coords, u, v, rot=0):
    """Surface-curl density vectors D_a = xv * dN_a/du - xu * dN_a/dv.

    These satisfy (n x grad N_a) dS = D_a du dv on the chart, i.e. the surface
    Jacobian is already absorbed.  Shape: points x nshape x 3.
    """
    _, xu, xv, _, _ = chart_geometry(kind, coords, u, v, rot)
    _, Nu, Nv = basis(kind, field, u, v, rot)
    return Nu[..., :, None] * xv[..., None, :] - Nv[..., :, None] * xu[..., None, :]


def surface_gradient(kind, field, coords, u, v, rot=0):
    """Tangential gradients of the shape functions plus surface measure.

    Returns (grad, J, x, n) with grad shaped points x nshape x 3; the surface
    integral of f is sum(w * f * J) over chart quadrature points.
    """
    x, xu, xv, n, J = chart_geometry(kind, coords, u, v, rot)
    _, Nu, Nv = basis(kind, field, u, v, rot)
    g11 = np.einsum("...i,...i->...", xu, xu)
    g12 = np.einsum("...i,...i->...", xu, xv)
    g22 = np.einsum("...i,...i->...", xv, xv)
    det = g11 * g22 - g12 * g12
    # Contravariant basis vectors
    gu = (g22[..., None] * xu - g12[..., None] * xv) / det[..., None]
    gv = (g11[..., None] * xv - g12[..., None] * xu) / det[..., None]
    grad = Nu[..., :, None] * gu[..., None, :] + Nv[..., :, None] * gv[..., None, :]
    return grad, J, x, n


def gauss1d(n):
    """Gauss-Legendre nodes/weights on [-1, 1]."""
    return np.polynomial.legendre.leggauss(n)


def gauss2d(n):
    """Tensor Gauss rule on the square, returned as flat (u, v, w) arrays."""
    x, w = gauss1d(n)
    u, v = np.meshgrid(x, x, indexing="ij")
    wu, wv = np.meshgrid(w, w, indexing="ij")
    return u.ravel(), v.ravel(), (wu * wv).ravel()
