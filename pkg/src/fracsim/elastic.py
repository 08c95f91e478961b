"""Weakly-singular Galerkin elasticity: kernel, pair integration, stiffness.

The traction weak form couples displacement-jump test/trial fields through a
rank-4 kernel of order 1/r contracted with surface-curl densities on both
elements.  Assembly produces a dense symmetric matrix over 3 dofs per node,
stored packed; front nodes carry zero jump as an essential condition (the
square-root opening lives in the tip shape functions, see shapefn).

Sign convention: evaluated verbatim, the isotropic kernel gives a bilinear
form that is negative definite on pure-opening fields (checked numerically in
the test suite).  The assembled stiffness uses the opposite sign so that
positive internal pressure produces positive opening; ``kernel_C`` itself
returns the verbatim kernel.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import kernels, quadrature, shapefn
from .mesh import NEWLY_STATIONARY, STATIONARY
from .packed import PackedSymmetricMatrix
from .errors import FracsimError, MeshInvariantError

logger = logging.getLogger(__name__)

FORM_SIGN = -1.0  # see module docstring


@dataclass
class Material:
    shear_modulus: float          # Pa
    poisson_ratio: float
    toughness: float = 0.0        # K_Ic, Pa sqrt(m)

    def __post_init__(self):
        if self.shear_modulus <= 0:
            raise ValueError("shear modulus must be positive")
        if not -1.0 < self.poisson_ratio < 0.5:
            raise ValueError("Poisson ratio outside (-1, 0.5)")
        if self.toughness < 0:
            raise ValueError("toughness must be non-negative")

    @property
    def youngs_modulus(self):
        return 2.0 * self.shear_modulus * (1.0 + self.poisson_ratio)

    @property
    def plane_strain_modulus(self):
        return self.youngs_modulus / (1.0 - self.poisson_ratio ** 2)

    @classmethod
    def from_youngs(cls, youngs_modulus, poisson_ratio, toughness=0.0):
        mu = youngs_modulus / (2.0 * (1.0 + poisson_ratio))
        return cls(mu, poisson_ratio, toughness)


@dataclass
class SifRecord:
    front_node: int
    K_I: float
    K_II: float
    K_III: float
    # local front frame: advance direction, surface normal, front tangent
    e1: np.ndarray = None
    e2: np.ndarray = None
    e3: np.ndarray = None


def kernel_C(d, mu, nu):
    """Isotropic weakly-singular kernel, rank-4 tensor C[t, k, m, j].

    d = y - x must be nonzero; the kernel grows like 1/|d|.  The last dyadic
    term is paired with delta_{mt}: the projection that makes the resulting
    bilinear form symmetric (the source formulation's index typo is resolved
    in favor of symmetry).
    """
    d = np.asarray(d, dtype=float)
    r = np.linalg.norm(d)
    if r <= 0.0 or not np.isfinite(r):
        raise ValueError("kernel evaluated at zero separation")
    rh = d / r
    pref = mu / (4.0 * np.pi * (1.0 - nu) * r)
    eye = np.eye(3)
    C = np.zeros((3, 3, 3, 3))
    C += (1.0 - nu) * np.einsum("tk,mj->tkmj", eye, eye)
    C += 2.0 * nu * np.einsum("mk,jt->tkmj", eye, eye)
    C -= np.einsum("jk,mt->tkmj", eye, eye)
    C -= np.einsum("j,k,mt->tkmj", rh, rh, eye)
    return pref * C


def _dof_count(arrays):
    return 3 * arrays.n_nodes


def element_dofs(arrays, row):
    """Global displacement dof indices of one element, length 3*nshape."""
    conn = arrays.conn[row]
    nsh = shapefn.NSHAPE[("quad8", "tri6", "tip9")[arrays.kinds[row]]]
    nd = conn[:nsh].astype(np.int64)
    return (3 * nd[:, None] + np.arange(3)[None, :]).ravel()


def front_dof_mask(mesh, arrays):
    """Mask of constrained dofs: all components of front nodes."""
    mask = np.zeros(3 * arrays.n_nodes, dtype=bool)
    for nid, pos in arrays.node_index.items():
        if mesh.nodes[nid].is_front:
            mask[3 * pos: 3 * pos + 3] = True
    return mask


def pair_integral(eid_a, eid_b, mesh, material, cfg=None, backend=None):
    """Galerkin pair block (dof_a x dof_b) for two elements.

    Raises QuadratureError (with the pair ids) on a non-finite integrand and
    ElementQualityError via mesh.element_quality on degenerate geometry.
    """
    mesh.element_quality(eid_a)
    mesh.element_quality(eid_b)
    arrays = mesh.compile()
    ra, rb = arrays.elem_index[eid_a], arrays.elem_index[eid_b]
    plan = quadrature.build_plan(arrays, [(ra, rb)], cfg)
    blocks = kernels.execute_plan(
        plan, arrays, "disp",
        ("elastic", material.shear_modulus, material.poisson_ratio, FORM_SIGN),
        backend=backend)
    na = 3 * shapefn.NSHAPE[mesh.elements[eid_a].kind]
    nb = 3 * shapefn.NSHAPE[mesh.elements[eid_b].kind]
    return blocks[0, :na, :nb]


def assemble_A(mesh, material, cache=None, cfg=None, nthreads=1, backend=None):
    """Assemble the dense symmetric stiffness block.

    Without a cache every pair is integrated (cold start).  With a cache the
    stationary-stationary part is copied and only pairs touching a flagged
    element are re-integrated; contributions of newly-stationary pairs are
    staged on the cache for the subsequent commit.  Returns (A, info) where
    info carries the integrated-pair count.
    """
    arrays = mesh.compile()
    ndof = _dof_count(arrays)
    flags = np.array([mesh.elements[eid].update_flag for eid in arrays.elem_ids])

    warm = False
    if cache is not None and cache.matrix is not None:
        stationary_now = {int(eid) for eid, fl in zip(arrays.elem_ids, flags)
                          if fl == STATIONARY}
        if cache.fingerprint == stationary_now:
            warm = True
        else:
            logger.info("stiffness cache fingerprint mismatch; cold rebuild")
            cache.invalidate()

    if warm:
        A = cache.remap_to(arrays, ndof)
        pairs = quadrature.flagged_pairs(flags)
    else:
        A = PackedSymmetricMatrix(ndof)
        pairs = quadrature.lower_pairs(arrays.n_elements)

    kern = ("elastic", material.shear_modulus, material.poisson_ratio, FORM_SIGN)
    n_int = 0
    if pairs:
        plan = quadrature.build_plan(arrays, pairs, cfg)
        blocks = kernels.execute_plan(plan, arrays, "disp", kern,
                                      nthreads=nthreads, backend=backend)
        n_int = len(pairs)
        stage = None
        if cache is not None:
            stage = cache.begin_stage(arrays, ndof, cold=not warm)
        for slot, (ra, rb) in enumerate(plan.pair_rows):
            da = element_dofs(arrays, ra)
            db = element_dofs(arrays, rb)
            block = blocks[slot, :len(da), :len(db)]
            A.add_block(da, db, block, both_orientations=(ra != rb))
            if stage is not None:
                fa, fb = flags[ra], flags[rb]
                in_stat = (fa in (STATIONARY, NEWLY_STATIONARY)
                           and fb in (STATIONARY, NEWLY_STATIONARY))
                if warm:
                    fold = in_stat and (fa == NEWLY_STATIONARY
                                        or fb == NEWLY_STATIONARY)
                else:
                    fold = in_stat
                if fold:
                    stage.add_block(da, db, block, both_orientations=(ra != rb))
    elif cache is not None:
        cache.begin_stage(arrays, ndof, cold=not warm)

    info = {"integrated_pairs": n_int, "warm": warm}
    return A, info


def pressure_load(mesh, pressure):
    """Right-hand side from uniform internal pressure: integral of psi_i n_k p."""
    from .channel import normal_moment_vector
    return pressure * normal_moment_vector(mesh)


def _front_coefficients(mesh, displacement_jump):
    """sqrt(s) jump coefficients and local frames at every front node.

    ``displacement_jump`` is an (n_nodes, 3) array aligned with
    sorted(mesh.nodes).  The jump ahead of the front interpolates C*sqrt(s);
    each tip element contributes one estimate per front node it owns.
    """
    node_ids = np.array(sorted(mesh.nodes))
    pos_of = {int(n): i for i, n in enumerate(node_ids)}
    estimates = {}
    for loop in mesh.front_loops:
        for eid in loop:
            e = mesh.elements[eid]
            coords = mesh.element_coords(eid)
            U = np.array([displacement_jump[pos_of[n]] for n in e.conn])
            for u0, local in ((-1.0, 3), (0.0, 6), (1.0, 2)):
                nid = e.conn[local]
                # dN/dq at the front via dN/dv (dq/dv = -1/2)
                _, _, Nv = shapefn.basis("tip9", "disp",
                                         np.array([u0]), np.array([1.0]))
                dUdq = -2.0 * (Nv[0] @ U)
                Ng, Ngu, Nge = shapefn._lagrange9(np.array([u0]), np.array([1.0]))
                x_t = (Ngu[0] @ coords)
                x_e = (Nge[0] @ coords)
                nt = np.linalg.norm(x_t)
                if nt < 1e-14:
                    raise FracsimError(
                        f"degenerate front tangent at node {nid}")
                t_hat = x_t / nt
                e1 = x_e - np.dot(x_e, t_hat) * t_hat
                n1 = np.linalg.norm(e1)
                if n1 < 1e-14:
                    raise FracsimError(
                        f"degenerate front frame at node {nid}")
                e1 /= n1
                n_hat = np.cross(x_t, x_e)
                n_hat /= np.linalg.norm(n_hat)
                # sqrt(s) = q * sqrt(2 |x_eta|)
                Cvec = dUdq / np.sqrt(2.0 * np.linalg.norm(x_e))
                estimates.setdefault(nid, []).append(
                    (float(np.dot(Cvec, e1)), float(np.dot(Cvec, n_hat)),
                     float(np.dot(Cvec, t_hat)), e1, n_hat, t_hat))
    return estimates


def extract_sif(mesh, displacement_jump, material):
    """One SifRecord per front node (corner estimates averaged across tips).

    K values follow the plane-strain crack-face relations: the opening and
    in-plane sliding coefficients scale with E'/8 * sqrt(2 pi), the anti-plane
    coefficient with mu/4 * sqrt(2 pi).
    """
    est = _front_coefficients(mesh, displacement_jump)
    Ep = material.plane_strain_modulus
    mu = material.shear_modulus
    out = []
    for nid in sorted(est):
        vals = est[nid]
        c1 = np.mean([v[0] for v in vals])
        c2 = np.mean([v[1] for v in vals])
        c3 = np.mean([v[2] for v in vals])
        e1 = _mean_unit([v[3] for v in vals])
        e2 = _mean_unit([v[4] for v in vals])
        e3 = vals[0][5]
        k1 = (Ep / 8.0) * np.sqrt(2.0 * np.pi) * c2
        k2 = (Ep / 8.0) * np.sqrt(2.0 * np.pi) * c1
        k3 = (mu / 4.0) * np.sqrt(2.0 * np.pi) * c3
        if not (np.isfinite(k1) and np.isfinite(k2) and np.isfinite(k3)):
            raise FracsimError(f"non-finite SIF at front node {nid}")
        out.append(SifRecord(nid, float(k1), float(k2), float(k3), e1, e2, e3))
    return out


def _mean_unit(vecs):
    v = np.mean(vecs, axis=0)
    n = np.linalg.norm(v)
    if n < 1e-14:
        raise MeshInvariantError("front frame averaging degenerated")
    return v / n
