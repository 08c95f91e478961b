"""Monolithic transient step: elasticity + channel flow via Newton iteration.

One step solves, at t + dt, the coupled system

    A dU + B P             = R_c(sigma0)
    B^T dU - dt K(w, gp) P = B^T dU_prev - dt (F_inj - F_leak)

where K is the (positive semidefinite) conductance form; the second row is
the backward-difference fluid equation scaled by -dt so the system is
symmetric for frozen conductance.  Newtonian fluids iterate with that
symmetric operator (conductance re-evaluated each iteration); power-law
fluids use the full non-symmetric Jacobian including the viscosity and width
derivatives of the conductance term.  Front-node displacement dofs carry an
essential zero-jump condition.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import channel, elastic, linsolve
from .errors import NonConvergenceError, TimeStepRejected

logger = logging.getLogger(__name__)


@dataclass
class FieldState:
    node_ids: np.ndarray            # sorted active node ids
    displacement_jump: np.ndarray   # (n, 3), m
    pressure: np.ndarray            # (n,), Pa
    time: float = 0.0

    @classmethod
    def zero(cls, mesh, time=0.0):
        ids = np.array(sorted(mesh.nodes))
        return cls(ids, np.zeros((len(ids), 3)), np.zeros(len(ids)), time)

    @classmethod
    def seeded(cls, mesh, aperture, time=0.0):
        """Zero fields plus a tiny opening along the nodal normals.

        A strictly zero width makes the very first coupled solve singular
        (no conductance anywhere, so front pressures decouple); a sub-micron
        seed aperture keeps the startup system regular without measurable
        volume error.  Front nodes stay at zero jump.
        """
        state = cls.zero(mesh, time)
        normals = channel.nodal_normals(mesh)
        ids = state.node_ids
        for i, nid in enumerate(ids):
            if not mesh.nodes[nid].is_front:
                state.displacement_jump[i] = aperture * normals[i]
        return state

    def copy(self):
        return FieldState(self.node_ids.copy(), self.displacement_jump.copy(),
                          self.pressure.copy(), self.time)

    def width(self, mesh):
        """w = jump . n, recomputed from the displacement field."""
        return channel.width_field(mesh, self.displacement_jump)

    def check_sizes(self, mesh):
        n = len(mesh.nodes)
        if len(self.node_ids) != n or self.displacement_jump.shape != (n, 3) \
                or self.pressure.shape != (n,):
            raise ValueError("field state inconsistent with mesh")


@dataclass
class InSituStress:
    tensor: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))

    def __post_init__(self):
        self.tensor = np.asarray(self.tensor, dtype=float)
        if self.tensor.shape != (3, 3):
            raise ValueError("in-situ stress must be a 3x3 tensor")
        if not np.allclose(self.tensor, self.tensor.T):
            raise ValueError("in-situ stress must be symmetric")
        if not np.all(np.isfinite(self.tensor)):
            raise ValueError("in-situ stress must be finite")


@dataclass
class NewtonConfig:
    tol_rel: float = 1e-8
    max_iters: int = 25
    dt: float = 1.0
    max_halvings: int = 5
    # accept a stagnated iteration once updates sit below this level for
    # several sweeps: on extreme-contrast systems (near-zero viscosity) the
    # attainable update accuracy is limited by the linear-solve conditioning
    plateau_tol: float = 1e-6

    def __post_init__(self):
        if self.tol_rel <= 0:
            raise ValueError("tol_rel must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


@dataclass
class OperatorBlocks:
    """Assembled operators for one time step (conductance updated per iterate)."""

    A: object                  # PackedSymmetricMatrix (unconstrained)
    B: object                  # sparse (3N x N)
    R_c: np.ndarray            # in-situ load
    R_f: np.ndarray            # scaled fluid load (history included)
    dt: float
    front_mask: np.ndarray     # constrained displacement dofs
    K: object = None           # conductance at the current iterate


def residuals(state, blocks, mesh):
    """(r_c, r_f) at the given state for the assembled blocks."""
    dU = state.displacement_jump.ravel()
    P = state.pressure
    r_c = blocks.R_c - blocks.A.matvec(dU) - blocks.B @ P
    C_eff_P = -blocks.dt * (blocks.K @ P)
    r_f = blocks.R_f - blocks.B.T @ dU - C_eff_P
    r_c[blocks.front_mask] = 0.0
    return r_c, r_f


def jacobian(state, blocks, mesh, fluid):
    """Full Newton block augmentations: (lower_extra, diag_extra) sparse
    additions to (B^T, -dt K): the width derivative of the conductance term
    and the viscosity-gradient derivative.  Newtonian fluids keep only the
    width coupling (the eta-gradient term vanishes identically)."""
    width = state.width(mesh)
    DU, DP = channel.conductance_jacobian_terms(
        mesh, width, state.pressure, state.displacement_jump, fluid)
    lower_extra = -blocks.dt * DU
    diag_extra = -blocks.dt * DP
    return lower_extra, diag_extra


def assemble_step_blocks(mesh, material, schedule, leakoff, sigma0, prev,
                         dt, cache=None, nthreads=1, backend=None, cfg=None):
    """Geometry-dependent operators for one step at time prev.time + dt."""
    arrays = mesh.compile()
    A, info = elastic.assemble_A(mesh, material, cache=cache, cfg=cfg,
                                 nthreads=nthreads, backend=backend)
    B = channel.assemble_B(mesh)
    R_c = channel.insitu_load(mesh, sigma0.tensor)
    ages = np.array([mesh.nodes[n].age for n in arrays.node_order])
    t_new = prev.time + dt
    f_net = channel.assemble_fluid_rhs(mesh, schedule, leakoff, ages,
                                       t_new, None)
    R_f = B.T @ prev.displacement_jump.ravel() - dt * f_net
    front = elastic.front_dof_mask(mesh, arrays)
    return OperatorBlocks(A=A, B=B, R_c=R_c, R_f=R_f, dt=dt,
                          front_mask=front), info


def _constrained_system(blocks, K, lower_extra, diag_extra, r_c, r_f, symmetric):
    """Build the BlockSystem for the Newton update with front dofs eliminated."""
    mask = blocks.front_mask
    A = blocks.A.copy().apply_dirichlet(mask)
    B = blocks.B.tolil(copy=True)
    B[np.flatnonzero(mask), :] = 0.0
    B = B.tocsr()
    C_eff = (-blocks.dt) * K
    if lower_extra is not None:
        lower_extra = lower_extra.tolil(copy=True)
        lower_extra[:, np.flatnonzero(mask)] = 0.0
        lower_extra = lower_extra.tocsr()
    rc = r_c.copy()
    rc[mask] = 0.0
    return linsolve.BlockSystem(A, B, C_eff, rc, r_f,
                                lower_extra=lower_extra,
                                diag_extra=diag_extra, symmetric=symmetric)


def newton_solve_step(prev, mesh, material, fluid, schedule, leakoff, sigma0,
                      config, control, cache=None, nthreads=1, backend=None,
                      qcfg=None, blocks=None):
    """Advance the coupled fields by one time step of length config.dt.

    Returns (state, stats).  Raises TimeStepRejected when Newton fails to
    converge within config.max_iters (the caller halves dt and retries).
    """
    prev.check_sizes(mesh)
    dt = config.dt
    if blocks is None:
        blocks, _ = assemble_step_blocks(mesh, material, schedule, leakoff,
                                         sigma0, prev, dt, cache=cache,
                                         nthreads=nthreads, backend=backend,
                                         cfg=qcfg)
    state = prev.copy()
    state.time = prev.time + dt
    full_newton = not fluid.is_newtonian
    stats = {"iterations": 0, "rel_update": 1.0, "solver_mode": control.mode}
    updates = []
    undamped = 0
    best = np.inf
    since_best = 0

    for it in range(1, config.max_iters + 1):
        # the symmetric fixed-point iteration (conductance frozen per pass)
        # can cycle once the channel stiffens; escalate to the full Newton
        # Jacobian when undamped update norms stop contracting
        if not full_newton and undamped >= 3 and len(updates) >= 3 \
                and updates[-1] > 0.3 * updates[-3] \
                and config.tol_rel < updates[-1] < 1e-2:
            full_newton = True
            stats["escalated"] = it
        width = state.width(mesh)
        K = channel.assemble_C(mesh, width, state.pressure, fluid)
        blocks.K = K
        r_c, r_f = residuals(state, blocks, mesh)
        lower_extra = diag_extra = None
        if full_newton:
            lower_extra, diag_extra = jacobian(state, blocks, mesh, fluid)
        system = _constrained_system(blocks, K, lower_extra, diag_extra,
                                     r_c, r_f, symmetric=not full_newton)
        # inner tolerance follows the outer convergence state so late Newton
        # updates are not polluted by linear-solve noise
        rel_prev = min(stats["rel_update"], 1.0)
        tol_lin = max(1e-2 * rel_prev * config.tol_rel, 1e-13)
        x, control = linsolve.solve_with_switching(system, control, tol=tol_lin)
        dU = x[: system.nu].reshape(-1, 3)
        dP = x[system.nu:]
        # growth cap: the conductance linearized at near-zero width produces
        # huge first increments at startup; limit per-iteration growth of the
        # displacement norm (inactive near the solution)
        nrm_u0 = np.linalg.norm(state.displacement_jump)
        ndu = np.linalg.norm(dU)
        cap = 15.0 * max(nrm_u0, 1e-8)
        alpha = min(1.0, cap / ndu) if ndu > 0 else 1.0
        undamped = undamped + 1 if alpha == 1.0 else 0
        dU = alpha * dU
        dP = alpha * dP
        state.displacement_jump = state.displacement_jump + dU
        state.pressure = state.pressure + dP
        nrm_u = np.linalg.norm(state.displacement_jump)
        nrm_p = np.linalg.norm(state.pressure)
        rel_u = np.linalg.norm(dU) / max(nrm_u, 1e-300)
        rel_p = np.linalg.norm(dP) / max(nrm_p, 1e-300)
        rel = max(rel_u if nrm_u > 0 else 0.0, rel_p if nrm_p > 0 else 0.0)
        stats["iterations"] = it
        stats["rel_update"] = rel
        stats["solver_mode"] = control.mode
        updates.append(rel)
        stats["updates"] = updates
        if rel < config.tol_rel:
            return state, stats
        if rel < 0.5 * best:
            best = rel
            since_best = 0
        else:
            since_best += 1
        if best < config.plateau_tol and since_best >= 6:
            # only accept a stagnated iteration when both equations are
            # satisfied relative to their own term magnitudes
            scale_c = (np.linalg.norm(blocks.A.matvec(
                state.displacement_jump.ravel()))
                + np.linalg.norm(blocks.B @ state.pressure)
                + np.linalg.norm(blocks.R_c) + 1e-300)
            scale_f = (np.linalg.norm(blocks.B.T @ state.displacement_jump.ravel())
                + blocks.dt * np.linalg.norm(blocks.K @ state.pressure)
                + np.linalg.norm(blocks.R_f) + 1e-300)
            r_c2, r_f2 = residuals(state, blocks, mesh)
            if (np.linalg.norm(r_c2) <= 1e-6 * scale_c
                    and np.linalg.norm(r_f2) <= 1e-6 * scale_f):
                stats["plateau"] = True
                return state, stats
    raise TimeStepRejected(
        f"Newton did not converge in {config.max_iters} iterations "
        f"(rel update {stats['rel_update']:.2e})")


def step_with_retries(prev, mesh, material, fluid, schedule, leakoff, sigma0,
                      config, control, cache=None, nthreads=1, backend=None,
                      qcfg=None):
    """Wrap newton_solve_step with dt-halving retries (up to max_halvings)."""
    dt = config.dt
    last_exc = None
    for attempt in range(config.max_halvings + 1):
        cfg = NewtonConfig(tol_rel=config.tol_rel, max_iters=config.max_iters,
                           dt=dt, max_halvings=config.max_halvings)
        try:
            state, stats = newton_solve_step(
                prev, mesh, material, fluid, schedule, leakoff, sigma0,
                cfg, control, cache=cache, nthreads=nthreads, backend=backend,
                qcfg=qcfg)
            stats["dt"] = dt
            stats["halvings"] = attempt
            return state, stats
        except TimeStepRejected as exc:
            last_exc = exc
            dt *= 0.5
            logger.warning("time step rejected, retrying with dt=%.3e", dt)
    raise NonConvergenceError(
        f"step failed after {config.max_halvings} dt halvings") from last_exc
