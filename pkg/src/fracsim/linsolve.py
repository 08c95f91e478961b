"""Linear solvers for the coupled block systems, with dynamic switching.

The coupled Jacobian couples a dense symmetric solid block with sparse fluid
blocks.  Healthy systems run preconditioned Krylov iterations (PCG when the
system is symmetric, BiCGSTAB otherwise) with a block-Jacobi preconditioner;
any iterative failure hot-swaps to a robust direct factorization, and after a
sustained run of direct successes the solver reverts to the iterative mode.
Sustained failure of the direct path raises SolverUnstableError.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import lapack as _lapack

from .errors import SolverUnstableError
from .packed import PackedSymmetricMatrix

logger = logging.getLogger(__name__)

ITERATIVE = "ITERATIVE"
DIRECT = "DIRECT"


class LinearSolveFailure(Exception):
    """Direct factorization failed (singular or inaccurate)."""


@dataclass
class SolveStatus:
    converged: bool
    iterations: int = 0
    residual: float = np.inf
    reason: str = ""


@dataclass
class SolverControl:
    """State machine of the fault-tolerant solver switching."""

    mode: str = ITERATIVE
    failure_count: int = 0
    consecutive_successes: int = 0
    max_failures: int = 5
    revert_steps: int = 20
    # telemetry
    transitions: list = field(default_factory=list)

    def record_failure(self):
        self.failure_count += 1
        self.consecutive_successes = 0
        if self.mode != DIRECT:
            self.transitions.append(("to_direct", self.failure_count))
        self.mode = DIRECT
        if self.failure_count > self.max_failures:
            raise SolverUnstableError(
                f"linear solver failed {self.failure_count} consecutive times")

    def record_success(self):
        self.failure_count = 0
        self.consecutive_successes += 1
        if self.mode == DIRECT and self.consecutive_successes >= self.revert_steps:
            self.mode = ITERATIVE
            self.transitions.append(("to_iterative", self.consecutive_successes))


class BlockSystem:
    """Coupled 2x2 block system.

    Rows/cols: [3N displacement dofs | N pressure dofs].  ``A`` is packed
    symmetric; ``B`` sparse (3N x N); ``C`` sparse (N x N, includes any time
    scaling).  ``lower_extra`` adds to the (2,1) block (making the system
    non-symmetric); ``diag_extra`` adds to the (2,2) block.
    """

    def __init__(self, A, B, C, rhs_u, rhs_p, lower_extra=None,
                 diag_extra=None, symmetric=None):
        self.A = A
        self.B = B.tocsr()
        self.C = C.tocsr()
        self.lower_extra = lower_extra.tocsr() if lower_extra is not None else None
        self.diag_extra = diag_extra.tocsr() if diag_extra is not None else None
        self.rhs_u = np.asarray(rhs_u, dtype=float)
        self.rhs_p = np.asarray(rhs_p, dtype=float)
        self.nu = A.n
        self.np_ = self.C.shape[0]
        if symmetric is None:
            symmetric = self.lower_extra is None and self.diag_extra is None
        self.symmetric = symmetric

    @property
    def n(self):
        return self.nu + self.np_

    @property
    def rhs(self):
        return np.concatenate([self.rhs_u, self.rhs_p])

    def matvec(self, x):
        xu, xp = x[: self.nu], x[self.nu:]
        yu = self.A.matvec(xu) + self.B @ xp
        yp = self.B.T @ xu + self.C @ xp
        if self.lower_extra is not None:
            yp = yp + self.lower_extra @ xu
        if self.diag_extra is not None:
            yp = yp + self.diag_extra @ xp
        return np.concatenate([yu, yp])

    def dense(self):
        n = self.n
        J = np.zeros((n, n))
        J[: self.nu, : self.nu] = self.A.to_full()
        J[: self.nu, self.nu:] = self.B.toarray()
        J[self.nu:, : self.nu] = self.B.T.toarray()
        J[self.nu:, self.nu:] = self.C.toarray()
        if self.lower_extra is not None:
            J[self.nu:, : self.nu] += self.lower_extra.toarray()
        if self.diag_extra is not None:
            J[self.nu:, self.nu:] += self.diag_extra.toarray()
        return J

    def residual_norm(self, x):
        b = self.rhs
        nb = np.linalg.norm(b)
        if nb == 0:
            return float(np.linalg.norm(self.matvec(x)))
        return float(np.linalg.norm(self.matvec(x) - b) / nb)


class BlockJacobi:
    """Per-node 3x3 blocks of the solid diagonal, scalar fluid diagonal."""

    def __init__(self, system):
        nu, np_ = system.nu, system.np_
        nn = nu // 3
        self.nu = nu
        blocks = np.zeros((nn, 3, 3))
        for node in range(nn):
            idx = np.arange(3 * node, 3 * node + 3)
            for i in range(3):
                blocks[node, i, :] = system.A.get(np.full(3, idx[i]), idx)
        # regularize and invert
        self.inv_blocks = np.zeros_like(blocks)
        for node in range(nn):
            blk = blocks[node]
            scale = np.abs(np.diag(blk)).max()
            if scale == 0:
                self.inv_blocks[node] = np.eye(3)
                continue
            try:
                self.inv_blocks[node] = np.linalg.inv(blk)
            except np.linalg.LinAlgError:
                self.inv_blocks[node] = np.linalg.pinv(blk)
        Cd = system.C.diagonal().astype(float)
        if system.diag_extra is not None:
            Cd = Cd + system.diag_extra.diagonal()
        scale = np.abs(Cd).max()
        if scale == 0:
            scale = 1.0
        # keep the sign of each diagonal entry, floor the magnitude
        mags = np.maximum(np.abs(Cd), 1e-12 * scale)
        signs = np.where(Cd < 0, -1.0, 1.0)
        self.cdiag = signs * mags

    def apply(self, r):
        ru = r[: self.nu].reshape(-1, 3)
        zu = np.einsum("nij,nj->ni", self.inv_blocks, ru).ravel()
        zp = r[self.nu:] / self.cdiag
        return np.concatenate([zu, zp])

    def block_matvec(self, x):
        """Action of the block-diagonal operator itself (for testing)."""
        xu = x[: self.nu].reshape(-1, 3)
        yu = np.einsum("nij,nj->ni",
                       np.linalg.inv(self.inv_blocks), xu).ravel()
        yp = x[self.nu:] * self.cdiag
        return np.concatenate([yu, yp])


def _ruiz_scale(J, iters=6):
    """Symmetric Ruiz equilibration: scale rows/cols toward unit max-norm."""
    n = J.shape[0]
    s = np.ones(n)
    Js = J.copy()
    for _ in range(iters):
        m = np.abs(Js).max(axis=1)
        m[m == 0] = 1.0
        d = 1.0 / np.sqrt(m)
        Js *= d[:, None]
        Js *= d[None, :]
        s *= d
    return Js, s


def direct_solve(system):
    """Robust direct factorization (Bunch-Kaufman for symmetric systems, LU
    otherwise) with Ruiz equilibration and iterative refinement.

    The coupled blocks span many orders of magnitude (stiffness in Pa*m
    against conductances in m^3/Pa), so the matrix is equilibrated to unit
    row/column max-norms before factorization.  Returns the solution; raises
    LinearSolveFailure on singularity or a residual above 1e-9 relative.
    """
    J = system.dense()
    b = system.rhs
    Js, s = _ruiz_scale(J)
    bs = b * s
    if system.symmetric:
        ldu, ipiv, info = _lapack.dsytrf(Js, lower=1)
        if info != 0:
            raise LinearSolveFailure(f"factorization failed (info={info})")
        def solve(rhs):
            x, inf2 = _lapack.dsytrs(ldu, ipiv, rhs, lower=1)
            return x
    else:
        lu, piv, info = _lapack.dgetrf(Js)
        if info != 0:
            raise LinearSolveFailure(f"factorization failed (info={info})")
        def solve(rhs):
            x, inf2 = _lapack.dgetrs(lu, piv, rhs)
            return x
    y = solve(bs)
    # iterative refinement in the scaled variables until it stalls
    nb = np.linalg.norm(bs) + 1e-300
    prev = np.inf
    for _ in range(10):
        r = bs - Js @ y
        if not np.all(np.isfinite(r)):
            raise LinearSolveFailure("non-finite refinement residual")
        rn = float(np.linalg.norm(r))
        if rn <= 1e-15 * (nb + np.linalg.norm(y)) or rn >= 0.5 * prev:
            break
        prev = rn
        y = y + solve(r)
    x = y * s
    # backward error in the equilibrated variables (rows have unit max-norm)
    res = float(np.linalg.norm(bs - Js @ y)
                / (nb + np.linalg.norm(y)))
    if not np.isfinite(res) or res > 1e-9:
        raise LinearSolveFailure(f"direct residual {res:.2e} too large")
    return x


def pcg_solve(system, precond=None, tol=1e-10, max_it=None, x0=None):
    """Preconditioned conjugate gradients on the block system.

    Intended for the symmetric path.  Returns (x, SolveStatus); breakdown or
    stagnation produce a failed status rather than an exception so the
    switching logic can take over.
    """
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return _pcg_impl(system, precond, tol, max_it, x0)


def _pcg_impl(system, precond, tol, max_it, x0):
    b = system.rhs
    n = len(b)
    max_it = max_it or 4 * n
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    M = precond or BlockJacobi(system)
    r = b - system.matvec(x)
    nb = np.linalg.norm(b)
    if nb == 0:
        return x, SolveStatus(True, 0, 0.0)
    z = M.apply(r)
    p = z.copy()
    rz = float(r @ z)
    # convergence on the preconditioned residual ratio; the preconditioner
    # absorbs the extreme block scaling of the coupled system
    rz0 = max(abs(rz), 1e-300)
    for it in range(1, max_it + 1):
        Ap = system.matvec(p)
        pAp = float(p @ Ap)
        if not np.isfinite(pAp) or abs(pAp) < 1e-300:
            return x, SolveStatus(False, it, np.inf, "pAp breakdown")
        alpha = rz / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        z = M.apply(r)
        rz_new = float(r @ z)
        res = float(np.sqrt(abs(rz_new) / rz0))
        if res <= tol:
            return x, SolveStatus(True, it, res)
        beta = rz_new / rz
        rz = rz_new
        if not np.isfinite(beta):
            return x, SolveStatus(False, it, res, "beta breakdown")
        p = z + beta * p
    return x, SolveStatus(False, max_it, res, "max iterations")


def bicgstab_solve(system, precond=None, tol=1e-10, max_it=None, x0=None):
    """Preconditioned BiCGSTAB; handles the non-symmetric Jacobians."""
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return _bicgstab_impl(system, precond, tol, max_it, x0)


def _bicgstab_impl(system, precond, tol, max_it, x0):
    b = system.rhs
    n = len(b)
    max_it = max_it or 4 * n
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    M = precond or BlockJacobi(system)
    r = b - system.matvec(x)
    nb = np.linalg.norm(b)
    if nb == 0:
        return x, SolveStatus(True, 0, 0.0)
    r0 = r.copy()
    z0 = M.apply(r)
    rz0 = max(abs(float(r @ z0)), 1e-300)
    rho = alpha = omega = 1.0
    v = np.zeros(n)
    p = np.zeros(n)
    for it in range(1, max_it + 1):
        rho_new = float(r0 @ r)
        if abs(rho_new) < 1e-300 * nb * nb or not np.isfinite(rho_new):
            return x, SolveStatus(False, it, system.residual_norm(x),
                                  "rho breakdown")
        beta = (rho_new / rho) * (alpha / omega)
        rho = rho_new
        p = r + beta * (p - omega * v)
        ph = M.apply(p)
        v = system.matvec(ph)
        denom = float(r0 @ v)
        if abs(denom) < 1e-300 or not np.isfinite(denom):
            return x, SolveStatus(False, it, system.residual_norm(x),
                                  "r0.v breakdown")
        alpha = rho / denom
        s = r - alpha * v
        res_s = float(np.sqrt(abs(s @ M.apply(s)) / rz0))
        if res_s <= tol:
            x = x + alpha * ph
            return x, SolveStatus(True, it, res_s)
        sh = M.apply(s)
        t = system.matvec(sh)
        tt = float(t @ t)
        if tt == 0 or not np.isfinite(tt):
            return x, SolveStatus(False, it, system.residual_norm(x),
                                  "t.t breakdown")
        omega = float(t @ s) / tt
        if abs(omega) < 1e-300:
            return x, SolveStatus(False, it, system.residual_norm(x),
                                  "omega breakdown")
        x = x + alpha * ph + omega * sh
        r = s - omega * t
        res = float(np.sqrt(abs(r @ M.apply(r)) / rz0))
        if res <= tol:
            return x, SolveStatus(True, it, res)
    return x, SolveStatus(False, max_it, res, "max iterations")


def solve_with_switching(system, control, tol=1e-10, max_it=None):
    """Dispatch one linear solve through the switching state machine.

    Iterative mode chooses PCG for symmetric systems and BiCGSTAB otherwise;
    any failure switches to the direct mode and retries; sustained failure
    (more than ``control.max_failures`` consecutive) raises
    SolverUnstableError.  Success bookkeeping reverts to the iterative mode
    after ``control.revert_steps`` consecutive direct successes.
    """
    while True:
        if control.mode == DIRECT:
            try:
                x = direct_solve(system)
            except LinearSolveFailure as exc:
                logger.warning("direct solve failed: %s", exc)
                control.record_failure()
                continue
            control.record_success()
            return x, control
        solver = pcg_solve if system.symmetric else bicgstab_solve
        x, status = solver(system, tol=tol, max_it=max_it)
        if status.converged and np.all(np.isfinite(x)):
            control.record_success()
            return x, control
        logger.info("iterative solve failed (%s); switching to direct",
                    status.reason or "no convergence")
        control.record_failure()
