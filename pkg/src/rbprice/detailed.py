"""Detailed (truth) time stepping.

European calls use a plain theta-scheme.  American puts solve, at every time
step, the discrete saddle-point complementarity system

    K U - B Lam = rhs,   B^T U >= G,   Lam >= 0,   Lam o (B^T U - G) = 0

with a primal-dual active set (PDAS) iteration, i.e. semismooth Newton on the
NCP function ``Lam - max(0, Lam - c (B^T U - G))``.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.sparse.linalg import splu

from .fem import DiscreteOperators
from .market_models import ModelParams

log = logging.getLogger(__name__)

MAX_ITER = 50


class SolverError(RuntimeError):
    """A detailed or reduced solve failed."""


class PDASConvergenceError(SolverError):
    def __init__(self, step, params, active_size, max_iter):
        self.step, self.params, self.active_size = step, params, active_size
        super().__init__(
            f"PDAS did not converge in {max_iter} iterations at step {step} for {params} "
            f"(last active set size {active_size})"
        )


@dataclass
class PDASResult:
    U: np.ndarray
    Lam: np.ndarray
    iterations: int
    active: np.ndarray


def pdas(
    solve_active: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
    constraint: Callable[[np.ndarray], np.ndarray],
    U0: np.ndarray,
    Lam0: np.ndarray,
    norm_u: Callable[[np.ndarray], float],
    norm_lam: Callable[[np.ndarray], float],
    c: float = 1.0,
    eps: float = 1e-10,
    max_iter: int = MAX_ITER,
) -> PDASResult:
    """Primal-dual active set loop.

    ``constraint(U)`` returns ``B^T U - G``; ``solve_active(mask)`` solves the
    linear system with ``(B^T U)_p = G_p`` on the active mask and ``Lam_p = 0``
    elsewhere.  Stops once the increment norm drops below ``eps``; a repeated
    active set reproduces the previous iterate exactly and also stops.

    PDAS converges for M-matrix systems (the detailed problem) but may cycle
    on the dense reduced ones.  If an earlier active set comes back, or
    ``max_iter`` passes without convergence, the loop continues with
    least-index single pivots (Murty's method), which terminate for every
    P-matrix complementarity problem.
    """
    if c <= 0:
        raise ValueError("c must be positive")
    U, Lam = U0, Lam0
    prev = None
    seen = set()
    k = 0
    for k in range(1, max_iter + 1):
        # Ties go to the inactive set; with U^0 = G and Lam^0 = 0 every node
        # ties, and the unconstrained first iterate avoids a node-by-node sweep.
        active = (Lam - c * constraint(U)) > 0
        if prev is not None and np.array_equal(active, prev):
            return _finish(U, Lam, k - 1, active)
        key = active.tobytes()
        if key in seen:
            log.debug("PDAS cycle after %d iterations; switching to least-index pivoting", k - 1)
            break
        seen.add(key)
        U_new, Lam_new = solve_active(active)
        tol = norm_u(U_new - U) + norm_lam(Lam_new - Lam)
        U, Lam, prev = U_new, Lam_new, active
        if tol <= eps:
            return _finish(U, Lam, k, active)
    return _least_index(solve_active, constraint, prev, U, Lam, k, max_iter)


def _finish(U, Lam, iterations, active) -> PDASResult:
    # Active-set multipliers can carry round-off of either sign; the cone
    # condition is part of the output contract.
    return PDASResult(U, np.maximum(Lam, 0.0), iterations, active)


def _least_index(solve_active, constraint, active, U, Lam, done, max_iter) -> PDASResult:
    n = Lam.size
    active = np.zeros(n, bool) if active is None else active.copy()
    if done == 0 or U is None:
        U, Lam = solve_active(active)
    budget = max_iter + 10 * n
    for k in range(1, budget + 1):
        g = constraint(U)
        scale = 1e-12 * max(1.0, float(np.abs(Lam).max(initial=0.0)), float(np.abs(g).max(initial=0.0)))
        bad = np.flatnonzero(np.where(active, Lam < -scale, g < -scale))
        if bad.size == 0:
            return _finish(U, Lam, done + k - 1, active)
        active[bad[0]] = ~active[bad[0]]
        U, Lam = solve_active(active)
    raise PDASConvergenceError(None, None, int(active.sum()), max_iter)


@dataclass
class Trajectory:
    """Time trajectory of free-node coefficients.

    ``U[n]`` for ``n = 0..L``; ``Lam[n - 1]`` is the multiplier of step ``n``
    (empty for European options).
    """

    U: np.ndarray
    Lam: np.ndarray
    params: ModelParams
    iterations: list[int] = field(default_factory=list)
    runtime: float = 0.0

    @property
    def L(self) -> int:
        return self.U.shape[0] - 1

    def to_csv(self, path, which: str = "U") -> None:
        data = self.U if which == "U" else self.Lam
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step"] + [f"c{i}" for i in range(data.shape[1])])
            first = 0 if which == "U" else 1
            for n, row in enumerate(data, start=first):
                w.writerow([n] + [repr(float(v)) for v in row])


def project_initial(operators: DiscreteOperators, w0_free: np.ndarray, basis: np.ndarray | None = None) -> np.ndarray:
    """Initial coefficients.

    Without ``basis`` this is the nodal interpolant itself.  With an
    X-orthonormal ``basis`` it returns the X-orthogonal projection
    coefficients ``basis^T X w0``.
    """
    if basis is None:
        return np.array(w0_free, dtype=float, copy=True)
    return basis.T @ (operators.X @ w0_free)


def solve_european(operators: DiscreteOperators, params: ModelParams, L: int | None = None,
                   theta: float | None = None) -> Trajectory:
    """Theta-scheme for the European call, one sparse factorization per parameter."""
    ops = operators
    L = ops.L if L is None else L
    theta = ops.theta if theta is None else theta
    if L != ops.L or theta != ops.theta:
        raise ValueError("L and theta are fixed when the operators are built")
    t0 = time.perf_counter()
    dt = ops.dt
    A = ops.system_matrix(params)
    lhs = (ops.mass / dt + theta * A).tocsc()
    rhs_mat = (ops.mass / dt - (1 - theta) * A).tocsr()
    try:
        lu = splu(lhs)
    except RuntimeError as exc:
        raise SolverError(f"singular theta-scheme matrix for {params}") from exc
    U = np.empty((L + 1, ops.n_free))
    U[0] = project_initial(ops, ops.initial())
    for n in range(L):
        U[n + 1] = lu.solve(rhs_mat @ U[n] + ops.load(params, n))
    return Trajectory(U, np.zeros((0, ops.n_free)), params, [], time.perf_counter() - t0)


def american_step(K, rhs, G, U0, Lam0, norm_u, c=1.0, eps=1e-10, max_iter=MAX_ITER) -> PDASResult:
    """One implicit step of the detailed obstacle problem (duality matrix = identity).

    ``K`` is sparse (CSR).  Active nodes are pinned to ``G``; the multiplier is
    the equation residual ``K U - rhs`` on the active set.
    """
    K = K.tocsr()

    def solve_active(active):
        inactive = ~active
        U = np.where(active, G, 0.0)
        if inactive.any():
            Kii = K[inactive][:, inactive].tocsc()
            b = rhs[inactive] - K[inactive][:, active] @ G[active]
            U[inactive] = splu(Kii).solve(b)
        Lam = np.where(active, K @ U - rhs, 0.0)
        return U, Lam

    return pdas(solve_active, lambda U: U - G, U0, Lam0, norm_u, lambda d: float(np.linalg.norm(d)),
                c=c, eps=eps, max_iter=max_iter)


def solve_american(operators: DiscreteOperators, params: ModelParams, L: int | None = None,
                   c: float = 1.0, eps_newton: float = 1e-10, max_iter: int = MAX_ITER) -> Trajectory:
    """Implicit Euler + PDAS for the American put, warm-started across steps."""
    ops = operators
    if L is not None and L != ops.L:
        raise ValueError("L is fixed when the operators are built")
    if ops.theta != 1.0:
        raise ValueError("American solves use theta = 1")
    t0 = time.perf_counter()
    dt = ops.dt
    A = ops.system_matrix(params)
    K = (ops.mass / dt + A).tocsr()
    Mdt = (ops.mass / dt).tocsr()
    G = ops.G
    U = np.empty((ops.L + 1, ops.n_free))
    Lam = np.empty((ops.L, ops.n_free))
    U[0] = project_initial(ops, ops.initial())
    lam_prev = np.zeros(ops.n_free)
    iters = []
    for n in range(ops.L):
        rhs = Mdt @ U[n] + ops.load(params, n)
        try:
            res = american_step(K, rhs, G, U[n], lam_prev, ops.norm_x, c, eps_newton, max_iter)
        except PDASConvergenceError as exc:
            raise PDASConvergenceError(n + 1, params, exc.active_size, max_iter) from None
        U[n + 1], Lam[n] = res.U, res.Lam
        lam_prev = res.Lam
        iters.append(res.iterations)
    return Trajectory(U, Lam, params, iters, time.perf_counter() - t0)


def solve(operators: DiscreteOperators, params: ModelParams) -> Trajectory:
    """Detailed trajectory for the operators' option type."""
    if operators.spec.american:
        return solve_american(operators, params)
    return solve_european(operators, params)


def full_field(operators: DiscreteOperators, traj: Trajectory, n: int) -> np.ndarray:
    """Nodal values ``w^n = u^n + u_g^n`` on all mesh nodes."""
    out = operators.full_lift(traj.params, n)
    out[operators.mesh.free] += traj.U[n]
    return out


def complementarity_defect(U: np.ndarray, Lam: np.ndarray, G: np.ndarray) -> dict[str, float]:
    """Worst violations of ``Lam >= 0``, ``U >= G`` and ``Lam o (U - G) = 0``."""
    gap = U - G
    return {
        "dual": float(max(0.0, -Lam.min(initial=0.0))),
        "primal": float(max(0.0, -gap.min(initial=0.0))),
        "product": float(np.abs(Lam * gap).max(initial=0.0)),
    }
