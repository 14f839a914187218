"""Online phase: Galerkin projection onto the reduced spaces and reduced time stepping.

Everything parameter independent is projected once in :func:`project_operators`;
a query then only forms small dense matrices from the affine coefficients.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .detailed import MAX_ITER, PDASConvergenceError, PDASResult, SolverError, pdas
from .fem import DiscreteOperators
from .market_models import ModelParams, affine_theta

if TYPE_CHECKING:
    from .construction import ReducedBasis


class HashMismatchError(ValueError):
    """A reduced basis was trained on different detailed operators."""


@dataclass
class ReducedOperators:
    """Projected, parameter-independent pieces of the reduced problem.

    The reduced Gram matrix is the identity because ``Psi`` is X-orthonormal,
    so coefficient norms of primal vectors are V-norms.
    """

    Psi: np.ndarray
    Xi: np.ndarray
    gram: np.ndarray
    mass: np.ndarray
    A: list[np.ndarray]
    B: np.ndarray
    G: np.ndarray
    U0: np.ndarray
    xi_gram: np.ndarray
    dt: float
    L: int
    theta: float
    american: bool
    config_hash: str
    # Boundary coupling: Psi^T M_fd, Psi^T A_q,fd and the projected Neumann load.
    mass_fd: np.ndarray
    A_fd: list[np.ndarray]
    neumann: np.ndarray
    operators: DiscreteOperators = field(repr=False)
    _static_load: list[np.ndarray] | None = field(default=None, repr=False)

    @property
    def N_V(self) -> int:
        return self.Psi.shape[1]

    @property
    def N_W(self) -> int:
        return self.Xi.shape[1]

    def system_matrix(self, params: ModelParams) -> np.ndarray:
        theta = affine_theta(params)
        out = np.zeros((self.N_V, self.N_V))
        for t, Aq in zip(theta, self.A):
            out += t * Aq
        return out

    def load(self, params: ModelParams, n: int) -> np.ndarray:
        """Reduced load ``Psi^T F^n``."""
        th = affine_theta(params)
        if self._static_load is not None:
            # time-independent lift: no mass term and a fixed combination
            return -sum(t * f for t, f in zip(th, self._static_load)) + self.neumann
        ops = self.operators
        g0, g1 = ops.lift(params, n), ops.lift(params, n + 1)
        gm = self.theta * g1 + (1 - self.theta) * g0
        F = -(self.mass_fd @ ((g1 - g0) / self.dt))
        for t, Aq in zip(th, self.A_fd):
            F -= t * (Aq @ gm)
        return F + self.neumann

    def norm_w(self, lam: np.ndarray) -> float:
        return float(np.sqrt(max(lam @ (self.xi_gram @ lam), 0.0)))


def project_operators(basis: "ReducedBasis", operators: DiscreteOperators, check_hash: bool = True) -> ReducedOperators:
    """Project the detailed operators onto ``basis``; μ-independent work only."""
    if check_hash and basis.config_hash != operators.config_hash:
        raise HashMismatchError(
            f"basis was built for operators {basis.config_hash}, current operators are {operators.config_hash}"
        )
    ops = operators
    Psi, Xi = np.asarray(basis.Psi, float), np.asarray(basis.Xi, float)
    if Psi.shape[0] != ops.n_free or Xi.shape[0] not in (0, ops.n_free):
        raise ValueError("basis dimensions do not match the operators")
    if Xi.shape[0] == 0:
        Xi = np.zeros((ops.n_free, 0))
    XPsi = ops.X @ Psi
    red = ReducedOperators(
        Psi=Psi,
        Xi=Xi,
        gram=Psi.T @ XPsi,
        mass=Psi.T @ (ops.mass @ Psi),
        A=[Psi.T @ (Aq @ Psi) for Aq in ops.A],
        B=Psi.T @ Xi,  # detailed duality matrix is the identity
        G=Xi.T @ ops.G,
        U0=XPsi.T @ ops.initial(),
        xi_gram=Xi.T @ Xi,
        dt=ops.dt,
        L=ops.L,
        theta=ops.theta,
        american=ops.spec.american,
        config_hash=ops.config_hash,
        mass_fd=Psi.T @ ops.mass_fd.toarray(),
        A_fd=[Psi.T @ Aq.toarray() for Aq in ops.A_fd],
        neumann=Psi.T @ ops.neumann,
        operators=ops,
    )
    if not ops.time_dependent_lift:
        g = ops.lift(None, 0)
        red._static_load = [Aq @ g for Aq in red.A_fd]
    return red


@dataclass
class ReducedTrajectory:
    """Reduced coefficients ``U[n]`` (n = 0..L) and ``Lam[n-1]`` (n = 1..L)."""

    U: np.ndarray
    Lam: np.ndarray
    params: ModelParams
    iterations: list[int] = field(default_factory=list)
    runtime: float = 0.0

    @property
    def L(self) -> int:
        return self.U.shape[0] - 1

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            nv, nw = self.U.shape[1], self.Lam.shape[1] if self.Lam.size else 0
            w.writerow(["step"] + [f"u{i}" for i in range(nv)] + [f"lam{j}" for j in range(nw)])
            for n in range(self.L + 1):
                lam = self.Lam[n - 1] if (n > 0 and nw) else np.zeros(nw)
                w.writerow([n] + [repr(float(v)) for v in self.U[n]] + [repr(float(v)) for v in lam])


def reduced_step(K: np.ndarray, B: np.ndarray, rhs: np.ndarray, G: np.ndarray, U0: np.ndarray,
                 Lam0: np.ndarray, norm_lam, c: float = 1.0, eps: float = 1e-10,
                 max_iter: int = MAX_ITER) -> PDASResult:
    """One reduced obstacle step by PDAS with dense saddle-point solves."""
    nv = K.shape[0]

    def solve_active(active):
        idx = np.flatnonzero(active)
        Ba = B[:, idx]
        k = idx.size
        S = np.zeros((nv + k, nv + k))
        S[:nv, :nv] = K
        S[:nv, nv:] = -Ba
        S[nv:, :nv] = Ba.T
        b = np.concatenate([rhs, G[idx]])
        try:
            sol = np.linalg.solve(S, b)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"singular reduced saddle-point system with {k} active constraints "
                              "(reduced inf-sup lost?)") from exc
        Lam = np.zeros(B.shape[1])
        Lam[idx] = sol[nv:]
        return sol[:nv], Lam

    return pdas(solve_active, lambda U: B.T @ U - G, U0, Lam0,
                lambda d: float(np.linalg.norm(d)), norm_lam, c=c, eps=eps, max_iter=max_iter)


def solve_reduced(red: ReducedOperators, params: ModelParams, eps: float = 1e-10, c: float = 1.0,
                  max_iter: int = MAX_ITER) -> ReducedTrajectory:
    """Reduced trajectory for ``params``: theta-scheme or warm-started PDAS per step."""
    t0 = time.perf_counter()
    if eps <= 0:
        raise ValueError("eps must be positive")
    dt, th = red.dt, red.theta
    A = red.system_matrix(params)
    K = red.mass / dt + th * A
    R = red.mass / dt - (1 - th) * A
    L = red.L
    U = np.empty((L + 1, red.N_V))
    # The reduced Gram matrix is the identity, so U^0 = Psi^T X u^0.
    U[0] = red.U0
    iters: list[int] = []
    if not red.american or red.N_W == 0:
        try:
            fac = lu_factor(K, check_finite=True)
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise SolverError(f"singular reduced theta-scheme matrix for {params}") from exc
        for n in range(L):
            U[n + 1] = lu_solve(fac, R @ U[n] + red.load(params, n))
        Lam = np.zeros((L, red.N_W)) if red.american else np.zeros((0, red.N_W))
        return ReducedTrajectory(U, Lam, params, iters, time.perf_counter() - t0)

    Lam = np.empty((L, red.N_W))
    lam_prev = np.zeros(red.N_W)
    for n in range(L):
        rhs = R @ U[n] + red.load(params, n)
        try:
            res = reduced_step(K, red.B, rhs, red.G, U[n], lam_prev, red.norm_w, c, eps, max_iter)
        except PDASConvergenceError as exc:
            raise PDASConvergenceError(n + 1, params, exc.active_size, max_iter) from None
        U[n + 1], Lam[n] = res.U, res.Lam
        lam_prev = res.Lam
        iters.append(res.iterations)
    return ReducedTrajectory(U, Lam, params, iters, time.perf_counter() - t0)


def reconstruct(red: ReducedOperators, traj: ReducedTrajectory, n: int, with_lift: bool = True) -> np.ndarray:
    """Nodal field ``w_N^n = Psi U_N^n + u_g^n`` on all mesh nodes (or free part only)."""
    ops = red.operators
    free_vals = red.Psi @ traj.U[n]
    if not with_lift:
        return free_vals
    out = ops.full_lift(traj.params, n)
    out[ops.mesh.free] += free_vals
    return out


def reconstruct_multiplier(red: ReducedOperators, traj: ReducedTrajectory, n: int) -> np.ndarray:
    """Detailed multiplier coefficients ``Xi Lam_N^n`` for ``n = 1..L``."""
    if not 1 <= n <= traj.L:
        raise ValueError(f"multiplier steps run from 1 to {traj.L}")
    if red.N_W == 0 or traj.Lam.size == 0:
        return np.zeros(red.Psi.shape[0])
    return red.Xi @ traj.Lam[n - 1]
