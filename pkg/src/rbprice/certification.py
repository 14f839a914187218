"""A posteriori certification of reduced American solutions.

The estimator bounds the space-time energy error of the reduced primal
solution through two computable residual quantities per time step: the dual
norm of the equality residual, ``delta_r``, and the part of the inequality
residual that cannot be discarded by a cone projector, ``delta_s``.  The
stability constants enter as in the standard Galerkin-in-time energy argument.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

from .detailed import Trajectory
from .fem import DiscreteOperators
from .market_models import ModelParams, affine_theta
from .online import ReducedOperators, ReducedTrajectory

log = logging.getLogger(__name__)

# Below this many free nodes the generalized eigenproblems are solved densely.
DENSE_LIMIT = 1500


class CertificationError(RuntimeError):
    """The estimator cannot be evaluated (e.g. non-coercive parameter)."""


@dataclass(frozen=True)
class StabilityConstants:
    alpha_a: float
    gamma_a: float
    beta: float
    C_omega: float = 1.0


@dataclass
class ErrorReport:
    """Per-step residual traces, cumulative bound and optional true errors.

    ``apost_partial[n]`` and ``true_partial[n]`` hold the two sides of the
    energy estimate accumulated through time step ``n`` (index 0 is the
    initial-data term alone).
    """

    params: ModelParams
    delta_r: np.ndarray
    delta_s: np.ndarray
    constants: StabilityConstants
    init_term: float
    apost_partial: np.ndarray
    true_partial: np.ndarray | None = None
    l2_true: float | None = None
    extras: dict = field(default_factory=dict)

    @property
    def apost(self) -> float:
        return float(self.apost_partial[-1])

    @property
    def energy_true(self) -> float | None:
        return None if self.true_partial is None else float(self.true_partial[-1])

    def effectivity(self, n: int | None = None) -> float:
        if self.true_partial is None:
            raise ValueError("no true errors attached")
        n = len(self.apost_partial) - 1 if n is None else n
        return effectivity(self.apost_partial[n], self.true_partial[n])


# ---------------------------------------------------------------------------
# stability constants


def inf_sup_constant(operators: DiscreteOperators) -> float:
    """Detailed inf-sup constant for the identity duality matrix and Euclidean W.

    ``sup_v eta^T v / ||v||_X = sqrt(eta^T X^{-1} eta)``; its infimum over unit
    ``eta`` is ``lambda_min(X^{-1})^{1/2} = lambda_max(X)^{-1/2}``.
    """
    key = "beta"
    if key not in operators._cache:
        X = operators.X
        if X.shape[0] <= DENSE_LIMIT:
            lmax = sla.eigvalsh(X.toarray(), subset_by_index=[X.shape[0] - 1, X.shape[0] - 1])[0]
        else:
            lmax = eigsh(X, k=1, which="LA", tol=1e-10, return_eigenvectors=False)[0]
        operators._cache[key] = 1.0 / np.sqrt(lmax)
    return operators._cache[key]


def _dense_constants(A: np.ndarray, X: np.ndarray) -> tuple[float, float]:
    Lc = np.linalg.cholesky(X)
    C = sla.solve_triangular(Lc, sla.solve_triangular(Lc, A, lower=True).T, lower=True).T
    gamma = float(np.linalg.norm(C, 2))
    alpha = float(np.linalg.eigvalsh(0.5 * (C + C.T))[0])
    return alpha, gamma


def _sparse_constants(A: sp.csr_matrix, operators: DiscreteOperators, tol: float) -> tuple[float, float]:
    X = operators.X
    lu = operators.x_factor
    n = X.shape[0]
    # gamma^2 = lambda_max(A^T X^{-1} A, X)
    AtXA = LinearOperator((n, n), matvec=lambda u: A.T @ lu.solve(A @ u), dtype=float)
    # The top of this spectrum is tightly clustered; a wide Krylov space keeps
    # ARPACK from stalling.
    gamma2 = eigsh(AtXA, k=1, M=X, Minv=LinearOperator((n, n), matvec=lu.solve, dtype=float),
                   which="LA", tol=tol, ncv=min(n - 1, 64), return_eigenvectors=False)[0]
    gamma = float(np.sqrt(gamma2))
    # Shift below the spectrum (|lambda| <= gamma) so the nearest eigenvalue is the smallest.
    Asym = (0.5 * (A + A.T)).tocsc()
    sigma = -1.05 * gamma - 1e-3
    alpha = eigsh(Asym, k=1, M=X.tocsc(), sigma=sigma, which="LM", tol=tol, return_eigenvectors=False)[0]
    return float(alpha), gamma


def compute_constants(operators: DiscreteOperators, params: ModelParams, tol: float = 1e-8) -> StabilityConstants:
    """Coercivity and continuity constants of ``a(.,.;mu)`` in the V-norm, plus beta.

    Results are cached on the operators per parameter vector.
    """
    key = ("constants", tuple(params.vector))
    cache = operators._cache
    if key in cache:
        return cache[key]
    A = operators.system_matrix(params)
    try:
        if A.shape[0] <= DENSE_LIMIT:
            alpha, gamma = _dense_constants(A.toarray(), operators.X.toarray())
        else:
            alpha, gamma = _sparse_constants(A, operators, tol)
    except ArpackNoConvergence as exc:
        raise CertificationError(f"eigensolver did not converge for {params}") from exc
    out = StabilityConstants(alpha, gamma, inf_sup_constant(operators))
    cache[key] = out
    return out


# ---------------------------------------------------------------------------
# residuals


class Certifier:
    """Residual evaluation for one reduced basis; caches ``M Psi`` and ``A_q Psi``."""

    def __init__(self, red: ReducedOperators):
        ops = red.operators
        self.red = red
        self.ops = ops
        self.MPsi = ops.mass @ red.Psi
        self.APsi = [Aq @ red.Psi for Aq in ops.A]

    def equality_residual(self, params: ModelParams, traj: ReducedTrajectory, n: int) -> np.ndarray:
        """Coefficients ``R_i = r^n(phi_i)`` of the equality residual, ``n = 0..L-1``.

        ``r^n(v) = f^n(v) + b(lambda_N, v) - <(u_N^{n+1} - u_N^n)/dt, v> - a(u_N^theta, v)``;
        the sign is irrelevant for the dual norm.
        """
        red, ops = self.red, self.ops
        th = red.theta
        U1, U0 = traj.U[n + 1], traj.U[n]
        Um = th * U1 + (1 - th) * U0
        R = ops.load(params, n) - self.MPsi @ ((U1 - U0) / red.dt)
        for t, AP in zip(affine_theta(params), self.APsi):
            R -= t * (AP @ Um)
        if red.N_W and traj.Lam.size:
            R += red.Xi @ traj.Lam[n]
        return R

    def equality_residual_norm(self, params, traj, n) -> float:
        return self.ops.dual_norm(self.equality_residual(params, traj, n))

    def inequality_residual(self, traj: ReducedTrajectory, n: int) -> tuple[np.ndarray, np.ndarray, float]:
        """``(eta_s, pi(eta_s), delta_s)`` for step ``n``; see :func:`cone_projection`."""
        red = self.red
        eta = red.Psi @ traj.U[n + 1] - self.ops.G
        lam = red.Xi @ traj.Lam[n] if red.N_W else np.zeros_like(eta)
        pi = cone_projection(eta, lam)
        return eta, pi, float(np.linalg.norm(eta - pi))

    def deltas(self, params, traj) -> tuple[np.ndarray, np.ndarray]:
        L = traj.L
        dr = np.array([self.equality_residual_norm(params, traj, n) for n in range(L)])
        if self.red.american:
            ds = np.array([self.inequality_residual(traj, n)[2] for n in range(L)])
        else:
            ds = np.zeros(L)
        return dr, ds


def cone_projection(eta: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Projector onto the detailed cone with ``<pi(eta), lam>_W = 0``.

    Keeps the positive part of ``eta`` where the reduced multiplier vanishes
    and zeros it elsewhere, so the supports of ``pi(eta)`` and ``lam`` are
    disjoint.
    """
    eta = np.asarray(eta, float)
    return np.where(np.asarray(lam) == 0.0, np.maximum(eta, 0.0), 0.0)


def inequality_residual(eta: np.ndarray, lam: np.ndarray) -> tuple[np.ndarray, float]:
    """``(pi(eta), delta_s)`` for a residual representer and a reduced multiplier."""
    pi = cone_projection(eta, lam)
    return pi, float(np.linalg.norm(eta - pi))


# ---------------------------------------------------------------------------
# bounds


def energy_terms(delta_r, delta_s, constants: StabilityConstants, dt: float) -> np.ndarray:
    """Per-step contributions of the energy bound."""
    a, g, b, C = constants.alpha_a, constants.gamma_a, constants.beta, constants.C_omega
    if not a > 0:
        raise CertificationError(f"coercivity constant alpha_a = {a:.3e} is not positive; bound undefined")
    dr = np.asarray(delta_r, float)
    ds = np.asarray(delta_s, float)
    return 0.5 * (C * ds / b) ** 2 + dt * ds * dr / b + dt / (2 * a) * (dr + g * ds / b) ** 2


def energy_bound(delta_r, delta_s, constants: StabilityConstants, dt: float, e0_l2: float,
                 partial: bool = False):
    """Energy error bound; with ``partial`` the sums through each step ``0..L``."""
    terms = energy_terms(delta_r, delta_s, constants, dt)
    init = 0.5 * e0_l2**2
    sums = init + np.concatenate([[0.0], np.cumsum(terms)])
    return sums if partial else float(sums[-1])


def true_errors(red: ReducedOperators, traj: ReducedTrajectory, detailed: Trajectory) -> tuple[np.ndarray, np.ndarray]:
    """Per-step ``||e_u^n||_V`` and ``||e_u^n||_{L2}``, n = 0..L."""
    ops = red.operators
    E = traj.U @ red.Psi.T - detailed.U
    XE = (ops.X @ E.T).T
    ME = (ops.mass @ E.T).T
    v = np.sqrt(np.maximum(np.einsum("ij,ij->i", E, XE), 0.0))
    l2 = np.sqrt(np.maximum(np.einsum("ij,ij->i", E, ME), 0.0))
    return v, l2


def l2_true_measure(err_v: np.ndarray, dt: float) -> float:
    return float(dt * np.sum(err_v**2))


def energy_true_partial(err_v: np.ndarray, err_l2: np.ndarray, alpha_a: float, dt: float) -> np.ndarray:
    """``1/2 ||e^n||_{L2}^2 + alpha/2 dt sum_{m<=n} ||e^m||_V^2`` for n = 0..L."""
    return 0.5 * err_l2**2 + 0.5 * alpha_a * dt * np.cumsum(err_v**2)


def dual_error_bound(delta_r: float, err_l2_increment: float, err_v_next: float, constants: StabilityConstants,
                     dt: float) -> float:
    """Bound on ``||e_lambda^{n+1}||_W`` from the primal error."""
    c = constants
    return (c.C_omega / dt * err_l2_increment + c.gamma_a * err_v_next + delta_r) / c.beta


def effectivity(apost: float, true: float) -> float:
    """``sqrt(apost / true)``; ``inf`` when the true error vanishes (reported as exact)."""
    if true <= 0:
        return float("inf")
    return float(np.sqrt(apost / true))


def certify(certifier: Certifier, params: ModelParams, traj: ReducedTrajectory,
            detailed: Trajectory | None = None, constants: StabilityConstants | None = None) -> ErrorReport:
    """Full error report for one reduced trajectory."""
    red, ops = certifier.red, certifier.ops
    constants = constants or compute_constants(ops, params)
    dr, ds = certifier.deltas(params, traj)
    e0 = red.Psi @ traj.U[0] - ops.initial()
    e0_l2 = ops.norm_l2(e0)
    apost = energy_bound(dr, ds, constants, red.dt, e0_l2, partial=True)
    rep = ErrorReport(params, dr, ds, constants, 0.5 * e0_l2**2, apost)
    if detailed is not None:
        ev, el2 = true_errors(red, traj, detailed)
        rep.true_partial = energy_true_partial(ev, el2, constants.alpha_a, red.dt)
        rep.l2_true = l2_true_measure(ev, red.dt)
        rep.extras["err_v"] = ev
        rep.extras["err_l2"] = el2
    return rep
