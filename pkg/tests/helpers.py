"""Shared builders for the test suite."""

import itertools

import numpy as np

from rbprice.construction import ErrorMeasure, ReducedBasis, TrainingConfig, pod_angle_greedy
from rbprice.fem import build_operators
from rbprice.market_models import BS_BOX, Model, OptionSpec, OptionType


def full_basis(ops, with_dual=True):
    """X-orthonormal basis of the whole free space and the identity cone generators."""
    L = np.linalg.cholesky(ops.X.toarray())
    Psi = np.linalg.inv(L).T
    Xi = np.eye(ops.n_free) if (with_dual and ops.spec.american) else np.zeros((ops.n_free, 0))
    return ReducedBasis(Psi, Xi, np.zeros(Psi.shape[1], bool), [], ops.config_hash)


def crafted_operators():
    """Black-Scholes put on 5 free nodes whose multipliers live in a 3-generator cone."""
    spec = OptionSpec(OptionType.AMERICAN_PUT, 60.0, 1.0, Model.BLACK_SCHOLES)
    return build_operators(spec, 7, L=20)


def train_small(ops, N_max, measure=ErrorMeasure.L2_TRUE, grid=2, supremizers=True):
    cfg = TrainingConfig(BS_BOX.grid(grid), N_max, measure, supremizers=supremizers)
    return pod_angle_greedy(cfg, ops, progress=lambda msg: None)


def enumerate_lcp(K, rhs, G):
    """All 2^n active sets; returns the ones whose solution is feasible."""
    n = rhs.size
    found = []
    for bits in itertools.product([False, True], repeat=n):
        act = np.array(bits)
        U = np.where(act, G, 0.0)
        ina = ~act
        if ina.any():
            U[ina] = np.linalg.solve(K[np.ix_(ina, ina)], rhs[ina] - K[np.ix_(ina, act)] @ G[act])
        Lam = np.where(act, K @ U - rhs, 0.0)
        if np.all(U - G >= -1e-12) and np.all(Lam >= -1e-12):
            found.append((act, U, Lam))
    return found


def random_obstacle_instance(rng):
    # Perturbed 1D stiffness plus mass: a P-matrix, so the LCP solution is unique.
    K = np.diag([2.0, 2.0, 2.0]) - np.diag([1.0, 1.0], 1) - np.diag([1.0, 1.0], -1)
    K = K + 0.3 * np.eye(3) + 0.2 * rng.uniform(-1, 1, (3, 3))
    K += np.diag(np.abs(K).sum(1) - np.abs(np.diag(K)))  # restore strict diagonal dominance
    rhs = rng.uniform(-1, 1, 3)
    G = rng.uniform(-0.5, 0.5, 3)
    return K, rhs, G
