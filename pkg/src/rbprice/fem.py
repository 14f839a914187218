"""P1 finite elements for the Black-Scholes (1D) and Heston (2D) problems.

All matrices are assembled on the full node set and then split into
free/free and free/Dirichlet blocks.  The dual (Lagrange multiplier) basis is
biorthogonal to the nodal basis, so the duality pairing is the identity on
the free nodes and never stored.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .market_models import (
    HestonParams,
    Model,
    ModelParams,
    OptionSpec,
    OptionType,
    affine_theta,
    heston_boundary_values,
    payoff,
)

# Heston boundary segments: 1: v=v_min, 2: v=v_max, 3: x=x_min, 4: x=x_max.
# Black-Scholes: 1: S=S_min, 2: S=S_max.
INTERIOR = 0


@dataclass
class Mesh:
    """Uniform simplicial mesh.

    ``coords`` has one row per node: ``(S,)`` in 1D, ``(v, x)`` in 2D.  2D
    nodes are numbered with ``x`` running fastest.  ``segments[k]`` flags the
    nodes on the closed boundary segment ``k``; ``tags`` holds one primary tag
    per node (0 for interior nodes).
    """

    dim: int
    coords: np.ndarray
    elements: np.ndarray
    segments: dict[int, np.ndarray]
    tags: np.ndarray
    dirichlet: np.ndarray
    shape: tuple[int, ...]

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @cached_property
    def free(self) -> np.ndarray:
        return np.flatnonzero(~self.dirichlet)

    @cached_property
    def fixed(self) -> np.ndarray:
        return np.flatnonzero(self.dirichlet)

    @cached_property
    def free_index(self) -> np.ndarray:
        """Map node -> position in the free vector (-1 for Dirichlet nodes)."""
        idx = -np.ones(self.n_nodes, dtype=int)
        idx[self.free] = np.arange(self.free.size)
        return idx


def _dirichlet_segments(spec: OptionSpec) -> tuple[int, ...]:
    if spec.model is Model.BLACK_SCHOLES:
        return (1, 2)
    if spec.option_type is OptionType.EUROPEAN_CALL:
        return (1, 2, 3)
    return (1, 3, 4)


def build_mesh(spec: OptionSpec, resolution) -> Mesh:
    """Uniform mesh of the spec's computational domain.

    ``resolution`` is the node count ``H`` (1D) or ``(n_v, n_x)`` (2D).
    Each grid cell is split into two triangles along the diagonal from its
    lower-left to its upper-right corner.
    """
    dom = spec.domain
    if spec.model is Model.BLACK_SCHOLES:
        H = int(resolution if np.isscalar(resolution) else resolution[0])
        if H < 2:
            raise ValueError("need at least 2 nodes")
        s = np.linspace(dom.s_min, dom.s_max, H)
        elements = np.stack([np.arange(H - 1), np.arange(1, H)], axis=1)
        seg = {1: np.zeros(H, bool), 2: np.zeros(H, bool)}
        seg[1][0] = True
        seg[2][-1] = True
        tags = np.zeros(H, dtype=int)
        tags[0], tags[-1] = 1, 2
        coords = s[:, None]
        shape = (H,)
    else:
        n_v, n_x = (int(r) for r in resolution)
        if n_v < 2 or n_x < 2:
            raise ValueError("need at least 2 nodes per dimension")
        v = np.linspace(dom.v_min, dom.v_max, n_v)
        x = np.linspace(dom.x_min, dom.x_max, n_x)
        V, X = np.meshgrid(v, x, indexing="ij")
        coords = np.stack([V.ravel(), X.ravel()], axis=1)
        node = np.arange(n_v * n_x).reshape(n_v, n_x)
        ll = node[:-1, :-1].ravel()
        lr = node[:-1, 1:].ravel()
        ul = node[1:, :-1].ravel()
        ur = node[1:, 1:].ravel()
        elements = np.concatenate([np.stack([ll, lr, ur], 1), np.stack([ll, ur, ul], 1)])
        iv, ix = np.divmod(np.arange(n_v * n_x), n_x)
        seg = {1: iv == 0, 2: iv == n_v - 1, 3: ix == 0, 4: ix == n_x - 1}
        tags = np.zeros(n_v * n_x, dtype=int)
        # Corner nodes take the tag of a Dirichlet segment through them.
        order = (2, 4, 3, 1) if spec.option_type is OptionType.AMERICAN_PUT else (4, 3, 2, 1)
        for k in order:
            tags[seg[k]] = k
        shape = (n_v, n_x)
    dirichlet = np.zeros(coords.shape[0], bool)
    for k in _dirichlet_segments(spec):
        dirichlet |= seg[k]
    return Mesh(coords.shape[1], coords, elements, seg, tags, dirichlet, shape)


# ---------------------------------------------------------------------------
# element integration

_G1 = 0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)


@dataclass
class _Quadrature:
    points: np.ndarray   # (E, nq, dim) physical points
    weights: np.ndarray  # (E, nq) weights including the element measure
    values: np.ndarray   # (nq, nloc) basis values
    grads: np.ndarray    # (E, nloc, dim) constant basis gradients


def _quadrature(mesh: Mesh) -> _Quadrature:
    P = mesh.coords[mesh.elements]  # (E, nloc, dim)
    if mesh.dim == 1:
        h = P[:, 1, 0] - P[:, 0, 0]
        lam = np.array([[1 - g, g] for g in _G1])
        grads = np.stack([-1.0 / h, 1.0 / h], axis=1)[:, :, None]
        weights = np.outer(h, [0.5, 0.5])
    else:
        d1 = P[:, 1] - P[:, 0]
        d2 = P[:, 2] - P[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        area = 0.5 * np.abs(det)
        # gradients of barycentric coordinates
        inv = np.empty((mesh.n_elements, 2, 2))
        inv[:, 0, 0] = d2[:, 1] / det
        inv[:, 0, 1] = -d2[:, 0] / det
        inv[:, 1, 0] = -d1[:, 1] / det
        inv[:, 1, 1] = d1[:, 0] / det
        g1, g2 = inv[:, 0], inv[:, 1]
        grads = np.stack([-g1 - g2, g1, g2], axis=1)
        lam = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
        weights = np.outer(area, [1 / 3, 1 / 3, 1 / 3])
    points = np.einsum("qa,ead->eqd", lam, P)
    return _Quadrature(points, weights, lam, grads)


def _integrate(mesh: Mesh, quad: _Quadrature, coef, test, trial) -> sp.csr_matrix:
    """Matrix ``M[i, j] = int coef * D_test(phi_i) * D_trial(phi_j)``.

    ``test``/``trial`` are ``None`` for the basis value or an axis index for
    a partial derivative.  ``coef`` maps (E, nq, dim) points to (E, nq).
    """
    w = quad.weights if coef is None else quad.weights * coef(quad.points)
    E, nq = w.shape

    def factor(op):
        if op is None:
            return np.broadcast_to(quad.values, (E,) + quad.values.shape)
        return np.broadcast_to(quad.grads[:, None, :, op], (E, nq, quad.grads.shape[1]))

    local = np.einsum("eq,eqa,eqb->eab", w, factor(test), factor(trial))
    el = mesh.elements
    nloc = el.shape[1]
    rows = np.repeat(el, nloc, axis=1).ravel()
    cols = np.tile(el, (1, nloc)).ravel()
    n = mesh.n_nodes
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def _coord(axis, power=1):
    return lambda pts: pts[..., axis] ** power


def assemble_mass(mesh: Mesh) -> sp.csr_matrix:
    return _integrate(mesh, _quadrature(mesh), None, None, None)


def assemble_gram(mesh: Mesh, spec: OptionSpec) -> sp.csr_matrix:
    """V inner product on all nodes.

    Heston: ``int u v + grad u . grad v``.  Black-Scholes: the weighted
    ``int u v + S^2 u' v'``.
    """
    q = _quadrature(mesh)
    X = _integrate(mesh, q, None, None, None)
    if spec.model is Model.BLACK_SCHOLES:
        X = X + _integrate(mesh, q, _coord(0, 2), 0, 0)
    else:
        X = X + _integrate(mesh, q, None, 0, 0) + _integrate(mesh, q, None, 1, 1)
    return X.tocsr()


def assemble_affine_components(mesh: Mesh, spec: OptionSpec) -> list[sp.csr_matrix]:
    """Parameter-independent matrices ``A_q`` with ``A(mu) = sum theta_q(mu) A_q``.

    Rows index test functions, columns trial functions.  Black-Scholes is the
    S-variable form ``1/2 sigma^2 (S^2 w', phi') + (sigma^2 - (r - q)) (S w', phi)
    + r (w, phi)``; Heston expands the diffusion matrix and drift vector of the
    log-transformed equation into the monomials of :func:`affine_theta`.
    """
    q = _quadrature(mesh)
    I = lambda coef, t, s: _integrate(mesh, q, coef, t, s)  # noqa: E731
    mass = I(None, None, None)
    if spec.model is Model.BLACK_SCHOLES:
        stiff_s2 = I(_coord(0, 2), 0, 0)
        conv_s = I(_coord(0), None, 0)
        return [(0.5 * stiff_s2 + conv_s).tocsr(), (-conv_s).tocsr(), mass]
    V, X = 0, 1
    v = _coord(V)
    half_v = lambda p: 0.5 * p[..., V]  # noqa: E731
    one = I(half_v, X, X) + I(half_v, None, X)
    xi2 = I(half_v, V, V) + 0.5 * I(None, None, V)
    rhoxi = I(half_v, X, V) + I(half_v, V, X) + 0.5 * I(None, None, X)
    kappa = I(v, None, V)
    kappa_gamma = -I(None, None, V)
    r = mass - I(None, None, X)
    return [m.tocsr() for m in (one, xi2, rhoxi, kappa, kappa_gamma, r)]


def assemble_direct(mesh: Mesh, spec: OptionSpec, params: ModelParams) -> sp.csr_matrix:
    """Bilinear form matrix assembled directly from the PDE coefficients at ``params``.

    Independent of :func:`assemble_affine_components`; used to validate it.
    """
    q = _quadrature(mesh)
    pts, w, vals, grads = q.points, q.weights, q.values, q.grads
    E, nq = w.shape
    if spec.model is Model.BLACK_SCHOLES:
        s = pts[..., 0]
        sig, qd, r = params.sigma, params.q, params.r
        diff = 0.5 * sig**2 * s**2
        drift = (sig**2 - (r - qd)) * s
        g = grads[:, :, 0]
        local = (
            np.einsum("eq,ea,eb->eab", w * diff, g, g)
            + np.einsum("eq,qa,eb->eab", w * drift, vals, g)
            + np.einsum("eq,qa,qb->eab", w * r, vals, vals)
        )
    else:
        v = pts[..., 0]
        p = params
        Amat = np.zeros((E, nq, 2, 2))
        Amat[..., 0, 0] = 0.5 * v * p.xi**2
        Amat[..., 0, 1] = Amat[..., 1, 0] = 0.5 * v * p.rho * p.xi
        Amat[..., 1, 1] = 0.5 * v
        bvec = np.zeros((E, nq, 2))
        bvec[..., 0] = -p.kappa * (p.gamma - v) + 0.5 * p.xi**2
        bvec[..., 1] = -p.r + 0.5 * v + 0.5 * p.xi * p.rho
        local = (
            np.einsum("eq,eqkl,ebl,eak->eab", w, Amat, grads, grads)
            + np.einsum("eq,eqk,ebk,qa->eab", w, bvec, grads, vals)
            + p.r * np.einsum("eq,qa,qb->eab", w, vals, vals)
        )
    el = mesh.elements
    nloc = el.shape[1]
    rows = np.repeat(el, nloc, axis=1).ravel()
    cols = np.tile(el, (1, nloc)).ravel()
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes))


def assemble_neumann_load(mesh: Mesh, spec: OptionSpec) -> np.ndarray:
    """Conormal flux load of the European call on x = x_max.

    ``int_{Gamma_4} 1/2 v K exp(x_max) phi_i dv`` (parameter independent).
    """
    out = np.zeros(mesh.n_nodes)
    if spec.model is not Model.HESTON or spec.option_type is not OptionType.EUROPEAN_CALL:
        return out
    nodes = np.flatnonzero(mesh.segments[4])
    nodes = nodes[np.argsort(mesh.coords[nodes, 0])]
    v = mesh.coords[nodes, 0]
    scale = 0.5 * spec.strike * np.exp(spec.domain.x_max)
    for a, b, va, vb in zip(nodes[:-1], nodes[1:], v[:-1], v[1:]):
        h = vb - va
        for g in _G1:
            vq = va + g * h
            out[a] += 0.5 * h * scale * vq * (1 - g)
            out[b] += 0.5 * h * scale * vq * g
    return out


# ---------------------------------------------------------------------------
# operators and time-dependent data


@dataclass
class DiscreteOperators:
    """Assembled detailed operators restricted to free/Dirichlet blocks.

    The duality matrix is the identity on the free nodes (biorthogonal dual
    basis), so constraint data are nodal values.
    """

    spec: OptionSpec
    mesh: Mesh
    resolution: tuple[int, ...]
    L: int
    theta: float
    X: sp.csr_matrix
    mass: sp.csr_matrix
    A: list[sp.csr_matrix]
    mass_fd: sp.csr_matrix
    A_fd: list[sp.csr_matrix]
    neumann: np.ndarray
    w0: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def dt(self) -> float:
        return self.spec.maturity / self.L

    @property
    def n_free(self) -> int:
        return self.mesh.free.size

    @property
    def model(self) -> Model:
        return self.spec.model

    def B(self) -> sp.csr_matrix:
        """Duality matrix ``b(chi_j, phi_i)`` on the free set."""
        return sp.identity(self.n_free, format="csr")

    def system_matrix(self, params: ModelParams) -> sp.csr_matrix:
        theta = affine_theta(params)
        return sum((t * Aq for t, Aq in zip(theta, self.A)), sp.csr_matrix(self.X.shape)).tocsr()

    def system_matrix_fd(self, params: ModelParams) -> sp.csr_matrix:
        theta = affine_theta(params)
        return sum((t * Aq for t, Aq in zip(theta, self.A_fd)), sp.csr_matrix(self.mass_fd.shape)).tocsr()

    @cached_property
    def x_factor(self):
        return splu(self.X.tocsc())

    @cached_property
    def time_dependent_lift(self) -> bool:
        return self.spec.option_type is OptionType.EUROPEAN_CALL

    def lift(self, params: ModelParams, n: int) -> np.ndarray:
        """Dirichlet values ``u_g^n`` on the fixed nodes (zero on free nodes)."""
        if not 0 <= n <= self.L:
            raise ValueError(f"time index {n} outside [0, {self.L}]")
        mesh, spec = self.mesh, self.spec
        fixed = mesh.fixed
        if spec.option_type is OptionType.AMERICAN_PUT:
            c = mesh.coords[fixed, 0] if spec.model is Model.BLACK_SCHOLES else mesh.coords[fixed, 1]
            return payoff(spec, c)
        key = ("lift", tuple(params.vector), n)
        if key not in self._cache:
            self._cache[key] = european_lift(params, spec, mesh, n * self.dt)
        return self._cache[key]

    def full_lift(self, params: ModelParams, n: int) -> np.ndarray:
        out = np.zeros(self.mesh.n_nodes)
        out[self.mesh.fixed] = self.lift(params, n)
        return out

    def load(self, params: ModelParams, n: int) -> np.ndarray:
        """Free-node load vector ``F^n``, ``n = 0..L-1``."""
        g0, g1 = self.lift(params, n), self.lift(params, n + 1)
        th = self.theta
        F = -(self.mass_fd @ ((g1 - g0) / self.dt))
        F -= self.system_matrix_fd(params) @ (th * g1 + (1 - th) * g0)
        return F + self.neumann

    @cached_property
    def G(self) -> np.ndarray:
        """Constraint data ``(w^0 - u_g)`` at the free nodes (lift is zero there)."""
        return self.w0[self.mesh.free].copy()

    def initial(self) -> np.ndarray:
        """Free-node interpolant of ``w^0 - u_g^0``."""
        return self.w0[self.mesh.free].copy()

    def norm_x(self, u) -> float:
        return float(np.sqrt(max(u @ (self.X @ u), 0.0)))

    def norm_l2(self, u) -> float:
        return float(np.sqrt(max(u @ (self.mass @ u), 0.0)))

    def dual_norm(self, R) -> float:
        """``||R||_{V'} = sqrt(R^T X^{-1} R)``."""
        return float(np.sqrt(max(R @ self.x_factor.solve(R), 0.0)))

    @cached_property
    def config_hash(self) -> str:
        h = hashlib.sha256()
        s = self.spec
        h.update(repr((s.model.value, s.option_type.value, s.strike, s.maturity, s.domain,
                       tuple(self.resolution), self.L, self.theta)).encode())
        for m in [self.X, self.mass, *self.A]:
            h.update(m.data.tobytes())
            h.update(m.indices.tobytes())
        return h.hexdigest()[:16]


def european_lift(params: HestonParams, spec: OptionSpec, mesh: Mesh, t: float) -> np.ndarray:
    """Dirichlet values of the European Heston call at time ``t`` on ``mesh.fixed``."""
    fixed = mesh.fixed
    v, x = mesh.coords[fixed, 0], mesh.coords[fixed, 1]
    out = np.empty(fixed.size)
    done = np.zeros(fixed.size, bool)
    # Gamma_1 and Gamma_2 first so corners on x_min take their values.
    for seg in (1, 2, 3):
        sel = mesh.segments[seg][fixed] & ~done
        out[sel] = heston_boundary_values(params, spec, t, v[sel], x[sel], seg)
        done |= sel
    return out


def default_resolution(spec: OptionSpec) -> tuple[int, ...]:
    return (200,) if spec.model is Model.BLACK_SCHOLES else (49, 97)


def build_operators(spec: OptionSpec, resolution=None, L: int = 20, theta: float | None = None) -> DiscreteOperators:
    """Assemble everything the detailed and reduced solvers need."""
    if resolution is None:
        resolution = default_resolution(spec)
    resolution = (int(resolution),) if np.isscalar(resolution) else tuple(int(r) for r in resolution)
    if theta is None:
        theta = 1.0 if spec.american else 0.5
    if not 0 < theta <= 1:
        raise ValueError(f"theta must lie in (0, 1], got {theta}")
    mesh = build_mesh(spec, resolution if spec.model is Model.HESTON else resolution[0])
    free, fixed = mesh.free, mesh.fixed
    X = assemble_gram(mesh, spec)
    M = assemble_mass(mesh)
    comps = assemble_affine_components(mesh, spec)
    coord = mesh.coords[:, 0] if spec.model is Model.BLACK_SCHOLES else mesh.coords[:, 1]
    w0 = payoff(spec, coord)

    def ff(m):
        return m[free][:, free].tocsr()

    def fd(m):
        return m[free][:, fixed].tocsr()

    return DiscreteOperators(
        spec=spec,
        mesh=mesh,
        resolution=resolution,
        L=int(L),
        theta=float(theta),
        X=ff(X),
        mass=ff(M),
        A=[ff(c) for c in comps],
        mass_fd=fd(M),
        A_fd=[fd(c) for c in comps],
        neumann=assemble_neumann_load(mesh, spec)[free],
        w0=np.asarray(w0, dtype=float),
    )
