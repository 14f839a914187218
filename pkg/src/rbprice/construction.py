"""Offline training of the primal basis and the dual cone generators.

The greedy loop alternates between picking the worst-approximated training
parameter and enriching both spaces with information from its trajectory:

* primal: the dominant POD mode of the trajectory's deviation from the current
  space, plus the supremizer of the new dual vector;
* dual: the multiplier snapshot with the largest angle to the current dual span.

Without multipliers (European options) this is the strong POD-Greedy method.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .certification import (
    Certifier,
    CertificationError,
    compute_constants,
    energy_bound,
    energy_true_partial,
    l2_true_measure,
    true_errors,
)
from .detailed import SolverError, Trajectory, solve
from .fem import DiscreteOperators
from .market_models import ModelParams, ParameterBox
from .online import HashMismatchError, project_operators, solve_reduced

log = logging.getLogger(__name__)


class ErrorMeasure(str, enum.Enum):
    L2_TRUE = "l2-true"
    ENERGY_TRUE = "energy-true"
    ENERGY_APOST = "energy-apost"


class NoNewInformation(Exception):
    """All candidate vectors are numerically zero; nothing to add."""


class TrainingError(RuntimeError):
    def __init__(self, params, cause):
        self.params = params
        super().__init__(f"detailed solve failed during training at {params}: {cause}")


@dataclass
class ProvenanceEntry:
    k: int
    params: tuple[float, ...]
    n: int | None
    score: float | None
    angle: float | None
    N_V: int
    N_W: int

    def to_dict(self) -> dict:
        return dict(self.__dict__, params=list(self.params))


@dataclass
class ReducedBasis:
    """X-orthonormal primal basis ``Psi`` and nonnegative dual generators ``Xi``."""

    Psi: np.ndarray
    Xi: np.ndarray
    supremizer_flags: np.ndarray
    provenance: list[ProvenanceEntry]
    config_hash: str
    meta: dict = field(default_factory=dict)

    @property
    def N_V(self) -> int:
        return self.Psi.shape[1]

    @property
    def N_W(self) -> int:
        return self.Xi.shape[1]

    def truncated(self, iterations: int) -> "ReducedBasis":
        """Hierarchical sub-basis after the first ``iterations`` greedy steps."""
        if not 1 <= iterations <= len(self.provenance):
            raise ValueError(f"basis has {len(self.provenance)} greedy iterations")
        p = self.provenance[iterations - 1]
        return ReducedBasis(self.Psi[:, : p.N_V].copy(), self.Xi[:, : p.N_W].copy(),
                            self.supremizer_flags[: p.N_V].copy(), self.provenance[:iterations],
                            self.config_hash, dict(self.meta))


@dataclass
class TrainingConfig:
    train_set: list[ModelParams]
    N_max: int
    error_measure: ErrorMeasure = ErrorMeasure.ENERGY_TRUE
    drop_tol: float = 1e-10
    seed: int = 0
    supremizers: bool = True
    cache_dir: Path | None = None

    def __post_init__(self):
        self.error_measure = ErrorMeasure(self.error_measure)
        if not self.train_set:
            raise ValueError("training set is empty")
        if self.N_max < 1:
            raise ValueError("N_max must be at least 1")
        if self.drop_tol <= 0:
            raise ValueError("drop_tol must be positive")

    def check_box(self, box: ParameterBox) -> None:
        bad = [p for p in self.train_set if not box.contains(p)]
        if bad:
            raise ValueError(f"{len(bad)} training parameters outside the box, e.g. {bad[0]}")


# ---------------------------------------------------------------------------
# building blocks


def pod1(snapshots: np.ndarray | Sequence[np.ndarray], X, drop_tol: float = 1e-10) -> np.ndarray:
    """Dominant POD mode (unit X-norm) by the method of snapshots.

    ``snapshots`` holds one vector per row.  Raises :class:`NoNewInformation`
    when every snapshot has X-norm below ``drop_tol``.
    """
    V = np.atleast_2d(np.asarray(snapshots, float))
    XV = np.asarray(X @ V.T).T
    C = V @ XV.T
    C = 0.5 * (C + C.T)
    norms = np.sqrt(np.maximum(np.diag(C), 0.0))
    if norms.max(initial=0.0) <= drop_tol:
        raise NoNewInformation
    w, Q = np.linalg.eigh(C)
    z = V.T @ Q[:, -1]
    nz = np.sqrt(max(z @ (X @ z), 0.0))
    if nz <= drop_tol:
        raise NoNewInformation
    z /= nz
    i = np.argmax(np.abs(z))
    return z if z[i] > 0 else -z


def angle_to_space(eta: np.ndarray, Xi: np.ndarray) -> float:
    """Angle between ``eta`` and the linear span of the columns of ``Xi`` (Euclidean W)."""
    eta = np.asarray(eta, float)
    ne = np.linalg.norm(eta)
    if ne == 0:
        raise ValueError("angle of the zero vector is undefined")
    if Xi.size == 0 or Xi.shape[1] == 0:
        return np.pi / 2
    coef, *_ = np.linalg.lstsq(Xi, eta, rcond=None)
    ratio = np.linalg.norm(Xi @ coef) / ne
    return float(np.arccos(np.clip(ratio, 0.0, 1.0)))


def supremizer(xi: np.ndarray, operators: DiscreteOperators) -> np.ndarray:
    """Riesz representer of ``b(xi, .)`` in V: solves ``X s = xi``."""
    xi = np.asarray(xi, float)
    if not xi.any():
        return np.zeros_like(xi)
    return operators.x_factor.solve(xi)


def orthonormalize_into(Psi: np.ndarray, v: np.ndarray, X, drop_tol: float) -> np.ndarray | None:
    """Modified Gram-Schmidt of ``v`` against ``Psi`` in X with one re-orthogonalization.

    Returns the new unit vector, or ``None`` if ``v`` is dependent (relative
    norm after projection below ``drop_tol``).
    """
    v = np.array(v, float)
    n0 = np.sqrt(max(v @ (X @ v), 0.0))
    if n0 == 0:
        return None
    for _ in range(2):
        for j in range(Psi.shape[1]):
            v -= (Psi[:, j] @ (X @ v)) * Psi[:, j]
    n1 = np.sqrt(max(v @ (X @ v), 0.0))
    if n1 <= drop_tol * n0:
        return None
    return v / n1


def project_out(Psi: np.ndarray, V: np.ndarray, X) -> np.ndarray:
    """Rows of ``V`` minus their X-orthogonal projection onto span(Psi)."""
    if Psi.shape[1] == 0:
        return V.copy()
    coef = (X @ V.T).T @ Psi
    return V - coef @ Psi.T


# ---------------------------------------------------------------------------
# snapshot store


class SnapshotStore:
    """Detailed trajectories per training parameter, solved lazily.

    With a ``cache_dir`` they are kept on disk as ``.npz`` keyed by the
    parameter vector and the operators' hash.
    """

    def __init__(self, operators: DiscreteOperators, cache_dir: Path | None = None,
                 solver: Callable[[DiscreteOperators, ModelParams], Trajectory] = solve):
        self.ops = operators
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.solver = solver
        self._mem: dict[tuple, Trajectory] = {}

    def _path(self, params: ModelParams) -> Path:
        key = hashlib.sha256(repr((self.ops.config_hash, tuple(params.vector))).encode()).hexdigest()[:20]
        return self.cache_dir / f"traj-{key}.npz"

    def get(self, params: ModelParams) -> Trajectory:
        key = tuple(params.vector)
        if key in self._mem:
            return self._mem[key]
        traj = None
        if self.cache_dir:
            path = self._path(params)
            if path.exists():
                with np.load(path) as d:
                    traj = Trajectory(d["U"], d["Lam"], params, list(d["iterations"]), float(d["runtime"]))
        if traj is None:
            try:
                traj = self.solver(self.ops, params)
            except SolverError as exc:
                raise TrainingError(params, exc) from exc
            if self.cache_dir:
                self.cache_dir.mkdir(parents=True, exist_ok=True)
                np.savez(self._path(params), U=traj.U, Lam=traj.Lam,
                         iterations=np.asarray(traj.iterations, int), runtime=traj.runtime)
        self._mem[key] = traj
        return traj


# ---------------------------------------------------------------------------
# error measures


def greedy_error_measure(kind: ErrorMeasure | str, params: ModelParams, red, traj, detailed: Trajectory | None = None,
                         certifier: Certifier | None = None) -> float:
    """Selection score of one training parameter for the current basis."""
    kind = ErrorMeasure(kind)
    ops = red.operators
    if kind is ErrorMeasure.ENERGY_APOST:
        if certifier is None:
            certifier = Certifier(red)
        const = compute_constants(ops, params)
        dr, ds = certifier.deltas(params, traj)
        e0 = ops.norm_l2(red.Psi @ traj.U[0] - ops.initial())
        return energy_bound(dr, ds, const, red.dt, e0)
    if detailed is None:
        raise ValueError(f"{kind.value} needs the detailed trajectory")
    ev, el2 = true_errors(red, traj, detailed)
    if kind is ErrorMeasure.L2_TRUE:
        return l2_true_measure(ev, red.dt)
    const = compute_constants(ops, params)
    if not const.alpha_a > 0:
        raise CertificationError(f"alpha_a = {const.alpha_a:.3e} <= 0 at {params}; energy measure undefined")
    return float(energy_true_partial(ev, el2, const.alpha_a, red.dt)[-1])


# ---------------------------------------------------------------------------
# greedy


@dataclass
class GreedyTrace:
    """Maximum training score before each enrichment, for plotting."""

    max_scores: list[float] = field(default_factory=list)
    argmax: list[int] = field(default_factory=list)
    inf_sup: list[float] = field(default_factory=list)
    excluded: int = 0


def reduced_inf_sup(Psi: np.ndarray, Xi: np.ndarray) -> float:
    """Smallest singular value of ``Psi^T Xi`` w.r.t. the X-norm (orthonormal Psi) and W-norm."""
    if Xi.shape[1] == 0:
        return float("inf")
    Bn = Psi.T @ Xi
    Qx, Rx = np.linalg.qr(Xi)
    # sup_a a^T Bn c / |a| = |Bn c|; divide by |Xi c| = |Rx c|
    M = np.linalg.solve(Rx.T, Bn.T).T
    return float(np.linalg.svd(M, compute_uv=False)[-1])


def pod_angle_greedy(config: TrainingConfig, operators: DiscreteOperators, store: SnapshotStore | None = None,
                     progress: Callable[[str], None] | None = None) -> tuple[ReducedBasis, GreedyTrace]:
    """Train ``(Psi, Xi)``; returns the basis and the greedy trace."""
    ops = operators
    store = store or SnapshotStore(ops, config.cache_dir)
    american = ops.spec.american
    measure = config.error_measure if american else ErrorMeasure.L2_TRUE
    if not american and config.error_measure is not ErrorMeasure.L2_TRUE:
        log.info("European training uses the L2 true error measure")
    X = ops.X
    n_free = ops.n_free
    Psi = np.zeros((n_free, 0))
    Xi = np.zeros((n_free, 0))
    sup_flags: list[bool] = []
    prov: list[ProvenanceEntry] = []
    trace = GreedyTrace()
    tol = config.drop_tol
    say = progress or (lambda msg: log.info(msg))
    if american and not config.supremizers:
        log.warning("supremizers disabled: reduced inf-sup stability is not guaranteed and is not checked")

    def add_primal(v, is_sup):
        nonlocal Psi
        q = orthonormalize_into(Psi, v, X, tol)
        if q is None:
            return False
        Psi = np.column_stack([Psi, q])
        sup_flags.append(is_sup)
        return True

    def add_dual(lam):
        nonlocal Xi
        nrm = np.linalg.norm(lam)
        if nrm == 0:
            return None
        xi = np.maximum(lam, 0.0) / nrm  # multipliers are nonnegative; clip round-off
        xi /= np.linalg.norm(xi)
        if Xi.shape[1]:
            coef, *_ = np.linalg.lstsq(Xi, xi, rcond=None)
            if np.linalg.norm(xi - Xi @ coef) <= tol:
                return None
        Xi = np.column_stack([Xi, xi])
        return xi

    def enrich(params, traj, k, score, first):
        n_sel, angle = None, None
        if american:
            norms = np.linalg.norm(traj.Lam, axis=1)
            if first:
                if norms.max(initial=0.0) > 0:
                    n_sel = int(np.argmax(norms)) + 1
                    angle = np.pi / 2
            else:
                angles = np.full(traj.L, -np.inf)
                for n in range(traj.L):
                    if norms[n] > 0:
                        angles[n] = angle_to_space(traj.Lam[n], Xi)
                if np.isfinite(angles).any():
                    n_sel = int(np.argmax(angles)) + 1
                    angle = float(angles[n_sel - 1])
        xi = add_dual(traj.Lam[n_sel - 1]) if n_sel is not None else None
        if first and american and n_sel is not None:
            add_primal(traj.U[n_sel], False)
        else:
            try:
                dev = project_out(Psi, traj.U, X)
                add_primal(pod1(dev, X, tol * max(1.0, np.sqrt(max(traj.U[-1] @ (X @ traj.U[-1]), 0)))), False)
            except NoNewInformation:
                say(f"iteration {k}: trajectory already in the reduced space")
        if xi is not None and config.supremizers:
            add_primal(supremizer(xi, ops), True)
        prov.append(ProvenanceEntry(k, tuple(map(float, params.vector)), n_sel, score, angle,
                                    Psi.shape[1], Xi.shape[1]))
        if american and config.supremizers and Xi.shape[1]:
            trace.inf_sup.append(reduced_inf_sup(Psi, Xi))

    train = config.train_set
    mu1 = train[0]
    enrich(mu1, store.get(mu1), 1, None, True)
    say(f"iteration 1: mu={mu1} N_V={Psi.shape[1]} N_W={Xi.shape[1]}")

    for k in range(2, config.N_max + 1):
        basis = ReducedBasis(Psi, Xi, np.array(sup_flags, bool), prov, ops.config_hash)
        red = project_operators(basis, ops)
        cert = Certifier(red) if measure is ErrorMeasure.ENERGY_APOST else None
        scores = np.empty(len(train))
        for i, p in enumerate(train):
            rtraj = solve_reduced(red, p)
            det = None if measure is ErrorMeasure.ENERGY_APOST else store.get(p)
            try:
                scores[i] = greedy_error_measure(measure, p, red, rtraj, det, cert)
            except CertificationError:
                # energy measures need alpha_a(mu) > 0; such points cannot be ranked
                scores[i] = np.nan
        excluded = int(np.isnan(scores).sum())
        if excluded == len(train):
            raise CertificationError(f"{measure.value} is undefined on the whole training set (alpha_a <= 0)")
        if excluded and k == 2:
            log.warning("%d of %d training parameters have alpha_a <= 0 and are not ranked by %s",
                        excluded, len(train), measure.value)
        trace.excluded = excluded
        j = int(np.nanargmax(scores))
        trace.max_scores.append(float(scores[j]))
        trace.argmax.append(j)
        mu = train[j]
        enrich(mu, store.get(mu), k, float(scores[j]), False)
        say(f"iteration {k}: max {measure.value} = {scores[j]:.4e} at {mu}; N_V={Psi.shape[1]} N_W={Xi.shape[1]}")

    basis = ReducedBasis(Psi, Xi, np.array(sup_flags, bool), prov, ops.config_hash,
                         meta={"measure": measure.value, "N_max": config.N_max,
                               "supremizers": config.supremizers, "version": __version__,
                               "excluded_noncoercive": trace.excluded})
    return basis, trace


# ---------------------------------------------------------------------------
# container

MAGIC = b"RBPRICE\x00"
FORMAT_VERSION = 1


def operator_header(operators: DiscreteOperators) -> dict:
    s = operators.spec
    return {
        "model": s.model.value,
        "option_type": s.option_type.value,
        "resolution": list(operators.resolution),
        "L": operators.L,
        "theta": operators.theta,
        "strike": s.strike,
        "maturity": s.maturity,
        "domain": s.domain.__dict__,
        "config_hash": operators.config_hash,
    }


def save_basis(path, basis: ReducedBasis, header: dict | None = None) -> None:
    """Write the basis container (little-endian float64, column-major matrices)."""
    head = dict(header or {})
    head.update(config_hash=basis.config_hash, n_rows=int(basis.Psi.shape[0]), N_V=basis.N_V, N_W=basis.N_W,
                meta=basis.meta, supremizer_flags=[bool(f) for f in basis.supremizer_flags])
    hb = json.dumps(head, sort_keys=True).encode()
    pb = json.dumps([p.to_dict() for p in basis.provenance]).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(hb)))
        fh.write(hb)
        fh.write(np.asfortranarray(basis.Psi, dtype="<f8").tobytes(order="F"))
        fh.write(np.asfortranarray(basis.Xi, dtype="<f8").tobytes(order="F"))
        fh.write(struct.pack("<I", len(pb)))
        fh.write(pb)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read(fh, header_only=True)[0]


def _read(fh, header_only=False):
    if fh.read(len(MAGIC)) != MAGIC:
        raise ValueError("not a reduced basis container")
    version, hlen = struct.unpack("<II", fh.read(8))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported container version {version}")
    head = json.loads(fh.read(hlen))
    if header_only:
        return head, None
    n, nv, nw = head["n_rows"], head["N_V"], head["N_W"]
    Psi = np.frombuffer(fh.read(8 * n * nv), dtype="<f8").reshape((n, nv), order="F").astype(float)
    Xi = np.frombuffer(fh.read(8 * n * nw), dtype="<f8").reshape((n, nw), order="F").astype(float)
    (plen,) = struct.unpack("<I", fh.read(4))
    prov = [ProvenanceEntry(**dict(d, params=tuple(d["params"]))) for d in json.loads(fh.read(plen))]
    basis = ReducedBasis(Psi, Xi, np.array(head["supremizer_flags"], bool), prov, head["config_hash"],
                         head.get("meta", {}))
    return head, basis


def load_basis(path, operators: DiscreteOperators | None = None) -> ReducedBasis:
    """Read a container; with ``operators`` the config hash must match."""
    with open(path, "rb") as fh:
        head, basis = _read(fh)
    if operators is not None and basis.config_hash != operators.config_hash:
        raise HashMismatchError(
            f"basis {path} was built for operators {basis.config_hash}, current are {operators.config_hash}"
        )
    return basis
