"""Pricing models, parameter domains, payoffs and boundary data.

Black-Scholes problems live on the stock price axis ``S``; Heston problems on
the (variance, log-moneyness) rectangle ``(v, x)`` with ``x = log(S / K)``.
The bilinear forms of both models are affine in a handful of monomials of the
parameter vector; :func:`affine_theta` returns those monomials in the order
used by :mod:`rbprice.fem`.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import ClassVar, Sequence

import numpy as np
from scipy.special import erfc

log = logging.getLogger(__name__)


class Model(str, enum.Enum):
    BLACK_SCHOLES = "black-scholes"
    HESTON = "heston"


class OptionType(str, enum.Enum):
    EUROPEAN_CALL = "european-call"
    AMERICAN_PUT = "american-put"


class ParameterError(ValueError):
    """Raised for parameter vectors outside the admissible set."""


@dataclass(frozen=True)
class ModelParams:
    """Parameter vector of one pricing model.

    Use :class:`BlackScholesParams` or :class:`HestonParams`, or build from a
    raw vector with :meth:`from_vector`.
    """

    kind: ClassVar[Model]
    names: ClassVar[tuple[str, ...]]

    @property
    def vector(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in self.names], dtype=float)

    @staticmethod
    def from_vector(kind: Model | str, values: Sequence[float]) -> "ModelParams":
        cls = _PARAM_CLASSES[Model(kind)]
        if len(values) != len(cls.names):
            raise ParameterError(
                f"{cls.kind.value} expects {len(cls.names)} values {cls.names}, got {len(values)}"
            )
        return cls(*(float(v) for v in values))

    def replace(self, **changes: float) -> "ModelParams":
        vals = {n: getattr(self, n) for n in self.names}
        vals.update(changes)
        return type(self)(**vals)

    def __str__(self) -> str:
        body = ", ".join(f"{n}={getattr(self, n):.6g}" for n in self.names)
        return f"{self.kind.value}({body})"


@dataclass(frozen=True)
class BlackScholesParams(ModelParams):
    sigma: float
    q: float
    r: float

    kind: ClassVar[Model] = Model.BLACK_SCHOLES
    names: ClassVar[tuple[str, ...]] = ("sigma", "q", "r")

    def __post_init__(self):
        if not self.sigma > 0:
            raise ParameterError(f"sigma must be positive, got {self.sigma}")
        if self.r < 0 or self.q < 0:
            raise ParameterError(f"r and q must be nonnegative, got r={self.r}, q={self.q}")


@dataclass(frozen=True)
class HestonParams(ModelParams):
    xi: float
    rho: float
    gamma: float
    kappa: float
    r: float

    kind: ClassVar[Model] = Model.HESTON
    names: ClassVar[tuple[str, ...]] = ("xi", "rho", "gamma", "kappa", "r")

    def __post_init__(self):
        if not (self.xi > 0 and self.kappa > 0 and self.gamma > 0):
            raise ParameterError(
                f"xi, kappa, gamma must be positive, got {self.xi}, {self.kappa}, {self.gamma}"
            )
        if self.r < 0:
            raise ParameterError(f"r must be nonnegative, got {self.r}")
        if not -1.0 <= self.rho <= 1.0:
            raise ParameterError(f"rho must lie in [-1, 1], got {self.rho}")
        if not self.feller:
            log.warning("Feller condition xi^2 < 2 kappa gamma violated for %s", self)

    @property
    def feller(self) -> bool:
        """True when the variance process stays strictly positive."""
        return self.xi**2 < 2.0 * self.kappa * self.gamma


_PARAM_CLASSES: dict[Model, type[ModelParams]] = {
    Model.BLACK_SCHOLES: BlackScholesParams,
    Model.HESTON: HestonParams,
}


def param_names(kind: Model | str) -> tuple[str, ...]:
    return _PARAM_CLASSES[Model(kind)].names


@dataclass(frozen=True)
class ParameterBox:
    """Axis-aligned parameter domain with optionally pinned coordinates.

    Coordinates not listed in ``active`` are fixed to ``default``.
    """

    kind: Model
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    default: tuple[float, ...]
    active: tuple[int, ...] = ()

    def __post_init__(self):
        n = len(param_names(self.kind))
        object.__setattr__(self, "kind", Model(self.kind))
        if not (len(self.lower) == len(self.upper) == len(self.default) == n):
            raise ParameterError(f"box for {self.kind.value} needs {n} coordinates")
        if any(lo > hi for lo, hi in zip(self.lower, self.upper)):
            raise ParameterError("box lower bound exceeds upper bound")
        if not self.active:
            object.__setattr__(self, "active", tuple(range(n)))
        if any(not 0 <= i < n for i in self.active):
            raise ParameterError(f"active coordinates out of range: {self.active}")

    @property
    def active_names(self) -> tuple[str, ...]:
        names = param_names(self.kind)
        return tuple(names[i] for i in self.active)

    def contains(self, params: ModelParams, rtol: float = 1e-12) -> bool:
        vec = params.vector
        for i, (lo, hi, d) in enumerate(zip(self.lower, self.upper, self.default)):
            tol = rtol * max(1.0, abs(lo), abs(hi))
            if i in self.active:
                if vec[i] < lo - tol or vec[i] > hi + tol:
                    return False
            elif vec[i] != d:
                return False
        return True

    def make(self, active_values: Sequence[float]) -> ModelParams:
        vec = list(self.default)
        for i, val in zip(self.active, active_values, strict=True):
            vec[i] = float(val)
        return ModelParams.from_vector(self.kind, vec)

    def grid(self, counts: int | Sequence[int]) -> list[ModelParams]:
        """Tensor grid of equidistant points over the active coordinates.

        Ordering is lexicographic with the first active coordinate varying slowest.
        """
        if isinstance(counts, int):
            counts = [counts] * len(self.active)
        axes = [
            np.linspace(self.lower[i], self.upper[i], c) if c > 1 else np.array([0.5 * (self.lower[i] + self.upper[i])])
            for i, c in zip(self.active, counts, strict=True)
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        return [self.make(p) for p in pts]

    def sample(self, count: int, seed: int) -> list[ModelParams]:
        """Uniform random points; reproducible from ``seed``."""
        rng = np.random.default_rng(seed)
        lo = np.array([self.lower[i] for i in self.active])
        hi = np.array([self.upper[i] for i in self.active])
        pts = lo + (hi - lo) * rng.random((count, len(self.active)))
        return [self.make(p) for p in pts]


@dataclass(frozen=True)
class Domain:
    """Computational domain bounds.

    Black-Scholes uses ``(s_min, s_max)``; Heston uses the variance interval
    ``(v_min, v_max)`` and the log-moneyness interval ``(x_min, x_max)``.
    """

    s_min: float = 0.0
    s_max: float = 300.0
    v_min: float = 0.0025
    v_max: float = 0.5
    x_min: float = -5.0
    x_max: float = 5.0

    def __post_init__(self):
        if not (self.s_min < self.s_max and self.v_min < self.v_max and self.x_min < self.x_max):
            raise ValueError(f"degenerate domain bounds: {self}")
        if self.v_min <= 0:
            raise ValueError("v_min must be positive")


@dataclass(frozen=True)
class OptionSpec:
    option_type: OptionType
    strike: float
    maturity: float
    model: Model
    domain: Domain = field(default_factory=Domain)

    def __post_init__(self):
        object.__setattr__(self, "option_type", OptionType(self.option_type))
        object.__setattr__(self, "model", Model(self.model))
        if not (self.strike > 0 and self.maturity > 0):
            raise ValueError(f"strike and maturity must be positive, got K={self.strike}, T={self.maturity}")
        if self.option_type is OptionType.EUROPEAN_CALL and self.model is not Model.HESTON:
            raise ValueError("European calls are only supported for the Heston model")

    @property
    def american(self) -> bool:
        return self.option_type is OptionType.AMERICAN_PUT


# Baselines: K=100 for Black-Scholes, K=1 for Heston, T=1.
def default_spec(model: Model | str, option_type: OptionType | str) -> OptionSpec:
    model = Model(model)
    strike = 100.0 if model is Model.BLACK_SCHOLES else 1.0
    return OptionSpec(OptionType(option_type), strike, 1.0, model)


def payoff(spec: OptionSpec, coord):
    """Option value at exercise.

    ``coord`` is the stock price ``S`` for Black-Scholes and the log-moneyness
    ``x`` for Heston (a scalar or array).
    """
    K = spec.strike
    c = np.asarray(coord, dtype=float)
    if spec.option_type is OptionType.EUROPEAN_CALL:
        val = np.maximum(K * np.exp(c) - K, 0.0)
    elif spec.model is Model.BLACK_SCHOLES:
        val = np.maximum(K - c, 0.0)
    else:
        val = np.maximum(K - K * np.exp(c), 0.0)
    return float(val) if val.ndim == 0 else val


def affine_theta(params: ModelParams) -> np.ndarray:
    """Coefficients of the affine expansion ``a(.,.;mu) = sum_q theta_q(mu) a_q``.

    Black-Scholes: ``(sigma^2, r - q, r)``.
    Heston: ``(1, xi^2, rho*xi, kappa, kappa*gamma, r)``.
    """
    if isinstance(params, BlackScholesParams):
        return np.array([params.sigma**2, params.r - params.q, params.r])
    if isinstance(params, HestonParams):
        p = params
        return np.array([1.0, p.xi**2, p.rho * p.xi, p.kappa, p.kappa * p.gamma, p.r])
    raise TypeError(f"unsupported parameter type {type(params).__name__}")


def normal_cdf(x):
    """Standard normal distribution function via the complementary error function."""
    val = 0.5 * erfc(-np.asarray(x, dtype=float) / math.sqrt(2.0))
    return float(val) if val.ndim == 0 else val


def _bs_call_log(x, t, r, var, K):
    # Black-Scholes call on S = K e^x with variance rate `var`, no dividends.
    x = np.asarray(x, dtype=float)
    if t <= 0:
        return np.maximum(K * np.exp(x) - K, 0.0)
    sig = math.sqrt(var)
    sqt = sig * math.sqrt(t)
    d_plus = (x + (r + 0.5 * var) * t) / sqt
    d_minus = (x + (r - 0.5 * var) * t) / sqt
    return K * np.exp(x) * normal_cdf(d_plus) - K * math.exp(-r * t) * normal_cdf(d_minus)


class BoundaryError(ValueError):
    """Point does not lie on a Dirichlet boundary segment."""


def heston_boundary_values(params: HestonParams, spec: OptionSpec, t: float, v, x, segment):
    """Vectorized Dirichlet data of the European call on one boundary segment.

    ``segment`` is one of 1 (v = v_min), 2 (v = v_max), 3 (x = x_min).
    At ``t = 0`` every segment returns the payoff trace.
    """
    dom, K = spec.domain, spec.strike
    v = np.asarray(v, dtype=float)
    x = np.asarray(x, dtype=float)
    if t <= 0:
        return np.broadcast_to(payoff(spec, x), np.broadcast(v, x).shape).astype(float)
    if segment == 1:
        return np.broadcast_to(_bs_call_log(x, t, params.r, dom.v_min, K), np.broadcast(v, x).shape)
    if segment == 2:
        return np.broadcast_to(K * np.exp(x), np.broadcast(v, x).shape)
    if segment == 3:
        blend = (v - dom.v_min) / (dom.v_max - dom.v_min)
        top = K * math.exp(dom.x_min)
        bottom = float(_bs_call_log(dom.x_min, t, params.r, dom.v_min, K))
        return blend * top + (1.0 - blend) * bottom
    raise BoundaryError(f"segment {segment} carries no Dirichlet data for the European call")


def heston_dirichlet_data(params: HestonParams, spec: OptionSpec, t: float, v: float, x: float,
                          tol: float = 1e-12) -> float:
    """Dirichlet value of the European Heston call at a boundary point."""
    if spec.model is not Model.HESTON or spec.option_type is not OptionType.EUROPEAN_CALL:
        raise ValueError("Dirichlet data is defined for the European Heston call")
    if not 0.0 <= t <= spec.maturity:
        raise ValueError(f"t={t} outside [0, {spec.maturity}]")
    dom = spec.domain
    if abs(v - dom.v_min) <= tol:
        seg = 1
    elif abs(v - dom.v_max) <= tol:
        seg = 2
    elif abs(x - dom.x_min) <= tol:
        seg = 3
    else:
        raise BoundaryError(f"(v={v}, x={x}) is not on a Dirichlet segment")
    return float(heston_boundary_values(params, spec, t, v, x, seg))


# Parameter domains of the studies.  Vectors are stored as (sigma, q, r); the
# Black-Scholes box is sigma in [0.475, 0.525], r in [0.0475, 0.0525].
BS_BOX = ParameterBox(
    Model.BLACK_SCHOLES,
    lower=(0.4750, 0.0014, 0.0475),
    upper=(0.5250, 0.0016, 0.0525),
    default=(0.5, 0.0015, 0.05),
)
HESTON_EUROPEAN_BOX = ParameterBox(
    Model.HESTON,
    lower=(0.1, 0.21, 0.08, 1.2, 0.01),
    upper=(0.4, 0.9, 0.15, 3.0, 0.2),
    default=(0.3, 0.21, 0.095, 2.0, 0.0198),
)
HESTON_AMERICAN_BOX = ParameterBox(
    Model.HESTON,
    lower=(0.6, 0.21, 0.16, 3.0, 0.01),
    upper=(0.9, 0.9, 0.25, 5.0, 0.2),
    default=(0.9, 0.21, 0.16, 3.0, 0.0198),
)
