"""Run configuration: flat ``key = value`` text with dotted section names.

Example::

    model = black-scholes
    option = american-put
    mesh.resolution = 200
    time.L = 20
    box.lower = 0.475, 0.0014, 0.0475
    box.upper = 0.525, 0.0016, 0.0525
    box.default = 0.5, 0.0015, 0.05
    train.grid = 4
    train.N_max = 25
    train.measure = energy-true
    test.count = 20
    test.seed = 0

Unknown keys are rejected; every value is validated when the file is loaded
and errors name the offending key.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .construction import ErrorMeasure
from .market_models import (
    BS_BOX,
    HESTON_AMERICAN_BOX,
    HESTON_EUROPEAN_BOX,
    Domain,
    Model,
    ModelParams,
    OptionSpec,
    OptionType,
    ParameterBox,
    ParameterError,
    default_spec,
    param_names,
)


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


KNOWN_KEYS = {
    "model", "option", "strike", "maturity",
    "domain.s_min", "domain.s_max", "domain.v_min", "domain.v_max", "domain.x_min", "domain.x_max",
    "mesh.resolution", "time.L", "time.theta",
    "box.lower", "box.upper", "box.default", "box.active",
    "train.grid", "train.points", "train.N_max", "train.measure", "train.supremizers", "train.drop_tol",
    "train.seed", "train.cache_dir",
    "test.count", "test.seed", "test.points",
    "output.dir", "study.id", "run.workers",
}


def default_box(spec: OptionSpec) -> ParameterBox:
    if spec.model is Model.BLACK_SCHOLES:
        return BS_BOX
    return HESTON_AMERICAN_BOX if spec.american else HESTON_EUROPEAN_BOX


@dataclass
class RunConfig:
    spec: OptionSpec
    resolution: tuple[int, ...] | None = None
    L: int = 20
    theta: float | None = None
    box: ParameterBox = None
    train_grid: tuple[int, ...] | None = None
    train_points: list[ModelParams] | None = None
    N_max: int = 25
    measure: ErrorMeasure = ErrorMeasure.ENERGY_TRUE
    supremizers: bool = True
    drop_tol: float = 1e-10
    train_seed: int = 0
    cache_dir: Path | None = None
    test_count: int = 20
    test_seed: int = 0
    test_points: list[ModelParams] | None = None
    out_dir: Path = Path("out")
    study_id: str | None = None
    workers: int = 1
    source: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.box is None:
            self.box = default_box(self.spec)

    def train_set(self) -> list[ModelParams]:
        if self.train_points:
            return list(self.train_points)
        counts = self.train_grid or (4,)
        if len(counts) == 1:
            counts = counts * len(self.box.active)
        return self.box.grid(list(counts))

    def test_set(self) -> list[ModelParams]:
        if self.test_points:
            return list(self.test_points)
        return self.box.sample(self.test_count, self.test_seed)

    def digest(self) -> str:
        """Hash of the normalized configuration text (not of the operators)."""
        text = "\n".join(f"{k}={v}" for k, v in sorted(self.source.items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw)


def _floats(key, text, n=None):
    try:
        vals = [float(t) for t in text.replace(";", ",").split(",") if t.strip()]
    except ValueError:
        raise ConfigError(key, f"expected comma separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise ConfigError(key, f"expected {n} values, got {len(vals)}")
    return vals


def _ints(key, text):
    vals = _floats(key, text)
    if any(v != int(v) or v < 1 for v in vals):
        raise ConfigError(key, f"expected positive integers, got {text!r}")
    return tuple(int(v) for v in vals)


def _int(key, text, minimum=1):
    try:
        v = int(text)
    except ValueError:
        raise ConfigError(key, f"expected an integer, got {text!r}") from None
    if v < minimum:
        raise ConfigError(key, f"must be at least {minimum}")
    return v


def _bool(key, text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(key, f"expected a boolean, got {text!r}")


def _points(key, text, kind, box):
    out = []
    for chunk in text.split(";"):
        if not chunk.strip():
            continue
        vals = _floats(key, chunk, len(param_names(kind)))
        try:
            p = ModelParams.from_vector(kind, vals)
        except ParameterError as exc:
            raise ConfigError(key, str(exc)) from None
        if not box.contains(p):
            raise ConfigError(key, f"{p} lies outside the parameter box")
        out.append(p)
    if not out:
        raise ConfigError(key, "no points given")
    return out


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError("<file>", str(exc)) from None
    raw = dict(parser["run"])
    unknown = sorted(set(raw) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    if "model" not in raw or "option" not in raw:
        raise ConfigError("model" if "model" not in raw else "option", "required key missing")
    try:
        model = Model(raw["model"])
    except ValueError:
        raise ConfigError("model", f"unknown model {raw['model']!r}") from None
    try:
        option = OptionType(raw["option"])
    except ValueError:
        raise ConfigError("option", f"unknown option type {raw['option']!r}") from None

    dom_kw = {k.split(".", 1)[1]: _floats(k, v, 1)[0] for k, v in raw.items() if k.startswith("domain.")}
    try:
        domain = Domain(**dom_kw)
    except ValueError as exc:
        raise ConfigError("domain", str(exc)) from None
    base = default_spec(model, option)
    strike = _floats("strike", raw["strike"], 1)[0] if "strike" in raw else base.strike
    maturity = _floats("maturity", raw["maturity"], 1)[0] if "maturity" in raw else base.maturity
    try:
        spec = OptionSpec(option, strike, maturity, model, domain)
    except (ValueError, ParameterError) as exc:
        raise ConfigError("option", str(exc)) from None

    cfg = RunConfig(spec=spec, source=raw)
    if "mesh.resolution" in raw:
        res = _ints("mesh.resolution", raw["mesh.resolution"])
        need = 1 if model is Model.BLACK_SCHOLES else 2
        if len(res) != need or min(res) < 3:
            raise ConfigError("mesh.resolution", f"{model.value} needs {need} value(s), each at least 3")
        cfg.resolution = res
    if "time.L" in raw:
        cfg.L = _int("time.L", raw["time.L"])
    if "time.theta" in raw:
        th = _floats("time.theta", raw["time.theta"], 1)[0]
        if not 0 < th <= 1:
            raise ConfigError("time.theta", "must lie in (0, 1]")
        if option is OptionType.AMERICAN_PUT and th != 1:
            raise ConfigError("time.theta", "American puts use implicit Euler (theta = 1)")
        cfg.theta = th

    n = len(param_names(model))
    box = default_box(spec)
    lower = _floats("box.lower", raw["box.lower"], n) if "box.lower" in raw else list(box.lower)
    upper = _floats("box.upper", raw["box.upper"], n) if "box.upper" in raw else list(box.upper)
    default = _floats("box.default", raw["box.default"], n) if "box.default" in raw else list(box.default)
    active = box.active
    if "box.active" in raw:
        names = param_names(model)
        req = [t.strip() for t in raw["box.active"].split(",") if t.strip()]
        bad = [t for t in req if t not in names]
        if bad or not req:
            raise ConfigError("box.active", f"unknown parameter names {bad}; choose from {names}")
        active = tuple(names.index(t) for t in req)
    try:
        cfg.box = ParameterBox(model, tuple(lower), tuple(upper), tuple(default), active)
        ModelParams.from_vector(model, default)
    except ParameterError as exc:
        raise ConfigError("box", str(exc)) from None
    if any(not (lo <= d <= hi) for lo, d, hi in zip(lower, default, upper)):
        raise ConfigError("box.default", "default vector lies outside the box")
    for i in cfg.box.active:
        try:
            ModelParams.from_vector(model, [lower[j] if j == i else default[j] for j in range(n)])
            ModelParams.from_vector(model, [upper[j] if j == i else default[j] for j in range(n)])
        except ParameterError as exc:
            raise ConfigError("box", f"box corner invalid: {exc}") from None

    if "train.grid" in raw:
        g = _ints("train.grid", raw["train.grid"])
        if len(g) not in (1, len(cfg.box.active)):
            raise ConfigError("train.grid", f"give 1 or {len(cfg.box.active)} counts")
        cfg.train_grid = g
    if "train.points" in raw:
        cfg.train_points = _points("train.points", raw["train.points"], model, cfg.box)
    if "train.N_max" in raw:
        cfg.N_max = _int("train.N_max", raw["train.N_max"])
    if "train.measure" in raw:
        try:
            cfg.measure = ErrorMeasure(raw["train.measure"])
        except ValueError:
            raise ConfigError("train.measure", f"choose from {[m.value for m in ErrorMeasure]}") from None
    if "train.supremizers" in raw:
        cfg.supremizers = _bool("train.supremizers", raw["train.supremizers"])
    if "train.drop_tol" in raw:
        cfg.drop_tol = _floats("train.drop_tol", raw["train.drop_tol"], 1)[0]
        if not cfg.drop_tol > 0:
            raise ConfigError("train.drop_tol", "must be positive")
    if "train.seed" in raw:
        cfg.train_seed = _int("train.seed", raw["train.seed"], 0)
    if "train.cache_dir" in raw:
        cfg.cache_dir = Path(raw["train.cache_dir"])
    if "test.count" in raw:
        cfg.test_count = _int("test.count", raw["test.count"])
    if "test.seed" in raw:
        cfg.test_seed = _int("test.seed", raw["test.seed"], 0)
    if "test.points" in raw:
        cfg.test_points = _points("test.points", raw["test.points"], model, cfg.box)
    if "output.dir" in raw:
        cfg.out_dir = Path(raw["output.dir"])
    if "study.id" in raw:
        cfg.study_id = raw["study.id"]
    if "run.workers" in raw:
        cfg.workers = _int("run.workers", raw["run.workers"])
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("--config", str(exc)) from None
    return parse_config(text)


def parse_mu(text: str, cfg: RunConfig) -> ModelParams:
    """Parameter vector from ``--mu``: all coordinates, or only the active ones."""
    vals = _floats("--mu", text)
    names = param_names(cfg.spec.model)
    try:
        if len(vals) == len(names):
            p = ModelParams.from_vector(cfg.spec.model, vals)
        elif len(vals) == len(cfg.box.active):
            p = cfg.box.make(vals)
        else:
            raise ConfigError("--mu", f"expected {len(names)} values {names} or the active ones "
                                      f"{cfg.box.active_names}")
    except ParameterError as exc:
        raise ConfigError("--mu", str(exc)) from None
    if not cfg.box.contains(p):
        raise ConfigError("--mu", f"{p} lies outside the parameter box")
    return p


def as_vector_text(v) -> str:
    return ", ".join(repr(float(x)) for x in np.asarray(v))
