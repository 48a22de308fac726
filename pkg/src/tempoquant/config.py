"""``key = value`` files for model parameters and run configuration.

A params file holds every :class:`TempoParams` field plus the score prior::

    dim = 3
    a_coeffs = -0.072
    Q = 6.4e-05, 4.9e-05, 0.0025
    R = 0.000169
    prior_mode = depth
    prior_schemas = 2,2,2,2
    prior_lambda = 1.0
    grid = 0:1/4:3

Floats are written with ``repr`` so a written file reloads bit-exactly.
A run config holds :class:`RunConfig` keys and may override any params key.
Unknown keys are an error.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path

from .evaluate import ClaveProblem, Modulation
from .pipeline import METHODS, MethodConfig
from .score import ScorePrior, SubdivisionSchema
from .tempo import TempoParams


class ConfigError(ValueError):
    pass


PARAM_KEYS = tuple(f.name for f in fields(TempoParams))
PRIOR_KEYS = ("prior_mode", "prior_schemas", "prior_lambda", "prior_schema_probs", "prior_table",
              "prior_floor", "prior_denominator", "grid")


def parse_kv(text: str, source: str = "config") -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}, line {n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ConfigError(f"{source}, line {n}: empty key")
        if k in out:
            raise ConfigError(f"{source}, line {n}: duplicate key {k!r}")
        out[k] = v
    return out


def _floats(v: str) -> tuple:
    return tuple(float(x) for x in v.replace(",", " ").split())


def parse_grid(v: str) -> tuple:
    """``a:step:b`` (inclusive) or a comma list of rationals."""
    v = v.strip()
    if ":" in v:
        parts = [Fraction(p) for p in v.split(":")]
        if len(parts) != 3 or parts[1] <= 0:
            raise ConfigError(f"bad grid range {v!r}")
        lo, step, hi = parts
        n = int((hi - lo) / step)
        return tuple(lo + step * i for i in range(n + 1))
    return tuple(Fraction(x) for x in v.replace(",", " ").split())


def _fmt_grid(grid) -> str:
    g = list(grid)
    if len(g) > 2:
        step = g[1] - g[0]
        if step > 0 and all(b - a == step for a, b in zip(g, g[1:])):
            return f"{g[0]}:{step}:{g[-1]}"
    return ", ".join(str(x) for x in g)


def params_from_dict(d: dict, base: TempoParams | None = None, prior: ScorePrior | None = None):
    """Build ``(TempoParams, ScorePrior)`` from string values; unknown keys raise."""
    unknown = set(d) - set(PARAM_KEYS) - set(PRIOR_KEYS)
    if unknown:
        raise ConfigError(f"unknown parameter keys: {', '.join(sorted(unknown))}")
    kw = {}
    try:
        for k in PARAM_KEYS:
            if k not in d:
                continue
            if k == "dim":
                kw[k] = int(d[k])
            elif k in ("a_coeffs", "Q"):
                kw[k] = _floats(d[k])
            else:
                kw[k] = float(d[k])
        if base is None:
            dim = kw.get("dim", 3)
            base = TempoParams() if dim == 3 else TempoParams.random_walk() if dim == 2 else None
            if base is None and ("Q" not in kw or "a_coeffs" not in kw):
                raise ConfigError(f"dim = {dim} needs explicit Q and a_coeffs")
            if base is None:
                params = TempoParams(**kw)
            else:
                params = dataclasses.replace(base, **kw)
        else:
            params = dataclasses.replace(base, **kw)
        prior = prior_from_dict(d, prior)
    except ConfigError:
        raise
    except (ValueError, TypeError, ZeroDivisionError) as exc:
        raise ConfigError(f"invalid parameter value: {exc}") from None
    return params, prior


def prior_from_dict(d: dict, base: ScorePrior | None = None) -> ScorePrior:
    base = base or ScorePrior()
    if not any(k in d for k in PRIOR_KEYS):
        return base
    mode = d.get("prior_mode", base.mode)
    grid = parse_grid(d["grid"]) if "grid" in d else base.gamma_grid
    if mode == "depth":
        if "prior_schemas" in d:
            divs = [tuple(int(x) for x in s.replace(",", " ").split()) for s in d["prior_schemas"].split(";")]
        else:
            divs = [s.divisors for s in base.schemas]
        lams = _floats(d["prior_lambda"]) if "prior_lambda" in d else tuple(s.lam for s in base.schemas)
        if len(lams) == 1:
            lams = lams * len(divs)
        if len(lams) != len(divs):
            raise ConfigError("prior_lambda needs one value or one per schema")
        probs = _floats(d["prior_schema_probs"]) if "prior_schema_probs" in d else None
        if probs is None and base.mode == "depth" and len(base.schemas) == len(divs) and "prior_schemas" not in d:
            probs = base.schema_probs
        return ScorePrior("depth", tuple(SubdivisionSchema(s, l) for s, l in zip(divs, lams)), probs,
                          gamma_grid=grid)
    if mode == "table":
        if "prior_table" in d:
            table = {}
            for item in d["prior_table"].split(","):
                k, v = item.split(":")
                table[Fraction(k.strip())] = float(v)
        elif base.table:
            table = dict(base.table)
        else:
            raise ConfigError("prior_mode = table needs prior_table")
        floor = float(d.get("prior_floor", base.floor))
        den = d.get("prior_denominator")
        den = int(den) if den else base.denominator
        return ScorePrior("table", table=table, floor=floor, denominator=den, gamma_grid=grid)
    raise ConfigError(f"unknown prior_mode {mode!r}")


def params_to_text(params: TempoParams, prior: ScorePrior | None = None) -> str:
    lines = []
    for k in PARAM_KEYS:
        v = getattr(params, k)
        if isinstance(v, tuple):
            lines.append(f"{k} = {', '.join(repr(float(x)) for x in v)}")
        elif isinstance(v, int):
            lines.append(f"{k} = {v}")
        else:
            lines.append(f"{k} = {float(v)!r}")
    if prior is not None:
        lines.append(f"prior_mode = {prior.mode}")
        if prior.mode == "depth":
            lines.append("prior_schemas = " + "; ".join(",".join(str(d) for d in s.divisors) for s in prior.schemas))
            lines.append("prior_lambda = " + ", ".join(repr(s.lam) for s in prior.schemas))
            lines.append("prior_schema_probs = " + ", ".join(repr(p) for p in prior.schema_probs))
        else:
            lines.append("prior_table = " + ", ".join(f"{k}:{v!r}" for k, v in sorted(prior.table.items())))
            lines.append(f"prior_floor = {prior.floor!r}")
            if prior.denominator:
                lines.append(f"prior_denominator = {prior.denominator}")
        lines.append(f"grid = {_fmt_grid(prior.gamma_grid)}")
    return "\n".join(lines) + "\n"


def load_params(path) -> tuple[TempoParams, ScorePrior]:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read params file {p}: {exc}") from None
    return params_from_dict(parse_kv(text, str(p)))


def parse_method_token(tok: str) -> MethodConfig:
    """``name[:key=value...]`` with keys ``N`` (particles), ``S`` (sweeps), ``L`` (block),
    ``restarts`` and ``refine`` (0/1), e.g. ``pf:N=100`` or ``gibbs:S=50:L=2``."""
    parts = tok.strip().split(":")
    name = parts[0]
    if name not in METHODS:
        raise ConfigError(f"unknown method {name!r}")
    keymap = {"N": "particles", "S": "sweeps", "L": "block", "restarts": "restarts", "refine": "refine"}
    kw = {}
    for p in parts[1:]:
        if "=" not in p:
            raise ConfigError(f"bad method option {p!r} in {tok!r}")
        k, v = p.split("=", 1)
        if k not in keymap:
            raise ConfigError(f"unknown method option {k!r} in {tok!r}")
        kw[keymap[k]] = bool(int(v)) if k == "refine" else int(v)
    try:
        return MethodConfig(name, **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


@dataclass
class RunConfig:
    """Everything a CLI run needs.  Each field's default is the documented default."""

    params: str | None = None  # params file; built-in defaults if unset
    method: str = "pf"
    particles: int = 10
    sweeps: int = 50
    restarts: int = 1000
    block: int = 1
    schedule: str | None = None  # comma list of inverse temperatures; "inf" allowed
    refine: bool = True
    prune_threshold: float = 1e-8
    init: str = "greedy-filter"
    seed: int = 0
    input: str | None = None
    output: str | None = None
    trajectory: str | None = None
    noise: str = "full"
    forced_delta: str | None = None  # comma list of periods for the forced simulation mode
    trials: int = 5
    methods: str | None = None  # benchmark matrix, ';'-separated method tokens
    n_onsets: int = 11
    base_tempo: float = 1.0
    modulation: str = "sinusoidal"
    modulation_amplitude: float = 0.3
    modulation_period: float = 32.0
    clave_R: float = 0.025 ** 2
    fit_dim: int | None = None
    fit_structure: str = "template"
    overrides: dict = field(default_factory=dict)

    def method_config(self) -> MethodConfig:
        try:
            return MethodConfig(self.method, self.particles, self.sweeps, self.restarts, self.block,
                                self.schedule_values(), self.refine, self.prune_threshold, self.init)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def schedule_values(self):
        if not self.schedule:
            return None
        try:
            return tuple(float(x) for x in self.schedule.replace(",", " ").split())
        except ValueError:
            raise ConfigError(f"bad schedule {self.schedule!r}") from None

    def model(self) -> tuple[TempoParams, ScorePrior]:
        params, prior = load_params(self.params) if self.params else (TempoParams(), ScorePrior())
        if self.overrides:
            params, prior = params_from_dict(self.overrides, params, prior)
        return params, prior

    def benchmark_methods(self) -> list:
        from .evaluate import default_methods

        if not self.methods:
            return default_methods()
        return [parse_method_token(t) for t in self.methods.split(";") if t.strip()]

    def clave_problem(self, params: TempoParams | None = None, prior: ScorePrior | None = None) -> ClaveProblem:
        try:
            mod = Modulation(self.modulation, self.modulation_amplitude, self.modulation_period)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return ClaveProblem(self.n_onsets, self.base_tempo, mod, self.clave_R, params, prior or ScorePrior())

    def forced_delta_values(self):
        if not self.forced_delta:
            return None
        return [float(x) for x in self.forced_delta.replace(",", " ").split()]


_RUN_FIELDS = {f.name: f for f in fields(RunConfig) if f.name != "overrides"}


def _coerce(name: str, value: str):
    f = _RUN_FIELDS[name]
    t = str(f.type)
    try:
        if "bool" in t:
            v = value.strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if t.startswith("int") or t == "int | None":
            return int(value)
        if t.startswith("float"):
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"invalid value for {name}: {value!r}") from None


def run_config_from_dict(d: dict, base: RunConfig | None = None) -> RunConfig:
    cfg = dataclasses.replace(base) if base else RunConfig()
    over = dict(cfg.overrides)
    for k, v in d.items():
        if k in _RUN_FIELDS:
            setattr(cfg, k, _coerce(k, v) if isinstance(v, str) else v)
        elif k in PARAM_KEYS or k in PRIOR_KEYS:
            over[k] = v
        else:
            raise ConfigError(f"unknown config key {k!r}")
    cfg.overrides = over
    if cfg.method not in METHODS:
        raise ConfigError(f"unknown method {cfg.method!r}; choose from {METHODS}")
    return cfg


def load_run_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from None
    cfg = run_config_from_dict(parse_kv(text, str(p)))
    if cfg.params and not Path(cfg.params).is_absolute():
        cfg.params = str(p.parent / cfg.params)
    return cfg

