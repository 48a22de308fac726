"""Method dispatch shared by the CLI, the service and the benchmark harness."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Sequence

from . import mcmc, smc
from .score import Score, ScorePrior
from .tempo import OnsetSequence, TempoParams

FILTER_METHODS = ("pf", "gf", "hybrid")
BATCH_METHODS = ("gibbs", "sa", "ii")
METHODS = FILTER_METHODS + BATCH_METHODS + ("exact",)
_SELECTION = {"pf": "multinomial", "gf": "greedy", "hybrid": "hybrid"}


@dataclass(frozen=True)
class MethodConfig:
    """An inference method and its hyperparameters.

    ``sweeps`` is the total sweep budget for the batch methods; II restarts
    until the budget is spent (or ``restarts`` starts have run).
    ``refine`` applies coordinate ascent on the particles' per-slice supports
    after a filter run.
    """

    method: str = "pf"
    particles: int = 10
    sweeps: int = 50
    restarts: int = 1000
    block: int = 1
    schedule: tuple | None = None
    refine: bool = True
    prune_threshold: float = 1e-8
    init: str = "greedy-filter"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        for name in ("particles", "sweeps", "restarts", "block"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.schedule is not None:
            object.__setattr__(self, "schedule", tuple(float(r) for r in self.schedule))

    @property
    def label(self) -> str:
        m = self.method
        if m in FILTER_METHODS:
            return f"{m}-N{self.particles}" + ("+ii" if self.refine else "")
        if m in BATCH_METHODS:
            return f"{m}-S{self.sweeps}-L{self.block}"
        return m

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class Transcription:
    score: Score
    log_posterior: float
    trace: list = field(default_factory=list)
    filter_rows: list = field(default_factory=list)
    supports: list = field(default_factory=list)


def transcribe(onsets: OnsetSequence, params: TempoParams, prior: ScorePrior, config: MethodConfig,
               seed: int | None = None, grid: Sequence | None = None, c0=Fraction(0)) -> Transcription:
    """MAP score for a whole onset sequence."""
    from .tempo import log_joint

    grid = tuple(prior.gamma_grid if grid is None else grid)
    m = config.method
    rows, trace, supports = [], [], []
    if m in FILTER_METHODS:
        tracker = smc.OnlineTracker(params, prior, config.particles, _SELECTION[m], seed, grid,
                                    config.prune_threshold, c0)
        for k, y in enumerate(onsets.times):
            rows.append(tracker.push(float(y), onsets.kind(k)))
        best = smc.map_extract(tracker.particles)
        supports = tracker.particles.supports()
        if config.refine and len(best):
            best = smc.refine_reduced(best, supports, onsets, params, prior, mode="ii", seed=seed, block=config.block)
    elif m == "ii":
        best, trace = mcmc.run_ii(onsets, params, prior, restarts=config.restarts, init=config.init, seed=seed,
                                  block=config.block, grid=grid, sweep_budget=config.sweeps, c0=c0)
    elif m == "sa":
        sched = config.schedule or tuple(mcmc.linear_schedule(config.sweeps))
        best, trace = mcmc.run_sa(onsets, params, prior, sched, config.init, seed, config.block, grid, c0=c0)
    elif m == "gibbs":
        best, trace = mcmc.run_gibbs(onsets, params, prior, config.sweeps, config.init, seed, config.block, grid,
                                     c0=c0)
    else:
        best, _ = mcmc.enumerate_map(onsets, params, prior, grid, c0=c0)
    return Transcription(best, log_joint(best, onsets, params, prior), trace, rows, supports)


def is_filter(method: str) -> bool:
    return method in FILTER_METHODS

