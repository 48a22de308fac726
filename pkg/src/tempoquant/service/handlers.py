"""Request handlers shared by the HTTP app and the in-process CLI."""
from __future__ import annotations

import math
import threading
import uuid
from fractions import Fraction

import numpy as np

from .. import lds, mcmc, smc
from ..config import ConfigError, params_from_dict, params_to_text, parse_method_token
from ..evaluate import ClaveProblem, Modulation, default_methods, run_benchmark
from ..formats import FormatError
from ..gaussian import ImproperPotentialError
from ..pipeline import FILTER_METHODS, MethodConfig, transcribe
from ..score import Score, ScorePrior
from ..tempo import EventKind, OnsetSequence, TempoParams, filtered_trajectory, simulate
from . import schemas as S

INFEASIBLE = (smc.NoFeasibleExtensionError, mcmc.InfeasibleBlockError, ImproperPotentialError)


def classify(exc: BaseException) -> str | None:
    """Error kind for reporting: ``format``, ``infeasible`` or ``config``."""
    if isinstance(exc, FormatError):
        return "format"
    if isinstance(exc, INFEASIBLE):
        return "infeasible"
    if isinstance(exc, (ConfigError, ValueError, TypeError, lds.LdsError)):
        return "config"
    return None


def _frac_str(x) -> str | None:
    if x is None:
        return None
    x = Fraction(x)
    return str(x.numerator) if x.denominator == 1 else f"{x.numerator}/{x.denominator}"


def model_of(req: S.ModelOptions) -> tuple[TempoParams, ScorePrior]:
    return params_from_dict(dict(req.params)) if req.params else (TempoParams(), ScorePrior())


def onsets_of(p: S.OnsetPayload) -> OnsetSequence:
    if not p.times:
        raise FormatError("no onsets")
    kinds = None if p.kinds is None else tuple(EventKind(k) for k in p.kinds)
    return OnsetSequence(np.asarray(p.times, dtype=float), kinds)


def onset_payload(o: OnsetSequence) -> S.OnsetPayload:
    kinds = None if o.kinds is None else [int(o.kind(k)) for k in range(len(o))]
    return S.OnsetPayload(times=[float(t) for t in o.times], kinds=kinds)


def score_of(p: S.ScorePayload) -> Score:
    try:
        return Score.from_locations([Fraction(c) for c in p.locations])
    except (ValueError, ZeroDivisionError) as exc:
        raise FormatError(f"bad score: {exc}") from None


def score_payload(s: Score) -> S.ScorePayload:
    return S.ScorePayload(locations=[_frac_str(c) for c in s.locations])


def method_of(req: S.MethodOptions) -> MethodConfig:
    try:
        return MethodConfig(req.method, req.particles, req.sweeps, req.restarts, req.block,
                            tuple(req.schedule) if req.schedule else None, req.refine, req.prune_threshold, req.init)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def row_model(row: dict) -> S.TrajectoryRow:
    r = dict(row)
    r["gamma_map"] = _frac_str(r.get("gamma_map"))
    r["c_map"] = _frac_str(r.get("c_map"))
    return S.TrajectoryRow(**r)


def _filter_only(method: str):
    if method not in FILTER_METHODS:
        raise ConfigError(f"tracking is online and needs a filter method {FILTER_METHODS}, got {method!r}")


def track(req: S.TrackRequest) -> S.TrackResponse:
    _filter_only(req.method)
    params, prior = model_of(req)
    cfg = method_of(req)
    onsets = onsets_of(req.onsets)
    tracker = smc.OnlineTracker(params, prior, cfg.particles, _selection(cfg.method), req.seed,
                                prior.gamma_grid, cfg.prune_threshold)
    rows = [row_model(tracker.push(float(y), onsets.kind(k))) for k, y in enumerate(onsets.times)]
    return S.TrackResponse(rows=rows)


def _selection(method: str) -> str:
    return {"pf": "multinomial", "gf": "greedy", "hybrid": "hybrid"}[method]


class SessionStore:
    """Live online trackers keyed by id."""

    def __init__(self):
        self._lock = threading.Lock()
        self._sessions: dict[str, smc.OnlineTracker] = {}

    def create(self, req: S.SessionRequest) -> S.SessionCreated:
        _filter_only(req.method)
        params, prior = model_of(req)
        cfg = method_of(req)
        tracker = smc.OnlineTracker(params, prior, cfg.particles, _selection(cfg.method), req.seed,
                                    prior.gamma_grid, cfg.prune_threshold)
        sid = uuid.uuid4().hex
        with self._lock:
            self._sessions[sid] = tracker
        return S.SessionCreated(session_id=sid)

    def push(self, sid: str, req: S.PushRequest) -> S.TrackResponse:
        with self._lock:
            tracker = self._sessions.get(sid)
        if tracker is None:
            raise KeyError(sid)
        kinds = req.onsets.kinds or [1] * len(req.onsets.times)
        rows = [row_model(tracker.push(float(y), EventKind(u))) for y, u in zip(req.onsets.times, kinds)]
        return S.TrackResponse(rows=rows)

    def close(self, sid: str) -> None:
        with self._lock:
            if self._sessions.pop(sid, None) is None:
                raise KeyError(sid)


def map_trajectory(score: Score, onsets: OnsetSequence, params: TempoParams) -> list[dict]:
    """Filtered moments along the transcribed score, in trajectory-row form."""
    traj = filtered_trajectory(score.gammas, onsets, params)
    locs = score.locations
    rows = []
    for k, (tm, dm, tv, dv) in enumerate(traj):
        rows.append({
            "k": k, "y_k": float(onsets.times[k]), "tau_mean": float(tm), "delta_mean": float(dm),
            "omega_mean": math.log2(dm) if dm > 0 else float("nan"), "tau_var": float(tv), "delta_var": float(dv),
            "gamma_map": score.gammas[k - 1] if k else None, "c_map": locs[k],
        })
    return rows


def transcribe_handler(req: S.TranscribeRequest) -> S.TranscribeResponse:
    params, prior = model_of(req)
    cfg = method_of(req)
    onsets = onsets_of(req.onsets)
    res = transcribe(onsets, params, prior, cfg, seed=req.seed)
    rows = [row_model(r) for r in map_trajectory(res.score, onsets, params)]
    trace = [S.TraceRow(**{k: r[k] for k in ("sweep", "rho", "log_posterior", "best_so_far")}) for r in res.trace]
    return S.TranscribeResponse(score=score_payload(res.score), log_posterior=res.log_posterior,
                                trajectory=rows, trace=trace)


def simulate_handler(req: S.SimulateRequest) -> S.SimulateResponse:
    params, _ = model_of(req)
    score = score_of(req.score)
    onsets, z = simulate(score, params, req.noise, req.seed, req.forced_delta, req.kinds, tau0=0.0)
    return S.SimulateResponse(onsets=onset_payload(onsets), latent=z.tolist())


def benchmark_handler(req: S.BenchmarkRequest) -> S.BenchmarkResponse:
    methods = [parse_method_token(t) for t in req.methods] if req.methods else default_methods()
    params, prior = model_of(req)
    try:
        mod = Modulation(req.modulation, req.modulation_amplitude, req.modulation_period)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    problem = ClaveProblem(req.n_onsets, req.base_tempo, mod, req.clave_R,
                           params if req.use_params else None, prior)
    rep = run_benchmark(methods, problem, req.trials, req.seed)
    records = [S.BenchmarkRecord(**row) for row in rep.rows()]
    return S.BenchmarkResponse(records=records, csv=rep.to_csv(), table=rep.to_table())


def params_for_dim(dim: int, base: TempoParams) -> TempoParams:
    """Starting point for a fit of a ``dim``-dimensional model."""
    if dim == base.dim:
        return base
    if dim == 2:
        return TempoParams.random_walk(R=base.R, R_off=base.R_off, R_outlier=base.R_outlier,
                                       prior_delta_mean=base.prior_delta_mean, prior_delta_var=base.prior_delta_var,
                                       prior_tau_var=base.prior_tau_var)
    if dim < 2:
        raise ConfigError("dim must be at least 2")
    m = dim - 2
    a = tuple((np.eye(m) * -0.072).ravel())
    Q = (0.008 ** 2, 0.007 ** 2) + (0.05 ** 2,) * m
    return TempoParams(dim=dim, a_coeffs=a, Q=Q, R=base.R, R_off=base.R_off, R_outlier=base.R_outlier,
                       prior_delta_mean=base.prior_delta_mean, prior_delta_var=base.prior_delta_var,
                       prior_tau_var=base.prior_tau_var)


def fit_handler(req: S.FitRequest) -> S.FitResponse:
    if not req.pairs:
        raise ConfigError("empty dataset: need at least one onset/score pair")
    params, prior = model_of(req)
    init = params_for_dim(req.dim or params.dim, params)
    data = []
    for i, pair in enumerate(req.pairs):
        onsets = onsets_of(pair.onsets)
        score = score_of(pair.score)
        if len(score.gammas) != len(onsets) - 1:
            raise FormatError(f"pair {i}: score has {len(score.gammas) + 1} onsets, onset list has {len(onsets)}")
        data.append(lds.EmSequence(onsets.times, [float(g) for g in score.gammas]))
    res = lds.em_fit(data, init.lds_spec(), structure="template", max_iter=req.max_iter)
    fitted = TempoParams.from_lds_spec(res.spec, init)
    return S.FitResponse(params_text=params_to_text(fitted, prior), log_likelihoods=res.log_likelihoods,
                         converged=res.converged)

