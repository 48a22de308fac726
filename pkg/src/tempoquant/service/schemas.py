"""Request and response bodies.  Rationals travel as strings such as ``"3/4"``."""
from __future__ import annotations

from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, Field, field_validator


class OnsetPayload(BaseModel):
    times: List[float]
    kinds: Optional[List[int]] = None

    @field_validator("kinds")
    @classmethod
    def _kinds_match(cls, v, info):
        if v is not None and len(v) != len(info.data.get("times", [])):
            raise ValueError("kinds must have one entry per onset")
        if v is not None and any(k not in (0, 1, 2) for k in v):
            raise ValueError("event kinds are 0, 1 or 2")
        return v


class ScorePayload(BaseModel):
    locations: List[str]


class ModelOptions(BaseModel):
    """``key = value`` model settings, as in a params file."""

    params: Dict[str, str] = Field(default_factory=dict)


class MethodOptions(BaseModel):
    method: str = "pf"
    particles: int = 10
    sweeps: int = 50
    restarts: int = 1000
    block: int = 1
    schedule: Optional[List[float]] = None
    refine: bool = True
    prune_threshold: float = 1e-8
    init: str = "greedy-filter"
    seed: int = 0


class TrajectoryRow(BaseModel):
    k: int
    y_k: float
    tau_mean: float
    delta_mean: float
    omega_mean: float
    tau_var: float
    delta_var: float
    gamma_map: Optional[str] = None
    c_map: Optional[str] = None


class TrackRequest(ModelOptions, MethodOptions):
    onsets: OnsetPayload


class TrackResponse(BaseModel):
    rows: List[TrajectoryRow]


class SessionRequest(ModelOptions, MethodOptions):
    pass


class SessionCreated(BaseModel):
    session_id: str


class PushRequest(BaseModel):
    onsets: OnsetPayload


class TraceRow(BaseModel):
    sweep: int
    rho: float
    log_posterior: float
    best_so_far: float


class TranscribeRequest(ModelOptions, MethodOptions):
    onsets: OnsetPayload


class TranscribeResponse(BaseModel):
    score: ScorePayload
    log_posterior: float
    trajectory: List[TrajectoryRow]
    trace: List[TraceRow] = Field(default_factory=list)


class SimulateRequest(ModelOptions):
    score: ScorePayload
    noise: Literal["full", "zeta_tau_zero", "noiseless"] = "full"
    forced_delta: Optional[List[float]] = None
    kinds: Optional[List[int]] = None
    seed: int = 0


class SimulateResponse(BaseModel):
    onsets: OnsetPayload
    latent: List[List[float]]


class BenchmarkRequest(ModelOptions):
    methods: Optional[List[str]] = None
    trials: int = 5
    seed: int = 0
    n_onsets: int = 11
    base_tempo: float = 1.0
    modulation: Literal["none", "sinusoidal"] = "sinusoidal"
    modulation_amplitude: float = 0.3
    modulation_period: float = 32.0
    clave_R: float = 0.025 ** 2
    use_params: bool = False


class BenchmarkRecord(BaseModel):
    method: str
    trials: int
    failures: int
    ed_median: float
    ed_q25: float
    ed_q75: float
    lld_median: float
    lld_q25: float
    lld_q75: float
    cost: int
    wall_time: float


class BenchmarkResponse(BaseModel):
    records: List[BenchmarkRecord]
    csv: str
    table: str


class FitPair(BaseModel):
    onsets: OnsetPayload
    score: ScorePayload


class FitRequest(ModelOptions):
    pairs: List[FitPair]
    dim: Optional[int] = None
    max_iter: int = 200


class FitResponse(BaseModel):
    params_text: str
    log_likelihoods: List[float]
    converged: bool


class ErrorBody(BaseModel):
    error: Literal["format", "infeasible", "config"]
    detail: str
