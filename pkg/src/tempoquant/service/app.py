"""FastAPI application.

Run with ``uvicorn tempoquant.service.app:app``.  Domain errors come back as
``{"error": kind, "detail": message}`` with status 400 (format, config) or
409 (infeasible inference).
"""
from __future__ import annotations

from fastapi import FastAPI, HTTPException
from fastapi.responses import JSONResponse

from .. import __version__
from . import handlers as H
from . import schemas as S

app = FastAPI(title="tempoquant", version=__version__)
sessions = H.SessionStore()

_STATUS = {"format": 400, "config": 400, "infeasible": 409}


def _run(fn, *args):
    try:
        return fn(*args)
    except Exception as exc:
        kind = H.classify(exc)
        if kind is None:
            raise
        body = S.ErrorBody(error=kind, detail=str(exc))
        return JSONResponse(status_code=_STATUS[kind], content=body.model_dump())


@app.get("/health")
def health():
    return {"status": "ok", "version": __version__}


@app.post("/track", response_model=S.TrackResponse)
def track(req: S.TrackRequest):
    return _run(H.track, req)


@app.post("/sessions", response_model=S.SessionCreated)
def create_session(req: S.SessionRequest):
    return _run(sessions.create, req)


@app.post("/sessions/{session_id}/onsets", response_model=S.TrackResponse)
def push_onsets(session_id: str, req: S.PushRequest):
    try:
        return _run(sessions.push, session_id, req)
    except KeyError:
        raise HTTPException(status_code=404, detail="unknown session") from None


@app.delete("/sessions/{session_id}", status_code=204)
def close_session(session_id: str):
    try:
        sessions.close(session_id)
    except KeyError:
        raise HTTPException(status_code=404, detail="unknown session") from None


@app.post("/transcribe", response_model=S.TranscribeResponse)
def transcribe(req: S.TranscribeRequest):
    return _run(H.transcribe_handler, req)


@app.post("/simulate", response_model=S.SimulateResponse)
def simulate(req: S.SimulateRequest):
    return _run(H.simulate_handler, req)


@app.post("/benchmark", response_model=S.BenchmarkResponse)
def benchmark(req: S.BenchmarkRequest):
    return _run(H.benchmark_handler, req)


@app.post("/fit", response_model=S.FitResponse)
def fit(req: S.FitRequest):
    return _run(H.fit_handler, req)
