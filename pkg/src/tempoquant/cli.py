"""Command-line front end.

    tempoquant track onsets.txt --method pf --particles 10
    tempoquant transcribe onsets.txt --out score.txt --trajectory traj.csv
    tempoquant simulate score.txt --out onsets.txt --latent latent.csv
    tempoquant benchmark --trials 5 --out report.csv
    tempoquant fit onsets1.txt score1.txt [onsets2.txt score2.txt ...] --out params.txt

Commands run in-process unless ``--server URL`` points at a running service.
Exit codes: 0 success, 2 input format error, 3 inference infeasible, 4 config error.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path
from typing import Iterator, TextIO

from . import __version__, formats
from .config import ConfigError, RunConfig, load_run_config, parse_kv, run_config_from_dict
from .formats import FormatError
from .service import handlers as H
from .service import schemas as S

log = logging.getLogger("tempoquant")

EXIT_OK, EXIT_FORMAT, EXIT_INFEASIBLE, EXIT_CONFIG = 0, 2, 3, 4
_EXIT = {"format": EXIT_FORMAT, "infeasible": EXIT_INFEASIBLE, "config": EXIT_CONFIG}


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


# --- backends ------------------------------------------------------------


class LocalBackend:
    def __init__(self):
        self.sessions = H.SessionStore()

    def track(self, req):
        return H.track(req)

    def transcribe(self, req):
        return H.transcribe_handler(req)

    def simulate(self, req):
        return H.simulate_handler(req)

    def benchmark(self, req):
        return H.benchmark_handler(req)

    def fit(self, req):
        return H.fit_handler(req)

    def open_session(self, req):
        return self.sessions.create(req).session_id

    def push(self, sid, req):
        return self.sessions.push(sid, req)

    def close_session(self, sid):
        self.sessions.close(sid)


class HttpBackend:
    """Thin client for the HTTP service."""

    def __init__(self, url: str, timeout: float = 600.0):
        import httpx

        self.client = httpx.Client(base_url=url.rstrip("/"), timeout=timeout)

    def _post(self, path: str, req, model):
        r = self.client.post(path, json=req.model_dump(mode="json"))
        return self._parse(r, model)

    @staticmethod
    def _parse(r, model):
        if r.status_code in (400, 409):
            body = r.json()
            raise CliError(body.get("error", "config"), body.get("detail", r.text))
        if r.status_code == 422:
            raise CliError("config", f"service rejected the request: {r.text}")
        r.raise_for_status()
        return model.model_validate(r.json()) if model is not None else None

    def track(self, req):
        return self._post("/track", req, S.TrackResponse)

    def transcribe(self, req):
        return self._post("/transcribe", req, S.TranscribeResponse)

    def simulate(self, req):
        return self._post("/simulate", req, S.SimulateResponse)

    def benchmark(self, req):
        return self._post("/benchmark", req, S.BenchmarkResponse)

    def fit(self, req):
        return self._post("/fit", req, S.FitResponse)

    def open_session(self, req):
        return self._post("/sessions", req, S.SessionCreated).session_id

    def push(self, sid, req):
        return self._post(f"/sessions/{sid}/onsets", req, S.TrackResponse)

    def close_session(self, sid):
        self.client.delete(f"/sessions/{sid}")


# --- helpers -------------------------------------------------------------


def _model_dict(cfg: RunConfig) -> dict:
    d = {}
    if cfg.params:
        try:
            text = Path(cfg.params).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read params file {cfg.params}: {exc}") from None
        d.update(parse_kv(text, cfg.params))
    d.update(cfg.overrides)
    return d


def _method_fields(cfg: RunConfig) -> dict:
    sched = cfg.schedule_values()
    return dict(method=cfg.method, particles=cfg.particles, sweeps=cfg.sweeps, restarts=cfg.restarts,
                block=cfg.block, schedule=list(sched) if sched else None, refine=cfg.refine,
                prune_threshold=cfg.prune_threshold, init=cfg.init, seed=cfg.seed)


@contextlib.contextmanager
def _output(path: str | None, stdout: TextIO) -> Iterator[TextIO]:
    if path is None or path == "-":
        yield stdout
    else:
        with open(path, "w") as fh:
            yield fh


def _write_text(path: str | None, text: str, stdout: TextIO) -> None:
    with _output(path, stdout) as fh:
        fh.write(text)


def _csv_line(fields) -> str:
    return ",".join(fields) + "\n"


def _row_dict(row: S.TrajectoryRow) -> dict:
    return row.model_dump()


# --- commands ------------------------------------------------------------


def cmd_track(args, cfg: RunConfig, backend, stdin: TextIO, stdout: TextIO) -> int:
    if cfg.method not in H.FILTER_METHODS:
        raise ConfigError(f"track is online and needs one of {H.FILTER_METHODS}; {cfg.method!r} is batch-only")
    model = _model_dict(cfg)
    fields = _method_fields(cfg)
    if args.stdin or cfg.input in (None, "-"):
        if not args.stdin and cfg.input is None:
            raise ConfigError("track needs an onset file or --stdin")
        return _track_stream(stdin, backend, model, fields, cfg.output, stdout)
    onsets = formats.read_onsets(Path(cfg.input))
    req = S.TrackRequest(onsets=H.onset_payload(onsets), params=model, **fields)
    resp = backend.track(req)
    with _output(cfg.output, stdout) as fh:
        fh.write(formats.trajectory_header() + "\n")
        for row in resp.rows:
            fh.write(_csv_line(formats.trajectory_row(_row_dict(row))))
    return EXIT_OK


def _track_stream(stream: TextIO, backend, model: dict, fields: dict, out_path, stdout: TextIO) -> int:
    """One row per input line, flushed as soon as it is computed."""
    sid = backend.open_session(S.SessionRequest(params=model, **fields))
    n_rows = 0
    try:
        with _output(out_path, stdout) as fh:
            for _, t, kind in formats.iter_onsets(iter(stream.readline, ""), "stdin"):
                resp = backend.push(sid, S.PushRequest(onsets=S.OnsetPayload(times=[t], kinds=[int(kind)])))
                if n_rows == 0:
                    fh.write(formats.trajectory_header() + "\n")
                for row in resp.rows:
                    fh.write(_csv_line(formats.trajectory_row(_row_dict(row))))
                    n_rows += 1
                fh.flush()
    finally:
        with contextlib.suppress(Exception):
            backend.close_session(sid)
    if n_rows == 0:
        raise FormatError("no onsets", None, "stdin")
    return EXIT_OK


def cmd_transcribe(args, cfg: RunConfig, backend, stdin, stdout) -> int:
    if cfg.input is None:
        raise ConfigError("transcribe needs an onset file")
    onsets = formats.read_onsets(Path(cfg.input) if cfg.input != "-" else stdin)
    req = S.TranscribeRequest(onsets=H.onset_payload(onsets), params=_model_dict(cfg), **_method_fields(cfg))
    resp = backend.transcribe(req)
    score = H.score_of(resp.score)
    _write_text(cfg.output, formats.write_score(score), stdout)
    if cfg.trajectory:
        _write_text(cfg.trajectory, formats.write_trajectory(_row_dict(r) for r in resp.trajectory), stdout)
    if args.trace:
        _write_text(args.trace, formats.write_trace(r.model_dump() for r in resp.trace), stdout)
    log.info("log posterior %.9f", resp.log_posterior)
    return EXIT_OK


def cmd_simulate(args, cfg: RunConfig, backend, stdin, stdout) -> int:
    if cfg.input is None:
        raise ConfigError("simulate needs a score file")
    score = formats.read_score(Path(cfg.input) if cfg.input != "-" else stdin)
    req = S.SimulateRequest(score=H.score_payload(score), params=_model_dict(cfg), noise=cfg.noise,
                            forced_delta=cfg.forced_delta_values(), seed=cfg.seed)
    resp = backend.simulate(req)
    _write_text(cfg.output, formats.write_onsets(H.onsets_of(resp.onsets)), stdout)
    if args.latent:
        import numpy as np

        _write_text(args.latent, formats.write_latent(np.asarray(resp.latent), score.locations), stdout)
    return EXIT_OK


def cmd_benchmark(args, cfg: RunConfig, backend, stdin, stdout) -> int:
    methods = [t.strip() for t in cfg.methods.split(";") if t.strip()] if cfg.methods else None
    model = _model_dict(cfg)
    req = S.BenchmarkRequest(
        methods=methods, trials=cfg.trials, seed=cfg.seed, n_onsets=cfg.n_onsets, base_tempo=cfg.base_tempo,
        modulation=cfg.modulation, modulation_amplitude=cfg.modulation_amplitude,
        modulation_period=cfg.modulation_period, clave_R=cfg.clave_R, params=model, use_params=bool(model),
    )
    resp = backend.benchmark(req)
    if cfg.output and cfg.output != "-":
        _write_text(cfg.output, resp.csv, stdout)
        stdout.write(resp.table + "\n")
    else:
        stdout.write(resp.csv)
        sys.stderr.write(resp.table + "\n")
    return EXIT_OK


def cmd_fit(args, cfg: RunConfig, backend, stdin, stdout) -> int:
    files = args.files
    if not files:
        raise ConfigError("empty dataset: give onset/score file pairs")
    if len(files) % 2:
        raise ConfigError("fit takes onset/score files in pairs")
    pairs = []
    for on_path, sc_path in zip(files[::2], files[1::2]):
        onsets = formats.read_onsets(Path(on_path))
        score = formats.read_score(Path(sc_path))
        pairs.append(S.FitPair(onsets=H.onset_payload(onsets), score=H.score_payload(score)))
    req = S.FitRequest(pairs=pairs, dim=cfg.fit_dim, params=_model_dict(cfg))
    resp = backend.fit(req)
    _write_text(cfg.output, resp.params_text, stdout)
    log.info("EM: %d iterations, converged=%s", len(resp.log_likelihoods), resp.converged)
    return EXIT_OK


COMMANDS = {
    "track": cmd_track,
    "transcribe": cmd_transcribe,
    "simulate": cmd_simulate,
    "benchmark": cmd_benchmark,
    "fit": cmd_fit,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config file (key = value)")
    common.add_argument("--params", help="model params file (key = value)")
    common.add_argument("--seed", type=int)
    common.add_argument("--method", help="pf, gf, hybrid, gibbs, sa, ii or exact")
    common.add_argument("--particles", type=int)
    common.add_argument("--sweeps", type=int)
    common.add_argument("--restarts", type=int)
    common.add_argument("--block", type=int, help="slices per Gibbs block")
    common.add_argument("--out", help="output path (default stdout)")
    common.add_argument("--server", help="service URL; run in-process if omitted")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tempoquant", description="Estimate tempo and notated rhythm from onset times.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("track", parents=[common], help="online tempo tracking, one CSV row per onset")
    t.add_argument("input", nargs="?")
    t.add_argument("--stdin", action="store_true", help="read onsets from standard input as they arrive")

    tr = sub.add_parser("transcribe", parents=[common], help="MAP score for an onset file")
    tr.add_argument("input", nargs="?")
    tr.add_argument("--trajectory", help="write the MAP trajectory CSV here")
    tr.add_argument("--trace", help="write the per-sweep trace CSV here (batch methods)")
    tr.add_argument("--no-refine", dest="refine", action="store_false", default=None,
                    help="skip local search on the particle supports")

    s = sub.add_parser("simulate", parents=[common], help="draw onsets for a score")
    s.add_argument("input", nargs="?")
    s.add_argument("--latent", help="write the latent state CSV here")
    s.add_argument("--noise", choices=["full", "zeta_tau_zero", "noiseless"])
    s.add_argument("--forced-delta", dest="forced_delta", help="comma-separated beat periods")

    b = sub.add_parser("benchmark", parents=[common], help="compare methods on synthetic clave data")
    b.add_argument("--trials", type=int)
    b.add_argument("--methods", help="';'-separated tokens such as 'pf:N=100;gibbs:S=50:L=2'")
    b.add_argument("--n-onsets", dest="n_onsets", type=int)

    f = sub.add_parser("fit", parents=[common], help="EM fit of model parameters from onset/score pairs")
    f.add_argument("files", nargs="*")
    f.add_argument("--dim", dest="fit_dim", type=int)
    return p


_CLI_KEYS = ("params", "seed", "method", "particles", "sweeps", "restarts", "block", "refine", "noise",
             "forced_delta", "trials", "methods", "n_onsets", "fit_dim", "trajectory")


def config_from_args(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    cli = {k: getattr(args, k) for k in _CLI_KEYS if getattr(args, k, None) is not None}
    if getattr(args, "input", None) is not None:
        cli["input"] = args.input
    if args.out is not None:
        cli["output"] = args.out
    return run_config_from_dict(cli, cfg)


def main(argv=None, stdin: TextIO | None = None, stdout: TextIO | None = None, backend=None) -> int:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(args)
        if backend is None:
            backend = HttpBackend(args.server) if args.server else LocalBackend()
        return COMMANDS[args.command](args, cfg, backend, stdin, stdout)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT.get(exc.kind, EXIT_CONFIG)
    except Exception as exc:
        kind = H.classify(exc)
        if kind is None:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT[kind]


if __name__ == "__main__":
    sys.exit(main())
