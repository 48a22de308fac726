import io
import time
from fractions import Fraction as F

import numpy as np
import pytest

from tempoquant import cli
from tempoquant.config import load_params
from tempoquant.evaluate import edit_distance
from tempoquant.formats import read_onsets, read_score, read_trajectory, write_onsets, write_score
from tempoquant.score import Score
from tempoquant.tempo import OnsetSequence, TempoParams, simulate

PATTERN = (1, 1, F(1, 2), F(1, 2), 1, 1, 1, F(1, 2), F(1, 2), 1)


def run(argv, stdin=""):
    out = io.StringIO()
    code = cli.main(argv, stdin=io.StringIO(stdin), stdout=out)
    return code, out.getvalue()


def onset_file(tmp_path, times, name="on.txt"):
    p = tmp_path / name
    p.write_text(write_onsets(OnsetSequence(times)))
    return str(p)


def score_file(tmp_path, gammas, name="sc.txt"):
    p = tmp_path / name
    p.write_text(write_score(Score(tuple(gammas))))
    return str(p)


def metronome_config(tmp_path):
    p = tmp_path / "run.txt"
    p.write_text("grid = 1\nmethod = gf\nparticles = 1\n")
    return str(p)


def test_track_emits_one_row_per_onset(tmp_path):
    path = onset_file(tmp_path, [0, 0.23, 0.88, 1.24])
    code, out = run(["track", path])
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0].startswith("k,y_k,tau_mean")
    assert len(lines) == 5


def test_track_stdin_matches_file_mode(tmp_path):
    times = [0, 0.23, 0.88, 1.24]
    path = onset_file(tmp_path, times)
    _, from_file = run(["track", path, "--seed", "3"])
    _, from_stdin = run(["track", "--stdin", "--seed", "3"], stdin=write_onsets(OnsetSequence(times)))
    assert from_file == from_stdin


def test_track_stdin_streams_row_by_row():
    class Lines(io.StringIO):
        def __init__(self, text, sink):
            super().__init__(text)
            self.sink = sink
            self.seen = []

        def readline(self, *a):
            # every earlier onset must already be answered when the next one is read
            self.seen.append(self.sink.getvalue().count("\n"))
            return super().readline(*a)

    out = io.StringIO()
    src = Lines("#onsets v1\n0\n0.5\n1.0\n", out)
    assert cli.main(["track", "--stdin"], stdin=src, stdout=out) == 0
    # header read, then onset 0 read before any output, then a header and row per onset
    assert src.seen[:4] == [0, 0, 2, 3]


def test_track_prefix_purity(tmp_path):
    rng = np.random.default_rng(0)
    onsets, _ = simulate(Score(PATTERN * 2), TempoParams(), "full", seed=4)
    full = onset_file(tmp_path, onsets.times, "full.txt")
    _, out = run(["track", full, "--particles", "5", "--seed", "9"])
    full_lines = out.splitlines()
    for n in sorted(rng.choice(np.arange(1, len(onsets)), 5, replace=False)):
        pre = onset_file(tmp_path, onsets.times[:n], f"p{n}.txt")
        _, part = run(["track", pre, "--particles", "5", "--seed", "9"])
        assert part.splitlines() == full_lines[: n + 1]


def test_track_metronome_converges(tmp_path):
    times = 0.5 * np.arange(16) + 0.3
    path = onset_file(tmp_path, times)
    code, out = run(["track", path, "--config", metronome_config(tmp_path)])
    assert code == 0
    rows = read_trajectory(out)
    for r in rows[10:]:
        assert abs(r["delta_mean"] - 0.5) <= 0.005


def test_track_rejects_batch_method(tmp_path):
    path = onset_file(tmp_path, [0, 0.5])
    code, out = run(["track", path, "--method", "gibbs"])
    assert code == 4 and out == ""


def test_track_empty_file(tmp_path, capsys):
    p = tmp_path / "empty.txt"
    p.write_text("")
    code, out = run(["track", str(p)])
    assert code == 2 and out == ""
    code, out = run(["track", "--stdin"], stdin="#onsets v1\n")
    assert code == 2 and out == ""


def test_track_bad_line_reports_number(tmp_path, capsys):
    p = tmp_path / "bad.txt"
    p.write_text("#onsets v1\n0\n0.5\noops\n")
    code, _ = run(["track", str(p)])
    assert code == 2
    assert "line 4" in capsys.readouterr().err


def test_track_infeasible_exit_code(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("grid = 1/3\nprior_schemas = 2,2,2\n")
    path = onset_file(tmp_path, [0, 0.5, 1.0])
    code, _ = run(["track", path, "--config", str(cfg)])
    assert code == 3


def test_unknown_config_key_exit_code(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("partciles = 3\n")
    path = onset_file(tmp_path, [0, 0.5])
    assert run(["track", path, "--config", str(cfg)])[0] == 4


def test_transcribe_noiseless_recovers_score(tmp_path):
    sc = score_file(tmp_path, PATTERN)
    on = tmp_path / "on.txt"
    assert run(["simulate", sc, "--noise", "noiseless", "--out", str(on)])[0] == 0
    est = tmp_path / "est.txt"
    traj = tmp_path / "traj.csv"
    assert run(["transcribe", str(on), "--out", str(est), "--trajectory", str(traj)])[0] == 0
    assert edit_distance(Score(PATTERN), read_score(est.read_text())) == 0
    rows = read_trajectory(traj.read_text())
    assert len(rows) == len(PATTERN) + 1
    assert [r["gamma_map"] for r in rows[1:]] == list(PATTERN)


@pytest.mark.parametrize("method", ["pf", "ii"])
def test_transcribe_deterministic(tmp_path, method):
    onsets, _ = simulate(Score(PATTERN), TempoParams(), "full", seed=1)
    path = onset_file(tmp_path, onsets.times)
    args = ["transcribe", path, "--method", method, "--seed", "5", "--sweeps", "5", "--restarts", "3"]
    a = run(args)
    b = run(args)
    assert a == b and a[0] == 0


def test_transcribe_trace_for_batch(tmp_path):
    onsets, _ = simulate(Score(PATTERN), TempoParams(), "full", seed=1)
    path = onset_file(tmp_path, onsets.times)
    trace = tmp_path / "trace.csv"
    code, _ = run(["transcribe", path, "--method", "sa", "--sweeps", "6", "--trace", str(trace)])
    assert code == 0
    lines = trace.read_text().splitlines()
    assert lines[0] == "sweep,rho,log_posterior,best_so_far"
    assert len(lines) == 7


def test_simulate_forced_periods(tmp_path):
    sc = score_file(tmp_path, (F(1, 2), 1, F(1, 2)))
    cfg = tmp_path / "rw.txt"
    cfg.write_text("dim = 2\n")
    latent = tmp_path / "z.csv"
    code, out = run(["simulate", sc, "--params", str(cfg), "--noise", "zeta_tau_zero",
                     "--forced-delta", "0.5,0.6,0.7", "--latent", str(latent)])
    assert code == 0
    z = np.loadtxt(latent, delimiter=",", skiprows=1, usecols=(2,))
    assert np.allclose(z, [0, 0.25, 0.85, 1.20], atol=1e-12)


def test_simulate_round_trip_and_seed(tmp_path):
    sc = score_file(tmp_path, PATTERN)
    _, a = run(["simulate", sc, "--seed", "11"])
    _, b = run(["simulate", sc, "--seed", "11"])
    _, c = run(["simulate", sc, "--seed", "12"])
    assert a == b and a != c
    assert read_onsets(a).times.size == len(PATTERN) + 1
    assert write_onsets(read_onsets(a)) == a


def test_benchmark_tiny_matrix(tmp_path):
    out = tmp_path / "rep.csv"
    t0 = time.perf_counter()
    code, table = run(["benchmark", "--methods", "gf:N=2;ii:S=5", "--trials", "2", "--out", str(out)])
    assert code == 0 and time.perf_counter() - t0 < 10
    lines = out.read_text().splitlines()
    assert len(lines) == 3
    assert lines[0].startswith("method,")
    assert "ii-S5-L1" in table


def test_benchmark_single_method_to_stdout(capsys):
    code, out = run(["benchmark", "--methods", "gf:N=1:refine=0", "--trials", "1", "--n-onsets", "6"])
    assert code == 0
    assert out.splitlines()[1].startswith("gf-N1,")


def test_benchmark_bad_token():
    assert run(["benchmark", "--methods", "warp:N=3"])[0] == 4


def _fit_dataset(tmp_path, params, prefix, n=40, K=40, seed=0):
    files = []
    for i in range(n):
        rng = np.random.default_rng(1000 + i)
        gammas = tuple(F(int(v), 2) for v in rng.integers(1, 4, K))
        onsets, _ = simulate(Score(gammas), params, "full", seed=seed + i)
        files += [onset_file(tmp_path, onsets.times, f"{prefix}{i}.on"), score_file(tmp_path, gammas, f"{prefix}{i}.sc")]
    return files


def test_fit_refit_is_stable(tmp_path):
    # tau drift and onset noise trade off weakly, so the dataset must be large enough to pin both
    truth = TempoParams.random_walk()
    first = tmp_path / "fit1.txt"
    code, _ = run(["fit", *_fit_dataset(tmp_path, truth, "a"), "--dim", "2", "--out", str(first)])
    assert code == 0
    p1, _ = load_params(first)
    second = tmp_path / "fit2.txt"
    code, _ = run(["fit", *_fit_dataset(tmp_path, p1, "b", seed=500), "--dim", "2", "--params", str(first),
                   "--out", str(second)])
    assert code == 0
    p2, _ = load_params(second)
    for a, b in zip((p1.R,) + p1.Q, (p2.R,) + p2.Q):
        assert abs(b - a) / a < 0.3


def test_fit_dimension_flag(tmp_path):
    files = _fit_dataset(tmp_path, TempoParams(), "d", n=3)
    code, text = run(["fit", *files, "--dim", "3"])
    assert code == 0 and "dim = 3" in text
    code, text = run(["fit", *files, "--dim", "2"])
    assert code == 0 and "dim = 2" in text


def test_fit_errors(tmp_path):
    assert run(["fit"])[0] == 4
    files = _fit_dataset(tmp_path, TempoParams(), "e", n=1)
    assert run(["fit", files[0]])[0] == 4
    short = score_file(tmp_path, (1, 1), "short.sc")
    assert run(["fit", files[0], short])[0] == 2
