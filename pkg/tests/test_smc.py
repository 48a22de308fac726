import math
from fractions import Fraction as F

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import enumerate_joint, random_tempo_problem, tempo_dense
from tempoquant.lds import forward_pass
from tempoquant.score import Score, ScorePrior, log_prior_score
from tempoquant.smc import (
    NoFeasibleExtensionError,
    OnlineTracker,
    filter_estimate,
    map_extract,
    rbpf_init,
    rbpf_step,
    refine_reduced,
    run_filter,
)
from tempoquant.tempo import OnsetSequence, TempoParams, log_joint, simulate


def run_expand(onsets, params, prior, grid, upto=None):
    n = len(onsets) if upto is None else upto + 1
    ps = rbpf_init(params, prior, float(onsets.times[0]), 1, grid=grid)
    for k in range(1, n):
        ps = rbpf_step(ps, float(onsets.times[k]), grid=None, selection="expand", prune_threshold=0)
    return ps


def test_init_single_particle():
    p = TempoParams.random_walk()
    ps = rbpf_init(p, ScorePrior(), 1.25, 1)
    assert ps.n == 1 and ps.normalized_weights() == pytest.approx([1.0])
    assert ps.trajectory(0) == ()
    assert abs(ps.mu[0, 0] - 1.25) < 1e-3
    # log p(y0): tau prior variance plus observation variance
    expected = -0.5 * math.log(2 * math.pi * (p.prior_tau_var + p.R)) - 0.5 * 1.25 ** 2 / (p.prior_tau_var + p.R)
    assert ps.particle(0).phi.log_integral() == pytest.approx(expected, rel=1e-12)


def test_init_validation():
    with pytest.raises(ValueError):
        rbpf_init(TempoParams(), ScorePrior(), 0.0, 0)


@pytest.mark.parametrize("K,size,dim", [(2, 2, 2), (4, 3, 2), (6, 2, 3), (5, 3, 3)])
def test_expand_all_matches_enumeration(rng, K, size, dim):
    onsets, params, prior, grid = random_tempo_problem(rng, K, size, dim)
    ps = run_expand(onsets, params, prior, grid)
    truth = enumerate_joint(onsets, params, prior, grid)
    assert ps.n == len(truth) == size ** K
    for i in range(ps.n):
        lj, m, P = truth[ps.trajectory(i)]
        assert ps.log_joint[i] == pytest.approx(lj, rel=1e-9)
        assert np.allclose(ps.mu[i], m, rtol=1e-9, atol=1e-9)


def test_expand_all_mixture_moments_exact(rng):
    onsets, params, prior, grid = random_tempo_problem(rng, 4, 3)
    ps = run_expand(onsets, params, prior, grid)
    truth = enumerate_joint(onsets, params, prior, grid)
    lj = np.array([v[0] for v in truth.values()])
    w = np.exp(lj - lj.max())
    w /= w.sum()
    means = np.array([v[1] for v in truth.values()])
    covs = np.array([v[2] for v in truth.values()])
    tm = w @ means[:, 0]
    tv = w @ (covs[:, 0, 0] + means[:, 0] ** 2) - tm ** 2
    dm = w @ means[:, 1]
    est = filter_estimate(ps)
    assert est.tau_mean == pytest.approx(tm, rel=1e-9)
    assert est.delta_mean == pytest.approx(dm, rel=1e-9)
    assert est.tau_var == pytest.approx(tv, rel=1e-7)
    ev = np.logaddexp.reduce(lj)
    assert est.log_evidence == pytest.approx(ev, rel=1e-9)


def test_expand_all_map_is_exact(rng):
    onsets, params, prior, grid = random_tempo_problem(rng, 5, 3)
    ps = run_expand(onsets, params, prior, grid)
    truth = enumerate_joint(onsets, params, prior, grid)
    best = max(truth, key=lambda g: truth[g][0])
    assert map_extract(ps).gammas == best


def test_weight_identity_at_every_step(rng):
    onsets, params, prior, grid = random_tempo_problem(rng, 6, 3)
    tr = OnlineTracker(params, prior, 7, "multinomial", seed=3, grid=grid, prune_threshold=0)
    for k, y in enumerate(onsets.times):
        tr.push(float(y))
        ps = tr.particles
        assert ps.normalized_weights().sum() == pytest.approx(1.0, abs=1e-12)
        assert ps.n == 7
        for part in ps.particles:
            assert len(part.trajectory) == k
            lp = log_prior_score(Score(part.trajectory), prior)
            assert part.log_weight == pytest.approx(part.phi.log_integral() + lp, rel=1e-9)
            m, _, ll = tempo_dense(list(part.trajectory), onsets, params, upto=k)
            assert part.log_likelihood == pytest.approx(ll, rel=1e-9)


def test_single_grid_value_is_clamped_filter():
    params = TempoParams()
    gam = (F(1),) * 6
    onsets, _ = simulate(Score(gam), params, "full", seed=1)
    prior = ScorePrior(gamma_grid=(F(1),))
    run = run_filter(onsets, params, prior, 3, "multinomial", seed=0)
    spec = params.lds_spec()
    msgs, ll = forward_pass(spec, spec.transitions([1.0] * 6), onsets.times)
    mu, P, _ = msgs.alpha_filt[-1].to_moments()
    ps = run.particles
    assert np.allclose(ps.mu, mu, rtol=1e-9, atol=1e-12)
    assert float(ps.log_z[0]) == pytest.approx(ll, rel=1e-10)
    assert run.estimates[-1].tau_var == pytest.approx(P[0, 0], rel=1e-8)


def test_multinomial_is_reproducible(rng):
    onsets, params, prior, grid = random_tempo_problem(rng, 8, 3)
    a = run_filter(onsets, params, prior, 5, "multinomial", seed=11, grid=grid)
    b = run_filter(onsets, params, prior, 5, "multinomial", seed=11, grid=grid)
    assert np.array_equal(a.particles.gamma, b.particles.gamma)
    assert [e.tau_mean for e in a.estimates] == [e.tau_mean for e in b.estimates]


def test_filter_estimate_single_particle(rng):
    onsets, params, prior, grid = random_tempo_problem(rng, 3, 2)
    run = run_filter(onsets, params, prior, 1, "greedy", grid=grid)
    ps = run.particles
    est = run.estimates[-1]
    assert est.tau_mean == ps.mu[0, 0] and est.tau_var == pytest.approx(ps.P[0, 0, 0])


def test_mixture_of_two():
    params = TempoParams.random_walk()
    ps = rbpf_init(params, ScorePrior(), 0.0, 2)
    ps.mu[:] = [[0.4, 0.5], [0.6, 0.5]]
    ps.P[:] = np.diag([0.01, 0.01])
    est = filter_estimate(ps)
    assert est.tau_mean == pytest.approx(0.5)
    assert est.tau_var == pytest.approx(0.02)


def test_greedy_single_particle_is_split_track(rng):
    onsets, params, prior, grid = random_tempo_problem(rng, 6, 3)
    run = run_filter(onsets, params, prior, 1, "greedy", grid=grid, prune_threshold=0)
    # split-track: at every step take the best single extension of the kept path
    gam = []
    for k in range(1, len(onsets)):
        best = max(grid, key=lambda g: log_joint(Score(tuple(gam) + (g,)), onsets.prefix(k + 1), params, prior))
        gam.append(best)
    assert map_extract(run.particles).gammas == tuple(gam)


def test_greedy_keeps_top_n(rng):
    onsets, params, prior, grid = random_tempo_problem(rng, 3, 3)
    ps = rbpf_init(params, prior, float(onsets.times[0]), 1, grid=grid)
    ps = rbpf_step(ps, float(onsets.times[1]), selection="expand", prune_threshold=0)
    full = rbpf_step(ps, float(onsets.times[2]), selection="expand", prune_threshold=0)
    top = np.sort(full.log_joint)[::-1][:4]
    greedy = rbpf_step(ps, float(onsets.times[2]), selection="greedy", n_particles=4, prune_threshold=0)
    assert np.allclose(np.sort(greedy.log_joint)[::-1], top)


def test_hybrid_keeps_the_best(rng):
    onsets, params, prior, grid = random_tempo_problem(rng, 4, 3)
    full = run_expand(onsets, params, prior, grid, upto=2)
    ps = run_expand(onsets, params, prior, grid, upto=1)
    hyb = rbpf_step(ps, float(onsets.times[2]), selection="hybrid", n_particles=3, rng=5, prune_threshold=0)
    assert hyb.log_joint.max() == pytest.approx(full.log_joint.max())


def test_map_ties_take_smallest_trajectory():
    params = TempoParams.random_walk()
    prior = ScorePrior(gamma_grid=(F(1), F(2)))
    ps = rbpf_init(params, prior, 0.0, 1)
    ps = rbpf_step(ps, 0.5, selection="expand", prune_threshold=0)
    ps.log_z[:] = 0.0
    ps.log_prior[:] = 0.0
    assert map_extract(ps).gammas == (F(1),)


def test_no_feasible_extension():
    # thirds never land on a binary grid, so every extension has zero prior mass
    prior = ScorePrior(gamma_grid=(F(1, 3), F(2, 3)))
    ps = rbpf_init(TempoParams.random_walk(), prior, 0.0, 2)
    with pytest.raises(NoFeasibleExtensionError):
        rbpf_step(ps, 0.5, rng=0)


def test_online_prefix_purity(rng):
    onsets, params, prior, grid = random_tempo_problem(rng, 10, 3)
    full = OnlineTracker(params, prior, 5, "multinomial", seed=9, grid=grid)
    rows = [full.push(float(y)) for y in onsets.times]
    part = OnlineTracker(params, prior, 5, "multinomial", seed=9, grid=grid)
    rows6 = [part.push(float(y)) for y in onsets.times[:6]]
    assert rows6 == rows[:6]


def test_metronome_converges():
    params = TempoParams.random_walk(prior_delta_mean=0.6, prior_delta_var=0.2 ** 2)
    prior = ScorePrior(gamma_grid=(F(1),))
    y = np.arange(12) * 0.5
    run = run_filter(OnsetSequence(y), params, prior, 1, "greedy")
    assert abs(run.estimates[10].delta_mean - 0.5) / 0.5 < 0.01


def test_refine_no_op_cases(rng):
    onsets, params, prior, grid = random_tempo_problem(rng, 5, 3)
    truth = enumerate_joint(onsets, params, prior, grid)
    best = max(truth, key=lambda g: truth[g][0])
    sup = [grid] * 5
    assert refine_reduced(Score(best), sup, onsets, params, prior).gammas == best
    single = [(g,) for g in best]
    assert refine_reduced(Score(best), single, onsets, params, prior).gammas == best
    with pytest.raises(ValueError):
        refine_reduced(Score(best), sup[:4], onsets, params, prior)


def test_refine_finds_a_swap():
    """Two particles agree except at slice 3 and neither is the reduced-space optimum."""
    params = TempoParams.random_walk(R=0.01 ** 2)
    prior = ScorePrior()
    truth = Score((1, F(1, 2), F(1, 2), 1, 1))
    onsets, _ = simulate(truth, params, "noiseless", forced_delta=[0.5] * 5)
    a = Score((1, F(1, 2), 1, 1, F(1, 2)))
    b = Score((1, 1, F(1, 2), F(1, 2), 1))
    supports = [sorted({x, y}) for x, y in zip(a.gammas, b.gammas)]
    reduced = {}
    import itertools
    for g in itertools.product(*supports):
        s = Score(g)
        reduced[g] = log_joint(s, onsets, params, prior)
    best = max(reduced, key=reduced.get)
    assert reduced[best] > max(reduced[a.gammas], reduced[b.gammas])
    cand = max((a, b), key=lambda s: reduced[s.gammas])
    got = refine_reduced(cand, supports, onsets, params, prior)
    assert log_joint(got, onsets, params, prior) == pytest.approx(reduced[best])


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_refinement_never_hurts(seed):
    rng = np.random.default_rng(seed)
    onsets, params, prior, grid = random_tempo_problem(rng, 6, 3)
    run = run_filter(onsets, params, prior, 3, "multinomial", seed=seed, grid=grid)
    cand = run.map_score
    got = refine_reduced(cand, run.particles.supports(), onsets, params, prior, seed=seed)
    assert log_joint(got, onsets, params, prior) >= log_joint(cand, onsets, params, prior) - 1e-9
