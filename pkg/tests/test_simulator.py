import math

import numpy as np
import pytest
from pytest import approx
from scipy import stats as sps

from stopline.labels import MOTHER, is_antichain
from stopline.simulator import (
    SimulationError,
    alive_labels,
    empirical_moment_bound_check,
    label_stream,
    population_count,
    replication_seed,
    simulate_forest,
    total_born,
)

from conftest import make_spec

START = [(MOTHER, [0.0])]


def test_no_events_when_rate_zero():
    spec = make_spec(alpha=0.0)
    rec = simulate_forest(spec, START, horizon=2.0, dt=0.5, seed=3)
    assert len(rec.particles) == 1
    p = rec.particles[MOTHER]
    assert p.end_kind == "alive_at_horizon"
    assert math.isinf(p.end_time)
    assert population_count(rec, 2.0) == 1


def test_rejects_bad_inputs():
    spec = make_spec(alpha=0.0)
    with pytest.raises(SimulationError):
        simulate_forest(spec, START, horizon=1.0, dt=1.5, seed=0)
    with pytest.raises(SimulationError):
        simulate_forest(spec, [((1,), [0.0]), ((1, 0), [0.0])], horizon=1.0, dt=0.1, seed=0)
    with pytest.raises(SimulationError):
        simulate_forest(spec, [], horizon=1.0, dt=0.1, seed=0)


def test_bit_identical_records_for_same_seed():
    spec = make_spec(diffusion=("constant", 0.7), alpha=1.0,
                     offspring=("binary", (0.4, 0.6)))
    a = simulate_forest(spec, START, horizon=2.0, dt=0.05, seed=42)
    b = simulate_forest(spec, START, horizon=2.0, dt=0.05, seed=42)
    assert sorted(a.particles) == sorted(b.particles)
    for lab, pa in a.particles.items():
        pb = b.particles[lab]
        assert pa.end_time == pb.end_time
        assert np.array_equal(pa.times, pb.times)
        assert np.array_equal(pa.positions, pb.positions)


def test_seed_changes_record():
    spec = make_spec(alpha=1.0, offspring=("deterministic", 2))
    a = simulate_forest(spec, START, horizon=1.5, dt=0.25, seed=1)
    b = simulate_forest(spec, START, horizon=1.5, dt=0.25, seed=2)
    ea = a.particles[MOTHER].end_time
    eb = b.particles[MOTHER].end_time
    assert ea != eb


def test_local_branching_and_bookkeeping():
    spec = make_spec(diffusion=("constant", 0.5), alpha=2.0,
                     offspring=("deterministic", 2))
    rec = simulate_forest(spec, START, horizon=1.0, dt=0.05, seed=9)
    branched = [p for p in rec.particles.values() if p.end_kind == "branched"]
    assert branched
    for p in branched:
        kids = [rec.particles.get(p.label + (k,)) for k in range(p.offspring_count)]
        assert all(c is not None for c in kids)
        for c in kids:
            assert c.birth_time == p.end_time
            assert np.allclose(c.positions[0], p.positions[-1])
    # exactly k children exist, no extras
    for p in branched:
        extra = p.label + (p.offspring_count,)
        assert extra not in rec.particles


def test_antichain_of_alive_sets():
    spec = make_spec(alpha=1.5, offspring=("binary", (0.3, 0.7)))
    rec = simulate_forest(spec, START, horizon=2.0, dt=0.5, seed=11)
    event_times = sorted({p.birth_time for p in rec.particles.values()})
    for t in event_times:
        assert is_antichain(alive_labels(rec, min(t, rec.horizon)))


def test_total_born_monotone_and_counts():
    spec = make_spec(alpha=1.0, offspring=("deterministic", 2))
    rec = simulate_forest(spec, START, horizon=2.0, dt=0.25, seed=5)
    ts = np.linspace(0.0, 2.0, 21)
    born = [total_born(rec, t) for t in ts]
    assert born[0] == 1
    assert all(a <= b for a, b in zip(born, born[1:]))
    first_branch = min(p.end_time for p in rec.particles.values())
    if math.isfinite(first_branch) and first_branch < 2.0:
        assert total_born(rec, min(2.0, first_branch + 1e-9)) == 3


def test_pure_death_counts():
    spec = make_spec(alpha=1.0, offspring=("deterministic", 0))
    rec = simulate_forest(spec, START, horizon=5.0, dt=1.0, seed=21)
    assert total_born(rec, 5.0) == 1
    p = rec.particles[MOTHER]
    assert p.end_kind == "branched" and p.offspring_count == 0


def test_death_time_is_exponential():
    spec = make_spec(alpha=1.0, offspring=("deterministic", 0))
    reps = 4000
    ends = np.empty(reps)
    for r in range(reps):
        rec = simulate_forest(spec, START, horizon=60.0, dt=10.0,
                              seed=replication_seed(7, r))
        ends[r] = rec.particles[MOTHER].end_time
    assert np.all(np.isfinite(ends))
    se = ends.std(ddof=1) / math.sqrt(reps)
    assert abs(ends.mean() - 1.0) <= 3 * se


def test_yule_population_mean():
    spec = make_spec(alpha=1.0, offspring=("deterministic", 2))
    reps = 3000
    counts = np.empty(reps)
    for r in range(reps):
        rec = simulate_forest(spec, START, horizon=1.0, dt=0.25,
                              seed=replication_seed(13, r))
        counts[r] = population_count(rec, 1.0)
    se = counts.std(ddof=1) / math.sqrt(reps)
    assert abs(counts.mean() - math.e) <= 3 * se


def test_thinning_accepts_all_at_the_bound():
    spec = make_spec(alpha=1.0, offspring=("deterministic", 1))
    rec = simulate_forest(spec, START, horizon=500.0, dt=100.0, seed=3)
    assert rec.proposals > 100
    assert rec.rejections == 0


def test_thinning_rejects_half_at_half_rate():
    spec = make_spec(alpha=0.5, alpha_bar=1.0, offspring=("deterministic", 1))
    proposals = rejections = 0
    r = 0
    while proposals < 100_000:
        rec = simulate_forest(spec, START, horizon=2000.0, dt=500.0,
                              seed=replication_seed(17, r))
        proposals += rec.proposals
        rejections += rec.rejections
        r += 1
    frac = rejections / proposals
    se = math.sqrt(0.25 / proposals)
    assert abs(frac - 0.5) <= 3 * se


def test_offspring_frequencies_chi_square():
    spec = make_spec(alpha=1.0, offspring=("binary", (0.3, 0.7)))
    zeros = twos = 0
    for r in range(1500):
        rec = simulate_forest(spec, START, horizon=8.0, dt=2.0,
                              seed=replication_seed(23, r))
        for _, _, k in rec.branch_events:
            if k == 0:
                zeros += 1
            elif k == 2:
                twos += 1
            else:
                raise AssertionError(f"impossible offspring count {k}")
    n = zeros + twos
    stat, p = sps.chisquare([zeros, twos], [0.3 * n, 0.7 * n])
    assert p >= 0.01


def test_poisson_offspring_matches_pmf():
    lam = 0.5
    spec = make_spec(alpha=1.0, offspring=("poisson", lam))
    counts: dict = {}
    for r in range(1200):
        rec = simulate_forest(spec, START, horizon=6.0, dt=2.0,
                              seed=replication_seed(29, r))
        for _, _, k in rec.branch_events:
            counts[k] = counts.get(k, 0) + 1
    n = sum(counts.values())
    kmax = 4
    observed = [counts.get(k, 0) for k in range(kmax)] + [
        sum(v for k, v in counts.items() if k >= kmax)
    ]
    pk = [math.exp(-lam) * lam**k / math.factorial(k) for k in range(kmax)]
    expected = [p * n for p in pk] + [(1.0 - sum(pk)) * n]
    stat, p = sps.chisquare(observed, expected)
    assert p >= 0.01


def test_euler_moments_constant_coefficients():
    b, s, t = 0.3, 0.7, 1.0
    spec = make_spec(drift=("constant", b), diffusion=("constant", s), alpha=0.0)
    for dt in (1e-2, 1e-3):
        reps = 2500
        finals = np.empty(reps)
        for r in range(reps):
            rec = simulate_forest(spec, START, horizon=t, dt=dt,
                                  seed=replication_seed(31, r))
            finals[r] = rec.particles[MOTHER].positions[-1][0]
        se_mean = finals.std(ddof=1) / math.sqrt(reps)
        assert abs(finals.mean() - b * t) <= 3 * se_mean
        var = finals.var(ddof=1)
        se_var = var * math.sqrt(2.0 / (reps - 1))
        assert abs(var - s * s * t) <= 3 * se_var


def test_euler_drift_bias_shrinks_with_dt():
    # deterministic linear drift: the Euler error has a closed form
    r_rate = 0.5
    spec = make_spec(drift=("linear", r_rate), diffusion=("constant", 0.0), alpha=0.0)
    errs = []
    for dt in (1e-2, 1e-3):
        rec = simulate_forest(spec, [(MOTHER, [1.0])], horizon=1.0, dt=dt, seed=1)
        errs.append(abs(rec.particles[MOTHER].positions[-1][0] - math.exp(r_rate)))
    assert errs[1] < errs[0]


def test_exact_event_times_not_grid_snapped():
    spec = make_spec(alpha=3.0, offspring=("deterministic", 0))
    rec = simulate_forest(spec, START, horizon=10.0, dt=1.0, seed=2)
    end = rec.particles[MOTHER].end_time
    assert end != approx(round(end))
    assert rec.particles[MOTHER].times[-1] == approx(end)


def test_label_streams_differ():
    a = label_stream(1, (0,))
    b = label_stream(1, (1,))
    assert a.standard_normal(4).tolist() != b.standard_normal(4).tolist()


def test_moment_bound_check_k_one():
    spec = make_spec(alpha=0.3, offspring=("poisson", 0.5), gamma=5.0)
    mean, bound, ok = empirical_moment_bound_check(spec, K=1.0, t=1.0, reps=100, seed=5)
    assert mean == approx(1.0)
    assert bound == approx(1.0)
    assert ok


def test_moment_bound_check_k_below_one():
    spec = make_spec(alpha=0.3, offspring=("poisson", 0.5), gamma=5.0)
    mean, bound, ok = empirical_moment_bound_check(spec, K=0.5, t=1.0, reps=200, seed=5)
    assert mean <= 1.0
    assert bound == approx(1.0)
    assert ok


def test_max_particles_guard():
    spec = make_spec(alpha=5.0, offspring=("deterministic", 2))
    with pytest.raises(SimulationError):
        simulate_forest(spec, START, horizon=10.0, dt=1.0, seed=1, max_particles=50)


def test_path_stride_keeps_endpoints():
    spec = make_spec(diffusion=("constant", 1.0), alpha=0.0)
    full = simulate_forest(spec, START, horizon=1.0, dt=0.01, seed=4)
    thin = simulate_forest(spec, START, horizon=1.0, dt=0.01, seed=4, path_stride=10)
    pf, pt = full.particles[MOTHER], thin.particles[MOTHER]
    assert len(pt.times) < len(pf.times)
    assert pt.times[0] == pf.times[0]
    assert pt.times[-1] == pf.times[-1]
    assert np.allclose(pt.positions[-1], pf.positions[-1])
