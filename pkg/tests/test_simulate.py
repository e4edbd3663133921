import math

import numpy as np
import pytest

from sbc.problem_file import load_problem_text
from sbc.simulate import (
    SimConfig,
    clopper_pearson,
    empirical_curve,
    philox4x32,
    simulate,
    trial_normals,
    write_sim_csv,
)

DECAY = """\
system: {n: 1, drift: ["-x1"], diffusion: [["0"]]}
sets: {domain: ["x1 >= 0.1353352832366127"], initial: ["x1 = 1"], unsafe: ["x1 >= 2"], sample_box: [[0, 4]]}
"""

EXPLODE = """\
system: {n: 1, drift: ["x1^3"], diffusion: [["0"]]}
sets: {domain: [], initial: ["x1 = 2"], unsafe: ["x1 <= -100"], sample_box: [[0, 4]]}
"""


def u32(*xs):
    return [np.uint64(x) for x in xs]


@pytest.mark.parametrize("ctr,key,expect", [
    ((0, 0, 0, 0), (0, 0), (0x6627E8D5, 0xE169C58D, 0xBC57AC4C, 0x9B00DBD8)),
    ((0xFFFFFFFF,) * 4, (0xFFFFFFFF,) * 2, (0x408F276D, 0x41C83B0E, 0xA20BC7C6, 0x6D5451FD)),
    ((0x243F6A88, 0x85A308D3, 0x13198A2E, 0x03707344), (0xA4093822, 0x299F31D0),
     (0xD16CFE09, 0x94FDCCEB, 0x5001E420, 0x24126EA1)),
])
def test_philox_known_answers(ctr, key, expect):
    out = philox4x32(*u32(*ctr), *u32(*key))
    assert tuple(int(v) for v in out) == expect


def test_trial_streams_are_standard_normal_and_distinct():
    z = trial_normals(0, 0, 100_000)
    assert abs(z.mean()) < 5 / math.sqrt(len(z))
    assert abs(z.var() - 1.0) < 5 * math.sqrt(2 / len(z))
    other = trial_normals(0, 1, 1000)
    assert abs(np.corrcoef(z[:1000], other)[0, 1]) < 0.15
    assert np.array_equal(trial_normals(0, 0, 10), z[:10])
    assert not np.array_equal(trial_normals(1, 0, 10), z[:10])


def test_deterministic_decay_leaves_domain_on_time():
    prob = load_problem_text(DECAY).problem
    res = simulate(prob, SimConfig(dt=1e-3, horizon=5, trials=10, x0=[1.0]))
    assert res.hit_count == 0
    # x = e^{-t} leaves {x >= e^{-2}} at t = 2; Euler is off by O(dt)
    assert res.mean_stop_time == pytest.approx(2.0, abs=5e-3)


def test_config_checks():
    with pytest.raises(ValueError):
        SimConfig(trials=0)
    with pytest.raises(ValueError):
        SimConfig(dt=0.0)
    with pytest.raises(ValueError):
        SimConfig(seed=-1)
    with pytest.raises(ValueError):
        SimConfig(scheme="milstein")


def test_wrong_initial_dimension(population):
    with pytest.raises(ValueError):
        simulate(population.problem, SimConfig(trials=10, x0=[1.0, 2.0]))


def test_blow_up_counts_as_hit():
    prob = load_problem_text(EXPLODE).problem
    res = simulate(prob, SimConfig(dt=1e-3, horizon=1, trials=5, x0=[2.0]))
    assert res.blowups == 5 and res.hit_count == 5
    assert np.all(res.hit_times < 0.2)


def test_same_seed_same_result(oscillator):
    cfg = SimConfig(dt=1e-3, horizon=2, trials=3000, seed=42)
    a = simulate(oscillator.problem, cfg)
    b = simulate(oscillator.problem, cfg)
    assert np.array_equal(a.hit_times, b.hit_times, equal_nan=True)
    assert a.mean_stop_time == b.mean_stop_time


def test_seed_changes_paths(population):
    cfg = dict(dt=1e-3, horizon=5, trials=4000, x0=[1.0])
    a = simulate(population.problem, SimConfig(seed=1, **cfg))
    b = simulate(population.problem, SimConfig(seed=2, **cfg))
    assert not np.array_equal(a.hit_times, b.hit_times, equal_nan=True)


def test_halving_dt_is_stable(population):
    rates = []
    for dt in (1e-3, 5e-4):
        r = simulate(population.problem, SimConfig(dt=dt, horizon=8, trials=20_000, seed=3, x0=[1.0]))
        rates.append((r.empirical_rate, r.standard_error()))
    (p1, s1), (p2, s2) = rates
    assert abs(p1 - p2) <= 3 * math.hypot(s1, s2)


def test_population_rate_and_curve(population):
    res = simulate(population.problem, SimConfig(dt=1e-3, horizon=10, trials=20_000, seed=0, x0=[1.0]))
    assert res.empirical_rate < 0.12498
    # exact first-passage probability of geometric Brownian motion from 1 to 2;
    # Euler misses crossings between steps, hence the small allowance
    assert abs(res.empirical_rate - 2.0 ** -5) <= 5 * res.standard_error() + 2e-3
    curve = empirical_curve(population.problem, res.config, [0, 1, 2, 4, 8], result=res)
    vals = [v for _, v in curve]
    assert vals[0] == res.empirical_rate
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    lo, hi = clopper_pearson(int(vals[2] * res.trials), res.trials, 0.99)
    assert lo <= 0.12498 * math.exp(-2)


def test_safe_system_has_zero_curve():
    prob = load_problem_text(DECAY).problem
    cfg = SimConfig(dt=1e-2, horizon=3, trials=50, x0=[1.0])
    assert all(v == 0.0 for _, v in empirical_curve(prob, cfg, [0.5, 1.0, 2.0]))


def test_uniform_initial_states_are_reproducible(oscillator):
    cfg = SimConfig(dt=1e-2, horizon=1, trials=12_000, seed=5)
    a = simulate(oscillator.problem, cfg)
    b = simulate(oscillator.problem, cfg)
    assert np.array_equal(a.hit_times, b.hit_times, equal_nan=True)


def test_clopper_pearson_edges():
    assert clopper_pearson(0, 100)[0] == 0.0
    assert clopper_pearson(100, 100)[1] == 1.0
    lo, hi = clopper_pearson(30, 1000)
    assert lo < 0.03 < hi


def test_one_sided_upper_limit(population):
    res = simulate(population.problem, SimConfig(dt=1e-2, horizon=0.01, trials=1000, x0=[1.0]))
    assert res.hit_count == 0
    assert res.upper_one_sided(0.99) == pytest.approx(1 - 0.01 ** (1 / 1000), rel=1e-9)


def test_csv_output(tmp_path, population):
    res = simulate(population.problem, SimConfig(dt=1e-2, horizon=1, trials=100, x0=[1.0]))
    path = tmp_path / "sim.csv"
    write_sim_csv(res, path)
    head, row = path.read_text().splitlines()
    assert head.split(",")[:2] == ["trials", "hits"]
    assert row.split(",")[0] == "100"
