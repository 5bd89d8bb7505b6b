import csv

import numpy as np
import pytest
from scipy import stats

from oracles import ar1, ar1_correlation_length, poly_delta_cdf
from smoothsr.encoding import ConfigError, TreeConfig, build_layout
from smoothsr.fla import (MEASURE_LABELS, Manipulator, adaptive_walk, auto_correlation, correlation_length,
                          fla_battery, information_analysis, mutate, mutate_many, parse_manipulator,
                          polynomial_delta, random_walk, write_report_csv)
from smoothsr.objective import Problem, gen_poly10

P1_15 = Manipulator("polynomial_one_position", 15)
P1_2 = Manipulator("polynomial_one_position", 2)
PALL_2 = Manipulator("polynomial_all_position", 2)
UNI = Manipulator("uniform_one_position")


def square(x):
    return float(np.sum(np.asarray(x) ** 2))


def test_names_and_parsing():
    assert [m.name for m in (P1_15, PALL_2, UNI)] == ["poly-1-15", "poly-all-2", "uni-1"]
    for name in ("poly-1-15", "poly-all-15", "poly-1-2", "poly-all-2", "uni-1"):
        assert parse_manipulator(name).name == name
    with pytest.raises(ConfigError, match="valid names"):
        parse_manipulator("gauss-1")
    with pytest.raises(ConfigError):
        Manipulator("uniform_one_position", uniform_bounds=(1, 1))


def test_delta_formula():
    assert polynomial_delta(0.5, 15) == 0.0
    assert polynomial_delta(0.0, 2) == -1.0
    u = np.array([0.1, 0.3, 0.7, 0.9])
    c = 4.0
    want = [(2 * v) ** (1 / (c + 1)) - 1 if v < 0.5 else 1 - (2 * (1 - v)) ** (1 / (c + 1)) for v in u]
    assert np.allclose(polynomial_delta(u, c), want, rtol=1e-15)


@pytest.mark.parametrize("c", [2.0, 15.0])
def test_delta_distribution_ks(c):
    u = np.random.default_rng(int(c)).random(100_000)
    d = polynomial_delta(u, c)
    res = stats.kstest(d, np.vectorize(lambda t: poly_delta_cdf(t, c)))
    assert res.pvalue > 0.01


def test_contiguity_controls_step_size():
    u = np.random.default_rng(0).random(100_000)
    small15 = np.mean(np.abs(polynomial_delta(u, 15)) <= 0.2)
    small2 = np.mean(np.abs(polynomial_delta(u, 2)) <= 0.2)
    assert small15 > 0.9 and small2 < 0.6


def test_position_counts():
    rng = np.random.default_rng(1)
    x = rng.normal(size=30)
    for m in (P1_15, UNI):
        assert np.count_nonzero(mutate(x, m, rng) != x) == 1
    Y = mutate_many(x, PALL_2, rng, 5)
    assert np.all(np.count_nonzero(Y != x, axis=1) >= 28)
    lo, hi = UNI.uniform_bounds
    Y = mutate_many(x, UNI, rng, 200)
    changed = Y[Y != x]
    assert np.all((changed >= lo) & (changed <= hi))


def test_random_walk_basics():
    w = random_walk(np.ones(3), 1, P1_2, square, seed=3)
    assert w.steps == 1 and len(w.fitness) == 2
    a = random_walk(np.ones(5), 200, P1_2, square, seed=7)
    b = random_walk(np.ones(5), 200, P1_2, square, seed=7)
    assert np.array_equal(a.fitness, b.fitness)
    with pytest.raises(ValueError):
        random_walk(np.ones(3), 0, P1_2, square)
    boxed = random_walk(np.zeros(4), 500, PALL_2, square, seed=1, domain=(-0.5, 0.5))
    assert boxed.fitness.max() <= 4 * 0.25 + 1e-12


def test_random_walk_flags_nonfinite():
    f = iter([1.0, np.nan, 2.0, np.inf, 0.5])
    w = random_walk(np.zeros(2), 4, P1_2, lambda x: next(f), seed=0)
    assert w.nonfinite == 2 and np.all(np.isfinite(w.fitness))
    assert w.fitness.tolist() == [1.0, 2.0, 2.0, 2.0, 0.5]


def test_constant_walk_is_degenerate():
    w = random_walk(np.zeros(3), 50, P1_2, lambda x: 3.0, seed=0)
    assert auto_correlation(w, with_flag=True) == (0.0, True)


def test_down_walk_on_parabola():
    w = adaptive_walk(np.array([5.0]), "down", 10, 1000, P1_2, square, seed=0)
    assert w.steps >= 1 and w.fitness[-1] < 25.0
    assert np.all(np.diff(w.fitness) < 0)


def test_up_walk_terminates_when_bounded():
    bounded = lambda x: float(-np.sum(np.asarray(x) ** 2))  # noqa: E731
    lengths = [adaptive_walk(np.ones(2), "up", 200, 10_000, P1_2, bounded, seed=s).steps for s in range(100)]
    assert max(lengths) < 10_000


def test_single_neighbor_is_first_improvement():
    w = adaptive_walk(np.array([3.0, -2.0]), "down", 1, 50, P1_2, square, seed=5)
    assert np.all(np.diff(w.fitness) < 0)


def test_fast_paths_agree_with_plain_objective():
    prob = Problem(build_layout(TreeConfig(3, 10)), gen_poly10(100, 0))
    f = lambda x: float(prob.total_batch(x, 0.1, 0.1)[0])  # noqa: E731
    start = np.random.default_rng(0).normal(size=prob.dimension)
    for m in (P1_15, UNI, PALL_2):
        plain = adaptive_walk(start, "down", 20, 30, m, f, seed=4)
        fast = adaptive_walk(start, "down", 20, 30, m, f, seed=4,
                             batch_objective=lambda X: prob.total_batch(X, 0.1, 0.1),
                             one_position_objective=lambda x, p, v: prob.total_one_position(x, p, v, 0.1, 0.1))
        assert plain.steps == fast.steps
        assert np.allclose(plain.fitness, fast.fitness, rtol=1e-9)


def test_autocorrelation_examples():
    ramp = np.arange(100.0)
    assert auto_correlation(ramp) == pytest.approx(1.0, abs=1e-12)
    noise = np.random.default_rng(0).normal(size=10_001)
    assert abs(auto_correlation(noise)) < 0.05
    with pytest.raises(ValueError):
        auto_correlation(ramp, 99)


def test_autocorrelation_ar1():
    f = ar1(0.8, 100_001, 1)
    assert auto_correlation(f) == pytest.approx(0.8, abs=0.02)
    assert auto_correlation(f, 3) == pytest.approx(0.8**3, abs=0.02)


def test_autocorrelation_affine_invariance():
    f = np.array(ar1(0.5, 2000, 2))
    for a, b in ((3.0, -1.0), (1e-3, 50.0)):
        assert auto_correlation(a * f + b, 2) == pytest.approx(auto_correlation(f, 2), abs=1e-12)


def test_correlation_length_examples():
    assert correlation_length(np.arange(101.0)) == 50
    hits = sum(correlation_length(np.random.default_rng(s).normal(size=2001)) == 0 for s in range(50))
    assert hits >= 40  # per-seed rate is about 95%
    with pytest.raises(ValueError):
        correlation_length(np.arange(9.0))


def test_correlation_length_ar1_oracle():
    T = 100_000
    expect = ar1_correlation_length(0.9, T)
    assert expect == 48
    got = [correlation_length(ar1(0.9, T + 1, s)) for s in range(20)]
    # single walks scatter widely (sampling noise is comparable to the cutoff); the median is stable
    assert abs(np.median(got) - expect) <= 0.2 * expect


def test_information_analysis_examples():
    up = information_analysis(np.arange(11.0))
    assert up["information_content"] == 0.0 and up["density_basin_information"] == 0.0
    assert up["partial_information_content"] == pytest.approx(1 / 10)
    assert up["information_stability"] == 1.0
    zigzag = information_analysis(np.array([0.0, 1.0] * 20))
    assert zigzag["information_stability"] == 1.0
    assert zigzag["partial_information_content"] == 1.0
    assert zigzag["information_content"] == pytest.approx(np.log(2) / np.log(6))
    assert zigzag["density_basin_information"] == 0.0


def test_information_analysis_against_counts():
    f = np.random.default_rng(3).normal(size=400)
    f[50:60] = f[49]
    res = information_analysis(f, 0.1)
    d = np.diff(f)
    s = [1 if v > 0.1 else -1 if v < -0.1 else 0 for v in d]
    pairs = list(zip(s, s[1:]))
    probs = {p: pairs.count(p) / len(pairs) for p in set(pairs)}
    H = -sum(q * np.log(q) / np.log(6) for (a, b), q in probs.items() if a != b)
    h = -sum(q * np.log(q) / np.log(3) for (a, b), q in probs.items() if a == b)
    nz = [v for v in s if v]
    runs = 1 + sum(a != b for a, b in zip(nz, nz[1:]))
    assert res["information_content"] == pytest.approx(H, rel=1e-12)
    assert res["density_basin_information"] == pytest.approx(h, rel=1e-12)
    assert res["partial_information_content"] == pytest.approx(runs / len(d))
    assert res["information_stability"] == np.abs(d).max()


def test_dead_zone_flattens_everything():
    f = np.array(ar1(0.3, 5000, 4))
    stab = information_analysis(f)["information_stability"]
    for eps in (stab, stab + 1e-9, 2 * stab):
        res = information_analysis(f, eps)
        assert res["information_content"] == 0.0
        assert res["density_basin_information"] == 0.0
        assert res["partial_information_content"] == 0.0


@pytest.fixture(scope="module")
def small_problem():
    return Problem(build_layout(TreeConfig(3, 10)), gen_poly10(100, 0))


def test_battery_shape_and_bounds(tmp_path, small_problem):
    manips = [parse_manipulator(n) for n in ("poly-1-15", "poly-all-15", "poly-1-2", "poly-all-2", "uni-1")]
    reps = fla_battery(small_problem, manips, walk_length=300, repetitions=3, seed=1, neighbors=10, max_steps=20)
    path = tmp_path / "r.csv"
    write_report_csv(reps, path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["measure", "poly-1-15", "poly-all-15", "poly-1-2", "poly-all-2", "uni-1"]
    assert [r[0] for r in rows[1:]] == list(MEASURE_LABELS)
    assert all(len(r) == 6 and all(c != "" for c in r) for r in rows[1:])
    for r in reps:
        assert -1 <= r.auto_correlation <= 1
        for v in (r.information_content, r.density_basin_information, r.partial_information_content):
            assert 0 <= v <= 1
        assert r.correlation_length >= 0 and r.up_walk_length >= 0 and r.down_walk_variance >= 0
        assert r.capped["up"] <= 3


def test_battery_zero_repetitions(tmp_path, small_problem):
    reps = fla_battery(small_problem, [P1_2], walk_length=100, repetitions=0, seed=0)
    path = tmp_path / "r.csv"
    write_report_csv(reps, path)
    rows = {r[0]: r[1] for r in csv.reader(open(path, newline=""))}
    assert rows["up walk length"] == "" and rows["down walk len. variance"] == ""
    assert rows["auto correlation"] != ""


def test_battery_is_thread_independent(small_problem):
    kw = dict(walk_length=200, repetitions=4, seed=3, neighbors=8, max_steps=15)
    a = fla_battery(small_problem, [P1_2, PALL_2], **kw)
    b = fla_battery(small_problem, [P1_2, PALL_2], threads=4, **kw)
    assert [r.rows() for r in a] == [r.rows() for r in b]
