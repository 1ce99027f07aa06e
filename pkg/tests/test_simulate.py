import numpy as np
import pytest
from scipy.stats import chi2, kstest

from prefcoal.genealogy import build_grid, grid_stats
from prefcoal.simulate import (
    SCENARIOS,
    Piecewise,
    coalescent_times_thinning,
    replicate_rng,
    sample_times_count,
    sample_times_thinning,
    scenario,
    simulate_dataset,
    trajectory_value,
)


def test_trajectory_values():
    ne, _ = trajectory_value(scenario("CE-PP", 100), 0.1)
    assert ne == 3.0
    ne, _ = trajectory_value(scenario("CE-U", 100), 0.3)
    assert ne == pytest.approx(3 * np.exp(-3), rel=1e-12)
    assert ne == pytest.approx(0.14936, abs=1e-5)
    _, lam = trajectory_value(scenario("B-PP", 500), 0.1)
    assert lam == pytest.approx(1800.0)


@pytest.mark.parametrize(
    "name, consts",
    [
        ("CE-PP", (180, 500, 830)), ("CE-U", (25, 65, 120)), ("CE-LP", (45, 140, 210)),
        ("CE-UP", (14, 35, 55)), ("B-PP", (520, 1700, 3000)), ("B-U", (15, 40, 70)),
        ("B-LP", (40, 130, 200)), ("B-UP", (150, 210, 250)),
    ],
)
def test_scenario_constants(name, consts):
    for n, c in zip((100, 300, 500), consts):
        assert scenario(name, n).c == c


def test_scenario_shapes():
    v = np.array([0.05, 0.25, 0.45, 0.6])
    np.testing.assert_allclose(scenario("B-U", 100).ne(v), [0.6, 0.005, 0.005, 0.3])
    # pieces are closed on the right
    np.testing.assert_allclose(scenario("B-U", 100).ne([0.2, 0.5]), [0.6, 0.005])
    np.testing.assert_allclose(scenario("B-LP", 100).intensity(v), 40 * np.array([4, 2, 4, 4]))
    np.testing.assert_allclose(scenario("B-UP", 100).intensity(v), 150 * np.array([1, 1, 1, 4]))
    np.testing.assert_allclose(scenario("CE-LP", 100).intensity([0.1, 0.3]),
                               45 * np.array([10 * np.exp(1.6 - 2.0), 0.5]))
    np.testing.assert_allclose(scenario("CE-UP", 100).intensity([0.1, 0.4]),
                               14 * np.array([10 * np.exp(1.0), 0.5]))
    s = scenario("CE-PP", 100)
    np.testing.assert_allclose(s.beta(v), 180.0)


def test_unknown_scenario():
    with pytest.raises(KeyError):
        scenario("XX-PP")
    with pytest.raises(KeyError):
        scenario("CE-PP", 200)
    with pytest.raises(ValueError):
        trajectory_value(scenario("CE-PP"), -1.0)


def test_homogeneous_thinning_mean():
    counts = [len(sample_times_thinning(lambda t: np.full(np.shape(t), 2.0), 5.0,
                                        replicate_rng(1, r), lam_max=2.0)) - 1
              for r in range(2000)]
    assert 9.78 <= np.mean(counts) <= 10.22


def test_zero_intensity():
    out = sample_times_thinning(Piecewise.constant(0.0), 3.0, 0)
    np.testing.assert_array_equal(out, [0.0])


def test_bound_violation_detected():
    with pytest.raises(RuntimeError):
        sample_times_thinning(lambda t: np.full(np.shape(t), 5.0), 1.0, 0, lam_max=1.0)


def test_ce_pp_binned_counts_chi_square():
    s = scenario("CE-PP", 100)
    T = 0.4
    edges = np.linspace(0, T, 21)
    fine = np.linspace(0, T, 200_001)
    lam = s.intensity(fine)
    cum = np.concatenate([[0], np.cumsum(0.5 * (lam[1:] + lam[:-1]) * np.diff(fine))])
    expected = np.diff(np.interp(edges, fine, cum))
    passes = 0
    for seed in range(100):
        x = sample_times_thinning(s.intensity, T, seed)[1:]
        obs = np.histogram(x, edges)[0]
        stat = np.sum((obs - expected) ** 2 / expected)  # Poisson counts: variance = mean
        passes += stat < chi2.ppf(0.99, len(expected))
    assert passes >= 95


def test_two_lineage_ks():
    passes = 0
    for batch in range(20):
        rng = replicate_rng(batch, 0)
        t = [coalescent_times_thinning(Piecewise.constant(1.0), [0, 0], rng)[0]
             for _ in range(2000)]
        passes += kstest(t, "expon").pvalue > 0.01
    assert passes >= 19


def test_kingman_levels():
    rng = np.random.default_rng(0)
    n = 50
    waits = []
    for _ in range(1000):
        t = coalescent_times_thinning(Piecewise.constant(1.0), np.zeros(n), rng)
        waits.append(np.diff(np.concatenate([[0], t])))
    waits = np.array(waits)  # column j: waiting time with n - j lineages
    k = n - np.arange(n - 1)
    mean = 2.0 / (k * (k - 1))
    se = mean / np.sqrt(1000)
    assert np.all(np.abs(waits.mean(axis=0) - mean) < 3.5 * se)


def test_two_lineages_ne2():
    rng = np.random.default_rng(5)
    t = np.array([coalescent_times_thinning(Piecewise.constant(2.0), [0, 0], rng)[0]
                  for _ in range(4000)])
    assert abs(t.mean() - 2.0) < 3 * 2.0 / np.sqrt(4000)


def test_piecewise_ne_with_bottleneck():
    # two lineages under the bottleneck trajectory: survival has closed form
    s = scenario("B-U", 100)
    rng = np.random.default_rng(0)
    t = np.array([coalescent_times_thinning(s.ne, [0, 0], rng)[0] for _ in range(2000)])
    # P(T > 0.2) = exp(-0.2 / 0.6)
    p = np.mean(t > 0.2)
    assert abs(p - np.exp(-0.2 / 0.6)) < 3 * np.sqrt(p * (1 - p) / 2000)


def test_sample_times_count_exact_n():
    s = scenario("CE-LP", 100)
    x = sample_times_count(s.intensity, 100, 0)
    assert len(x) == 100 and x[0] == 0.0 and np.all(np.diff(x) >= 0)


@pytest.mark.parametrize("name", SCENARIOS)
def test_simulate_dataset_structure(name):
    d = simulate_dataset(name, 100, rng=1)
    g = d.genealogy
    assert g.n == 100 and len(g.coalescent_times) == 99
    assert g.root_time > g.sampling_times.max()
    st_ = grid_stats(g, build_grid(g, 50))
    assert st_.samp_count.sum() == 100


def test_b_pp_300_structure():
    g = simulate_dataset("B-PP", 300, rng=9).genealogy
    assert g.n == 300 and len(g.coalescent_times) == 299


def test_ce_u_horizon():
    m = [simulate_dataset("CE-U", 100, rng=k).sampling_times.max() for k in range(30)]
    # n / c = 4 for a homogeneous process; sd of the 99th arrival is sqrt(99)/25
    assert abs(np.mean(m) - 99 / 25) < 3 * np.sqrt(99) / 25 / np.sqrt(30)


def test_deterministic():
    a = simulate_dataset("B-UP", 100, rng=replicate_rng(3, 4)).genealogy
    b = simulate_dataset("B-UP", 100, rng=replicate_rng(3, 4)).genealogy
    np.testing.assert_array_equal(a.coalescent_times, b.coalescent_times)
    np.testing.assert_array_equal(a.parent, b.parent)


def test_times_file_roundtrip(tmp_path):
    from prefcoal.simulate import read_times, write_times

    g = simulate_dataset("CE-PP", 100, rng=2).genealogy
    write_times(tmp_path / "x.csv", g, header="hdr")
    h = read_times(tmp_path / "x.csv")
    np.testing.assert_array_equal(np.sort(h.sampling_times), np.sort(g.sampling_times))
    np.testing.assert_array_equal(h.coalescent_times, g.coalescent_times)
