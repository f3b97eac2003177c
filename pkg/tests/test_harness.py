import itertools
import math

import numpy as np
import pytest
from scipy import special, stats

from quenchlab.errors import EmptySample, MomentUnavailable, SigmaUnavailable
from quenchlab.harness import (
    QuenchedCltConfig,
    centering_consistency,
    decoupling_property_test,
    functional_covariance_test,
    gaussian_increment_ratio,
    iid_sum_moment,
    increment_moment_test,
    ks_critical_value,
    ks_statistic,
    omega_panel,
    quenched_clt_experiment,
    resolve_sigma2,
    rosenthal_property_test,
    sigma2_triangulation,
    window_variance,
)
from quenchlab.kernels import GeometricKernel, PolySlowVarKernel, TableKernel, VolterraKernel, identity_stencil
from quenchlab.lattice import InnovationSpec, QuenchedScenario
from quenchlab.models import make_model

SCENARIO = QuenchedScenario(12345, 1000, 2)
IDENTITY = make_model(identity_stencil(2))
GEOMETRIC = make_model(GeometricKernel((0.5, 0.5)))
SIGNS = InnovationSpec("rademacher")


# -- KS -------------------------------------------------------------------------


def test_ks_statistic_of_uniform_quantiles():
    n = 50
    x = np.arange(1, n + 1) / (n + 1)
    assert ks_statistic(x, lambda t: t) == pytest.approx(1 / (n + 1), rel=1e-12)


def test_ks_statistic_edge_cases():
    assert ks_statistic([0.5], lambda t: t) == 0.5
    assert ks_statistic(np.full(10, -50.0), special.ndtr) == pytest.approx(1.0)
    with pytest.raises(EmptySample):
        ks_statistic([], special.ndtr)


def test_ks_statistic_matches_scipy():
    x = np.random.default_rng(3).standard_t(5, size=777)
    assert ks_statistic(x, special.ndtr) == pytest.approx(stats.kstest(x, "norm").statistic, abs=1e-14)


def test_ks_critical_value():
    assert math.sqrt(10_000) * ks_critical_value(0.05, 10_000) == pytest.approx(1.3581, abs=1e-4)
    assert math.sqrt(10_000) * ks_critical_value(0.01, 10_000) == pytest.approx(1.6276, abs=1e-4)


# -- quenched CLT ---------------------------------------------------------------


def test_small_sign_window_fails_the_normal_limit_as_expected():
    # S_{4x4}/4 with sign innovations is a scaled binomial: its exact KS distance
    # to N(0, 1) comes from enumerating all 2^16 sign patterns
    patterns = np.array(list(itertools.product((-1, 1), repeat=16)), dtype=np.int8)
    sums = patterns.sum(axis=1) / 4.0
    exact = ks_statistic(sums, special.ndtr)
    model = make_model(identity_stencil(2), SIGNS)
    rep = quenched_clt_experiment(QuenchedCltConfig(model, SCENARIO, (4, 4), 10_000, alpha=0.05))
    assert not rep.passed
    assert exact > 5 * rep.statistics["ks_threshold"]
    assert abs(rep.statistics["ks_distance"] - exact) < 1.63 / math.sqrt(10_000)


def test_quenched_clt_is_bit_exact_and_thread_invariant():
    cfg = dict(model=GEOMETRIC, scenario=SCENARIO, window=(16, 16), replications=2000)
    a = quenched_clt_experiment(QuenchedCltConfig(**cfg)).to_record()
    b = quenched_clt_experiment(QuenchedCltConfig(**cfg)).to_record()
    c = quenched_clt_experiment(QuenchedCltConfig(**cfg, threads=4)).to_record()
    assert a == b == c


def test_quenched_clt_configuration_is_validated():
    with pytest.raises(ValueError):
        QuenchedCltConfig(IDENTITY, SCENARIO, (8, 8), replications=999)
    with pytest.raises(ValueError):
        QuenchedCltConfig(IDENTITY, SCENARIO, (8, 8), centering="mean")


def test_window_variance():
    assert window_variance(make_model(TableKernel({(0, 0): 1.0}, d=2)), (8, 8)) == pytest.approx(1.0)
    assert window_variance(IDENTITY, (8, 8)) is None
    # finite windows lose the boundary covariance of the geometric field
    assert 0.95 * 16 < window_variance(GEOMETRIC, (64, 64)) < 16
    assert window_variance(make_model(VolterraKernel({((1, 0), (0, 1)): 1.0})), (4, 4)) is None


def test_omega_panel_on_the_identity_stencil_is_omega_invariant():
    cfg = QuenchedCltConfig(IDENTITY, SCENARIO, (16, 16), replications=1000)
    rep = omega_panel(cfg, [1, 2, 3])
    dists = {r["ks_distance"] for r in rep.statistics["omega_runs"]}
    # window sites are >= 1 and never touch the frozen past
    assert len(dists) == 1 and rep.passed


def test_omega_panel_moves_with_the_frozen_past():
    cfg = QuenchedCltConfig(GEOMETRIC, SCENARIO, (16, 16), replications=1000)
    rep = omega_panel(cfg, [1, 2, 3])
    assert len({r["ks_distance"] for r in rep.statistics["omega_runs"]}) == 3


def test_sigma2_resolution():
    assert resolve_sigma2(GEOMETRIC, SCENARIO).source == "analytic"
    with pytest.raises(SigmaUnavailable):
        resolve_sigma2(make_model(PolySlowVarKernel((1.0, 1.0))), SCENARIO)
    # two mirrored pairs share the meet, so D_0 = 2 xi xi' and E D_0^2 = 4
    vol = make_model(VolterraKernel({((1, 0), (0, 1)): 1.0, ((0, 1), (1, 0)): 1.0}))
    s = resolve_sigma2(vol, SCENARIO, mc_replications=20_000)
    assert s.source == "monte_carlo"
    assert abs(s.value - 4.0) < 3 * s.std_error


# -- functional CLT -------------------------------------------------------------


def test_functional_covariance_of_the_identity_sheet():
    cfg = QuenchedCltConfig(IDENTITY, SCENARIO, (16, 16), replications=4000)
    rep = functional_covariance_test(cfg, [0.0, 0.5, 1.0])
    st = rep.statistics
    assert st["degenerate_rows_exactly_zero"]
    pts = [tuple(p) for p in st["points"]]
    i, j = pts.index((1.0, 1.0)), pts.index((0.5, 0.5))
    assert abs(st["covariance"][i][j] - 0.25) < 3 * st["std_errors"][i][j]
    assert rep.passed


def test_increment_moments_are_flat_for_independent_blocks():
    cfg = QuenchedCltConfig(IDENTITY, SCENARIO, (32, 32), replications=2000)
    rep = increment_moment_test(cfg, 3.0, levels=(1, 2, 3))
    assert rep.passed
    g = gaussian_increment_ratio(3.0)
    assert g == pytest.approx(0.73967, abs=1e-5)
    for row in rep.statistics["rows"]:
        assert abs(row["ratio"] - g) < 0.1


def test_increment_moments_need_higher_moments():
    heavy = make_model(identity_stencil(2), InnovationSpec("student_t", dof=3.0))
    cfg = QuenchedCltConfig(heavy, SCENARIO, (8, 8), replications=1000)
    with pytest.raises(MomentUnavailable):
        increment_moment_test(cfg, 3.0)
    with pytest.raises(MomentUnavailable):
        increment_moment_test(QuenchedCltConfig(IDENTITY, SCENARIO, (8, 8), 1000), 3.0, q=2.0)


# -- Rosenthal and decoupling ---------------------------------------------------


@pytest.mark.parametrize("n", [1, 2, 3, 5, 7])
@pytest.mark.parametrize("p", [2, 4, 6])
def test_iid_sum_moment_against_enumeration(n, p):
    total = math.fsum(sum(s) ** p for s in itertools.product((-1, 1), repeat=n))
    assert iid_sum_moment(SIGNS, n, p) == pytest.approx(total / 2**n, rel=1e-12)


def test_iid_sum_moment_of_normals():
    # sum of n standard normals is N(0, n): E S^p = (p-1)!! n^{p/2}
    for n, p in [(3, 4), (10, 6), (64, 4)]:
        dfact = math.prod(range(p - 1, 0, -2))
        assert iid_sum_moment(InnovationSpec("normal"), n, p) == pytest.approx(dfact * n ** (p // 2), rel=1e-12)


def test_rosenthal_ratios():
    rep = rosenthal_property_test(4, [1, 4, 16], 5000)
    rows = rep.statistics["rows"]
    assert rows[0]["exact_ratio"] == 0.5
    for r in rows:
        n = r["n"]
        assert r["exact_ratio"] == pytest.approx((3 * n * n - 2 * n) / (n * n + n), rel=1e-14)
    normal = rosenthal_property_test(4, [1, 4, 16, 64], 5000, innovation=InnovationSpec("normal"))
    exact = [r["exact_ratio"] for r in normal.statistics["rows"]]
    assert exact == pytest.approx([3 * n * n / (3 * n + n * n) for n in (1, 4, 16, 64)], rel=1e-12)
    assert exact == sorted(exact)
    assert rep.passed and normal.passed


def test_decoupling_degenerate_and_single_term():
    zero = decoupling_property_test(VolterraKernel({}, d=2), 4, 2000)
    assert zero.statistics["ratio"] == 1.0 and zero.statistics["fitted_constant"] == 0.0
    # one off-diagonal term: x_p x_q and y_p y'_q have the same law
    single = decoupling_property_test(VolterraKernel({((1, 0), (0, 1)): 1.0}), 4, 20_000)
    s = single.statistics
    assert abs(s["ratio"] - 1.0) < 3 * s["ratio_std_error"]


def test_decoupling_needs_moments_of_order_2q():
    with pytest.raises(MomentUnavailable):
        decoupling_property_test(VolterraKernel({((1, 0), (0, 1)): 1.0}), 4, 1000,
                                 innovation=InnovationSpec("student_t", dof=6.0))


# -- sigma^2 and centring -------------------------------------------------------


def test_sigma2_triangulation_small():
    rep = sigma2_triangulation(GEOMETRIC, SCENARIO, n=64, replications=2000, tolerance=0.1)
    assert rep.passed
    assert rep.statistics["sigma2_analytic"] == 16.0


def test_random_centering_matters_less_as_the_window_grows():
    rep = centering_consistency(GEOMETRIC, SCENARIO, [4, 32], replications=2000)
    d = [r["ks_distance"] for r in rep.statistics["rows"]]
    assert rep.passed and d[1] < d[0]
