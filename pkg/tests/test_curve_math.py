import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from arbfree.curve_math import (
    DEFAULT_GRID,
    CurveError,
    DiscountCurve,
    NssParams,
    TenorGrid,
    bootstrap_discounts,
    fit_nss,
    hjm_drift,
    instantaneous_forward,
    musiela_drift,
    nss_forward,
    nss_yield,
    par_swap_rate,
    swaps_from_node_discounts,
    yield_from_zcb,
    zcb_from_yield,
)

ANNUAL = TenorGrid.from_labels(["1Y", "2Y"])


def test_default_grid_has_twelve_tenors():
    assert DEFAULT_GRID.labels == ("1M", "2M", "3M", "6M", "1Y", "2Y", "5Y", "7Y", "10Y", "15Y", "20Y", "30Y")
    assert np.all(DEFAULT_GRID.accruals > 0)
    assert DEFAULT_GRID.array[0] == pytest.approx(1 / 12)


def test_grid_rejects_non_increasing():
    with pytest.raises(CurveError):
        TenorGrid((1.0, 1.0), ("a", "b"))


@pytest.mark.parametrize("y,tau,want", [(0.0, 10.0, 1.0), (0.05, 2.0, 0.9048374180359595), (-0.001, 5.0, 1.0050125208594010)])
def test_zcb_from_yield(y, tau, want):
    assert zcb_from_yield(y, tau) == pytest.approx(want, abs=1e-12)


@pytest.mark.parametrize("p,tau,want", [(1.0, 3.0, 0.0), (0.904837, 2.0, 0.05), (1.005012, 5.0, -0.001)])
def test_yield_from_zcb(p, tau, want):
    assert yield_from_zcb(p, tau) == pytest.approx(want, abs=1e-6)


def test_conversion_domain_errors():
    with pytest.raises(CurveError):
        zcb_from_yield(float("nan"), 1.0)
    with pytest.raises(CurveError):
        yield_from_zcb(0.0, 1.0)
    with pytest.raises(CurveError):
        yield_from_zcb(0.9, 0.0)


# below one day the stored discount cannot carry 1e-12 of yield information
@given(st.floats(-0.02, 0.15), st.floats(1 / 365, 30.0))
def test_yield_roundtrip(y, tau):
    assert abs(yield_from_zcb(zcb_from_yield(y, tau), tau) - y) <= 1e-12


def test_forward_on_flat_curve():
    curve = DiscountCurve.from_yields(DEFAULT_GRID, [0.03] * 12)
    for tau in (0.5, 2.0, 9.0, 25.0):
        assert instantaneous_forward(curve, tau) == pytest.approx(0.03, abs=1e-8)
    ones = DiscountCurve(DEFAULT_GRID, (1.0,) * 12)
    assert instantaneous_forward(ones, 3.0) == 0.0


def test_forward_matches_nss_closed_form():
    p = NssParams(0.04, -0.02, 0.01, 0.0, 2.0, 5.0)
    grid = TenorGrid(tuple(np.arange(1, 361) / 12), tuple(str(i) for i in range(360)))
    curve = DiscountCurve.from_yields(grid, nss_yield(p, grid.array))
    assert instantaneous_forward(curve, 2.0) == pytest.approx(nss_forward(p, 2.0), abs=1e-5)


def test_forward_range_error():
    curve = DiscountCurve.from_yields(DEFAULT_GRID, [0.03] * 12)
    with pytest.raises(CurveError):
        instantaneous_forward(curve, 0.01)


def test_par_swap_rate_examples():
    ones = DiscountCurve(ANNUAL, (1.0, 1.0))
    assert par_swap_rate(ones, 1) == 0.0
    flat = DiscountCurve(ANNUAL, (0.951229, 0.904837))
    assert par_swap_rate(flat, 1) == pytest.approx(0.051271, abs=1e-5)
    one = DiscountCurve(TenorGrid.from_labels(["1Y"]), (0.99,))
    assert par_swap_rate(one, 0) == pytest.approx(0.01 / 0.99, abs=1e-15)


def test_par_swap_rate_redundant_dates_on_flat_curve():
    # quarterly payments against annual ones: the rate changes with the schedule,
    # but inserting extra log-linear interpolated dates inside the market convention
    # must not move annual par rates on a flat curve
    p = np.exp(-0.04 * DEFAULT_GRID.array)
    base = swaps_from_node_discounts(p, DEFAULT_GRID)
    fine = TenorGrid.from_labels(["1M", "2M", "3M", "6M", "1Y", "2Y", "3Y", "4Y", "5Y", "7Y", "10Y", "15Y", "20Y", "30Y"])
    dense = swaps_from_node_discounts(np.exp(-0.04 * fine.array), fine)
    keep = [fine.index(lab) for lab in DEFAULT_GRID.labels]
    assert np.max(np.abs(dense[keep] - base)) < 1e-10


def test_degenerate_annuity():
    with pytest.raises(CurveError):
        DiscountCurve(ANNUAL, (0.0, 1.0))


def test_bootstrap_zero_and_flat():
    zero = bootstrap_discounts([0.0] * 12)
    np.testing.assert_allclose(zero.array, 1.0, atol=1e-14)
    p = np.exp(-0.05 * DEFAULT_GRID.array)
    s = swaps_from_node_discounts(p, DEFAULT_GRID)
    np.testing.assert_allclose(bootstrap_discounts(s).array, p, atol=1e-8)


nss_draws = st.tuples(
    st.floats(0.0, 0.08), st.floats(-0.04, 0.04), st.floats(-0.04, 0.04), st.floats(-0.03, 0.03),
    st.floats(0.3, 5.0), st.floats(5.0, 15.0),
)


@given(nss_draws)
def test_bootstrap_roundtrip(params):
    p = NssParams(*params)
    s = swaps_from_node_discounts(np.exp(-nss_yield(p, DEFAULT_GRID.array) * DEFAULT_GRID.array), DEFAULT_GRID)
    back = swaps_from_node_discounts(bootstrap_discounts(s).array, DEFAULT_GRID)
    assert np.max(np.abs(back - s)) <= 1e-10


def test_bootstrap_infeasible_quote():
    with pytest.raises(CurveError):
        bootstrap_discounts([-20.0] + [0.01] * 11)


def test_nss_limits():
    p = NssParams(0.04, -0.01, 0.0, 0.0, 1.0, 1.0)
    assert nss_yield(p, 0.0) == pytest.approx(0.03, abs=1e-15)
    assert nss_yield(p, 1000.0) == pytest.approx(0.04, abs=1e-4)
    assert nss_forward(p, 0.0) == pytest.approx(0.03, abs=1e-15)
    flat = NssParams(0.025, 0.0, 0.0, 0.0, 2.0, 5.0)
    np.testing.assert_allclose(nss_forward(flat, np.linspace(0, 30, 7)), 0.025, atol=1e-15)


def _nss_reference(b0, b1, b2, b3, l1, l2, t):
    x1, x2 = t / l1, t / l2
    h1 = (1 - math.exp(-x1)) / x1
    h2 = (1 - math.exp(-x2)) / x2
    return b0 + b1 * h1 + b2 * (h1 - math.exp(-x1)) + b3 * (h2 - math.exp(-x2))


def test_nss_yield_against_scalar_reference():
    args = (0.03, 0.01, 0.02, -0.01, 1.5, 8.0)
    assert nss_yield(NssParams(*args), 5.0) == pytest.approx(_nss_reference(*args, 5.0), abs=1e-15)


def test_nss_invalid_decay():
    with pytest.raises(CurveError):
        NssParams(0.03, 0.0, 0.0, 0.0, -1.0, 2.0)


def test_nss_yield_is_averaged_forward():
    rng = np.random.default_rng(3)
    nodes, weights = np.polynomial.legendre.leggauss(64)
    worst = 0.0
    for _ in range(100):
        p = NssParams(*rng.uniform(-0.05, 0.05, 4), *rng.uniform(0.3, 10.0, 2))
        tau = rng.uniform(0.05, 30.0)
        u = 0.5 * tau * (nodes + 1)
        avg = 0.5 * np.dot(weights, nss_forward(p, u))
        worst = max(worst, abs(avg - nss_yield(p, tau)))
    assert worst < 1e-6


def test_nss_positive_forwards_give_decreasing_discounts():
    p = NssParams(0.03, -0.01, 0.01, 0.0, 2.0, 5.0)
    tau = np.linspace(0, 30, 301)
    assert np.all(nss_forward(p, tau) >= 0)
    disc = np.exp(-nss_yield(p, tau[1:]) * tau[1:])
    assert np.all(np.diff(disc) < 0)


def test_fit_nss_noise_free_and_flat():
    true = NssParams(0.035, -0.015, 0.01, 0.005, 1.5, 7.0)
    y = nss_yield(true, DEFAULT_GRID.array)
    fit = fit_nss(y, DEFAULT_GRID, NssParams(0.03, -0.01, 0.0, 0.0, 2.0, 6.0))
    assert fit.rmse < 1e-8
    flat = fit_nss([0.02] * 12, DEFAULT_GRID, NssParams(0.03, -0.01, 0.01, 0.0, 2.0, 6.0))
    assert flat.rmse < 1e-8


def test_fit_nss_with_noise_and_init_bound():
    rng = np.random.default_rng(7)
    true = NssParams(0.035, -0.015, 0.01, 0.005, 1.5, 7.0)
    y = nss_yield(true, DEFAULT_GRID.array) + rng.normal(0, 1e-4, 12)
    init = NssParams(0.03, 0.0, 0.0, 0.0, 1.0, 5.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        fit = fit_nss(y, DEFAULT_GRID, init)
    rmse_init = float(np.sqrt(np.mean((nss_yield(init, DEFAULT_GRID.array) - y) ** 2)))
    assert fit.rmse <= 2e-4
    assert fit.rmse <= rmse_init


def test_fit_nss_needs_six_points():
    with pytest.raises(CurveError):
        fit_nss([0.01] * 5, [1, 2, 3, 4, 5], NssParams(0.03, 0, 0, 0, 1, 2))


def test_hjm_drift_constant_vol():
    sig = lambda t, u: np.full_like(np.asarray(u, dtype=float), 0.01)
    assert abs(hjm_drift([sig], 0.0, 2.0) - 2e-4) <= 1e-12


def test_hjm_drift_vasicek_closed_form():
    s0, k = 0.012, 0.4
    sig = lambda t, u: s0 * np.exp(-k * (np.asarray(u) - t))
    for tau in (0.5, 3.0, 12.0):
        want = s0**2 * math.exp(-k * tau) * (1 - math.exp(-k * tau)) / k
        assert hjm_drift([sig], 1.0, 1.0 + tau) == pytest.approx(want, abs=1e-10)


def test_hjm_drift_additive_over_factors():
    a = lambda t, u: 0.01 * np.exp(-0.3 * (np.asarray(u) - t))
    b = lambda t, u: 0.004 + 0.0 * np.asarray(u)
    assert hjm_drift([a, b], 0.0, 7.0) == pytest.approx(hjm_drift([a], 0.0, 7.0) + hjm_drift([b], 0.0, 7.0), abs=1e-16)


def test_hjm_quadrature_converges():
    s0, k, tau = 0.01, 2.5, 10.0
    sig = lambda t, u: s0 * np.exp(-k * (np.asarray(u) - t))
    want = s0**2 * math.exp(-k * tau) * (1 - math.exp(-k * tau)) / k
    errs = [abs(hjm_drift([sig], 0.0, tau, quad_n=n) - want) for n in (2, 4, 8)]
    assert errs[1] <= errs[0] / 4 and errs[2] <= errs[1] / 4


def test_musiela_drift_cases():
    x = np.linspace(0.1, 20, 9)
    slope = np.linspace(-0.001, 0.002, 9)
    np.testing.assert_array_equal(musiela_drift(slope, [], x), slope)
    const = lambda u: np.full_like(np.asarray(u, dtype=float), 0.008)
    np.testing.assert_allclose(musiela_drift(0.0, [const], x), 0.008**2 * x, atol=1e-15)
    s0, k = 0.01, 0.5
    decay = lambda u: s0 * np.exp(-k * np.asarray(u))
    hjm = [hjm_drift([lambda t, u: decay(np.asarray(u) - t)], 2.0, 2.0 + xi) for xi in x]
    np.testing.assert_allclose(musiela_drift(0.0, [decay], x), hjm, atol=1e-15)
