import json
import logging
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from arbfree.dynamics import (
    Collocation,
    DynamicsConfig,
    DynamicsModel,
    LatentPath,
    NumericFault,
    SdeFields,
    Transitions,
    VasicekDecoder,
    _pde_terms,
    arb_loss,
    arb_loss_from_terms,
    composite_loss,
    dynamics_to_dict,
    encode_path,
    eval_fields,
    load_dynamics,
    path_noise,
    path_transitions,
    pde_residual,
    risk_premium_series,
    sample_collocation,
    save_dynamics,
    short_rate,
    simulate_paths,
    train_dynamics,
    transition_nll,
    write_paths_csv,
    write_risk_premium_csv,
)
from arbfree.manifold import FrozenError, ManifoldConfig, train_manifold
from arbfree.nn import input_jacobian

from helpers import ou_model, rel_err, simulate_ou, small_panel


@pytest.fixture(scope="module")
def manifold_and_path():
    panel = small_panel(400, 4)
    cfg = ManifoldConfig(encoder_widths=(8,), decoder_widths=(8,), embed_dim=2, epochs=2, seed=3)
    man, _ = train_manifold(cfg, panel)
    return man, encode_path(man, panel)


def vasicek_model(kappa=0.8, theta=0.04, sigma=0.015):
    m = ou_model(kappa, theta, sigma)
    dec = VasicekDecoder(kappa, theta, sigma)
    m.decoder, m.decoder_checksum = dec, dec.checksum()
    return m


# -- fields ------------------------------------------------------------------


def test_zeroed_heads(manifold_and_path):
    man, path = manifold_and_path
    m = DynamicsModel.initialise(DynamicsConfig(widths=(5,)), man, np.random.default_rng(0))
    m.paramnet.weights[-1][:] = 0.0
    f = eval_fields(m, path.z[:4], path.currencies[:4])
    np.testing.assert_array_equal(f.mu_p, 0.0)
    np.testing.assert_array_equal(f.lam, 0.0)
    np.testing.assert_allclose(np.diagonal(f.sigma, axis1=1, axis2=2), math.log(2), rtol=1e-15)


@given(st.integers(0, 2**31))
def test_measure_change_identity(seed):
    rng = np.random.default_rng(seed)
    dec = VasicekDecoder(0.5, 0.03, 0.01, latent_dim=3)
    m = DynamicsModel.initialise(DynamicsConfig(widths=(6,), diffusion="cholesky"), dec, rng)
    for w in m.paramnet.weights:
        w *= 5
    f = eval_fields(m, rng.standard_normal((5, 3)))
    np.testing.assert_allclose(f.mu_q + np.einsum("nij,nj->ni", f.sigma, f.lam), f.mu_p, atol=1e-14)
    assert np.all(np.diagonal(f.sigma, axis1=1, axis2=2) > 0)
    np.testing.assert_array_equal(np.triu(f.sigma, 1), 0.0)


def test_drift_jacobian_matches_fd():
    rng = np.random.default_rng(1)
    dec = VasicekDecoder(0.5, 0.03, 0.01, latent_dim=3)
    m = DynamicsModel.initialise(DynamicsConfig(widths=(7, 7)), dec, rng)
    z = rng.standard_normal(3)
    jac = input_jacobian(m.paramnet, z)[:3]
    h = 1e-5
    fd = np.column_stack([(eval_fields(m, z + e).mu_p[0] - eval_fields(m, z - e).mu_p[0]) / (2 * h) for e in np.eye(3) * h])
    assert rel_err(jac, fd) < 1e-4


def test_non_finite_output_is_a_numeric_fault():
    m = ou_model([1.0], [0.0], [0.1])
    m.paramnet.biases[0][0] = np.nan
    with pytest.raises(NumericFault):
        eval_fields(m, np.zeros((1, 1)))


# -- short rate and residual -------------------------------------------------


def test_vasicek_short_rate_is_first_latent():
    z = np.array([[0.031, 5.0], [-0.01, 2.0]])
    np.testing.assert_array_equal(short_rate(VasicekDecoder(0.5, 0.03, 0.01, 2), z), z[:, 0])


def test_vasicek_residual_vanishes_on_grid():
    m = vasicek_model()
    z, tau = np.meshgrid(np.linspace(-0.05, 0.15, 50), np.linspace(0.01, 30, 50))
    R = pde_residual(m, z.reshape(-1, 1), tau.reshape(-1))
    assert np.max(np.abs(R)) < 1e-8


def test_residual_reduces_without_dynamics(manifold_and_path):
    man, path = manifold_and_path
    m = DynamicsModel.initialise(DynamicsConfig(widths=(4,)), man, np.random.default_rng(0))
    # remove z-dependence from the decoder and switch off drift and diffusion
    man2 = man.copy()
    man2.decoder.weights[0][: man.latent_dim] = 0.0
    man2.freeze()
    tau = np.array([0.5, 3.0, 12.0])
    der = man2.bond_derivatives(path.z[:3], tau, path.currencies[:3], path.level[:3])
    r = man2.short_rate(path.z[:3], path.currencies[:3], path.level[:3])
    np.testing.assert_array_equal(der["grad"], 0.0)
    still = SdeFields(np.zeros((3, 3)), np.zeros((3, 3, 3)), np.zeros((3, 3)))
    R, _, _ = _pde_terms(der, r, still, 1e-8)
    np.testing.assert_allclose(R, -der["D_tau"] - r * der["D"], rtol=1e-15)
    assert m.latent_dim == 3


def test_residual_linear_in_risk_neutral_drift(manifold_and_path):
    man, path = manifold_and_path
    rng = np.random.default_rng(2)
    tau = rng.uniform(0.1, 20, 5)
    der = man.bond_derivatives(path.z[:5], tau, path.currencies[:5], path.level[:5])
    r = man.short_rate(path.z[:5], path.currencies[:5], path.level[:5])
    L = np.tril(rng.standard_normal((5, 3, 3)))
    zero = np.zeros((5, 3))
    m1, m2 = rng.standard_normal((2, 5, 3))

    def res(mu):
        return _pde_terms(der, r, SdeFields(mu, L, zero), 1e-8)[0]

    base = res(zero)
    assert np.max(np.abs((res(m1 + m2) - base) - (res(m1) - base) - (res(m2) - base))) <= 1e-12


def test_residual_requires_positive_maturity():
    with pytest.raises(ValueError):
        pde_residual(vasicek_model(), np.zeros((1, 1)), 0.0)


# -- arbitrage loss ----------------------------------------------------------


def test_arb_loss_zero_on_vasicek():
    m = vasicek_model()
    col = Collocation.build(m.decoder, np.linspace(-0.02, 0.1, 7)[:, None], "X", 0.0, np.linspace(0.05, 30, 9))
    assert arb_loss(m, col) < 1e-12


def test_arb_loss_homogeneous_in_price_units():
    rng = np.random.default_rng(3)
    n = 40
    der = {"D": rng.uniform(0.3, 1, n), "D_tau": rng.normal(0, 0.05, n), "grad": rng.normal(0, 0.5, (n, 2)), "hess": rng.normal(0, 1, (n, 2, 2))}
    r = rng.normal(0.02, 0.01, n)
    f = SdeFields(rng.normal(0, 1, (n, 2)), np.tril(rng.normal(0, 1, (n, 2, 2))), rng.normal(0, 1, (n, 2)))
    R, N, _ = _pde_terms(der, r, f, 1e-30)
    scaled = {k: 2.0 * v for k, v in der.items()}
    R2, N2, _ = _pde_terms(scaled, r, f, 1e-30)
    assert arb_loss_from_terms(R2, N2) == pytest.approx(arb_loss_from_terms(R, N), rel=1e-12)


def test_arb_loss_floor_with_flat_decoder():
    der = {"D": np.array([0.9]), "D_tau": np.array([-0.02]), "grad": np.zeros((1, 1)), "hess": np.zeros((1, 1, 1))}
    f = SdeFields(np.zeros((1, 1)), np.ones((1, 1, 1)), np.zeros((1, 1)))
    R, N, _ = _pde_terms(der, np.array([0.01]), f, 1e-8)
    assert arb_loss_from_terms(R, N) == pytest.approx(R[0] ** 2 / 1e-8, rel=1e-15)


# -- transition likelihood ---------------------------------------------------


def test_unit_step_nll():
    m = ou_model([0.0, 0.0], [0.0, 0.0], [1.0, 1.0])
    assert transition_nll(m, np.zeros((2, 2)), 1.0) == pytest.approx(math.log(2 * math.pi), abs=1e-14)


def test_nll_additive_over_steps():
    m = ou_model([2.0], [0.1], [0.3])
    z = np.array([[0.0], [0.05], [0.02]])
    whole = transition_nll(m, z, 0.01)
    parts = transition_nll(m, z[:2], 0.01) + transition_nll(m, z[1:], 0.01)
    assert whole == pytest.approx(parts, abs=1e-12)


def test_true_ou_parameters_dominate():
    rng = np.random.default_rng(4)
    dt = 1 / 252
    z = simulate_ou([3.0, 5.0], [0.2, -0.1], [0.4, 0.6], 20_000, dt, rng)
    true = transition_nll(ou_model([3.0, 5.0], [0.2, -0.1], [0.4, 0.6]), z, dt)
    off = transition_nll(ou_model([3.3, 5.5], [0.2, -0.1], [0.4, 0.6]), z, dt)
    assert true <= off


def test_underflowing_diffusion_adds_jitter(caplog):
    m = ou_model([1.0], [0.0], [1e-9])
    with caplog.at_level(logging.WARNING, logger="arbfree.dynamics"):
        v = transition_nll(m, np.array([[0.0], [1e-6]]), 1 / 252)
    assert math.isfinite(v) and "jitter" in caplog.text


# -- composite loss ----------------------------------------------------------


def test_composite_without_penalties_is_mean_nll():
    rng = np.random.default_rng(5)
    m = ou_model([2.0, 1.0], [0.0, 0.1], [0.3, 0.2], lam=[0.4, -0.2], beta=0.0, gamma=0.0)
    z = simulate_ou([2.0, 1.0], [0.0, 0.1], [0.3, 0.2], 30, 0.01, rng)
    tr = Transitions(z[:-1], z[1:], np.full(29, 0.01), np.array(["X"] * 29))
    loss, _, _ = composite_loss(m, tr, None)
    assert loss == pytest.approx(transition_nll(m, z, 0.01) / 29, abs=1e-12)


@pytest.mark.parametrize("diffusion", ["diagonal", "cholesky"])
@pytest.mark.parametrize("conditioning", [True, False])
def test_composite_gradients_match_fd(manifold_and_path, diffusion, conditioning):
    man, path = manifold_and_path
    cfg = DynamicsConfig(widths=(6, 6), diffusion=diffusion, conditioning=conditioning, n_states=10, beta=0.7, gamma=0.3)
    rng = np.random.default_rng(0)
    m = DynamicsModel.initialise(cfg, man, rng)
    for w in m.paramnet.weights:
        w *= 3
    tr = path_transitions(path, cfg.dt).take(np.arange(20))
    col = sample_collocation(m, path, man.grid, rng)
    _, grads, _ = composite_loss(m, tr, col)
    worst = 0.0
    for p, g in zip(m.paramnet.params, grads):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in rng.choice(flat.size, min(5, flat.size), replace=False):
            o, h = flat[i], 1e-6
            flat[i] = o + h
            a = composite_loss(m, tr, col, False)[0]
            flat[i] = o - h
            b = composite_loss(m, tr, col, False)[0]
            flat[i] = o
            worst = max(worst, rel_err(gflat[i], (a - b) / (2 * h), floor=1e-4))
    assert worst < 1e-3


# -- training ----------------------------------------------------------------


def ou_path(n=1500, seed=0):
    rng = np.random.default_rng(seed)
    z = simulate_ou([4.0, 6.0, 8.0], [0.3, -0.2, 0.1], [0.5, 0.6, 0.4], n, 1 / 252, rng)
    dates = np.busday_offset(np.datetime64("2018-01-01"), np.arange(n), roll="forward")
    return LatentPath(dates, np.array(["X"] * n), z, np.zeros(n))


def test_strong_ridge_drives_lambda_to_zero():
    dec = VasicekDecoder(0.5, 0.03, 0.01, latent_dim=3)
    cfg = DynamicsConfig(widths=(8,), beta=0.0, gamma=1e3, epochs=40, batch_size=128, lr=1e-2, lr_final=1e-3, seed=1)
    m, log_ = train_dynamics(cfg, dec, ou_path(600))
    assert log_.rows[-1]["lambda_norm"] < 1e-2
    _, _, lam = risk_premium_series(m, ou_path(600))
    assert np.mean(np.abs(lam)) < 1e-2


def test_training_deterministic_and_nll_decreases(tmp_path):
    dec = VasicekDecoder(0.5, 0.03, 0.01, latent_dim=3)
    cfg = DynamicsConfig(widths=(8,), beta=0.0, epochs=10, batch_size=128, lr=3e-3, seed=4)
    a, log_a = train_dynamics(cfg, dec, ou_path(600))
    b, _ = train_dynamics(cfg, dec, ou_path(600))
    assert json.dumps(dynamics_to_dict(a)) == json.dumps(dynamics_to_dict(b))
    nll = [r["l_data"] for r in log_a.rows]
    assert all(x1 < x0 for x0, x1 in zip(nll, nll[1:]))
    log_a.to_csv(tmp_path / "log.csv")
    assert (tmp_path / "log.csv").read_text().startswith("epoch,l_data,l_arb,lambda_norm\n")


def test_stage_b_leaves_decoder_untouched(manifold_and_path, tmp_path):
    man, path = manifold_and_path
    before = man.checksum()
    cfg = DynamicsConfig(widths=(6,), epochs=2, n_states=16, batch_size=512, seed=0)
    m, _ = train_dynamics(cfg, man, path)
    assert man.checksum() == before == m.decoder_checksum
    save_dynamics(m, tmp_path / "d.json")
    tampered = man.copy()
    tampered.decoder.biases[0][0] += 1.0
    with pytest.raises(FrozenError):
        load_dynamics(tmp_path / "d.json", tampered)
    with pytest.raises(FrozenError):
        train_dynamics(cfg, tampered, path)


# -- simulation --------------------------------------------------------------


def test_zero_diffusion_follows_ode():
    m = ou_model([2.0], [0.5], [1e-300])
    paths = simulate_paths(m, [0.0], 10, 3, seed=1)
    z, dt = 0.0, m.config.dt
    for t in range(10):
        z = z + 2.0 * (0.5 - z) * dt
        np.testing.assert_allclose(paths[:, t + 1, 0], z, rtol=1e-14)


def test_zero_risk_price_makes_measures_identical():
    m = ou_model([2.0, 1.0], [0.5, 0.0], [0.3, 0.4])
    p = simulate_paths(m, [0.1, 0.2], 15, 7, "P", seed=3)
    q = simulate_paths(m, [0.1, 0.2], 15, 7, "q", seed=3)
    assert np.array_equal(p, q)


def test_horizon_zero_and_negative():
    m = ou_model([2.0], [0.5], [0.3])
    out = simulate_paths(m, [0.25], 0, 4)
    assert out.shape == (4, 1, 1) and np.all(out == 0.25)
    with pytest.raises(ValueError):
        simulate_paths(m, [0.25], -1, 4)


def test_paths_have_independent_streams():
    a = path_noise(11, 3, 5, 2)
    b = path_noise(11, 5, 5, 2)
    np.testing.assert_array_equal(a, b[:3])
    assert not np.array_equal(a[0], a[1])


def test_ou_moments_match_closed_form():
    kappa, theta, sigma = np.array([1.0, 2.0]), np.array([0.5, -0.3]), np.array([0.4, 0.3])
    z0 = np.array([0.2, 0.0])
    m = ou_model(kappa, theta, sigma)
    n, h = 10_000, 30
    paths = simulate_paths(m, z0, h, n, seed=7)
    t = h * m.config.dt
    mean = theta + (z0 - theta) * np.exp(-kappa * t)
    var = sigma**2 * -np.expm1(-2 * kappa * t) / (2 * kappa)
    end = paths[:, -1]
    assert np.all(np.abs(end.mean(axis=0) - mean) <= 3 * np.sqrt(var / n))
    assert np.all(np.abs(end.var(axis=0, ddof=1) - var) <= 3 * var * np.sqrt(2 / (n - 1)))


def test_constant_risk_head_gives_flat_series(tmp_path):
    m = ou_model([1.0, 1.0], [0.0, 0.0], [0.2, 0.2], lam=[0.3, -0.1])
    path = ou_path(50)
    path = LatentPath(path.dates, path.currencies, path.z[:, :2], path.level)
    dates, curs, lam = risk_premium_series(m, path)
    np.testing.assert_array_equal(lam, np.tile([0.3, -0.1], (50, 1)))
    write_risk_premium_csv(tmp_path / "rp.csv", dates, curs, lam)
    lines = (tmp_path / "rp.csv").read_text().splitlines()
    assert lines[0] == "date,currency,lambda1,lambda2" and len(lines) == 51


def test_paths_csv_schema(tmp_path):
    m = ou_model([1.0], [0.0], [0.2])
    paths = simulate_paths(m, [0.0], 2, 2, seed=0)
    write_paths_csv(tmp_path / "p.csv", paths, np.zeros((2, 3, 2)), ("1Y", "2Y"))
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "path_id,day,z1,1Y,2Y" and len(lines) == 7


def test_config_validation():
    with pytest.raises(ValueError):
        DynamicsConfig(beta=-1)
    with pytest.raises(ValueError):
        DynamicsConfig(eps=0)
    with pytest.raises(ValueError):
        DynamicsConfig(diffusion="full")
