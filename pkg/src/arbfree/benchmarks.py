"""
Reference competitors: latent VAR(1), PCA+VAR(1) on scaled curves, a
three-factor Musiela/HJM simulator and the decoder-Jacobian market model
(AEMM) with a projection back onto the decoder manifold.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .curve_math import CurveError, TenorGrid, bootstrap_discounts, musiela_drift, pricing_maturities, swaps_from_pricing_discounts
from .pipeline.features import RobustScaler, pca_fit
from .pipeline.panel import CurvePanel

log = logging.getLogger(__name__)


class RankDeficientError(ValueError):
    pass


class ProjectionFault(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# VAR(1)


@dataclass(frozen=True)
class VarModel:
    alpha: np.ndarray
    phi: np.ndarray
    cov: np.ndarray
    resid_std: np.ndarray
    n_obs: int
    h: int = 1

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.phi)))) if self.phi.size else 0.0

    @property
    def stationary(self) -> bool:
        return self.spectral_radius < 1.0


def fit_var(latent_path, h: int = 1) -> VarModel:
    """OLS of z_{t+h} on [1, z_t]; accepts one (n, d) path or a list of segments."""
    segs = [np.atleast_2d(np.asarray(s, float)) for s in (latent_path if isinstance(latent_path, (list, tuple)) else [latent_path])]
    xs, ys = [], []
    for s in segs:
        if s.shape[0] > h:
            xs.append(s[:-h])
            ys.append(s[h:])
    if not xs:
        raise ValueError("path too short for the requested horizon")
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    n, d = x.shape
    design = np.column_stack([np.ones(n), x])
    if np.linalg.matrix_rank(design) < d + 1:
        raise RankDeficientError("VAR regressors are rank-deficient")
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    cov = resid.T @ resid / n
    cov = 0.5 * (cov + cov.T)
    return VarModel(coef[0], coef[1:].T.copy(), cov, np.sqrt(np.diag(cov)), n, h)


def var_mean(model: VarModel, z, h: int) -> np.ndarray:
    """Companion-form h-step mean Φ^h z + Σ_{k<h} Φ^k α."""
    z = np.asarray(z, float)
    d = len(model.alpha)
    comp = np.zeros((d + 1, d + 1))
    comp[:d, :d] = model.phi
    comp[:d, d] = model.alpha
    comp[d, d] = 1.0
    state = np.concatenate([z, np.ones(z.shape[:-1] + (1,))], axis=-1)
    return (state @ np.linalg.matrix_power(comp, h).T)[..., :d]


def var_forecast(model: VarModel, z_t, h: int, n_draws: int, seed: int) -> np.ndarray:
    """Draws of z_{t+h} by iterating the one-step model h times, shape (n_draws, d)."""
    if h < 1:
        raise ValueError("h must be >= 1")
    rng = np.random.default_rng(seed)
    d = len(model.alpha)
    w, v = np.linalg.eigh(model.cov)
    root = v * np.sqrt(np.clip(w, 0.0, None))
    z = np.broadcast_to(np.asarray(z_t, float), (n_draws, d)).copy()
    for _ in range(h):
        z = model.alpha + z @ model.phi.T + rng.standard_normal((n_draws, d)) @ root.T
    return z


@dataclass(frozen=True)
class PcaVarModel:
    scaler: RobustScaler
    mean: np.ndarray
    components: np.ndarray  # (k, tenors)
    var: VarModel | None  # None: persistence fallback

    def scores(self, rates) -> np.ndarray:
        return (self.scaler.transform(rates) - self.mean) @ self.components.T

    def curves(self, scores) -> np.ndarray:
        return self.scaler.inverse_transform(np.asarray(scores) @ self.components + self.mean)

    def forecast(self, last_curve, h: int) -> np.ndarray:
        s = self.scores(np.atleast_2d(last_curve))
        if self.var is not None and h > 0:
            s = var_mean(self.var, s, h)
        return self.curves(s)


def fit_pca_var(panel: CurvePanel, k: int = 3) -> PcaVarModel:
    """Pooled PCA on robust-scaled curves and a pooled VAR(1) on per-currency score paths."""
    rates = np.asarray(panel.rates)
    scaler = RobustScaler.fit(rates)
    x = scaler.transform(rates)
    pca = pca_fit(x, allow_degenerate=True)
    comps = pca.components[:k]
    model = PcaVarModel(scaler, pca.mean, comps, None)
    s = model.scores(rates)
    segs = [s[panel.rows_for(c)] for c in panel.currency_ids]
    try:
        var = fit_var(segs)
    except RankDeficientError:
        log.info("PCA+VAR: degenerate scores, falling back to persistence")
        var = None
    return PcaVarModel(scaler, pca.mean, comps, var)


def pca_var_baseline(train: CurvePanel, k: int, target: CurvePanel) -> CurvePanel:
    """Multi-step mean forecasts from each currency's last training curve to every target row.

    The horizon of a target row is its position after the last training date
    (in observed rows of that currency).
    """
    model = fit_pca_var(train, k)
    out = np.empty((len(target), len(target.grid)))
    for c in target.currency_ids:
        rows = target.rows_for(c)
        last = np.asarray(train.rates)[train.rows_for(c)[-1]]
        s0 = model.scores(last[None, :])
        hs = np.arange(1, len(rows) + 1)
        if model.var is None:
            sc = np.repeat(s0, len(rows), axis=0)
        else:
            sc = np.concatenate([var_mean(model.var, s0, int(h)) for h in hs])
        out[rows] = model.curves(sc)
    return target.with_rates(out)


# ---------------------------------------------------------------------------
# forward-curve helpers


def forward_grid(max_tau: float = 30.0, per_year: int = 12, fine_until: float = 2.0, fine_per_year: int = 96) -> np.ndarray:
    """Maturity nodes: fine spacing on the short end (where forwards bend most), coarser beyond."""
    fine = np.linspace(0.0, fine_until, int(round(fine_until * fine_per_year)) + 1)
    coarse = np.linspace(fine_until, max_tau, int(round((max_tau - fine_until) * per_year)) + 1)
    return np.unique(np.concatenate([fine, coarse]))


def forward_from_swaps(swaps, grid: TenorGrid, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Instantaneous forwards on ``x`` from the bootstrapped monotone-cubic discount curve."""
    curve = bootstrap_discounts(swaps, grid)
    lo, hi = h, x.max()
    xs = np.clip(x, lo, hi - h)
    up = np.array([curve.log_discount(v + h) for v in xs])
    dn = np.array([curve.log_discount(v - h) for v in xs])
    return -(up - dn) / (2 * h)


def swaps_from_forward(f: np.ndarray, x: np.ndarray, grid: TenorGrid) -> np.ndarray:
    """Par swaps from forward curves on ``x`` (trailing axis); trapezoid integration of f."""
    f = np.asarray(f, float)
    integ = np.concatenate([np.zeros(f.shape[:-1] + (1,)), np.cumsum(0.5 * (f[..., 1:] + f[..., :-1]) * np.diff(x), axis=-1)], axis=-1)
    taus = pricing_maturities(grid)
    if taus.max() > x.max() + 1e-12:
        raise CurveError("forward grid shorter than the longest pricing maturity")
    lp = np.stack([np.interp(taus, x, row) for row in integ.reshape(-1, len(x))])
    p = np.exp(-lp)
    return swaps_from_pricing_discounts(p, grid).reshape(f.shape[:-1] + (len(grid),))


def _x_slope(f: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.gradient(f, x, axis=-1, edge_order=2)


# ---------------------------------------------------------------------------
# three-factor HJM in Musiela coordinates


def hjm3_loadings(forward_paths, x: np.ndarray, n_factors: int = 3, dt: float = 1.0 / 252.0) -> np.ndarray:
    """PCA loadings of daily forward-rate increments scaled to annualised sample vols.

    ``forward_paths`` is a list of (dates, len(x)) arrays; increments are pooled.
    Returns (n_factors, len(x)).
    """
    inc = np.concatenate([np.diff(np.asarray(p, float), axis=0) for p in forward_paths])
    cov = np.cov(inc, rowvar=False) / dt
    w, v = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1][:n_factors]
    load = (v[:, order] * np.sqrt(np.clip(w[order], 0.0, None))).T
    for row in load:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return load


def hjm3_simulate(f0, x, loadings, horizon_days: int, n_paths: int, seed: int, dt: float = 1.0 / 252.0) -> np.ndarray:
    """Euler paths of df = (∂x f + Σσ_i∫₀ˣσ_i) dt + Σσ_i dW_i; shape (n_paths, horizon+1, len(x))."""
    x = np.asarray(x, float)
    if len(x) < 4:
        raise CurveError("need at least four maturity nodes for a stable ∂x")
    load = np.atleast_2d(np.asarray(loadings, float))
    sigmas = [lambda u, row=row: np.interp(u, x, row) for row in load]
    convexity = musiela_drift(np.zeros_like(x), sigmas, x)
    rng = np.random.default_rng(seed)
    f = np.broadcast_to(np.asarray(f0, float), (n_paths, len(x))).copy()
    out = np.empty((n_paths, horizon_days + 1, len(x)))
    out[:, 0] = f
    sdt = np.sqrt(dt)
    for t in range(horizon_days):
        dw = rng.standard_normal((n_paths, load.shape[0]))
        f = f + (_x_slope(f, x) + convexity) * dt + (dw @ load) * sdt
        out[:, t + 1] = f
    return out


# ---------------------------------------------------------------------------
# decoder-Jacobian market model


@dataclass(frozen=True)
class JacobianBasis:
    basis: np.ndarray  # (len(x), d): ∂f̂/∂z_k
    vols: np.ndarray  # (d,)

    def __post_init__(self) -> None:
        if self.basis.shape[1] != len(self.vols):
            raise ValueError("basis dimension must equal the number of vols")
        if not np.all(np.isfinite(self.basis)):
            raise ValueError("non-finite basis")


def decoded_forward(manifold, z, x, currency, level_scaled):
    """f̂(x; z) and its basis ∂f̂/∂z on the maturity grid ``x`` for one latent state."""
    n = len(x)
    zz = np.broadcast_to(np.asarray(z, float), (n, manifold.latent_dim))
    f, df_dz, _ = manifold.forward_curve(zz, x, np.repeat(currency, n), np.full(n, level_scaled))
    return f, df_dz


def _gauss_newton(manifold, f, x, currency, level_scaled, z0, max_iter: int, tol: float):
    z = np.asarray(z0, float).copy()
    fh, J = decoded_forward(manifold, z, x, currency, level_scaled)
    r = f - fh
    cost = float(r @ r)
    for _ in range(max_iter):
        step, *_ = np.linalg.lstsq(J, r, rcond=None)
        t = 1.0
        while t > 1e-6:
            zn = z + t * step
            fn, Jn = decoded_forward(manifold, zn, x, currency, level_scaled)
            rn = f - fn
            cn = float(rn @ rn)
            if cn <= cost:
                break
            t *= 0.5
        else:
            break
        moved = float(np.max(np.abs(zn - z)))
        z, fh, J, r, cost = zn, fn, Jn, rn, cn
        if moved < tol:
            break
    return z, fh, cost


def project(manifold, f, x, currency, level_scaled, z0=None, max_iter: int = 50, tol: float = 1e-13):
    """Latent state whose decoded forward curve is closest to ``f`` in least squares.

    Gauss-Newton with step halving. With a hint ``z0`` only that start is used;
    otherwise the encoder output on the swaps implied by ``f``, the origin and
    the unit axes are all tried and the lowest cost wins (the decoder's
    forward-curve map has spurious local minima). Returns (z, f̂(z)).
    """
    f = np.asarray(f, float)
    if z0 is None:
        swaps = swaps_from_forward(f, x, manifold.grid)
        panel = CurvePanel(np.array(["2000-01-03"], dtype="datetime64[D]"), np.array([currency]), swaps[None, :],
                           np.ones((1, len(swaps)), bool), manifold.grid)
        try:
            enc = manifold.latents(panel)[0]
        except Exception as exc:
            raise ProjectionFault(f"encode failed: {exc}") from exc
        eye = np.eye(manifold.latent_dim)
        starts = [enc, np.zeros_like(enc), *eye, *-eye]
    else:
        starts = [z0]
    best = None
    for s in starts:
        z, fh, cost = _gauss_newton(manifold, f, x, currency, level_scaled, s, max_iter, tol)
        if np.all(np.isfinite(z)) and (best is None or cost < best[2]):
            best = (z, fh, cost)
    if best is None:
        raise ProjectionFault("projection diverged")
    return best[0], best[1]


def aemm_step(manifold, f_t, x, sigma_k, dt: float, noise, currency, level_scaled, z_hint=None, roll_down: bool = False):
    """One Euler step of df = μ dt + Σ σ_k b_k dW_k followed by projection; returns (f_next, z_next).

    μ is the Musiela no-arbitrage drift built from the loadings σ_k b_k(x); the
    transport term ∂x f is included only with ``roll_down``.
    """
    x = np.asarray(x, float)
    sigma_k = np.asarray(sigma_k, float)
    z, f_on = project(manifold, np.asarray(f_t, float), x, currency, level_scaled, z0=z_hint)
    _, basis = decoded_forward(manifold, z, x, currency, level_scaled)
    jb = JacobianBasis(basis, sigma_k)
    loads = (jb.basis * jb.vols[None, :]).T
    sigmas = [lambda u, row=row: np.interp(u, x, row) for row in loads]
    slope = _x_slope(f_t, x) if roll_down else np.zeros_like(x)
    drift = musiela_drift(slope, sigmas, x)
    f_new = np.asarray(f_t, float) + drift * dt + (np.asarray(noise, float) @ loads) * np.sqrt(dt)
    return project(manifold, f_new, x, currency, level_scaled, z0=z)[::-1]
