"""
Stage A: conditional VAE over swap curves with a bond-price decoder.

The encoder maps scaled curve features (plus an optional currency embedding)
to a Gaussian posterior over z. The decoder maps (z, maturity, embedding,
level) to a pseudo-yield ỹ and likelihood heads; bond prices are
P = exp(-τ (level + ỹ)) and are re-priced into par swaps for the
reconstruction likelihood, which lives in robust-scaled swap space.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import digamma, gammaln

from .curve_math import DEFAULT_GRID, CurveError, TenorGrid, pricing_maturities, swaps_from_pricing_discounts
from .nn import AdamState, Mlp, adam_step, decode_array, encode_array, mlp_from_dict, mlp_to_dict, sigmoid, softplus
from .pipeline.features import RobustScaler, decompose
from .pipeline.panel import CurvePanel

log = logging.getLogger(__name__)

LOGVAR_CLAMP = (-30.0, 20.0)


class TrainingFault(RuntimeError):
    def __init__(self, msg: str, batch_index: int | None = None, last_good=None):
        super().__init__(msg)
        self.batch_index = batch_index
        self.last_good = last_good


class FrozenError(RuntimeError):
    pass


@dataclass(frozen=True)
class ManifoldConfig:
    latent_dim: int = 3
    embed_dim: int = 16
    encoder_widths: tuple[int, ...] = (256, 256)
    decoder_widths: tuple[int, ...] = (256, 256)
    likelihood: str = "student_t"
    conditioning: bool = True
    levelscript: bool = True
    kl_weight: float = 1.0
    kl_warmup: float = 0.2
    epochs: int = 100
    batch_size: int = 128
    lr: float = 1e-3
    lr_final: float = 1e-4
    seed: int = 0
    yield_scale: float = 0.01
    maturity_scale: float = 30.0
    precision_scale: float = 1e4

    def __post_init__(self) -> None:
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if not self.encoder_widths or not self.decoder_widths:
            raise ValueError("encoder/decoder widths must be non-empty")
        if self.likelihood not in ("student_t", "gaussian"):
            raise ValueError("likelihood must be 'student_t' or 'gaussian'")
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        object.__setattr__(self, "decoder_widths", tuple(int(w) for w in self.decoder_widths))

    @classmethod
    def from_dict(cls, d: dict) -> "ManifoldConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown manifold config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        d["decoder_widths"] = list(self.decoder_widths)
        return d


@dataclass(frozen=True)
class PosteriorParams:
    mu: np.ndarray
    logvar: np.ndarray

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.logvar)


@dataclass(frozen=True)
class StudentTParams:
    loc: np.ndarray
    precision: np.ndarray
    dof: np.ndarray


# ---------------------------------------------------------------------------
# likelihoods


def gaussian_nll(x, mu, var) -> float:
    x, mu, var = (np.asarray(a, dtype=float) for a in (x, mu, var))
    if np.any(var <= 0):
        raise ValueError("variance must be > 0")
    return float(np.sum(0.5 * np.log(2 * np.pi * var) + (x - mu) ** 2 / (2 * var)))


def student_t_nll(x, p: StudentTParams) -> float:
    x = np.asarray(x, dtype=float)
    lam, nu = np.asarray(p.precision, float), np.asarray(p.dof, float)
    if np.any(lam <= 0) or np.any(nu <= 0):
        raise ValueError("precision and dof must be > 0")
    return float(np.sum(_student_t_terms(x - np.asarray(p.loc, float), lam, nu)))


def _student_t_terms(r, lam, nu):
    return (
        -gammaln(0.5 * (nu + 1.0))
        + gammaln(0.5 * nu)
        - 0.5 * np.log(lam / (np.pi * nu))
        + 0.5 * (nu + 1.0) * np.log1p(lam * r * r / nu)
    )


def _student_t_grads(r, lam, nu):
    """d NLL / d(loc, precision, dof) elementwise."""
    q = lam * r * r
    denom = nu + q
    d_loc = -(nu + 1.0) * lam * r / denom
    d_lam = -0.5 / lam + 0.5 * (nu + 1.0) * r * r / denom
    d_nu = (
        -0.5 * digamma(0.5 * (nu + 1.0))
        + 0.5 * digamma(0.5 * nu)
        + 0.5 / nu
        + 0.5 * np.log1p(q / nu)
        - 0.5 * (nu + 1.0) * q / (nu * denom)
    )
    return d_loc, d_lam, d_nu


def kl_gaussian(post: PosteriorParams) -> float:
    mu = np.asarray(post.mu, float)
    lv = np.asarray(post.logvar, float)
    return float(0.5 * np.sum(mu * mu + np.exp(lv) - lv - 1.0))


def reparameterize(post: PosteriorParams, noise) -> np.ndarray:
    lv = np.clip(np.asarray(post.logvar, float), *LOGVAR_CLAMP)
    return np.asarray(post.mu, float) + np.exp(0.5 * lv) * np.asarray(noise, float)


# ---------------------------------------------------------------------------
# model


def _swap_vjp(p: np.ndarray, s: np.ndarray, grid: TenorGrid, g: np.ndarray) -> np.ndarray:
    """Pull back dL/dS (batch, tenors) to dL/dP at pricing maturities."""
    t = grid.array
    short = t < 1.0 - 1e-12
    n_short = int(short.sum())
    dp = np.zeros_like(p)
    dp[:, :n_short] = -g[:, :n_short] / (t[short] * p[:, :n_short] ** 2)
    annual = p[:, n_short:]
    annuity = np.cumsum(annual, axis=1)
    years = np.round(t[~short]).astype(int) - 1
    a_n = annuity[:, years]
    g_long = g[:, n_short:]
    s_long = s[:, n_short:]
    c = np.zeros_like(annual)
    np.add.at(c.T, years, (-g_long * s_long / a_n).T)
    dp[:, n_short:] = np.cumsum(c[:, ::-1], axis=1)[:, ::-1]
    extra = np.zeros_like(annual)
    np.add.at(extra.T, years, (-g_long / a_n).T)
    dp[:, n_short:] += extra
    return dp


@dataclass
class ManifoldModel:
    config: ManifoldConfig
    encoder: Mlp
    decoder: Mlp
    embedding: np.ndarray
    currencies: tuple[str, ...]
    input_scaler: RobustScaler
    target_scaler: RobustScaler
    level_scaler: RobustScaler
    grid: TenorGrid = DEFAULT_GRID
    frozen: bool = False
    decoder_checksum: str | None = None
    config_hash: str | None = None

    # -- construction ------------------------------------------------------

    @classmethod
    def initialise(cls, cfg: ManifoldConfig, panel: CurvePanel, rng: np.random.Generator) -> "ManifoldModel":
        grid = panel.grid
        recs = decompose(panel)
        raw = np.asarray(panel.rates)
        target_scaler = RobustScaler.fit(raw)
        if cfg.levelscript:
            input_scaler = RobustScaler.fit(recs.features())
            level_scaler = RobustScaler(input_scaler.medians[-1:], input_scaler.iqrs[-1:])
        else:
            input_scaler = RobustScaler.fit(raw)
            level_scaler = RobustScaler.fit(recs.level[:, None])
        curs = panel.currency_ids
        e = cfg.embed_dim if cfg.conditioning else 0
        enc_in = (len(grid) + (1 if cfg.levelscript else 0)) + e
        dec_in = cfg.latent_dim + 1 + e + (1 if cfg.levelscript else 0)
        n_out = 3 if cfg.likelihood == "student_t" else 2
        encoder = Mlp.init((enc_in, *cfg.encoder_widths, 2 * cfg.latent_dim), rng)
        decoder = Mlp.init((dec_in, *cfg.decoder_widths, n_out), rng)
        embedding = rng.standard_normal((len(curs), e))
        return cls(cfg, encoder, decoder, embedding, curs, input_scaler, target_scaler, level_scaler, grid)

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def currency_index(self, currencies) -> np.ndarray:
        cur = np.atleast_1d(np.asarray(currencies, dtype=str))
        if not self.config.conditioning:
            return np.zeros(cur.shape, dtype=int)
        lookup = {c: i for i, c in enumerate(self.currencies)}
        try:
            return np.array([lookup[c] for c in cur], dtype=int)
        except KeyError as exc:
            raise KeyError(f"unknown currency {exc.args[0]!r}") from None

    def _emb(self, cur_idx: np.ndarray) -> np.ndarray:
        if not self.config.conditioning:
            return np.zeros((len(cur_idx), 0))
        return self.embedding[cur_idx]

    def freeze(self) -> None:
        self.frozen = True
        self.decoder_checksum = self.checksum()

    def checksum(self) -> str:
        h = hashlib.sha256(self.decoder.checksum().encode())
        h.update(np.ascontiguousarray(self.embedding, dtype="<f8").tobytes())
        return h.hexdigest()

    def verify_frozen(self) -> None:
        if not self.frozen or self.decoder_checksum != self.checksum():
            raise FrozenError("decoder checksum mismatch or model not frozen")

    # -- feature plumbing ----------------------------------------------------

    def inputs_from_panel(self, panel: CurvePanel):
        """(scaled encoder features, raw level, scaled level) for each panel row."""
        recs = decompose(panel)
        if self.config.levelscript:
            x = self.input_scaler.transform(recs.features())
        else:
            x = self.input_scaler.transform(np.asarray(panel.rates))
        lvl = recs.level.copy()
        return x, lvl, self.level_scaler.transform(lvl[:, None])[:, 0]

    def raw_level(self, level_scaled) -> np.ndarray:
        return self.level_scaler.inverse_transform(np.asarray(level_scaled, float).reshape(-1, 1))[:, 0]

    def _encoder_input(self, x, cur_idx):
        return np.concatenate([np.atleast_2d(x), self._emb(cur_idx)], axis=1)

    def _decoder_input(self, z, tau, cur_idx, level_scaled):
        """Rows of [z, τ/scale, embedding, level]; all args aligned on the first axis."""
        cols = [np.atleast_2d(z), (np.asarray(tau, float) / self.config.maturity_scale)[:, None], self._emb(cur_idx)]
        if self.config.levelscript:
            cols.append(np.asarray(level_scaled, float)[:, None])
        return np.concatenate(cols, axis=1)

    def _exponent_level(self, level_raw):
        return np.asarray(level_raw, float) if self.config.levelscript else np.zeros_like(np.asarray(level_raw, float))

    # -- Stage A operations --------------------------------------------------

    def encode(self, x, currency) -> PosteriorParams:
        cur_idx = self.currency_index(currency)
        out = self.encoder.forward(self._encoder_input(x, cur_idx))
        d = self.latent_dim
        return PosteriorParams(out[:, :d], out[:, d:])

    def pseudo_yield(self, z, tau, currency, level_scaled) -> np.ndarray:
        z = np.atleast_2d(z)
        n = z.shape[0]
        cur_idx = np.broadcast_to(self.currency_index(currency), (n,))
        tau = np.broadcast_to(np.asarray(tau, float), (n,))
        lvl = np.broadcast_to(np.asarray(level_scaled, float), (n,))
        out = self.decoder.forward(self._decoder_input(z, tau, cur_idx, lvl))
        return self.config.yield_scale * out[:, 0]

    def decode_bond(self, z, tau, currency, level_scaled) -> np.ndarray:
        """P(z, τ) = exp(-τ (level + ỹ)); vectorised over rows of z."""
        tau_a = np.asarray(tau, float)
        if np.any(tau_a <= 0):
            raise CurveError("maturity must be > 0")
        y = self.pseudo_yield(z, tau_a, currency, level_scaled)
        lvl = self._exponent_level(self.raw_level(np.broadcast_to(np.asarray(level_scaled, float), y.shape)))
        return np.exp(-np.broadcast_to(tau_a, y.shape) * (lvl + y))

    def _decode_grid(self, z, cur_idx, level_scaled, level_raw):
        """Decoder outputs on every pricing maturity: (outputs (B,K,n_out), cache, taus)."""
        taus = pricing_maturities(self.grid)
        b, k = z.shape[0], len(taus)
        zz = np.repeat(z, k, axis=0)
        tt = np.tile(taus, b)
        ci = np.repeat(cur_idx, k)
        ll = np.repeat(level_scaled, k)
        out, cache = self.decoder.forward_cached(self._decoder_input(zz, tt, ci, ll))
        return out.reshape(b, k, -1), cache, taus

    def _grid_positions(self) -> np.ndarray:
        taus = pricing_maturities(self.grid)
        return np.array([int(np.argmin(np.abs(taus - t))) for t in self.grid.array])

    def reprice_swaps(self, z, currency, level_scaled) -> np.ndarray:
        z = np.atleast_2d(z)
        n = z.shape[0]
        cur_idx = np.broadcast_to(self.currency_index(currency), (n,)).copy()
        lvl_s = np.broadcast_to(np.asarray(level_scaled, float), (n,)).copy()
        out, _, taus = self._decode_grid(z, cur_idx, lvl_s, None)
        lvl = self._exponent_level(self.raw_level(lvl_s))
        p = np.exp(-taus[None, :] * (lvl[:, None] + self.config.yield_scale * out[:, :, 0]))
        return swaps_from_pricing_discounts(p, self.grid)

    def reconstruct(self, panel: CurvePanel) -> CurvePanel:
        """Posterior-mean reconstruction of every row of a dense panel."""
        x, _, lvl_s = self.inputs_from_panel(panel)
        post = self.encode(x, panel.currencies)
        preds = []
        for s in range(0, len(panel), 512):
            sl = slice(s, s + 512)
            preds.append(self.reprice_swaps(post.mu[sl], panel.currencies[sl], lvl_s[sl]))
        rates = np.concatenate(preds) if preds else np.zeros((0, len(self.grid)))
        return panel.with_rates(rates)

    def latents(self, panel: CurvePanel) -> np.ndarray:
        x, _, _ = self.inputs_from_panel(panel)
        return self.encode(x, panel.currencies).mu

    # -- decoder derivatives for Stage B / AEMM ------------------------------

    def decoder_jets(self, z, tau, currency, level_scaled):
        """Exact derivatives of the pseudo-yield ỹ(z, τ).

        Returns a dict with ``y``, ``y_t``, ``y_tt``, ``grad`` (n,d), ``hess`` (n,d,d)
        and ``grad_t`` (n,d) = ∂τ∇zỹ.
        """
        z = np.atleast_2d(np.asarray(z, float))
        n, d = z.shape
        tau = np.broadcast_to(np.asarray(tau, float), (n,))
        cur_idx = np.broadcast_to(self.currency_index(currency), (n,))
        lvl = np.broadcast_to(np.asarray(level_scaled, float), (n,))
        x = self._decoder_input(z, tau, cur_idx, lvl)
        n_in = x.shape[1]
        ti = d  # column of the maturity input
        dirs = []
        for i in range(d):
            e = np.zeros(n_in)
            e[i] = 1.0
            dirs.append(e)
        e_t = np.zeros(n_in)
        e_t[ti] = 1.0
        dirs.append(e_t)
        pairs = [(i, j) for i in range(d) for j in range(i + 1, d)]
        for i, j in pairs:
            dirs.append(dirs[i] + dirs[j])
        for i in range(d):
            dirs.append(dirs[i] + e_t)
        out, first, second = self.decoder.jet(x, np.array(dirs))
        ys = self.config.yield_scale
        ms = 1.0 / self.config.maturity_scale
        f1 = first[:, :, 0] * ys
        s2 = second[:, :, 0] * ys
        grad = f1[:, :d]
        y_t = f1[:, d] * ms
        diag = s2[:, :d]
        y_tt_in = s2[:, d]
        hess = np.zeros((n, d, d))
        hess[:, np.arange(d), np.arange(d)] = diag
        for k, (i, j) in enumerate(pairs):
            h_ij = 0.5 * (s2[:, d + 1 + k] - diag[:, i] - diag[:, j])
            hess[:, i, j] = h_ij
            hess[:, j, i] = h_ij
        off = d + 1 + len(pairs)
        mixed = 0.5 * (s2[:, off : off + d] - diag - y_tt_in[:, None])
        return {
            "y": out[:, 0] * ys,
            "y_t": y_t,
            "y_tt": y_tt_in * ms * ms,
            "grad": grad,
            "hess": hess,
            "grad_t": mixed * ms,
        }

    def bond_derivatives(self, z, tau, currency, level_scaled):
        """D, ∂τD, ∇zD, ∇²zzD of the bond-price decoder."""
        j = self.decoder_jets(z, tau, currency, level_scaled)
        n = j["y"].shape[0]
        tau = np.broadcast_to(np.asarray(tau, float), (n,))
        lvl = self._exponent_level(self.raw_level(np.broadcast_to(np.asarray(level_scaled, float), (n,))))
        dlog_t = -(lvl + j["y"]) - tau * j["y_t"]
        D = np.exp(-tau * (lvl + j["y"]))
        g = -tau[:, None] * j["grad"]
        H = tau[:, None, None] ** 2 * j["grad"][:, :, None] * j["grad"][:, None, :] - tau[:, None, None] * j["hess"]
        return {"D": D, "D_tau": D * dlog_t, "grad": D[:, None] * g, "hess": D[:, None, None] * H}

    def short_rate(self, z, currency, level_scaled, eps_tau: float = 1e-4) -> np.ndarray:
        """r = -∂τ log D at τ = eps_tau (exact derivative of the pseudo-yield head)."""
        j = self.decoder_jets(z, eps_tau, currency, level_scaled)
        n = j["y"].shape[0]
        lvl = self._exponent_level(self.raw_level(np.broadcast_to(np.asarray(level_scaled, float), (n,))))
        return lvl + j["y"] + eps_tau * j["y_t"]

    def forward_curve(self, z, tau, currency, level_scaled):
        """Decoder forward-curve view f̂(τ; z) = -∂τ log D with ∂f̂/∂z and ∂f̂/∂τ."""
        j = self.decoder_jets(z, tau, currency, level_scaled)
        n = j["y"].shape[0]
        tau = np.broadcast_to(np.asarray(tau, float), (n,))
        lvl = self._exponent_level(self.raw_level(np.broadcast_to(np.asarray(level_scaled, float), (n,))))
        f = lvl + j["y"] + tau * j["y_t"]
        df_dz = j["grad"] + tau[:, None] * j["grad_t"]
        df_dt = 2.0 * j["y_t"] + tau * j["y_tt"]
        return f, df_dz, df_dt

    # -- persistence ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "kind": "manifold",
            "config": self.config.to_dict(),
            "grid": list(self.grid.labels),
            "currencies": list(self.currencies),
            "encoder": mlp_to_dict(self.encoder),
            "decoder": mlp_to_dict(self.decoder),
            "embedding": encode_array(self.embedding),
            "input_scaler": self.input_scaler.to_dict(),
            "target_scaler": self.target_scaler.to_dict(),
            "level_scaler": self.level_scaler.to_dict(),
            "frozen": self.frozen,
            "decoder_checksum": self.decoder_checksum,
            "config_hash": self.config_hash,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ManifoldModel":
        m = cls(
            ManifoldConfig.from_dict(d["config"]),
            mlp_from_dict(d["encoder"]),
            mlp_from_dict(d["decoder"]),
            decode_array(d["embedding"]),
            tuple(d["currencies"]),
            RobustScaler.from_dict(d["input_scaler"]),
            RobustScaler.from_dict(d["target_scaler"]),
            RobustScaler.from_dict(d["level_scaler"]),
            TenorGrid.from_labels(d["grid"]),
            bool(d["frozen"]),
            d.get("decoder_checksum"),
            d.get("config_hash"),
        )
        if m.frozen:
            m.verify_frozen()
        return m

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ManifoldModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def params(self) -> list[np.ndarray]:
        ps = self.encoder.params + self.decoder.params
        if self.config.conditioning:
            ps.append(self.embedding)
        return ps

    def copy(self) -> "ManifoldModel":
        return replace(self, encoder=self.encoder.copy(), decoder=self.decoder.copy(), embedding=self.embedding.copy())


# ---------------------------------------------------------------------------
# ELBO and training


@dataclass
class Batch:
    x: np.ndarray  # encoder features
    cur_idx: np.ndarray
    level_raw: np.ndarray
    level_scaled: np.ndarray
    target: np.ndarray  # scaled swaps
    swaps: np.ndarray  # raw swaps


def make_batch(model: ManifoldModel, panel: CurvePanel) -> Batch:
    x, lvl, lvl_s = model.inputs_from_panel(panel)
    swaps = np.asarray(panel.rates)
    return Batch(x, model.currency_index(panel.currencies), lvl, lvl_s, model.target_scaler.transform(swaps), swaps)


def elbo_loss(model: ManifoldModel, batch: Batch, noise: np.ndarray, kl_weight: float, with_grads: bool = True):
    """Mean over the batch of reconstruction NLL + kl_weight * KL.

    Returns ``(loss, grads, stats)``; grads align with ``model.params()``.
    """
    cfg = model.config
    d = cfg.latent_dim
    b = batch.x.shape[0]
    enc_in = model._encoder_input(batch.x, batch.cur_idx)
    enc_out, enc_cache = model.encoder.forward_cached(enc_in)
    mu, lv_raw = enc_out[:, :d], enc_out[:, d:]
    lv = np.clip(lv_raw, *LOGVAR_CLAMP)
    std = np.exp(0.5 * lv)
    z = mu + std * noise

    out, dec_cache, taus = model._decode_grid(z, batch.cur_idx, batch.level_scaled, batch.level_raw)
    lvl = model._exponent_level(batch.level_raw)
    ytil = cfg.yield_scale * out[:, :, 0]
    p = np.exp(-taus[None, :] * (lvl[:, None] + ytil))
    s_hat = swaps_from_pricing_discounts(p, model.grid)
    med, iqr = model.target_scaler.medians, model.target_scaler.iqrs
    pred = (s_hat - med) / iqr
    pos = model._grid_positions()
    r = batch.target - pred
    raw1 = out[:, pos, 1]
    if cfg.likelihood == "student_t":
        lam = softplus(raw1) * cfg.precision_scale
        nu = 2.0 + softplus(out[:, pos, 2])
        nll_terms = _student_t_terms(r, lam, nu)
    else:
        var = softplus(raw1) / cfg.precision_scale
        nll_terms = 0.5 * np.log(2 * np.pi * var) + r * r / (2 * var)
    kl_terms = 0.5 * (mu * mu + np.exp(lv) - lv - 1.0)
    recon = float(nll_terms.sum() / b)
    kl = float(kl_terms.sum() / b)
    loss = recon + kl_weight * kl
    stats = {"recon": recon, "kl": kl, "sq_err_bps": float(np.sum(((s_hat - batch.swaps) * 1e4) ** 2)), "n": r.size}
    if not with_grads:
        return loss, None, stats
    if not math.isfinite(loss):
        raise TrainingFault("non-finite ELBO loss")

    inv_b = 1.0 / b
    d_out = np.zeros_like(out)
    if cfg.likelihood == "student_t":
        d_loc, d_lam, d_nu = _student_t_grads(r, lam, nu)
        d_pred = d_loc * inv_b
        d_out[:, pos, 1] = d_lam * cfg.precision_scale * sigmoid(raw1) * inv_b
        d_out[:, pos, 2] = d_nu * sigmoid(out[:, pos, 2]) * inv_b
    else:
        d_pred = (-r / var) * inv_b
        d_var = 0.5 / var - r * r / (2 * var * var)
        d_out[:, pos, 1] = d_var * sigmoid(raw1) / cfg.precision_scale * inv_b
    d_s = d_pred / iqr
    d_p = _swap_vjp(p, s_hat, model.grid, d_s)
    d_out[:, :, 0] = d_p * (-taus[None, :] * p) * cfg.yield_scale

    dec_grads, d_dec_in = model.decoder.backward(dec_cache, d_out.reshape(-1, d_out.shape[2]))
    k = len(taus)
    d_dec_in = d_dec_in.reshape(b, k, -1)
    d_z = d_dec_in[:, :, :d].sum(axis=1)
    e = cfg.embed_dim if cfg.conditioning else 0
    d_emb = np.zeros_like(model.embedding)
    if e:
        np.add.at(d_emb, batch.cur_idx, d_dec_in[:, :, d + 1 : d + 1 + e].sum(axis=1))

    in_clamp = (lv_raw > LOGVAR_CLAMP[0]) & (lv_raw < LOGVAR_CLAMP[1])
    d_mu = d_z + kl_weight * mu * inv_b
    d_lv = (d_z * 0.5 * std * noise + kl_weight * 0.5 * (np.exp(lv) - 1.0) * inv_b) * in_clamp
    enc_grads, d_enc_in = model.encoder.backward(enc_cache, np.concatenate([d_mu, d_lv], axis=1))
    if e:
        np.add.at(d_emb, batch.cur_idx, d_enc_in[:, -e:])
    grads = enc_grads + dec_grads
    if cfg.conditioning:
        grads.append(d_emb)
    return loss, grads, stats


@dataclass
class TrainingLog:
    rows: list[dict] = field(default_factory=list)

    def to_csv(self, path, columns: tuple[str, ...] = ("epoch", "loss", "kl", "recon_rmse_bps")) -> None:
        with open(path, "w") as fh:
            fh.write(",".join(columns) + "\n")
            for r in self.rows:
                fh.write(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in columns) + "\n")


def _kl_schedule(cfg: ManifoldConfig, progress: float) -> float:
    if cfg.kl_warmup <= 0:
        return cfg.kl_weight
    return cfg.kl_weight * min(1.0, progress / cfg.kl_warmup)


def _lr_at(lr0: float, lr1: float, progress: float) -> float:
    return lr1 + 0.5 * (lr0 - lr1) * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def train_manifold(cfg: ManifoldConfig, panel: CurvePanel, epoch_callback=None):
    """Seeded single-threaded training; returns (frozen model, TrainingLog)."""
    if not panel.is_dense:
        raise ValueError("training panel must be dense")
    rng = np.random.default_rng(cfg.seed)
    model = ManifoldModel.initialise(cfg, panel, rng)
    data = make_batch(model, panel)
    n = data.x.shape[0]
    params = model.params()
    state = AdamState(lr=cfg.lr)
    log_ = TrainingLog()
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total = cfg.epochs * steps_per_epoch
    step = 0
    last_good = model.copy()
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        tot_loss = tot_kl = sq = cnt = 0.0
        for bi in range(steps_per_epoch):
            idx = perm[bi * cfg.batch_size : (bi + 1) * cfg.batch_size]
            batch = Batch(data.x[idx], data.cur_idx[idx], data.level_raw[idx], data.level_scaled[idx],
                          data.target[idx], data.swaps[idx])
            noise = rng.standard_normal((len(idx), cfg.latent_dim))
            progress = step / total
            try:
                loss, grads, st = elbo_loss(model, batch, noise, _kl_schedule(cfg, progress))
            except TrainingFault as exc:
                raise TrainingFault(f"epoch {epoch}: {exc}", batch_index=bi, last_good=last_good) from None
            if not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingFault(f"epoch {epoch}: non-finite gradient", batch_index=bi, last_good=last_good)
            state.lr = _lr_at(cfg.lr, cfg.lr_final, progress)
            adam_step(params, grads, state)
            step += 1
            tot_loss += loss * len(idx)
            tot_kl += st["kl"] * len(idx)
            sq += st["sq_err_bps"]
            cnt += st["n"]
        row = {
            "epoch": epoch,
            "loss": tot_loss / n,
            "kl": tot_kl / n,
            "recon_rmse_bps": math.sqrt(sq / cnt),
        }
        log_.rows.append(row)
        log.info("manifold epoch %d loss=%.4f kl=%.4f rmse=%.2fbp", epoch, row["loss"], row["kl"], row["recon_rmse_bps"])
        last_good = model.copy()
        if epoch_callback is not None:
            epoch_callback(model, row)
    model.freeze()
    return model, log_
