"""
Stage B: latent SDE dynamics fitted through the frozen Stage A decoder.

A ParamNet maps a latent state to the physical drift, a lower-triangular
diffusion factor and a market price of risk. Training combines the
Euler-Maruyama transition likelihood of the encoded latent path with a
normalised no-arbitrage PDE penalty evaluated on collocation points and a
ridge penalty on the market price of risk.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .manifold import FrozenError, ManifoldModel, _lr_at
from .nn import AdamState, Mlp, adam_step, mlp_from_dict, mlp_to_dict, sigmoid, softplus
from .pipeline.panel import CurvePanel

log = logging.getLogger(__name__)

JITTER = 1e-10


class NumericFault(FloatingPointError):
    pass


class TrainingFault(RuntimeError):
    pass


@dataclass(frozen=True)
class DynamicsConfig:
    widths: tuple[int, ...] = (256, 256, 256)
    beta: float = 1.0
    gamma: float = 1e-3
    eps: float = 1e-8
    n_states: int = 256
    n_fillers: int = 8
    jitter: float = 0.1
    dt: float = 1.0 / 252.0
    epochs: int = 50
    batch_size: int = 256
    lr: float = 1e-3
    lr_final: float = 1e-4
    seed: int = 0
    diffusion: str = "diagonal"
    conditioning: bool = True
    hidden: str = "tanh"
    eps_tau: float = 1e-4

    def __post_init__(self) -> None:
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("beta and gamma must be >= 0")
        if self.eps <= 0 or self.dt <= 0:
            raise ValueError("eps and dt must be > 0")
        if self.diffusion not in ("diagonal", "cholesky"):
            raise ValueError("diffusion must be 'diagonal' or 'cholesky'")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @classmethod
    def from_dict(cls, d: dict) -> "DynamicsConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown dynamics config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


@dataclass(frozen=True)
class SdeFields:
    mu_p: np.ndarray  # (n, d)
    sigma: np.ndarray  # (n, d, d) lower triangular
    lam: np.ndarray  # (n, d)

    @property
    def mu_q(self) -> np.ndarray:
        return self.mu_p - np.einsum("nij,nj->ni", self.sigma, self.lam)


# ---------------------------------------------------------------------------
# analytic decoder stub


@dataclass(frozen=True)
class VasicekDecoder:
    """Closed-form Vasicek bond prices D = exp(A(τ) - B(τ) z₁) with short rate z₁.

    Exposes the same derivative interface as a frozen ``ManifoldModel``; extra
    latent coordinates (when ``latent_dim > 1``) do not enter the price.
    """

    kappa: float
    theta: float
    sigma: float
    latent_dim: int = 1

    def _ab(self, tau):
        k, th, s = self.kappa, self.theta, self.sigma
        b = -np.expm1(-k * tau) / k
        a = (th - s * s / (2 * k * k)) * (b - tau) - s * s * b * b / (4 * k)
        return a, b

    def bond_derivatives(self, z, tau, currency=None, level_scaled=None):
        z = np.atleast_2d(np.asarray(z, float))
        n, d = z.shape
        tau = np.broadcast_to(np.asarray(tau, float), (n,))
        k, th, s = self.kappa, self.theta, self.sigma
        a, b = self._ab(tau)
        db = np.exp(-k * tau)
        da = (th - s * s / (2 * k * k)) * (db - 1.0) - s * s * b * db / (2 * k)
        D = np.exp(a - b * z[:, 0])
        grad = np.zeros((n, d))
        grad[:, 0] = -b * D
        hess = np.zeros((n, d, d))
        hess[:, 0, 0] = b * b * D
        return {"D": D, "D_tau": (da - db * z[:, 0]) * D, "grad": grad, "hess": hess}

    def short_rate(self, z, currency=None, level_scaled=None, eps_tau: float = 1e-4):
        return np.atleast_2d(np.asarray(z, float))[:, 0].copy()

    def currency_index(self, currencies):
        return np.zeros(np.atleast_1d(np.asarray(currencies)).shape, dtype=int)

    @property
    def embedding(self):
        return np.zeros((1, 0))

    @property
    def config(self):
        return None

    def checksum(self) -> str:
        return hashlib.sha256(repr((self.kappa, self.theta, self.sigma, self.latent_dim)).encode()).hexdigest()

    def verify_frozen(self) -> None:
        return None


# ---------------------------------------------------------------------------
# model


def _decoder_conditioned(decoder) -> bool:
    cfg = getattr(decoder, "config", None)
    return bool(cfg is not None and cfg.conditioning)


@dataclass
class DynamicsModel:
    config: DynamicsConfig
    paramnet: Mlp
    decoder: object
    decoder_checksum: str
    latent_dim: int
    config_hash: str | None = None

    @classmethod
    def initialise(cls, cfg: DynamicsConfig, decoder, rng: np.random.Generator) -> "DynamicsModel":
        d = decoder.latent_dim
        n_in = d + (decoder.embedding.shape[1] if cfg.conditioning and _decoder_conditioned(decoder) else 0)
        n_sig = d if cfg.diffusion == "diagonal" else d * (d + 1) // 2
        net = Mlp.init((n_in, *cfg.widths, 2 * d + n_sig), rng, hidden=cfg.hidden)
        # small heads: start near a driftless unit-scale diffusion
        net.weights[-1] *= 0.1
        return cls(cfg, net, decoder, decoder.checksum(), d)

    @property
    def conditioned(self) -> bool:
        return self.config.conditioning and _decoder_conditioned(self.decoder)

    def verify_decoder(self) -> None:
        self.decoder.verify_frozen()
        if self.decoder.checksum() != self.decoder_checksum:
            raise FrozenError("decoder checksum differs from the one recorded at Stage B initialisation")

    def _inputs(self, z, cur_idx) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, float))
        if not self.conditioned:
            return z
        return np.concatenate([z, self.decoder.embedding[cur_idx]], axis=1)

    def _tri(self):
        d = self.latent_dim
        if self.config.diffusion == "diagonal":
            return np.arange(d), np.arange(d)
        return np.tril_indices(d)

    def _fields_from_out(self, out) -> SdeFields:
        d = self.latent_dim
        rows, cols = self._tri()
        n_sig = len(rows)
        raw = out[:, d : d + n_sig]
        diag = rows == cols
        vals = np.where(diag[None, :], softplus(raw), raw)
        sigma = np.zeros((out.shape[0], d, d))
        sigma[:, rows, cols] = vals
        return SdeFields(out[:, :d].copy(), sigma, out[:, d + n_sig :].copy())

    def _raw_sigma_grad(self, out, d_sigma) -> np.ndarray:
        d = self.latent_dim
        rows, cols = self._tri()
        raw = out[:, d : d + len(rows)]
        g = d_sigma[:, rows, cols]
        return np.where((rows == cols)[None, :], g * sigmoid(raw), g)


def eval_fields(model: DynamicsModel, z, currency=None) -> SdeFields:
    z = np.atleast_2d(np.asarray(z, float))
    cur_idx = _cur_idx(model, currency, z.shape[0])
    out = model.paramnet.forward(model._inputs(z, cur_idx))
    if not np.all(np.isfinite(out)):
        raise NumericFault("non-finite ParamNet output")
    return model._fields_from_out(out)


def _cur_idx(model: DynamicsModel, currency, n: int) -> np.ndarray:
    if currency is None or not model.conditioned:
        return np.zeros(n, dtype=int)
    return np.broadcast_to(model.decoder.currency_index(currency), (n,)).copy()


def short_rate(decoder, z, currency=None, level_scaled=None, eps_tau: float = 1e-4) -> np.ndarray:
    return decoder.short_rate(z, currency, level_scaled, eps_tau=eps_tau)


# ---------------------------------------------------------------------------
# PDE residual


def _pde_terms(der, r, fields: SdeFields, eps: float):
    """Residual R, normaliser N and the vol vector Lᵀ∇D for aligned rows."""
    g = der["grad"]
    L = fields.sigma
    H = der["hess"]
    drift = np.einsum("ni,ni->n", g, fields.mu_q)
    LLt = np.einsum("nij,nkj->nik", L, L)
    trace = 0.5 * np.einsum("nij,nji->n", LLt, H)
    R = -der["D_tau"] + drift + trace - r * der["D"]
    vol = np.einsum("nji,nj->ni", L, g)
    N = np.einsum("ni,ni->n", vol, vol) + eps
    return R, N, vol


def pde_residual(model: DynamicsModel, z, tau, currency=None, level_scaled=None) -> np.ndarray:
    """-∂τD + ∇zDᵀμ_Q + ½Tr(ΣΣᵀ∇²D) - rD at each (z, τ) row, price units per year."""
    z = np.atleast_2d(np.asarray(z, float))
    n = z.shape[0]
    tau = np.broadcast_to(np.asarray(tau, float), (n,))
    if np.any(tau <= model.config.eps_tau):
        raise ValueError("maturity must exceed the short-rate offset")
    der = model.decoder.bond_derivatives(z, tau, currency, level_scaled)
    r = model.decoder.short_rate(z, currency, level_scaled, eps_tau=model.config.eps_tau)
    fields = eval_fields(model, z, currency)
    return _pde_terms(der, r, fields, model.config.eps)[0]


def normalized_violation(R, N) -> np.ndarray:
    return R * R / N


@dataclass
class Collocation:
    """Collocation points grouped by latent state: ``state`` indexes z/currency/level."""

    z: np.ndarray  # (n_states, d)
    currency: np.ndarray
    level: np.ndarray
    state: np.ndarray  # (n_points,)
    tau: np.ndarray  # (n_points,)
    der: dict = field(default_factory=dict)
    r: np.ndarray | None = None

    @classmethod
    def build(cls, decoder, z, currency, level, tau_per_state, eps_tau: float = 1e-4) -> "Collocation":
        z = np.atleast_2d(np.asarray(z, float))
        n_s = z.shape[0]
        currency = np.broadcast_to(np.asarray(currency), (n_s,)).copy()
        level = np.broadcast_to(np.asarray(level, float), (n_s,)).copy()
        taus = np.asarray(tau_per_state, float)
        if taus.ndim == 1:
            taus = np.broadcast_to(taus, (n_s, len(taus)))
        m = taus.shape[1]
        state = np.repeat(np.arange(n_s), m)
        tau = taus.reshape(-1)
        der = decoder.bond_derivatives(z[state], tau, currency[state], level[state])
        r = decoder.short_rate(z[state], currency[state], level[state], eps_tau=eps_tau)
        return cls(z, currency, level, state, tau, der, r)

    def subset(self, states: np.ndarray) -> "Collocation":
        states = np.asarray(states)
        remap = -np.ones(len(self.z), dtype=int)
        remap[states] = np.arange(len(states))
        keep = np.flatnonzero(remap[self.state] >= 0)
        return Collocation(
            self.z[states], self.currency[states], self.level[states], remap[self.state[keep]], self.tau[keep],
            {k: v[keep] for k, v in self.der.items()}, self.r[keep],
        )


def arb_loss(model: DynamicsModel, colloc: Collocation) -> float:
    if len(colloc.tau) == 0:
        raise ValueError("collocation set is empty")
    f = eval_fields(model, colloc.z, colloc.currency if model.conditioned else None)
    rows = SdeFields(f.mu_p[colloc.state], f.sigma[colloc.state], f.lam[colloc.state])
    R, N, _ = _pde_terms(colloc.der, colloc.r, rows, model.config.eps)
    return float(np.mean(R * R / N))


def arb_loss_from_terms(R, N) -> float:
    return float(np.mean(np.asarray(R) ** 2 / np.asarray(N)))


# ---------------------------------------------------------------------------
# transition likelihood


@dataclass
class Transitions:
    z0: np.ndarray
    z1: np.ndarray
    dt: np.ndarray
    currency: np.ndarray

    def __len__(self) -> int:
        return len(self.dt)

    def take(self, idx) -> "Transitions":
        return Transitions(self.z0[idx], self.z1[idx], self.dt[idx], self.currency[idx])


def _transition_terms(fields: SdeFields, dz, dt):
    """Per-step Euler NLL and its gradients w.r.t. μ_P and Σ."""
    d = dz.shape[1]
    L = fields.sigma
    diag = np.diagonal(L, axis1=1, axis2=2)
    tiny = diag * diag * dt[:, None] < JITTER
    if np.any(tiny):
        log.warning("diffusion underflow: adding jitter to %d transition covariances", int(tiny.any(axis=1).sum()))
        L = L + np.sqrt(JITTER / dt)[:, None, None] * np.eye(d)[None] * tiny[:, :, None]
        diag = np.diagonal(L, axis1=1, axis2=2)
    sdt = np.sqrt(dt)
    eps = dz - fields.mu_p * dt[:, None]
    # L is lower triangular: forward substitution row by row
    u = np.zeros_like(eps)
    for i in range(d):
        u[:, i] = (eps[:, i] - np.einsum("nj,nj->n", L[:, i, :i], u[:, :i])) / L[:, i, i]
    u /= sdt[:, None]
    nll = 0.5 * d * np.log(2 * np.pi) + np.sum(np.log(diag), axis=1) + 0.5 * d * np.log(dt) + 0.5 * np.sum(u * u, axis=1)
    # w = L^{-T} u
    w = np.zeros_like(u)
    for i in reversed(range(d)):
        w[:, i] = (u[:, i] - np.einsum("nj,nj->n", L[:, i + 1 :, i], w[:, i + 1 :])) / L[:, i, i]
    d_eps = w / sdt[:, None]
    d_mu = -d_eps * dt[:, None]
    d_L = -np.einsum("ni,nj->nij", w, u)
    d_L[:, np.arange(d), np.arange(d)] += 1.0 / diag
    d_L = np.tril(d_L)
    return nll, d_mu, d_L


def transition_nll(model: DynamicsModel, z_path, dt, currency=None) -> float:
    """Summed Euler-Maruyama NLL of a latent path; ``dt`` is a scalar or per-step array."""
    z = np.atleast_2d(np.asarray(z_path, float))
    if z.shape[0] < 2:
        raise ValueError("path needs at least two states")
    dts = np.broadcast_to(np.asarray(dt, float), (z.shape[0] - 1,)).copy()
    if np.any(dts <= 0):
        raise ValueError("time steps must be > 0")
    fields = eval_fields(model, z[:-1], currency)
    return float(_transition_terms(fields, np.diff(z, axis=0), dts)[0].sum())


# ---------------------------------------------------------------------------
# composite objective


def composite_loss(model: DynamicsModel, batch: Transitions, colloc: Collocation | None, with_grads: bool = True):
    """mean transition NLL + β·arb + γ·mean‖λ‖²; grads w.r.t. ParamNet only."""
    cfg = model.config
    d = model.latent_dim
    n_t = len(batch)
    use_arb = colloc is not None and cfg.beta > 0 and len(colloc.tau) > 0
    z_all = batch.z0 if not use_arb else np.concatenate([batch.z0, colloc.z])
    cur_t = _cur_idx(model, batch.currency, n_t)
    cur_all = cur_t if not use_arb else np.concatenate([cur_t, _cur_idx(model, colloc.currency, len(colloc.z))])
    out, cache = model.paramnet.forward_cached(model._inputs(z_all, cur_all))
    if not np.all(np.isfinite(out)):
        raise TrainingFault("non-finite ParamNet output")
    f = model._fields_from_out(out)
    ft = SdeFields(f.mu_p[:n_t], f.sigma[:n_t], f.lam[:n_t])
    nll, d_mu_t, d_L_t = _transition_terms(ft, batch.z1 - batch.z0, batch.dt)
    l_data = float(nll.mean())
    lam2 = np.sum(ft.lam ** 2, axis=1)
    l_reg = float(lam2.mean())
    l_arb = 0.0
    d_mu = np.zeros((len(z_all), d))
    d_L = np.zeros((len(z_all), d, d))
    d_lam = np.zeros((len(z_all), d))
    d_mu[:n_t] = d_mu_t / n_t
    d_L[:n_t] = d_L_t / n_t
    d_lam[:n_t] = cfg.gamma * 2.0 * ft.lam / n_t
    if use_arb:
        s = colloc.state + n_t
        rows = SdeFields(f.mu_p[s], f.sigma[s], f.lam[s])
        R, N, vol = _pde_terms(colloc.der, colloc.r, rows, cfg.eps)
        m = len(R)
        l_arb = float(np.mean(R * R / N))
        if with_grads:
            g = colloc.der["grad"]
            H = colloc.der["hess"]
            L = rows.sigma
            dR = cfg.beta * 2.0 * R / N / m
            dN = -cfg.beta * R * R / (N * N) / m
            gr_mu = dR[:, None] * g
            gr_lam = -dR[:, None] * vol
            gr_L = dR[:, None, None] * (
                -np.einsum("ni,nj->nij", g, rows.lam) + np.einsum("nij,njk->nik", H, L)
            ) + 2.0 * dN[:, None, None] * np.einsum("ni,nj->nij", g, vol)
            np.add.at(d_mu, s, gr_mu)
            np.add.at(d_lam, s, gr_lam)
            np.add.at(d_L, s, np.tril(gr_L))
    loss = l_data + cfg.beta * l_arb + cfg.gamma * l_reg
    parts = {"l_data": l_data, "l_arb": l_arb, "lambda_norm": float(np.mean(np.sqrt(lam2)))}
    if not math.isfinite(loss):
        raise TrainingFault("non-finite composite loss")
    if not with_grads:
        return loss, None, parts
    d_out = np.concatenate([d_mu, model._raw_sigma_grad(out, d_L), d_lam], axis=1)
    grads, _ = model.paramnet.backward(cache, d_out)
    return loss, grads, parts


# ---------------------------------------------------------------------------
# data assembly and training


@dataclass
class LatentPath:
    dates: np.ndarray
    currencies: np.ndarray
    z: np.ndarray
    level: np.ndarray  # scaled level per row


def encode_path(manifold: ManifoldModel, panel: CurvePanel) -> LatentPath:
    x, _, lvl_s = manifold.inputs_from_panel(panel)
    mu = manifold.encode(x, panel.currencies).mu
    return LatentPath(np.asarray(panel.dates), np.asarray(panel.currencies), mu, lvl_s)


def path_transitions(path: LatentPath, dt: float) -> Transitions:
    """Consecutive same-currency pairs; Δt = business-day gap × dt."""
    same = path.currencies[1:] == path.currencies[:-1]
    i0 = np.flatnonzero(same)
    gaps = np.busday_count(path.dates[i0], path.dates[i0 + 1])
    gaps = np.maximum(gaps, 1)
    return Transitions(path.z[i0], path.z[i0 + 1], gaps * dt, path.currencies[i0])


def collocation_taus(rng: np.random.Generator, grid, n_fillers: int, n_states: int, eps_tau: float) -> np.ndarray:
    base = np.asarray(grid.array)
    hi = float(base.max())
    fill = rng.uniform(10 * eps_tau, hi, size=(n_states, n_fillers))
    return np.concatenate([np.broadcast_to(base, (n_states, len(base))), fill], axis=1)


def sample_collocation(model: DynamicsModel, path: LatentPath, grid, rng: np.random.Generator) -> Collocation:
    cfg = model.config
    n = len(path.z)
    k = min(cfg.n_states, n)
    idx = np.sort(rng.choice(n, size=k, replace=False))
    z = path.z[idx] + cfg.jitter * rng.standard_normal((k, model.latent_dim))
    taus = collocation_taus(rng, grid, cfg.n_fillers, k, cfg.eps_tau)
    return Collocation.build(model.decoder, z, path.currencies[idx], path.level[idx], taus, cfg.eps_tau)


@dataclass
class DynamicsLog:
    rows: list[dict] = field(default_factory=list)

    def to_csv(self, path, columns=("epoch", "l_data", "l_arb", "lambda_norm")) -> None:
        with open(path, "w") as fh:
            fh.write(",".join(columns) + "\n")
            for r in self.rows:
                fh.write(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in columns) + "\n")


def train_dynamics(cfg: DynamicsConfig, manifold, path: LatentPath, grid=None, epoch_callback=None):
    """Fit the ParamNet on an encoded latent path; returns (DynamicsModel, DynamicsLog)."""
    manifold.verify_frozen()
    if grid is None and cfg.beta > 0:
        grid = manifold.grid
    rng = np.random.default_rng(cfg.seed)
    model = DynamicsModel.initialise(cfg, manifold, rng)
    trans = path_transitions(path, cfg.dt)
    if len(trans) == 0:
        raise ValueError("latent path has no transitions")
    params = model.paramnet.params
    state = AdamState(lr=cfg.lr)
    log_ = DynamicsLog()
    n = len(trans)
    steps = max(1, math.ceil(n / cfg.batch_size))
    total = cfg.epochs * steps
    step = 0
    for epoch in range(cfg.epochs):
        colloc = sample_collocation(model, path, grid, rng) if cfg.beta > 0 else None
        perm = rng.permutation(n)
        cperm = rng.permutation(len(colloc.z)) if colloc is not None else None
        sums = {"l_data": 0.0, "l_arb": 0.0, "lambda_norm": 0.0}
        for b in range(steps):
            idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            sub = None
            if colloc is not None:
                chunk = np.array_split(cperm, steps)[b]
                sub = colloc.subset(np.sort(chunk)) if chunk.size else None
            loss, grads, parts = composite_loss(model, trans.take(idx), sub)
            state.lr = _lr_at(cfg.lr, cfg.lr_final, step / total)
            adam_step(params, grads, state)
            step += 1
            for k in sums:
                sums[k] += parts[k] / steps
        row = {"epoch": epoch, **sums}
        log_.rows.append(row)
        log.info("dynamics epoch %d l_data=%.4f l_arb=%.4g |lambda|=%.4f", epoch, row["l_data"], row["l_arb"], row["lambda_norm"])
        if epoch_callback is not None:
            epoch_callback(model, row)
    model.verify_decoder()
    return model, log_


# ---------------------------------------------------------------------------
# simulation


def path_seed(seed: int, path_id: int) -> int:
    h = hashlib.sha256(f"{seed}:path:{path_id}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def path_noise(seed: int, n_paths: int, horizon: int, d: int) -> np.ndarray:
    """Standard normal draws (n_paths, horizon, d); each path has its own Philox stream."""
    out = np.empty((n_paths, horizon, d))
    for p in range(n_paths):
        out[p] = np.random.Generator(np.random.Philox(key=path_seed(seed, p))).standard_normal((horizon, d))
    return out


def simulate_paths(
    model: DynamicsModel,
    z0,
    horizon_days: int,
    n_paths: int,
    measure: str = "P",
    seed: int = 0,
    currency=None,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """Daily Euler-Maruyama latent paths, shape (n_paths, horizon_days + 1, d)."""
    # horizon 0 is allowed: the stress harness treats it as a pure reconstruction
    if horizon_days < 0:
        raise ValueError("horizon must be >= 0")
    measure = measure.upper()
    if measure not in ("P", "Q"):
        raise ValueError("measure must be P or Q")
    d = model.latent_dim
    z = np.broadcast_to(np.asarray(z0, float).reshape(-1, d), (n_paths, d)).copy()
    paths = np.empty((n_paths, horizon_days + 1, d))
    paths[:, 0] = z
    if horizon_days == 0:
        return paths
    if noise is None:
        noise = path_noise(seed, n_paths, horizon_days, d)
    dt = model.config.dt
    sdt = math.sqrt(dt)
    for t in range(horizon_days):
        f = eval_fields(model, z, currency)
        drift = f.mu_p if measure == "P" else f.mu_q
        z = z + drift * dt + np.einsum("nij,nj->ni", f.sigma, noise[:, t]) * sdt
        paths[:, t + 1] = z
    return paths


def decode_paths(manifold: ManifoldModel, paths: np.ndarray, currency, level_scaled) -> np.ndarray:
    """Decoded swaps (n_paths, steps, tenors); level held at its last observed value."""
    n, s, d = paths.shape
    flat = paths.reshape(-1, d)
    out = manifold.reprice_swaps(flat, currency, level_scaled)
    return out.reshape(n, s, -1)


def write_paths_csv(path, paths: np.ndarray, swaps: np.ndarray | None = None, labels=()) -> None:
    n, s, d = paths.shape
    cols = ["path_id", "day", *(f"z{i + 1}" for i in range(d))]
    if swaps is not None:
        cols += list(labels)
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for p in range(n):
            for t in range(s):
                vals = [str(p), str(t), *(repr(float(v)) for v in paths[p, t])]
                if swaps is not None:
                    vals += [repr(float(v)) for v in swaps[p, t]]
                fh.write(",".join(vals) + "\n")


def risk_premium_series(model: DynamicsModel, path: LatentPath):
    """λ(z_t) along the encoded history: (dates, currencies, lambdas)."""
    f = eval_fields(model, path.z, path.currencies if model.conditioned else None)
    return path.dates, path.currencies, f.lam


def write_risk_premium_csv(fh_path, dates, currencies, lam) -> None:
    d = lam.shape[1]
    with open(fh_path, "w") as fh:
        fh.write(",".join(["date", "currency", *(f"lambda{i + 1}" for i in range(d))]) + "\n")
        for t, c, row in zip(dates, currencies, lam):
            fh.write(",".join([str(t), str(c), *(repr(float(v)) for v in row)]) + "\n")


# ---------------------------------------------------------------------------
# persistence


def dynamics_to_dict(model: DynamicsModel) -> dict:
    return {
        "kind": "dynamics",
        "config": model.config.to_dict(),
        "paramnet": mlp_to_dict(model.paramnet),
        "decoder_checksum": model.decoder_checksum,
        "latent_dim": model.latent_dim,
        "config_hash": model.config_hash,
    }


def dynamics_from_dict(d: dict, decoder) -> DynamicsModel:
    m = DynamicsModel(
        DynamicsConfig.from_dict(d["config"]), mlp_from_dict(d["paramnet"]), decoder,
        d["decoder_checksum"], int(d["latent_dim"]), d.get("config_hash"),
    )
    m.verify_decoder()
    return m


def save_dynamics(model: DynamicsModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(dynamics_to_dict(model), fh, sort_keys=True)


def load_dynamics(path, decoder) -> DynamicsModel:
    with open(path) as fh:
        return dynamics_from_dict(json.load(fh), decoder)
