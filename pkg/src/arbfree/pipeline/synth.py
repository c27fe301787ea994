"""
Synthetic multi-currency swap panels with known ground truth.

Each currency carries NSS base parameters; the first three betas follow AR(1)
deviations under the physical measure (optionally Student-t innovations),
shifted by scripted regimes. Curves are priced through ``curve_math`` and
observation noise and missingness are applied on top.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from typing import Any

import numpy as np

from ..curve_math import DEFAULT_GRID, NssParams, TenorGrid, nss_yield, swaps_from_node_discounts
from .panel import CurvePanel


class GeneratorConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Regime:
    """``ramp``: linear shift of the factor means between two timeline fractions,
    held afterwards. ``pinned``: marks a floor-bound regime (breach checks use ``floor``)."""

    kind: str
    start: float = 0.0
    end: float = 1.0
    delta: tuple[float, float, float] = (0.0, 0.0, 0.0)
    floor: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("ramp", "pinned"):
            raise GeneratorConfigError(f"unknown regime kind {self.kind!r}")
        if not 0.0 <= self.start <= self.end <= 1.0:
            raise GeneratorConfigError("regime fractions must satisfy 0 <= start <= end <= 1")
        object.__setattr__(self, "delta", tuple(float(v) for v in self.delta))
        if len(self.delta) != 3:
            raise GeneratorConfigError("regime delta needs three entries (beta0..beta2)")


@dataclass(frozen=True)
class Missingness:
    early_days: int = 0
    early_prob: float = 0.0
    late_prob: float = 0.0

    def __post_init__(self) -> None:
        if self.early_days < 0 or not (0 <= self.early_prob <= 1 and 0 <= self.late_prob <= 1):
            raise GeneratorConfigError("invalid missingness settings")


@dataclass(frozen=True)
class CurrencySpec:
    name: str
    base: tuple[float, float, float, float, float, float]
    phi: tuple[float, float, float] = (0.999, 0.998, 0.995)
    vol: tuple[float, float, float] = (0.0, 0.0, 0.0)
    shock_dof: float | None = None
    noise: float = 0.0
    noise_dof: float | None = None
    regimes: tuple[Regime, ...] = ()
    missing: Missingness = Missingness()

    def __post_init__(self) -> None:
        try:
            NssParams(*self.base)
        except Exception as exc:
            raise GeneratorConfigError(f"{self.name}: {exc}") from None
        if len(self.phi) != 3 or len(self.vol) != 3:
            raise GeneratorConfigError(f"{self.name}: phi and vol need three entries")
        if any(v < 0 for v in self.vol) or self.noise < 0:
            raise GeneratorConfigError(f"{self.name}: vols must be >= 0")
        for dof in (self.shock_dof, self.noise_dof):
            if dof is not None and dof <= 2:
                raise GeneratorConfigError(f"{self.name}: Student-t dof must exceed 2")

    @property
    def pinned_floor(self) -> float | None:
        for r in self.regimes:
            if r.kind == "pinned":
                return r.floor
        return None


@dataclass(frozen=True)
class GeneratorSpec:
    currencies: tuple[CurrencySpec, ...]
    n_days: int = 2016
    start: str = "2016-01-04"
    allow_unit_root: bool = False

    def __post_init__(self) -> None:
        if self.n_days < 2:
            raise GeneratorConfigError("n_days must be >= 2")
        names = [c.name for c in self.currencies]
        if len(set(names)) != len(names) or not names:
            raise GeneratorConfigError("currency names must be unique and non-empty")
        if not self.allow_unit_root:
            for c in self.currencies:
                if any(abs(p) >= 1.0 for p in c.phi):
                    raise GeneratorConfigError(f"{c.name}: |phi| >= 1 requires allow_unit_root")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "GeneratorSpec":
        d = dict(d)
        allowed = {"currencies", "n_days", "start", "allow_unit_root"}
        unknown = set(d) - allowed
        if unknown:
            raise GeneratorConfigError(f"unknown generator keys: {sorted(unknown)}")
        curs = []
        for c in d.get("currencies", []):
            c = dict(c)
            allowed_c = {"name", "base", "phi", "vol", "shock_dof", "noise", "noise_dof", "regimes", "missing"}
            bad = set(c) - allowed_c
            if bad:
                raise GeneratorConfigError(f"unknown currency keys: {sorted(bad)}")
            regimes = tuple(Regime(**r) for r in c.pop("regimes", []))
            missing = Missingness(**c.pop("missing", {}))
            for k in ("base", "phi", "vol"):
                if k in c:
                    c[k] = tuple(float(v) for v in c[k])
            curs.append(CurrencySpec(regimes=regimes, missing=missing, **c))
        d["currencies"] = tuple(curs)
        return cls(**d)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def floors(self) -> dict[str, float]:
        return {c.name: c.pinned_floor for c in self.currencies if c.pinned_floor is not None}


@dataclass(frozen=True, eq=False)
class SynthResult:
    panel: CurvePanel
    clean: CurvePanel
    factors: np.ndarray  # (rows, 6) NSS parameters aligned with panel rows
    node_discounts: np.ndarray

    def save_truth_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["date", "currency", "beta0", "beta1", "beta2", "beta3", "lambda1", "lambda2"])
            for i in np.lexsort((self.panel.currencies, self.panel.dates)):
                w.writerow([str(self.panel.dates[i]), self.panel.currencies[i], *(repr(float(v)) for v in self.factors[i])])


def _unit_shocks(rng: np.random.Generator, dof: float | None, size) -> np.ndarray:
    if dof is None:
        return rng.standard_normal(size)
    return rng.standard_t(dof, size) * np.sqrt((dof - 2.0) / dof)


def _regime_offsets(spec: CurrencySpec, n: int) -> np.ndarray:
    frac = np.arange(n) / max(n - 1, 1)
    out = np.zeros((n, 3))
    for r in spec.regimes:
        if r.kind != "ramp":
            continue
        span = max(r.end - r.start, 1e-12)
        w = np.clip((frac - r.start) / span, 0.0, 1.0)
        out += w[:, None] * np.asarray(r.delta)[None, :]
    return out


def synth_panel(spec: GeneratorSpec, seed: int, grid: TenorGrid = DEFAULT_GRID) -> SynthResult:
    dates = np.busday_offset(np.datetime64(spec.start, "D"), np.arange(spec.n_days), roll="forward")
    tau = grid.array
    all_dates, all_cur, all_obs, all_mask, all_clean, all_fac, all_p = [], [], [], [], [], [], []
    root = np.random.SeedSequence(seed)
    for cspec, child in zip(spec.currencies, root.spawn(len(spec.currencies))):
        rng = np.random.default_rng(child)
        n = spec.n_days
        shocks = _unit_shocks(rng, cspec.shock_dof, (n, 3)) * np.asarray(cspec.vol)
        dev = np.zeros((n, 3))
        phi = np.asarray(cspec.phi)
        for t in range(1, n):
            dev[t] = phi * dev[t - 1] + shocks[t]
        betas = np.asarray(cspec.base[:3]) + dev + _regime_offsets(cspec, n)
        b3, l1, l2 = cspec.base[3:]
        fac = np.column_stack([betas, np.full(n, b3), np.full(n, l1), np.full(n, l2)])
        yields = np.stack([nss_yield(NssParams(*row), tau) for row in fac])
        p_nodes = np.exp(-yields * tau)
        clean = swaps_from_node_discounts(p_nodes, grid)
        noise = _unit_shocks(rng, cspec.noise_dof, clean.shape) * cspec.noise
        obs = clean + noise
        mask = np.ones(obs.shape, dtype=bool)
        m = cspec.missing
        if m.early_days:
            k = min(m.early_days, n)
            mask[:k] = rng.uniform(size=(k, obs.shape[1])) >= m.early_prob
        if m.late_prob:
            rows = np.flatnonzero(rng.uniform(size=n) < m.late_prob)
            rows = rows[rows >= m.early_days]
            cols = rng.integers(0, obs.shape[1], size=rows.size)
            mask[rows, cols] = False
        all_dates.append(dates)
        all_cur.append(np.full(n, cspec.name))
        all_obs.append(obs)
        all_mask.append(mask)
        all_clean.append(clean)
        all_fac.append(fac)
        all_p.append(p_nodes)
    dates_c = np.concatenate(all_dates)
    cur_c = np.concatenate(all_cur)
    # CurvePanel sorts rows by (currency, date); apply the same order to the truth arrays
    order = np.lexsort((dates_c, cur_c))
    panel = CurvePanel(dates_c, cur_c, np.concatenate(all_obs), np.concatenate(all_mask), grid)
    clean = CurvePanel(dates_c, cur_c, np.concatenate(all_clean), np.ones_like(np.concatenate(all_mask)), grid)
    return SynthResult(panel, clean, np.concatenate(all_fac)[order], np.concatenate(all_p)[order])


def heavy_tailed_spec(n_days: int = 2016) -> GeneratorSpec:
    """Five-currency heavy-tailed panel with late level regimes and one pinned (floor-bound) market."""
    t3 = 3.0
    bp = 1e-4
    return GeneratorSpec(
        currencies=(
            CurrencySpec(
                "AUD", (0.040, -0.012, 0.010, 0.008, 0.6, 5.0), vol=(3 * bp, 3.5 * bp, 5 * bp),
                shock_dof=t3, noise=3.0 * bp, noise_dof=t3,
                regimes=(Regime("ramp", 0.55, 0.78, (0.010, 0.012, 0.0)),),
                missing=Missingness(early_days=150, early_prob=0.6, late_prob=0.002),
            ),
            CurrencySpec(
                "CHF", (0.012, -0.010, 0.008, -0.008, 3.0, 12.0), vol=(2 * bp, 2.5 * bp, 4 * bp),
                shock_dof=t3, noise=3.0 * bp, noise_dof=t3,
                regimes=(Regime("ramp", 0.50, 0.75, (0.006, 0.008, 0.0)),),
            ),
            CurrencySpec(
                "GBP", (0.035, -0.020, 0.015, 0.012, 1.5, 8.0), vol=(3.5 * bp, 4 * bp, 6 * bp),
                shock_dof=t3, noise=3.0 * bp, noise_dof=t3,
                regimes=(Regime("ramp", 0.53, 0.77, (0.012, 0.016, 0.0)),),
                missing=Missingness(early_days=250, early_prob=0.5),
            ),
            CurrencySpec(
                "JPY", (0.0068, -0.0050, 0.002, 0.002, 2.0, 10.0), vol=(0.15 * bp, 0.15 * bp, 0.25 * bp),
                shock_dof=t3, noise=0.5 * bp, noise_dof=t3,
                regimes=(Regime("pinned", floor=0.0),),
            ),
            CurrencySpec(
                "USD", (0.032, -0.015, 0.012, -0.008, 0.9, 8.0), vol=(3.5 * bp, 4.5 * bp, 6 * bp),
                shock_dof=t3, noise=3.0 * bp, noise_dof=t3,
                regimes=(Regime("ramp", 0.55, 0.78, (0.015, 0.020, 0.0)),),
                missing=Missingness(late_prob=0.003),
            ),
        ),
        n_days=n_days,
    )
