"""
Metrics and report artefacts: RMSE by day/tenor/currency, ablation tables,
PDE-violation profiles, forward stress tests and latent exports.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import benchmarks as bm
from .dynamics import DynamicsModel, LatentPath, Collocation, _pde_terms, eval_fields, SdeFields, simulate_paths
from .curve_math import bootstrap_discounts
from .pipeline.panel import CurvePanel

BPS = 1e4


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledSeries:
    labels: tuple[str, ...]
    values: np.ndarray

    def __getitem__(self, label: str) -> float:
        return float(self.values[self.labels.index(label)])

    def as_dict(self) -> dict[str, float]:
        return {k: float(v) for k, v in zip(self.labels, self.values)}


@dataclass
class EvaluationReport:
    rmse_daily: LabeledSeries | None = None
    rmse_by_tenor: LabeledSeries | None = None
    rmse_by_currency: LabeledSeries | None = None
    pde_violation_by_tenor: LabeledSeries | None = None
    ablation: "AblationTable | None" = None
    forecast_errors: dict[str, LabeledSeries] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# splits and RMSE


def oos_split(panel: CurvePanel, oos_fraction: float = 0.2) -> tuple[CurvePanel, CurvePanel]:
    """Chronological split: the final ``oos_fraction`` of each currency's rows go out of sample."""
    if not 0.0 < oos_fraction < 1.0:
        raise ValueError("oos_fraction must lie in (0, 1)")
    tr, te = [], []
    for c in panel.currency_ids:
        rows = panel.rows_for(c)
        k = int(round((1.0 - oos_fraction) * len(rows)))
        tr.append(rows[:k])
        te.append(rows[k:])
    return panel.select(np.concatenate(tr)), panel.select(np.concatenate(te))


def _aligned_errors(panel_true: CurvePanel, panel_pred: CurvePanel) -> np.ndarray:
    if len(panel_true) != len(panel_pred) or panel_true.grid.labels != panel_pred.grid.labels:
        raise AlignmentError("panels differ in shape")
    if not (np.array_equal(panel_true.dates, panel_pred.dates) and np.array_equal(panel_true.currencies, panel_pred.currencies)):
        raise AlignmentError("panels are not row-aligned")
    if not (panel_true.is_dense and panel_pred.is_dense):
        raise AlignmentError("RMSE needs dense panels")
    return (np.asarray(panel_pred.rates) - np.asarray(panel_true.rates)) * BPS


def rmse(panel_true: CurvePanel, panel_pred: CurvePanel, axis: str) -> LabeledSeries:
    """Root mean square error in bps, grouped by ``daily``, ``tenor`` or ``currency``."""
    err = _aligned_errors(panel_true, panel_pred)
    sq = err * err
    if axis == "tenor":
        return LabeledSeries(panel_true.grid.labels, np.sqrt(sq.mean(axis=0)))
    if axis == "currency":
        labels = panel_true.currency_ids
        return LabeledSeries(labels, np.array([np.sqrt(sq[panel_true.rows_for(c)].mean()) for c in labels]))
    if axis == "daily":
        dates, inv = np.unique(panel_true.dates, return_inverse=True)
        sums = np.zeros(len(dates))
        counts = np.zeros(len(dates))
        np.add.at(sums, inv, sq.sum(axis=1))
        np.add.at(counts, inv, sq.shape[1])
        return LabeledSeries(tuple(str(d) for d in dates), np.sqrt(sums / counts))
    raise ValueError(f"unknown axis {axis!r}")


# ---------------------------------------------------------------------------
# ablation table

TENOR_MEAN = "Mean (All Tenors)"
CURRENCY_MEAN = "Mean (All Currencies)"


@dataclass(frozen=True)
class AblationTable:
    models: tuple[str, ...]
    rows: tuple[str, ...]
    values: np.ndarray  # (rows, models) in bps

    def column(self, model: str) -> LabeledSeries:
        return LabeledSeries(self.rows, self.values[:, self.models.index(model)])

    def mean_tenor(self, model: str) -> float:
        return self.column(model)[TENOR_MEAN]

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(",".join(["row", *self.models]) + "\n")
            for r, vals in zip(self.rows, self.values):
                fh.write(",".join([r, *(f"{v:.6f}" for v in vals)]) + "\n")

    def render(self) -> str:
        w0 = max(len(r) for r in self.rows)
        widths = [max(len(m), 10) for m in self.models]
        lines = [" ".join([" " * w0, *(m.rjust(w) for m, w in zip(self.models, widths))])]
        for r, vals in zip(self.rows, self.values):
            lines.append(" ".join([r.ljust(w0), *(f"{v:.2f}".rjust(w) for v, w in zip(vals, widths))]))
        return "\n".join(lines) + "\n"


def ablation_table(models, oos_panel: CurvePanel) -> AblationTable:
    """``models`` is a sequence of (name, predicted OOS panel) pairs."""
    models = list(models)
    if not models:
        raise ValueError("no models given")
    names = tuple(n for n, _ in models)
    cols = []
    for _, pred in models:
        by_t = rmse(oos_panel, pred, "tenor")
        by_c = rmse(oos_panel, pred, "currency")
        cols.append(np.concatenate([by_t.values, [by_t.values.mean()], by_c.values, [by_c.values.mean()]]))
    rows = (*oos_panel.grid.labels, TENOR_MEAN, *oos_panel.currency_ids, CURRENCY_MEAN)
    return AblationTable(names, rows, np.column_stack(cols))


# ---------------------------------------------------------------------------
# PDE violation profile


def pde_violation_profile(dynamics: DynamicsModel, latents: LatentPath, grid) -> LabeledSeries:
    """Per tenor: sqrt of the mean normalised squared residual over the given latent states."""
    tau = np.asarray(grid.array, float)
    col = Collocation.build(dynamics.decoder, latents.z, latents.currencies, latents.level, tau, dynamics.config.eps_tau)
    f = eval_fields(dynamics, latents.z, latents.currencies if dynamics.conditioned else None)
    rows = SdeFields(f.mu_p[col.state], f.sigma[col.state], f.lam[col.state])
    R, N, _ = _pde_terms(col.der, col.r, rows, dynamics.config.eps)
    v = (R * R / N).reshape(len(latents.z), len(tau))
    return LabeledSeries(tuple(grid.labels), np.sqrt(v.mean(axis=0)))


# ---------------------------------------------------------------------------
# stress-test adapters


class ProposedAdapter:
    """Latent SDE simulation decoded through the frozen manifold (level held)."""

    def __init__(self, manifold, dynamics: DynamicsModel, measure: str = "P", name: str = "proposed"):
        self.manifold, self.dynamics, self.measure, self.name = manifold, dynamics, measure, name

    def simulate(self, start: CurvePanel, horizon: int, n_paths: int, seed: int) -> np.ndarray:
        x, _, lvl_s = self.manifold.inputs_from_panel(start)
        cur = start.currencies[0]
        z0 = self.manifold.encode(x, start.currencies).mu[0]
        paths = simulate_paths(self.dynamics, z0, horizon, n_paths, self.measure, seed, currency=cur)
        flat = paths.reshape(-1, paths.shape[2])
        sw = self.manifold.reprice_swaps(flat, cur, lvl_s[0])
        return sw.reshape(n_paths, horizon + 1, -1)


class Hjm3Adapter:
    name = "hjm3"

    def __init__(self, loadings: np.ndarray, x: np.ndarray, dt: float = 1.0 / 252.0):
        self.loadings, self.x, self.dt = loadings, x, dt

    @classmethod
    def from_panel(cls, train: CurvePanel, x: np.ndarray | None = None, stride: int = 1) -> "Hjm3Adapter":
        """Loadings from pooled increments of bootstrapped zero yields at the quoted tenors.

        Forwards differenced out of noisy swap quotes put most of their variance
        at the long end, so the factors are estimated on zero yields and then
        read as forward-rate vol functions, linearly interpolated onto ``x``.
        """
        x = bm.forward_grid() if x is None else x
        tau = np.asarray(train.grid.array)
        paths = []
        for c in train.currency_ids:
            rows = train.rows_for(c)[::stride]
            paths.append(np.stack([-np.log(bootstrap_discounts(train.rates[i], train.grid).discounts) / tau for i in rows]))
        nodes = bm.hjm3_loadings(paths, tau, dt=stride / 252.0)
        return cls(np.stack([np.interp(x, tau, row) for row in nodes]), x)

    def simulate(self, start: CurvePanel, horizon: int, n_paths: int, seed: int) -> np.ndarray:
        f0 = bm.forward_from_swaps(start.rates[0], start.grid, self.x)
        fp = bm.hjm3_simulate(f0, self.x, self.loadings, horizon, n_paths, seed, self.dt)
        return bm.swaps_from_forward(fp, self.x, start.grid)


class PcaVarAdapter:
    name = "pca_var"

    def __init__(self, model: bm.PcaVarModel):
        self.model = model

    def simulate(self, start: CurvePanel, horizon: int, n_paths: int, seed: int) -> np.ndarray:
        s = np.repeat(self.model.scores(np.asarray(start.rates[:1])), n_paths, axis=0)
        out = [self.model.curves(s)]
        var = self.model.var
        if var is not None:
            rng = np.random.default_rng(seed)
            w, v = np.linalg.eigh(var.cov)
            root = v * np.sqrt(np.clip(w, 0.0, None))
        for _ in range(horizon):
            if var is not None:
                s = var.alpha + s @ var.phi.T + rng.standard_normal(s.shape) @ root.T
            out.append(self.model.curves(s))
        return np.stack(out, axis=1)


@dataclass
class StressResult:
    model: str
    rows: list[dict]
    mean_paths: list[tuple[str, str, np.ndarray]]  # (currency, start date, (horizon+1, tenors))

    def breach_rate(self, currency: str | None = None) -> float:
        sel = [r for r in self.rows if currency is None or r["currency"] == currency]
        days = sum(r["path_days"] for r in sel)
        return sum(r["breach_path_days"] for r in sel) / days if days else 0.0

    def to_csv(self, path, labels) -> None:
        with open(path, "w") as fh:
            fh.write(",".join(["currency", "start_date", "day", *labels]) + "\n")
            for cur, d0, mp in self.mean_paths:
                for t, row in enumerate(mp):
                    fh.write(",".join([cur, d0, str(t), *(f"{v:.10f}" for v in row)]) + "\n")

    def summary_csv(self, path) -> None:
        cols = ["currency", "start_date", "terminal_rmse_bps", "breach_path_days", "path_days"]
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for r in self.rows:
                fh.write(",".join([r["currency"], r["start_date"], f"{r['terminal_rmse_bps']:.6f}",
                                   str(r["breach_path_days"]), str(r["path_days"])]) + "\n")


def forward_stress_test(adapter, panel: CurvePanel, start_dates, horizon: int = 30, n_paths: int = 200,
                        seed: int = 0, floors: dict[str, float] | None = None, currencies=None) -> StressResult:
    """Simulate ``horizon`` business days from each (currency, start date) and score against realised curves.

    Breaches count path-days (day >= 1) where any tenor sits below the currency floor.
    """
    floors = floors or {}
    rows, means = [], []
    curs = currencies if currencies is not None else panel.currency_ids
    for ci, cur in enumerate(curs):
        idx = panel.rows_for(cur)
        for si, d0 in enumerate(start_dates):
            pos = np.searchsorted(panel.dates[idx], np.datetime64(d0, "D"))
            if pos >= len(idx) or panel.dates[idx[pos]] != np.datetime64(d0, "D"):
                continue
            start = panel.select(idx[pos : pos + 1])
            sw = adapter.simulate(start, horizon, n_paths, seed + 7919 * ci + si)
            mp = sw.mean(axis=0)
            end = min(pos + horizon, len(idx) - 1)
            realised = panel.rates[idx[end]]
            term = float(np.sqrt(np.mean((mp[min(horizon, end - pos)] - realised) ** 2)) * BPS)
            breaches = 0
            if cur in floors and horizon > 0:
                breaches = int(np.sum(np.any(sw[:, 1:] < floors[cur], axis=2)))
            rows.append({"currency": cur, "start_date": str(d0), "terminal_rmse_bps": term,
                         "breach_path_days": breaches, "path_days": n_paths * horizon})
            means.append((cur, str(d0), mp))
    return StressResult(getattr(adapter, "name", "model"), rows, means)


# ---------------------------------------------------------------------------
# exports and bundle


def export_latents(manifold, panel: CurvePanel, path=None):
    """Rows ``date,currency,z1..zd,level`` (posterior means, raw 1Y level)."""
    x, lvl, _ = manifold.inputs_from_panel(panel)
    mu = manifold.encode(x, panel.currencies).mu
    lines = [",".join(["date", "currency", *(f"z{i + 1}" for i in range(mu.shape[1])), "level"])]
    for d, c, z, l in zip(panel.dates, panel.currencies, mu, lvl):
        lines.append(",".join([str(d), str(c), *(repr(float(v)) for v in z), repr(float(l))]))
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return mu, text


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, files, seeds: dict, config_hashes: dict) -> dict:
    out_dir = Path(out_dir)
    manifest = {
        "files": {str(Path(f).relative_to(out_dir)): file_digest(f) for f in sorted(map(Path, files))},
        "seeds": seeds,
        "config_hashes": config_hashes,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
