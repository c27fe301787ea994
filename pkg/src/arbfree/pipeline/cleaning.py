"""Stable-coverage truncation and row-wise densification of a curve panel."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .panel import CurvePanel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TruncationConfig:
    window: int = 60
    rho0: float = 0.9
    pi0: float = 0.95

    def __post_init__(self) -> None:
        if int(self.window) != self.window or self.window < 1:
            raise ValueError("window must be a positive integer")
        for name in ("rho0", "pi0"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1]")


def completeness_ratio(panel: CurvePanel, currency: str, date) -> float:
    i = panel.row_index(currency, date)
    return float(panel.mask[i].mean())


def _ratios(panel: CurvePanel, currency: str) -> tuple[np.ndarray, np.ndarray]:
    idx = panel.rows_for(currency)
    return idx, panel.mask[idx].mean(axis=1)


def stable_start_index(ratios: np.ndarray, cfg: TruncationConfig) -> int | None:
    """Position of the earliest full forward window meeting the pass fraction."""
    n = len(ratios)
    w = int(cfg.window)
    if n < w:
        return None
    ok = (ratios >= cfg.rho0 - 1e-12).astype(np.int64)
    csum = np.concatenate([[0], np.cumsum(ok)])
    passes = csum[w:] - csum[:-w]
    hits = np.flatnonzero(passes >= cfg.pi0 * w - 1e-9)
    return int(hits[0]) if hits.size else None


def stable_start_date(panel: CurvePanel, currency: str, cfg: TruncationConfig):
    idx, rho = _ratios(panel, currency)
    k = stable_start_index(rho, cfg)
    return None if k is None else panel.dates[idx[k]]


@dataclass
class TruncationReport:
    rows_in: dict[str, int] = field(default_factory=dict)
    rows_out: dict[str, int] = field(default_factory=dict)
    start_dates: dict[str, str | None] = field(default_factory=dict)
    warnings: list[dict] = field(default_factory=list)

    def warning_lines(self) -> str:
        return "".join(json.dumps(w, sort_keys=True) + "\n" for w in self.warnings)


def truncate_and_densify(panel: CurvePanel, cfg: TruncationConfig = TruncationConfig()):
    """Drop pre-start history per currency, then keep only fully observed rows.

    Returns the dense panel and a ``TruncationReport``.
    """
    report = TruncationReport()
    keep: list[np.ndarray] = []
    for cur in panel.currency_ids:
        idx, rho = _ratios(panel, cur)
        report.rows_in[cur] = int(idx.size)
        k = stable_start_index(rho, cfg)
        if k is None:
            report.start_dates[cur] = None
            report.rows_out[cur] = 0
            warn = {"event": "currency_excluded", "currency": cur, "reason": "no stable start date"}
            report.warnings.append(warn)
            log.warning(json.dumps(warn, sort_keys=True))
            continue
        report.start_dates[cur] = str(panel.dates[idx[k]])
        tail = idx[k:]
        full = tail[rho[k:] >= 1.0]
        report.rows_out[cur] = int(full.size)
        keep.append(full)
    rows = np.concatenate(keep) if keep else np.zeros(0, dtype=int)
    return panel.select(np.sort(rows)), report
