"""Multi-currency curve panel in long (row = date x currency) layout, with CSV I/O."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..curve_math import DEFAULT_GRID, TenorGrid


class PanelError(ValueError):
    pass


class ParseError(PanelError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CurvePanel:
    """Rows sorted by (currency, date); ``rates`` is NaN wherever ``mask`` is False."""

    dates: np.ndarray
    currencies: np.ndarray
    rates: np.ndarray
    mask: np.ndarray
    grid: TenorGrid = DEFAULT_GRID

    def __post_init__(self) -> None:
        dates = np.asarray(self.dates, dtype="datetime64[D]")
        cur = np.asarray(self.currencies, dtype=str)
        rates = np.asarray(self.rates, dtype=float).reshape(len(dates), len(self.grid))
        mask = np.asarray(self.mask, dtype=bool).reshape(rates.shape)
        if cur.shape != dates.shape:
            raise PanelError("one currency per row required")
        order = np.lexsort((dates, cur))
        dates, cur, rates, mask = dates[order], cur[order], rates[order], mask[order]
        rates = np.where(mask, rates, np.nan)
        if np.any(mask & ~np.isfinite(rates)):
            raise PanelError("observed slots must hold finite rates")
        same = cur[1:] == cur[:-1]
        if np.any(same & (dates[1:] <= dates[:-1])):
            raise PanelError("dates must be strictly increasing within each currency")
        object.__setattr__(self, "dates", _frozen(dates))
        object.__setattr__(self, "currencies", _frozen(cur))
        object.__setattr__(self, "rates", _frozen(rates))
        object.__setattr__(self, "mask", _frozen(mask))

    def __len__(self) -> int:
        return len(self.dates)

    @property
    def currency_ids(self) -> tuple[str, ...]:
        return tuple(sorted(set(self.currencies.tolist())))

    def rows_for(self, currency: str) -> np.ndarray:
        idx = np.flatnonzero(self.currencies == currency)
        if idx.size == 0:
            raise KeyError(f"unknown currency {currency!r}")
        return idx

    def row_index(self, currency: str, date) -> int:
        idx = self.rows_for(currency)
        hit = idx[self.dates[idx] == np.datetime64(date, "D")]
        if hit.size == 0:
            raise KeyError(f"no row for ({currency}, {date})")
        return int(hit[0])

    def select(self, rows) -> "CurvePanel":
        rows = np.asarray(rows)
        return CurvePanel(self.dates[rows], self.currencies[rows], self.rates[rows], self.mask[rows], self.grid)

    def with_rates(self, rates: np.ndarray) -> "CurvePanel":
        """Same rows, new (fully observed) rates."""
        rates = np.asarray(rates, dtype=float)
        return CurvePanel(self.dates, self.currencies, rates, np.isfinite(rates), self.grid)

    @property
    def is_dense(self) -> bool:
        return bool(self.mask.all())

    def to_cube(self):
        """(dates, currencies, rates[date, currency, tenor], mask[date, currency, tenor])."""
        all_dates = np.unique(self.dates)
        curs = self.currency_ids
        cube = np.full((len(all_dates), len(curs), len(self.grid)), np.nan)
        cmask = np.zeros(cube.shape, dtype=bool)
        di = np.searchsorted(all_dates, self.dates)
        ci = np.searchsorted(np.array(curs), self.currencies)
        cube[di, ci] = self.rates
        cmask[di, ci] = self.mask
        return all_dates, curs, cube, cmask


def concat_panels(panels) -> CurvePanel:
    panels = list(panels)
    return CurvePanel(
        np.concatenate([p.dates for p in panels]),
        np.concatenate([p.currencies for p in panels]),
        np.concatenate([p.rates for p in panels]),
        np.concatenate([p.mask for p in panels]),
        panels[0].grid,
    )


def save_csv(panel: CurvePanel, path) -> None:
    """Write ``date,currency,<tenor labels>``; missing slots are empty cells."""
    order = np.lexsort((panel.currencies, panel.dates))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "currency", *panel.grid.labels])
        for i in order:
            cells = [repr(float(v)) if m else "" for v, m in zip(panel.rates[i], panel.mask[i])]
            w.writerow([str(panel.dates[i]), panel.currencies[i], *cells])


def load_csv(path, grid: TenorGrid = DEFAULT_GRID) -> CurvePanel:
    path = Path(path)
    expected = ["date", "currency", *grid.labels]
    dates, curs, rows, masks = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != expected:
            raise ParseError(f"{path}:1: header must be {','.join(expected)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise ParseError(f"{path}:{lineno}: expected {len(expected)} fields, got {len(row)}")
            try:
                d = np.datetime64(row[0].strip(), "D")
            except ValueError:
                raise ParseError(f"{path}:{lineno}: column 'date': bad ISO date {row[0]!r}") from None
            vals, m = [], []
            for label, cell in zip(grid.labels, row[2:]):
                cell = cell.strip()
                if cell == "":
                    vals.append(np.nan)
                    m.append(False)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"{path}:{lineno}: column {label!r}: non-numeric value {cell!r}") from None
                if not np.isfinite(v):
                    raise ParseError(f"{path}:{lineno}: column {label!r}: non-finite value {cell!r}")
                vals.append(v)
                m.append(True)
            dates.append(d)
            curs.append(row[1].strip())
            rows.append(vals)
            masks.append(m)
    if not dates:
        return CurvePanel(np.array([], dtype="datetime64[D]"), np.array([], dtype=str),
                          np.zeros((0, len(grid))), np.zeros((0, len(grid)), bool), grid)
    try:
        return CurvePanel(np.array(dates), np.array(curs), np.array(rows), np.array(masks), grid)
    except PanelError as exc:
        raise ParseError(f"{path}: {exc}") from None
