"""
Level/shape decomposition, robust scaling and the PCA shape diagnostic.

The level is the 1Y rate; the shape is every tenor minus the level. Model
inputs are ``[scaled shape (12), scaled level]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .panel import CurvePanel


class ConfigError(ValueError):
    pass


class DegenerateError(ValueError):
    pass


@dataclass(frozen=True)
class ShapeLevelRecord:
    date: np.datetime64
    currency: str
    level: float
    shape: np.ndarray


@dataclass(frozen=True, eq=False)
class ShapeLevelRecords:
    """Columnar records. ``residual`` is the exact rounding compensation so that
    ``(shape + level) + residual`` reproduces the raw rates bit for bit."""

    dates: np.ndarray
    currencies: np.ndarray
    level: np.ndarray
    shape: np.ndarray
    residual: np.ndarray
    level_index: int

    def __len__(self) -> int:
        return len(self.level)

    def __getitem__(self, i: int) -> ShapeLevelRecord:
        return ShapeLevelRecord(self.dates[i], str(self.currencies[i]), float(self.level[i]), self.shape[i])

    def features(self) -> np.ndarray:
        """Unscaled ``[shape, level]`` matrix, one row per record."""
        return np.column_stack([self.shape, self.level])


def decompose(panel: CurvePanel, level_label: str = "1Y") -> ShapeLevelRecords:
    if level_label not in panel.grid.labels:
        raise ConfigError(f"grid lacks the {level_label} tenor")
    if not panel.is_dense:
        raise ValueError("decompose needs a dense panel (mask all true)")
    j = panel.grid.index(level_label)
    rates = np.asarray(panel.rates)
    level = rates[:, j].copy()
    shape = rates - level[:, None]
    shape[:, j] = 0.0
    residual = rates - (shape + level[:, None])
    return ShapeLevelRecords(panel.dates, panel.currencies, level, shape, residual, j)


def recompose(records: ShapeLevelRecords) -> np.ndarray:
    return (records.shape + records.level[:, None]) + records.residual


@dataclass
class RobustScaler:
    """Per-column (x - median) / IQR; quartiles by linear interpolation."""

    medians: np.ndarray
    iqrs: np.ndarray

    @classmethod
    def fit(cls, x) -> "RobustScaler":
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[0] < 2:
            raise ValueError("need at least two rows to fit a scaler")
        med = np.quantile(x, 0.5, axis=0, method="linear")
        q1, q3 = np.quantile(x, [0.25, 0.75], axis=0, method="linear")
        iqr = q3 - q1
        iqr = np.where(iqr < 1e-12, 1.0, iqr)
        return cls(med, iqr)

    def transform(self, x):
        return (np.asarray(x, dtype=float) - self.medians) / self.iqrs

    def inverse_transform(self, x):
        return np.asarray(x, dtype=float) * self.iqrs + self.medians

    def to_dict(self) -> dict:
        return {"medians": self.medians.tolist(), "iqrs": self.iqrs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RobustScaler":
        return cls(np.asarray(d["medians"], dtype=float), np.asarray(d["iqrs"], dtype=float))


def fit_scaler(records: ShapeLevelRecords) -> RobustScaler:
    if len(records) == 0:
        raise ValueError("cannot fit a scaler on empty input")
    return RobustScaler.fit(records.features())


def scale(records: ShapeLevelRecords, scaler: RobustScaler) -> np.ndarray:
    """Model inputs x_t = [scaled shape, scaled level]."""
    return scaler.transform(records.features())


@dataclass(frozen=True)
class PcaResult:
    ratios: np.ndarray
    components: np.ndarray  # rows are principal directions
    eigenvalues: np.ndarray
    mean: np.ndarray

    def transform(self, x, k: int | None = None):
        comps = self.components if k is None else self.components[:k]
        return (np.asarray(x, dtype=float) - self.mean) @ comps.T

    def inverse_transform(self, scores, k: int | None = None):
        comps = self.components if k is None else self.components[:k]
        return np.asarray(scores, dtype=float) @ comps + self.mean


def pca_fit(x, allow_degenerate: bool = False) -> PcaResult:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least two rows")
    mean = x.mean(axis=0)
    cov = np.cov(x - mean, rowvar=False, bias=False).reshape(x.shape[1], x.shape[1])
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    comps = evecs[:, order].T.copy()
    for c in comps:
        if c[np.argmax(np.abs(c))] < 0:
            c *= -1.0
    total = evals.sum()
    if total <= 1e-300:
        if not allow_degenerate:
            raise DegenerateError("input has zero variance (rank 0)")
        ratios = np.zeros_like(evals)
    else:
        ratios = evals / total
    return PcaResult(ratios, comps, evals, mean)


def pca_diagnostic(shape_matrix) -> PcaResult:
    """Explained-variance ratios (descending) and sign-normalised components."""
    return pca_fit(shape_matrix)
