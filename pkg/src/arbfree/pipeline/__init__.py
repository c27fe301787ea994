from .cleaning import (
    TruncationConfig,
    TruncationReport,
    completeness_ratio,
    stable_start_date,
    truncate_and_densify,
)
from .features import (
    PcaResult,
    RobustScaler,
    ShapeLevelRecords,
    decompose,
    fit_scaler,
    pca_diagnostic,
    recompose,
    scale,
)
from .panel import CurvePanel, ParseError, load_csv, save_csv
from .synth import GeneratorSpec, SynthResult, heavy_tailed_spec, synth_panel

__all__ = [
    "CurvePanel",
    "GeneratorSpec",
    "ParseError",
    "PcaResult",
    "RobustScaler",
    "ShapeLevelRecords",
    "SynthResult",
    "TruncationConfig",
    "TruncationReport",
    "completeness_ratio",
    "decompose",
    "fit_scaler",
    "heavy_tailed_spec",
    "load_csv",
    "pca_diagnostic",
    "recompose",
    "save_csv",
    "scale",
    "stable_start_date",
    "synth_panel",
    "truncate_and_densify",
]
