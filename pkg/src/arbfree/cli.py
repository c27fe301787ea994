"""Command-line front door: synth, fit-manifold, fit-dynamics, evaluate, simulate, bench."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import benchmarks as bm
from . import evaluation as ev
from .config import ConfigInvalid, RunConfig, sub_seed
from .dynamics import encode_path, load_dynamics, save_dynamics, simulate_paths, decode_paths, risk_premium_series, train_dynamics, write_paths_csv, write_risk_premium_csv
from .manifold import FrozenError, ManifoldModel, train_manifold
from .pipeline.cleaning import truncate_and_densify
from .pipeline.panel import load_csv, save_csv
from .pipeline.synth import synth_panel

log = logging.getLogger("arbfree")

EXIT_MISSING, EXIT_HASH, EXIT_CONFIG = 2, 3, 4


class HashMismatch(RuntimeError):
    pass


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(str(p))
    return p


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _check_lineage(artifact_hash: str | None, cfg: RunConfig, what: str) -> None:
    if artifact_hash != cfg.hash:
        raise HashMismatch(f"{what} was produced by config {artifact_hash}, current config is {cfg.hash}")


def _write_artifacts(out: Path, files, cfg: RunConfig) -> None:
    """Sidecar mapping each artifact to its digest and producing config hash; merged across commands."""
    side = out / "artifacts.json"
    doc = json.loads(side.read_text()) if side.exists() else {}
    for f in files:
        doc[Path(f).name] = {"sha256": ev.file_digest(f), "config_hash": cfg.hash, "seed": cfg.seed}
    side.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _dense_split(cfg: RunConfig, panel_path):
    panel = load_csv(_require(panel_path))
    dense, report = truncate_and_densify(panel, cfg.truncation)
    for line in report.warning_lines().splitlines():
        sys.stderr.write(line + "\n")
    train, oos = ev.oos_split(dense, cfg.evaluation["oos_fraction"])
    return dense, train, oos


def _load_manifold(path, cfg: RunConfig) -> ManifoldModel:
    m = ManifoldModel.load(_require(path))
    _check_lineage(m.config_hash, cfg, "manifold checkpoint")
    return m


def _load_dynamics(path, manifold, cfg: RunConfig):
    d = load_dynamics(_require(path), manifold)
    _check_lineage(d.config_hash, cfg, "dynamics checkpoint")
    return d


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, args) -> None:
    out = _out_dir(args, cfg)
    res = synth_panel(cfg.generator, sub_seed(cfg.seed, "synth"))
    files = [out / "panel.csv", out / "clean.csv", out / "truth.csv"]
    save_csv(res.panel, files[0])
    save_csv(res.clean, files[1])
    res.save_truth_csv(files[2])
    _write_artifacts(out, files, cfg)


def cmd_fit_manifold(cfg: RunConfig, args) -> None:
    out = _out_dir(args, cfg)
    _, train, _ = _dense_split(cfg, args.panel)
    model, tlog = train_manifold(cfg.manifold, train)
    model.config_hash = cfg.hash
    files = [out / "manifold.json", out / "manifold_log.csv"]
    model.save(files[0])
    tlog.to_csv(files[1])
    _write_artifacts(out, files, cfg)


def cmd_fit_dynamics(cfg: RunConfig, args) -> None:
    out = _out_dir(args, cfg)
    manifold = _load_manifold(args.manifold, cfg)
    _, train, _ = _dense_split(cfg, args.panel)
    path = encode_path(manifold, train)
    model, dlog = train_dynamics(cfg.dynamics, manifold, path)
    model.config_hash = cfg.hash
    files = [out / "dynamics.json", out / "dynamics_log.csv", out / "risk_premium.csv"]
    save_dynamics(model, files[0])
    dlog.to_csv(files[1])
    write_risk_premium_csv(files[2], *risk_premium_series(model, path))
    _write_artifacts(out, files, cfg)


def _stress_dates(oos, horizon: int, n: int):
    common = None
    for c in oos.currency_ids:
        d = oos.dates[oos.rows_for(c)]
        d = d[: max(len(d) - horizon, 1)]
        common = set(d.tolist()) if common is None else common & set(d.tolist())
    dates = np.array(sorted(common or []), dtype="datetime64[D]")
    if len(dates) == 0:
        return []
    pick = np.unique(np.linspace(0, len(dates) - 1, n).round().astype(int))
    return [str(dates[i]) for i in pick]


def cmd_evaluate(cfg: RunConfig, args) -> None:
    out = _out_dir(args, cfg)
    rep = out / "report"
    rep.mkdir(exist_ok=True)
    manifold = _load_manifold(args.manifold, cfg)
    dynamics = _load_dynamics(args.dynamics, manifold, cfg)
    _, train, oos = _dense_split(cfg, args.panel)
    e = cfg.evaluation
    preds = [("proposed", manifold.reconstruct(oos)), ("PCA", bm.pca_var_baseline(train, e["pca_k"], oos))]
    table = ev.ablation_table(preds, oos)
    files = [rep / "ablation.csv", rep / "pde_profile.csv", rep / "latents.csv"]
    table.to_csv(files[0])
    profile = ev.pde_violation_profile(dynamics, encode_path(manifold, oos), oos.grid)
    with open(files[1], "w") as fh:
        fh.write("tenor,normalized_violation\n")
        for k, v in zip(profile.labels, profile.values):
            fh.write(f"{k},{v:.10e}\n")
    ev.export_latents(manifold, oos, files[2])
    floors = cfg.generator.floors()
    starts = _stress_dates(oos, e["stress_horizon"], e["stress_starts"])
    adapters = [
        ev.ProposedAdapter(manifold, dynamics, e["measure"]),
        ev.Hjm3Adapter.from_panel(train),
        ev.PcaVarAdapter(bm.fit_pca_var(train, e["pca_k"])),
    ]
    for a in adapters:
        res = ev.forward_stress_test(a, oos, starts, e["stress_horizon"], e["stress_paths"],
                                     sub_seed(cfg.seed, f"stress:{a.name}") % 2**32, floors)
        p = rep / f"stress_{a.name}.csv"
        res.summary_csv(p)
        files.append(p)
    ev.write_manifest(rep, files, {"global": cfg.seed, "manifold": cfg.manifold.seed, "dynamics": cfg.dynamics.seed},
                      {"run": cfg.hash, "manifold": manifold.config_hash, "dynamics": dynamics.config_hash})


def cmd_simulate(cfg: RunConfig, args) -> None:
    out = _out_dir(args, cfg)
    manifold = _load_manifold(args.manifold, cfg)
    dynamics = _load_dynamics(args.dynamics, manifold, cfg)
    panel = load_csv(_require(args.panel))
    dense, _ = truncate_and_densify(panel, cfg.truncation)
    start = dense.select([dense.row_index(args.currency, args.start_date)])
    x, _, lvl_s = manifold.inputs_from_panel(start)
    z0 = manifold.encode(x, start.currencies).mu[0]
    paths = simulate_paths(dynamics, z0, args.horizon, args.n_paths, args.measure,
                           sub_seed(cfg.seed, "simulate") % 2**32, currency=args.currency)
    swaps = decode_paths(manifold, paths, args.currency, lvl_s[0])
    target = out / "paths.csv"
    write_paths_csv(target, paths, swaps, manifold.grid.labels)
    _write_artifacts(out, [target], cfg)


def cmd_bench(cfg: RunConfig, args) -> None:
    out = _out_dir(args, cfg)
    _, train, oos = _dense_split(cfg, args.panel)
    preds = []
    for name in cfg.evaluation["ablation"]:
        model, _ = train_manifold(cfg.variant(name), train)
        preds.append((name, model.reconstruct(oos)))
    preds.append(("PCA", bm.pca_var_baseline(train, cfg.evaluation["pca_k"], oos)))
    table = ev.ablation_table(preds, oos)
    files = [out / "ablation.csv", out / "ablation.txt"]
    table.to_csv(files[0])
    files[1].write_text(table.render())
    ev.write_manifest(out, files, {"global": cfg.seed}, {"run": cfg.hash})


COMMANDS = {
    "synth": cmd_synth,
    "fit-manifold": cmd_fit_manifold,
    "fit-dynamics": cmd_fit_dynamics,
    "evaluate": cmd_evaluate,
    "simulate": cmd_simulate,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="arbfree", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True)
        s.add_argument("--out", default=None)
        s.add_argument("--seed", type=int, default=None)
        if name != "synth":
            s.add_argument("--panel", required=True)
        if name in ("fit-dynamics", "evaluate", "simulate"):
            s.add_argument("--manifold", required=True)
        if name in ("evaluate", "simulate"):
            s.add_argument("--dynamics", required=True)
        if name == "simulate":
            s.add_argument("--currency", required=True)
            s.add_argument("--start-date", required=True)
            s.add_argument("--horizon", type=int, default=30)
            s.add_argument("--n-paths", type=int, default=100)
            s.add_argument("--measure", choices=["p", "q", "P", "Q"], default="P")
    return p


def _fail(code: int, kind: str, msg: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": msg}, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    level = os.environ.get("ARBFREE_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), stream=sys.stderr, format="%(levelname)s %(name)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(_require(args.config), args.seed)
        COMMANDS[args.command](cfg, args)
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, "missing_file", str(exc))
    except (HashMismatch, FrozenError) as exc:
        return _fail(EXIT_HASH, "hash_mismatch", str(exc))
    except ConfigInvalid as exc:
        return _fail(EXIT_CONFIG, "invalid_config", str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
