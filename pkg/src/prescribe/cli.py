"""Command-line entry point: ``prescribe <command> [options]``.

Every command writes into ``--out`` and records the effective configuration
(flags override the config file, which overrides defaults) in
``config.json``. Exit codes: 0 success, 2 usage error, 3 data error,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
import typing
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import _io, data, evaluation, training
from .errors import DataFormatError, DomainError, NumericalError
from .network import PrescribeModel

logger = logging.getLogger("prescribe")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


def _coerce(value: str, kind):
    """Parse config-file text according to a dataclass field annotation."""
    kind = typing.get_origin(kind) or kind
    text = value.strip()
    if kind in (tuple, list):
        parsed = json.loads(text) if text.startswith("[") else [float(v) for v in text.split(",") if v.strip()]
        return tuple(parsed)
    if kind is bool:
        return text.lower() in ("1", "true", "yes", "on")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def read_config(path: str | None, section: str, cls) -> dict:
    """Return the ``[section]`` entries of an INI-style file, typed by ``cls`` fields."""
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise DataFormatError(f"{p}: config file not found")
    parser = configparser.ConfigParser()
    try:
        parser.read(p, encoding="utf-8")
    except configparser.Error as exc:
        raise UsageError(f"{p}: {exc}") from None
    if not parser.has_section(section):
        return {}
    hints = typing.get_type_hints(cls)
    out = {}
    for key, value in parser.items(section):
        if key not in hints:
            raise UsageError(f"{p}: unknown key {key!r} in [{section}]")
        try:
            out[key] = _coerce(value, hints[key])
        except ValueError:
            raise UsageError(f"{p}: bad value for {key!r}: {value!r}") from None
    return out


def _effective(cls, base: dict, file_cfg: dict, flags: dict):
    merged = {**base, **file_cfg, **{k: v for k, v in flags.items() if v is not None}}
    try:
        return cls(**merged)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (tuple, list)):
        return [_jsonable(v) for v in obj]
    return obj


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataFormatError(f"{out}: cannot create output directory ({exc.strerror})") from None
    return out


def _dump_config(out: Path, command: str, config: dict, seed) -> dict:
    prov = _io.provenance(_jsonable(config), seed)
    _io.write_json(out / "config.json", {"command": command, **prov})
    return prov


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    spec = _effective(data.SynthSpec, {}, read_config(args.config, "synth", data.SynthSpec),
                      {"seed": args.seed, "n_genes": args.n_genes})
    pca_dim = args.pca_dim or 10
    out = _out_dir(args)
    cfg = {"synth": asdict(spec), "pca_dim": pca_dim}
    prov = _dump_config(out, "synth", cfg, spec.seed)
    ds = data.prepare(data.generate(spec), pca_dim, seed=spec.seed)
    data.save(ds, out, prov)
    _io.write_tsv(out / "manifest.tsv", ["perturbation", "split", "tier", "n_cells"],
                  ([k, ds.splits[k], ds.tier(k), len(ds.cells(k))] for k in ds.perturbations()), prov)
    print(f"wrote {len(ds.perturbations())} perturbations and {len(ds.cell_ids)} cells to {out}")
    return EXIT_OK


def _load_dataset(path, pca_dim: int | None = None) -> data.PerturbationDataset:
    ds = data.load(path)
    if ds.pca is None or (pca_dim is not None and ds.pca.n_components != pca_dim):
        ds = data.prepare(ds, pca_dim or 10)
    elif not ds.reference_e:
        ds = data.precompute_reference_e(ds)
    return ds


def _train_config(args) -> training.TrainConfig:
    base = dict(training.DESK_CONFIG) if args.preset == "desk" else {}
    flags = {"seed": args.seed, "lambda1": args.lambda1, "lambda2": args.lambda2, "lambda3": args.lambda3,
             "pca_dim": args.pca_dim, "latent_dim": args.latent_dim, "flow_layers": args.flow_layers,
             "epochs": args.epochs}
    return _effective(training.TrainConfig, base, read_config(args.config, "train", training.TrainConfig), flags)


LOG_COLUMNS = ["epoch", "lr", "l1", "l2", "l3", "l4", "total", "val_l1", "val_pearson", "val_spearman_cal",
               "val_nu_tilde"]


def cmd_train(args) -> int:
    cfg = _train_config(args)
    ds = _load_dataset(args.data, cfg.pca_dim)
    out = _out_dir(args)
    prov = _dump_config(out, "train", {"train": asdict(cfg), "data": str(args.data)}, cfg.seed)

    def on_epoch(rec):
        print("epoch {epoch} l1 {l1:.6g} l2 {l2:.6g} l3 {l3:.6g} l4 {l4:.6g} total {total:.6g} "
              "val_l1 {val_l1:.6g}".format(**rec), flush=True)

    result = training.train(ds, cfg, callback=on_epoch)
    result.model.save(out / "checkpoint.json", extra={"best_epoch": result.best_epoch,
                                                      "best_val_l1": result.best_val_l1}, prov=prov)
    _io.write_tsv(out / "train_log.tsv", LOG_COLUMNS,
                  ([rec.get(c, "") for c in LOG_COLUMNS] for rec in result.log), prov)
    print(f"best epoch {result.best_epoch} val_l1 {result.best_val_l1!r}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = PrescribeModel.load(args.checkpoint)
    ds = _load_dataset(args.data)
    if ds.n_genes != model.control_profile.shape[0]:
        raise DataFormatError(f"checkpoint expects {model.control_profile.shape[0]} genes, dataset has {ds.n_genes}")
    if args.split not in data.SPLITS:
        raise UsageError(f"--split must be one of {', '.join(data.SPLITS)}")
    out = _out_dir(args)
    prov = _dump_config(out, "predict", {"checkpoint": str(args.checkpoint), "data": str(args.data),
                                         "split": args.split, "k_deg": args.k_deg}, model.config.seed)
    records = evaluation.make_records(model, ds, args.split, k_deg=args.k_deg)
    evaluation.write_records(out / "predictions.tsv", records, prov)
    print(f"wrote {len(records)} predictions to {out / 'predictions.tsv'}")
    return EXIT_OK


def _metrics_block(records, bins: int) -> dict:
    block = {"n": len(records), "metrics": evaluation.summarize(records)}
    if len(records) >= 2:
        try:
            block["calibration"] = evaluation.calibration_curve(records, bins=min(bins, len(records))).summary()
        except DomainError as exc:
            block["calibration"] = {"error": str(exc)}
    tiers = sorted({r.tier for r in records if r.tier is not None})
    if tiers:
        block["tiers"] = evaluation.difficulty_report(records, tiers)
    return block


def cmd_evaluate(args) -> int:
    records = evaluation.read_records(args.predictions)
    out = _out_dir(args)
    prov = _dump_config(out, "evaluate", {"predictions": str(args.predictions), "bins": args.bins}, None)
    report = {"provenance": prov, **_metrics_block(records, args.bins)}
    _io.write_json(out / "metrics.json", report)
    if len(records) >= args.bins:
        cal = evaluation.calibration_curve(records, bins=args.bins)
        cols = ["bin", "edge", "mean_conf", "mean_acc", "count"]
        _io.write_tsv(out / "calibration_bins.tsv", cols, ([row[c] for c in cols] for row in cal.bins), prov)
    print(json.dumps(report["metrics"], sort_keys=True))
    return EXIT_OK


def cmd_filter(args) -> int:
    fraction = 0.1 if args.fraction is None else args.fraction
    if not 0.0 <= fraction < 1.0:
        raise UsageError("--fraction must lie in [0, 1)")
    seed = 0 if args.seed is None else args.seed
    records = evaluation.read_records(args.predictions)
    out = _out_dir(args)
    prov = _dump_config(out, "filter", {"predictions": str(args.predictions), "fraction": fraction,
                                        "repeats": args.repeats, "bins": args.bins}, seed)
    kept, deltas = evaluation.filter_bottom(records, fraction)
    baseline = evaluation.random_filter_baseline(records, fraction, repeats=args.repeats, seed=seed)
    report = {"provenance": prov, **_metrics_block(kept, args.bins), "fraction": fraction,
              "dropped": len(records) - len(kept), "delta": deltas,
              "random_baseline": {m: {"mean": mu, "sd": sd} for m, (mu, sd) in baseline.items()}}
    _io.write_json(out / "filter.json", report)
    print(json.dumps({"metrics": report["metrics"], "random_baseline": report["random_baseline"]}, sort_keys=True))
    return EXIT_OK


def cmd_edist(args) -> int:
    ds = data.load(args.data)
    if ds.pca is None:
        ds = data.prepare(ds, args.pca_dim or 10)
    seed = int(ds.meta.get("seed", 0)) if args.seed is None else args.seed
    ds = data.precompute_reference_e(ds, seed=seed, space=args.space)
    out = _out_dir(args)
    prov = _dump_config(out, "edist", {"data": str(args.data), "space": args.space}, seed)
    n_dim = ds.pca.n_components
    band = ds.e_band
    rows = []
    for k in ds.perturbations():
        s = ds.reference_e[k]
        banded = float(band(np.array([s.e]))[0]) if band is not None else float("nan")
        rows.append([k, ds.splits[k], "" if ds.tier(k) is None else ds.tier(k),
                     s.delta_xy, s.sigma_x, s.sigma_y, s.e, banded])
    _io.write_tsv(out / "edist.tsv", ["perturbation", "split", "tier", "delta_xy", "sigma_x", "sigma_y", "e",
                                      f"e_band_{n_dim}"], rows, prov)
    for split in data.SPLITS:
        by_tier: dict = {}
        for r in rows:
            if r[1] == split and r[2] != "":
                by_tier.setdefault(r[2], []).append(r[6])
        if by_tier:
            print(split, " ".join(f"tier{t}={np.mean(v):.4g}" for t, v in sorted(by_tier.items())))
    return EXIT_OK


def _grid(text: str | None, default):
    if text is None:
        return tuple(default)
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise UsageError(f"grid values must be comma-separated numbers, got {text!r}") from None


def cmd_sweep(args) -> int:
    grid = {name: _grid(getattr(args, f"{name}_grid"), training.DEFAULT_GRID[name])
            for name in ("lambda1", "lambda2", "lambda3")}
    n = training.trial_count(grid)
    base = _train_config(args)
    out = _out_dir(args)
    prov = _dump_config(out, "sweep", {"train": asdict(base), "grid": grid, "trials": n,
                                       "data": None if args.data is None else str(args.data)}, base.seed)
    print(f"{n} trials ({len(grid['lambda2'])} x {len(grid['lambda3'])} + {len(grid['lambda1'])})")
    if args.dry_run:
        plan = training.plan_phase1(grid) + [{"phase": 2, "lambda2": "best", "lambda3": training.PHASE2_LAMBDA3,
                                              "lambda1": l1} for l1 in grid["lambda1"]]
        cols = ["phase", "lambda2", "lambda3", "lambda1"]
        _io.write_tsv(out / "sweep_plan.tsv", cols, ([t.get(c, base.lambda1) for c in cols] for t in plan), prov)
        return EXIT_OK
    if args.data is None:
        raise UsageError("sweep needs --data unless --dry-run is given")
    ds = _load_dataset(args.data, base.pca_dim)
    rows = training.sweep(ds, grid, base)
    cols = ["phase", "lambda2", "lambda3", "lambda1", "r_pred_truth", "acc_pred_truth", "spearman_cal",
            "best_epoch", "val_l1"]
    _io.write_tsv(out / "sweep.tsv", cols, ([r[c] for c in cols] for r in rows), prov)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prescribe", description="Evidential perturbation-response prediction.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(sp, seed=True, out=True):
        if out:
            sp.add_argument("--out", required=True, help="output directory")
        if seed:
            sp.add_argument("--seed", type=int, help="global seed")
        return sp

    def model_flags(sp):
        sp.add_argument("--config", help="INI config file ([synth], [train] sections)")
        sp.add_argument("--preset", choices=("default", "desk"), default="default",
                        help="'desk' uses the settings tuned for the synthetic benchmark")
        for name in ("lambda1", "lambda2", "lambda3"):
            sp.add_argument(f"--{name}", type=float)
        sp.add_argument("--pca-dim", type=int)
        sp.add_argument("--latent-dim", type=int)
        sp.add_argument("--flow-layers", type=int)
        sp.add_argument("--epochs", type=int)

    sp = common(sub.add_parser("synth", help="generate the synthetic benchmark"))
    sp.add_argument("--config", help="INI config file with a [synth] section")
    sp.add_argument("--n-genes", type=int)
    sp.add_argument("--pca-dim", type=int)
    sp.set_defaults(func=cmd_synth)

    sp = common(sub.add_parser("train", help="train a model"))
    sp.add_argument("--data", required=True, help="dataset directory")
    model_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("predict", help="predict a split with a checkpoint"), seed=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--k-deg", type=int, default=20)
    sp.set_defaults(func=cmd_predict)

    sp = common(sub.add_parser("evaluate", help="accuracy and calibration metrics"), seed=False)
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--bins", type=int, default=5)
    sp.set_defaults(func=cmd_evaluate)

    sp = common(sub.add_parser("filter", help="drop least-confident predictions"))
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--fraction", type=float)
    sp.add_argument("--repeats", type=int, default=10)
    sp.add_argument("--bins", type=int, default=5)
    sp.set_defaults(func=cmd_filter)

    sp = common(sub.add_parser("edist", help="E-distance of every perturbation to the controls"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--space", choices=("pca", "gene"), default="pca")
    sp.add_argument("--pca-dim", type=int)
    sp.set_defaults(func=cmd_edist)

    sp = common(sub.add_parser("sweep", help="two-phase lambda search"))
    sp.add_argument("--data")
    sp.add_argument("--dry-run", action="store_true", help="write the trial plan only")
    for name in ("lambda1", "lambda2", "lambda3"):
        sp.add_argument(f"--{name}-grid", help="comma-separated values")
    model_flags(sp)
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"prescribe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, DomainError, FileNotFoundError, KeyError) as exc:
        print(f"prescribe: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"prescribe: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
