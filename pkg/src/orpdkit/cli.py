"""Single entry point exposing the full pipeline as subcommands.

Every subcommand reads a shared JSON config (flag overrides win), writes its
artifacts into the output directory together with a run manifest, and logs to
stderr only. All randomness flows through seeds named in the config, so a
rerun with the same config reproduces the primary artifacts byte for byte
(manifests may differ in their timing fields only).

Exit status: 0 success, 2 config error, 3 data error, 4 fatal non-convergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .datagen import (
    DataError,
    LabelOptions,
    dataset_stats,
    ingest_timeseries,
    inputs_to_table,
    label_dataset,
    load_dataset,
    nominal_profile,
    read_table,
    sample_synthetic,
    save_dataset,
    split,
    table_to_inputs,
    write_stat_report,
    write_table,
)
from .evaluation import emit_comparison_plots, evaluate, replay_predictor, report_table, save_metrics
from .grid import GridSchemaError, GridSemanticError, load_grid, validate
from .nn.models import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .nn.training import Hyper, TrainingDiverged, hyper_search, train
from .orpd import OrpdOptions, solve_orpd, vector_from_controls
from .powerflow import InputVector, PFOptions, check_constraints, control_mask, solve_pf

log = logging.getLogger("orpdkit")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    pass


class FatalNonConvergence(RuntimeError):
    pass


def _load_config(path) -> dict:
    if path is None:
        raise ConfigError("--config is required")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc


def _want_path(config: dict, key: str) -> str:
    value = _want_key(config, key)
    if not isinstance(value, str) or not os.path.exists(value):
        raise ConfigError(f"config key {key!r} must name an existing path, got {value!r}")
    return value


def _want_key(config: dict, dotted: str):
    node = config
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"config key {dotted!r} missing")
        node = node[part]
    return node


def _get(config: dict, dotted: str, default):
    node = config
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            return default
        node = node[part]
    return node


def _seed(config: dict, name: str) -> int:
    seeds = _get(config, "seeds", {})
    if name not in seeds:
        raise ConfigError(f"config names no seed {name!r} (seeds are explicit, never wall-clock)")
    return int(seeds[name])


def _outdir(config: dict) -> str:
    out = _get(config, "paths.outdir", "out")
    os.makedirs(out, exist_ok=True)
    return out


def _write_manifest(outdir: str, name: str, payload: dict, t0: float) -> None:
    payload = dict(payload)
    payload["version"] = __version__
    payload["elapsed_s"] = round(time.perf_counter() - t0, 3)
    with open(os.path.join(outdir, f"manifest_{name}.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _orpd_options(config: dict) -> OrpdOptions:
    solver = _get(config, "solver", {})
    defaults = OrpdOptions()
    return OrpdOptions(
        pf_tolerance=float(solver.get("pf_tolerance", defaults.pf_tolerance)),
        pf_max_iter=int(solver.get("pf_max_iter", defaults.pf_max_iter)),
        fd_step=float(solver.get("fd_step", defaults.fd_step)),
        penalty_init=float(solver.get("penalty_init", defaults.penalty_init)),
        penalty_growth=float(solver.get("penalty_growth", defaults.penalty_growth)),
        max_outer=int(solver.get("max_outer", defaults.max_outer)),
        inner_max_iter=int(solver.get("inner_max_iter", defaults.inner_max_iter)),
        stationarity_tol=float(solver.get("stationarity_tol", defaults.stationarity_tol)),
        feasibility_tol=float(solver.get("feasibility_tol", defaults.feasibility_tol)),
        restarts=int(solver.get("restarts", defaults.restarts)),
        seed=int(solver.get("seed", defaults.seed)),
    )


def _model_config(config: dict, family: str) -> ModelConfig:
    section = _get(config, f"training.{family}", {})
    return ModelConfig(
        family=family,
        hidden=tuple(section.get("hidden", [64, 64])),
        nonlinearity=section.get("nonlinearity", "relu"),
        dropout=float(section.get("dropout", 0.0)),
        taps=int(section.get("taps", 3)),
    )


def _hyper(config: dict, seed: int) -> Hyper:
    section = _get(config, "training", {})
    defaults = Hyper()
    return Hyper(
        lr=float(section.get("lr", defaults.lr)),
        weight_decay=float(section.get("weight_decay", defaults.weight_decay)),
        batch_size=int(section.get("batch_size", defaults.batch_size)),
        patience=int(section.get("patience", defaults.patience)),
        max_epochs=int(section.get("max_epochs", defaults.max_epochs)),
        seed=seed,
    )


def _cmd_grid_validate(args, config) -> int:
    t0 = time.perf_counter()
    outdir = _outdir(config)
    grid_path = args.grid or _want_path(config, "paths.grid")
    try:
        grid = load_grid(grid_path)
    except (GridSchemaError, GridSemanticError) as exc:
        raise DataError(str(exc)) from exc
    report = validate(grid)
    out = os.path.join(outdir, "grid_validation.txt")
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(str(report) + "\n")
    _write_manifest(outdir, "grid_validate", {"grid": grid_path, "issues": len(report.issues)}, t0)
    if args.print:
        print(str(report))
    if not report.ok:
        raise DataError(f"grid has {len(report.issues)} violation(s); see {out}")
    return EXIT_OK


def _single_input(config, grid, args) -> InputVector:
    inputs_path = args.inputs or _want_path(config, "paths.inputs")
    table = read_table(inputs_path)
    inputs = table_to_inputs(table, grid)
    if not inputs:
        raise DataError(f"{inputs_path}: no rows")
    index = int(getattr(args, "row", 0) or 0)
    if index >= len(inputs):
        raise DataError(f"row {index} out of range ({len(inputs)} rows)")
    return inputs[index]


def _cmd_pf_run(args, config) -> int:
    t0 = time.perf_counter()
    outdir = _outdir(config)
    grid = load_grid(args.grid or _want_path(config, "paths.grid"))
    x = _single_input(config, grid, args)
    y = _controls_for_pf(config, grid, args)
    solver = _get(config, "solver", {})
    sol = solve_pf(
        grid, x, y,
        PFOptions(
            tolerance=float(solver.get("pf_tolerance", 1e-8)),
            max_iter=int(solver.get("pf_max_iter", 30)),
        ),
    )
    if not sol.converged:
        raise FatalNonConvergence(f"power flow did not converge (residual {sol.residual_norm:.3e})")
    payload = {
        "voltage_magnitude": np.abs(sol.voltages).tolist(),
        "voltage_angle_rad": np.angle(sol.voltages).tolist(),
        "p_loss": sol.p_loss,
        "slack_p": sol.slack_p,
        "gen_q": sol.gen_q.tolist(),
        "iterations": sol.iterations,
        "residual_norm": sol.residual_norm,
    }
    out = os.path.join(outdir, "pf_solution.json")
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(outdir, "pf_run", {"grid": args.grid or _get(config, "paths.grid", None)}, t0)
    if args.print:
        print(json.dumps(payload))
    return EXIT_OK


def _controls_for_pf(config, grid, args):
    from .powerflow import control_template

    y = control_template(grid)
    controls_path = getattr(args, "controls", None) or _get(config, "paths.controls", None)
    if controls_path:
        table = read_table(controls_path)
        row = table.values[int(getattr(args, "row", 0) or 0)]
        for name, value in zip(table.columns, row):
            kind, bus, qty = name.split("_", 2)
            col = 0 if qty == "vset" else 1
            y.values[int(bus), col] = value
    else:
        for g in grid.volt_gens:
            y.values[g.bus, 0] = 1.0
    return y


def _cmd_orpd_solve(args, config) -> int:
    t0 = time.perf_counter()
    outdir = _outdir(config)
    grid = load_grid(args.grid or _want_path(config, "paths.grid"))
    x = _single_input(config, grid, args)
    sol = solve_orpd(grid, x, _orpd_options(config))
    if not sol.converged:
        raise FatalNonConvergence("dispatch optimization did not converge")
    payload = {
        "u": vector_from_controls(grid, sol.y_star).tolist(),
        "p_loss": sol.p_loss,
        "feasible_at": sol.feasible_at,
        "iterations": sol.iterations,
        "inner_pf_count": sol.inner_pf_count,
        "kkt_stationarity": sol.kkt_stationarity,
    }
    out = os.path.join(outdir, "orpd_solution.json")
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(outdir, "orpd_solve", {"grid": args.grid or _get(config, "paths.grid", None)}, t0)
    if args.print:
        print(json.dumps(payload))
    return EXIT_OK


def _cmd_data_ingest(args, config) -> int:
    t0 = time.perf_counter()
    outdir = _outdir(config)
    grid = load_grid(_want_path(config, "paths.grid"))
    table = ingest_timeseries(
        _want_path(config, "paths.generation"),
        _want_path(config, "paths.loads"),
        grid,
    )
    out = os.path.join(outdir, "ingested.csv")
    write_table(table, out)
    _write_manifest(
        outdir,
        "data_ingest",
        {
            "rows": len(table.timestamps),
            "dropped_columns": table.report.dropped_columns,
            "unmatched_timestamps": table.report.unmatched_timestamps,
            "gap_rows": table.report.gap_rows,
        },
        t0,
    )
    return EXIT_OK


def _cmd_data_synth(args, config) -> int:
    t0 = time.perf_counter()
    outdir = _outdir(config)
    grid = load_grid(_want_path(config, "paths.grid"))
    nominal_table = read_table(_want_path(config, "paths.nominal"))
    nominal = nominal_profile(nominal_table, grid)
    count = int(args.count or _get(config, "synth.count", 10000))
    spread = float(args.spread if args.spread is not None else _get(config, "synth.spread", 0.3))
    samples = sample_synthetic(nominal, count, spread, _seed(config, "synth"))
    out = os.path.join(outdir, "inputs.csv")
    write_table(inputs_to_table(samples, grid), out)
    _write_manifest(outdir, "data_synth", {"count": count, "spread": spread}, t0)
    return EXIT_OK


def _cmd_data_label(args, config) -> int:
    t0 = time.perf_counter()
    outdir = _outdir(config)
    grid = load_grid(_want_path(config, "paths.grid"))
    table = read_table(args.inputs or _want_path(config, "paths.inputs"))
    inputs = table_to_inputs(table, grid)
    workers = int(args.workers or _get(config, "label.workers", 1))
    dataset = label_dataset(grid, inputs, LabelOptions(orpd=_orpd_options(config), workers=workers))
    out = os.path.join(outdir, "dataset.csv")
    save_dataset(dataset, grid, out)
    _write_manifest(
        outdir,
        "data_label",
        {"rows": len(dataset.rows), "converged_fraction": dataset.converged_fraction(), "workers": workers},
        t0,
    )
    return EXIT_OK


def _cmd_data_split(args, config) -> int:
    t0 = time.perf_counter()
    outdir = _outdir(config)
    grid = load_grid(_want_path(config, "paths.grid"))
    path = args.dataset or _want_path(config, "paths.dataset")
    dataset = load_dataset(path, grid)
    scheme = args.scheme or _get(config, "split.scheme", "chronological")
    fractions = tuple(_get(config, "split.fractions", [0.77, 0.18, 0.05]))
    try:
        split(dataset, fractions, scheme, _seed(config, "split"), grid)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = os.path.join(outdir, "dataset.csv")
    save_dataset(dataset, grid, out)
    _write_manifest(outdir, "data_split", {"scheme": scheme, "fractions": list(fractions)}, t0)
    return EXIT_OK


def _cmd_data_stats(args, config) -> int:
    t0 = time.perf_counter()
    outdir = _outdir(config)
    table = read_table(args.inputs or _want_path(config, "paths.inputs"))
    report = dataset_stats(table, bins=int(_get(config, "stats.bins", 50)))
    files = write_stat_report(report, outdir)
    _write_manifest(outdir, "data_stats", {"columns": len(report.columns), "files": len(files)}, t0)
    return EXIT_OK


def _cmd_train(args, config) -> int:
    t0 = time.perf_counter()
    outdir = _outdir(config)
    grid = load_grid(_want_path(config, "paths.grid"))
    dataset = load_dataset(args.dataset or _want_path(config, "paths.dataset"), grid)
    family = args.family or _get(config, "training.family", "fcnn")
    model = build_model(_model_config(config, family), grid, seed=_seed(config, "init"))
    try:
        report = train(model, dataset, grid, _hyper(config, _seed(config, "train")))
    except TrainingDiverged as exc:
        raise FatalNonConvergence(str(exc)) from exc
    out = os.path.join(outdir, f"model_{family}.json")
    save_checkpoint(model, out)
    curve_path = os.path.join(outdir, f"train_curve_{family}.csv")
    with open(curve_path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for e, (tr, va) in enumerate(zip(report.train_curve, report.val_curve)):
            fh.write(f"{e},{tr!r},{va!r}\n")
    _write_manifest(
        outdir,
        f"train_{family}",
        {"family": family, "best_epoch": report.best_epoch, "best_val_loss": report.best_val_loss},
        t0,
    )
    return EXIT_OK


def _cmd_hyper(args, config) -> int:
    t0 = time.perf_counter()
    outdir = _outdir(config)
    grid = load_grid(_want_path(config, "paths.grid"))
    dataset = load_dataset(args.dataset or _want_path(config, "paths.dataset"), grid)
    family = args.family or _get(config, "training.family", "fcnn")
    space = _want_key(config, "hyper.space")
    space = {k: [tuple(v) if isinstance(v, list) else v for v in vs] if k == "hidden" else vs for k, vs in space.items()}
    budget = int(args.budget or _get(config, "hyper.budget", 4))
    best, trials = hyper_search(
        space,
        budget,
        _seed(config, "hyper"),
        _model_config(config, family),
        dataset,
        grid,
        base_hyper=_hyper(config, _seed(config, "train")),
    )
    with open(os.path.join(outdir, "hyper_trials.json"), "w", encoding="utf-8") as fh:
        json.dump({"best": _jsonable(best), "trials": _jsonable(trials)}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(outdir, "hyper", {"budget": budget, "family": family}, t0)
    return EXIT_OK


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def _cmd_eval(args, config) -> int:
    t0 = time.perf_counter()
    outdir = _outdir(config)
    grid = load_grid(_want_path(config, "paths.grid"))
    dataset = load_dataset(args.dataset or _want_path(config, "paths.dataset"), grid)
    rho = float(args.rho if args.rho is not None else _get(config, "eval.rho", 0.018))
    if args.checkpoint == "oracle":
        predictor = replay_predictor(dataset)
        tag = "oracle"
    else:
        checkpoint = args.checkpoint or _want_path(config, "paths.checkpoint")
        predictor = load_checkpoint(checkpoint)
        tag = predictor.config.family
    metrics = evaluate(predictor, grid, dataset, rho=rho, split=args.split or "test")
    save_metrics(metrics, os.path.join(outdir, f"metrics_{tag}.json"))
    _write_manifest(outdir, f"eval_{tag}", {"rho": rho, "n_instances": metrics.n_instances}, t0)
    if args.print:
        print(json.dumps({"mae_v": metrics.mae_v, "mae_q": metrics.mae_q, "feas_pct": metrics.feas_pct}))
    return EXIT_OK


def _cmd_report(args, config) -> int:
    t0 = time.perf_counter()
    outdir = _outdir(config)
    sections = []
    for section in _want_key(config, "report.sections"):
        rows = []
        for entry in section["rows"]:
            if entry.get("oracle"):
                rows.append((entry["name"], None))
                continue
            payload = json.load(open(entry["metrics"], "r", encoding="utf-8"))
            from .evaluation import Metrics

            rows.append(
                (
                    entry["name"],
                    Metrics(
                        mae_v=payload["mae_v"],
                        mae_q=payload["mae_q"],
                        loss_gap_mean=payload["loss_gap_mean"],
                        loss_gap_std=payload["loss_gap_std"],
                        feas_pct=payload["feas_pct"],
                        feas_relaxed_pct=payload["feas_relaxed_pct"],
                        rho=payload["rho"],
                        n_instances=payload["n_instances"],
                        n_pf_failed=payload["n_pf_failed"],
                    ),
                )
            )
        sections.append((section["name"], rows))
    text, twin = report_table(sections)
    with open(os.path.join(outdir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    with open(os.path.join(outdir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(twin, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(outdir, "report", {"sections": len(sections)}, t0)
    if args.print:
        print(text, end="")
    return EXIT_OK


def _cmd_plot(args, config) -> int:
    t0 = time.perf_counter()
    outdir = _outdir(config)
    metrics_path = args.metrics or _want_path(config, "paths.metrics")
    payload = json.load(open(metrics_path, "r", encoding="utf-8"))
    from .evaluation import InstanceDetail, Metrics

    metrics = Metrics(
        mae_v=payload["mae_v"],
        mae_q=payload["mae_q"],
        loss_gap_mean=payload["loss_gap_mean"],
        loss_gap_std=payload["loss_gap_std"],
        feas_pct=payload["feas_pct"],
        feas_relaxed_pct=payload["feas_relaxed_pct"],
        rho=payload["rho"],
        n_instances=payload["n_instances"],
        n_pf_failed=payload["n_pf_failed"],
        element_names=payload["element_names"],
        detail=[InstanceDetail(**d) for d in payload["detail"]],
    )
    elements = args.elements or _get(config, "plot.elements", metrics.element_names)
    try:
        files = emit_comparison_plots(metrics, elements, os.path.join(outdir, "plots"))
    except KeyError as exc:
        raise DataError(str(exc)) from exc
    _write_manifest(outdir, "plot", {"files": len(files)}, t0)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="orpdkit", description=__doc__)
    parser.add_argument("--config", help="path to the shared JSON config")
    parser.add_argument("--print", action="store_true", help="echo the primary result to stdout")
    sub = parser.add_subparsers(dest="group", required=True)

    grid_p = sub.add_parser("grid", help="network file operations")
    grid_sub = grid_p.add_subparsers(dest="verb", required=True)
    gv = grid_sub.add_parser("validate", help="validate a grid file")
    gv.add_argument("--grid")
    gv.set_defaults(fn=_cmd_grid_validate)

    pf_p = sub.add_parser("pf", help="power flow")
    pf_sub = pf_p.add_subparsers(dest="verb", required=True)
    pr = pf_sub.add_parser("run", help="solve one power flow")
    pr.add_argument("--grid")
    pr.add_argument("--inputs")
    pr.add_argument("--controls")
    pr.add_argument("--row", type=int, default=0)
    pr.set_defaults(fn=_cmd_pf_run)

    orpd_p = sub.add_parser("orpd", help="dispatch optimization")
    orpd_sub = orpd_p.add_subparsers(dest="verb", required=True)
    osv = orpd_sub.add_parser("solve", help="solve one dispatch instance")
    osv.add_argument("--grid")
    osv.add_argument("--inputs")
    osv.add_argument("--row", type=int, default=0)
    osv.set_defaults(fn=_cmd_orpd_solve)

    data_p = sub.add_parser("data", help="dataset pipeline")
    data_sub = data_p.add_subparsers(dest="verb", required=True)
    di = data_sub.add_parser("ingest", help="align generation and load series")
    di.set_defaults(fn=_cmd_data_ingest)
    ds = data_sub.add_parser("synth", help="sample synthetic inputs around a nominal profile")
    ds.add_argument("--count", type=int)
    ds.add_argument("--spread", type=float)
    ds.set_defaults(fn=_cmd_data_synth)
    dl = data_sub.add_parser("label", help="run the dispatch oracle over an input table")
    dl.add_argument("--inputs")
    dl.add_argument("--workers", type=int)
    dl.set_defaults(fn=_cmd_data_label)
    dsp = data_sub.add_parser("split", help="assign train/val/test tags")
    dsp.add_argument("--dataset")
    dsp.add_argument("--scheme", choices=["chronological", "random"])
    dsp.set_defaults(fn=_cmd_data_split)
    dst = data_sub.add_parser("stats", help="histograms and season-hour matrices")
    dst.add_argument("--inputs")
    dst.set_defaults(fn=_cmd_data_stats)

    train_p = sub.add_parser("train", help="train a model on a labeled dataset")
    train_p.add_argument("--dataset")
    train_p.add_argument("--family", choices=["fcnn", "gnn"])
    train_p.set_defaults(fn=_cmd_train)

    hyper_p = sub.add_parser("hyper", help="random hyperparameter search")
    hyper_p.add_argument("--dataset")
    hyper_p.add_argument("--family", choices=["fcnn", "gnn"])
    hyper_p.add_argument("--budget", type=int)
    hyper_p.set_defaults(fn=_cmd_hyper)

    eval_p = sub.add_parser("eval", help="metric suite over a split")
    eval_p.add_argument("--checkpoint", help="model checkpoint path, or 'oracle' for label replay")
    eval_p.add_argument("--dataset")
    eval_p.add_argument("--rho", type=float)
    eval_p.add_argument("--split", choices=["train", "val", "test"])
    eval_p.set_defaults(fn=_cmd_eval)

    report_p = sub.add_parser("report", help="render the comparison table")
    report_p.set_defaults(fn=_cmd_report)

    plot_p = sub.add_parser("plot", help="ground-truth vs prediction plot data")
    plot_p.add_argument("--metrics")
    plot_p.add_argument("--elements", nargs="*")
    plot_p.set_defaults(fn=_cmd_plot)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config(args.config)
        return args.fn(args, config)
    except ConfigError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, GridSchemaError, GridSemanticError, KeyError, FileNotFoundError) as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FatalNonConvergence as exc:
        print(f"error[numeric]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
