"""Experiment runner CLI.

Subcommands:
  run       execute an experiment config (TOML), one report per seed/grid cell
  plotdata  turn a report into long-format CSV (round,series,value)
  compare   tabulate cumulative metrics across report files
  synth     write a synthetic dataset to CSV

Reports are JSON documents that round-trip losslessly.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import data as data_mod
from .ensemble import CombinerSpec, build_combiner
from .forecasters import ForecasterSpec, build_forecaster
from .numerics import OptimConfig, make_rng
from .regret import LossLedger, build_report
from .stream import StreamConfig, run_fixed_experts, run_online, split_and_normalize

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

VALID_METRICS = ("mse", "mae")
PLOT_KINDS = ("weights", "cum-mse", "regret")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config parsing


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(doc)


def _optim_from(table):
    return OptimConfig(
        method=table.get("optimizer", "adamw"),
        learning_rate=float(table.get("lr", 1e-3)),
        weight_decay=float(table.get("weight_decay", 0.0)),
    )


def parse_config(doc):
    try:
        dataset = doc.get("dataset", {})
        stream_tbl = doc.get("stream", {})
        stream = StreamConfig(
            L=int(stream_tbl.get("L", 60)),
            H=int(stream_tbl.get("H", 1)),
            warmup_ratio=float(stream_tbl.get("warmup_ratio", 0.25)),
            delayed_feedback=bool(stream_tbl.get("delayed_feedback", False)),
            warmup_pretrain=bool(stream_tbl.get("warmup_pretrain", True)),
        )
        forecasters = []
        for tbl in doc.get("forecaster", []):
            forecasters.append(ForecasterSpec(
                kind=tbl.get("kind", "cross-time-mlp"),
                d_m=int(tbl.get("d_m", 16)),
                n_layers=int(tbl.get("n_layers", 2)),
                instance_norm=bool(tbl.get("instance_norm", False)),
                optim=_optim_from(tbl),
            ))
        comb_tbl = doc.get("combiner", {})
        combiner = CombinerSpec(
            kind=comb_tbl.get("kind", "ocp"),
            eta=float(comb_tbl.get("eta", 1e-2)),
            K=int(comb_tbl.get("K", 10)),
            ridge_lambda=float(comb_tbl.get("ridge_lambda", 1e-6)),
            clamp_eps=float(comb_tbl.get("clamp_eps", 1e-6)),
            bias_lr=float(comb_tbl.get("bias_lr", 1e-3)),
            bias_hidden=int(comb_tbl.get("bias_hidden", 32)),
            loss_rescale=bool(comb_tbl.get("loss_rescale", True)),
        )
        run_tbl = doc.get("run", {})
        seeds = [int(s) for s in run_tbl.get("seeds", [0])]
        config = {
            "dataset": dataset,
            "stream": stream,
            "forecasters": forecasters,
            "combiner": combiner,
            "seeds": seeds,
            "output_dir": run_tbl.get("output_dir", "reports"),
            "horizons": [int(h) for h in run_tbl.get("horizons", [])],
        }
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    if not seeds:
        raise ConfigError("at least one seed is required")
    scenario = dataset.get("scenario")
    if not forecasters and scenario != "switch-experts":
        raise ConfigError("at least one forecaster is required")
    if "path" not in dataset and scenario is None:
        raise ConfigError("dataset needs either a path or a scenario")
    return config


# ---------------------------------------------------------------------------
# report serialization


def report_to_dict(report):
    out = {
        "config": report.config,
        "seed": report.seed,
        "rounds": report.rounds,
        "mse": report.mse,
        "mae": report.mae,
        "mse_curve": list(map(float, report.mse_curve)),
        "mae_curve": list(map(float, report.mae_curve)),
        "cum_mse_curve": list(map(float, report.cum_mse_curve)),
        "cum_mae_curve": list(map(float, report.cum_mae_curve)),
        "weights": np.asarray(report.weights).tolist(),
        "regret": report.regret,
        "wall_time": report.wall_time,
        "update_events": report.update_events,
        "warnings": list(report.warnings),
    }
    if report.ledger is not None:
        out["ledger"] = {
            "losses": report.ledger.loss_matrix().tolist(),
            "weights": report.ledger.weight_matrix().tolist(),
        }
    return out


def save_report(report, path):
    with open(path, "w") as fh:
        json.dump(report_to_dict(report) if not isinstance(report, dict) else report,
                  fh, indent=1, sort_keys=True)


def load_report(path):
    with open(path) as fh:
        return json.load(fh)


def ledger_from_report(doc):
    led = doc.get("ledger")
    if led is None:
        raise ConfigError("report has no ledger section")
    losses = np.asarray(led["losses"])
    weights = np.asarray(led["weights"])
    ledger = LossLedger(losses.shape[1])
    for w, l in zip(weights, losses):
        ledger.record(w, l)
    return ledger


# ---------------------------------------------------------------------------
# experiment execution


def _load_series(dataset_tbl, seed):
    if "path" in dataset_tbl:
        ds = data_mod.load_csv(dataset_tbl["path"])
        return ds.values
    spec = data_mod.SynthSpec(
        scenario=dataset_tbl.get("scenario", "piecewise-ar"),
        T_total=int(dataset_tbl.get("T_total", 1000)),
        M=int(dataset_tbl.get("M", 4)),
        boundaries=list(dataset_tbl.get("boundaries", [])),
        noise_sigma=float(dataset_tbl.get("noise_sigma", 0.1)),
        seed=int(dataset_tbl.get("seed", seed)),
        ar_coefs=dataset_tbl.get("ar_coefs", [[0.6, 0.2], [0.2]]),
        coupling=dataset_tbl.get("coupling", [0.0, 0.6]),
        freqs=dataset_tbl.get("freqs", [1.0, 2.0]),
        phases=dataset_tbl.get("phases", [0.0, 0.0]),
    )
    return data_mod.generate(spec).values


def run_one_cell(config, seed, H=None):
    """One (seed, horizon) experiment; returns a RunReport."""
    stream = config["stream"]
    if H is not None and H != stream.H:
        stream = StreamConfig(L=stream.L, H=H, warmup_ratio=stream.warmup_ratio,
                              delayed_feedback=stream.delayed_feedback,
                              warmup_pretrain=stream.warmup_pretrain)
    stream.seed = seed
    dataset_tbl = config["dataset"]

    if dataset_tbl.get("scenario") == "switch-experts":
        T = int(dataset_tbl.get("T_total", 100))
        boundary = int(dataset_tbl.get("boundary", T // 2))
        scenario = data_mod.gen_switch(T=T, boundary=boundary)
        rng = make_rng(seed, 99)
        combiner = build_combiner(config["combiner"], M=1, d=2, H=1, L=1, rng=rng)
        metrics, ledger, weight_log = run_fixed_experts(
            scenario.preds, scenario.targets, combiner)
        from .stream import RunReport
        return RunReport(
            config={"scenario": "switch-experts", "T": T, "boundary": boundary,
                    "combiner": config["combiner"].kind, "experts": ["const-0", "const-1"],
                    "L": 1, "H": 1},
            seed=seed, rounds=metrics.count,
            mse=metrics.final_mse(), mae=metrics.final_mae(),
            mse_curve=metrics.mse, mae_curve=metrics.mae,
            cum_mse_curve=metrics.cum_mse, cum_mae_curve=metrics.cum_mae,
            weights=weight_log,
            regret=build_report(ledger).to_dict(),
            wall_time=0.0, update_events=metrics.count, ledger=ledger)

    raw = _load_series(dataset_tbl, seed)
    _, warm, online, warnings = split_and_normalize(raw, stream)
    M = raw.shape[0]
    experts = [build_forecaster(fspec, M, stream.L, stream.H, make_rng(seed, 10 + i))
               for i, fspec in enumerate(config["forecasters"])]
    combiner = build_combiner(config["combiner"], M=M, d=len(experts),
                              H=stream.H, L=stream.L, rng=make_rng(seed, 50))
    report = run_online(experts, combiner, online, stream, warmup_windows=warm)
    report.warnings = warnings
    return report


def cmd_run(args):
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(args.out or config["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = [args.seed] if args.seed is not None else config["seeds"]
    horizons = config["horizons"] or [config["stream"].H]
    try:
        cells = []
        for H in horizons:
            per_seed = []
            for seed in seeds:
                report = run_one_cell(config, seed, H=H)
                name = f"report_H{H}_seed{seed}.json"
                save_report(report, out_dir / name)
                per_seed.append((seed, name, report))
                if not args.quiet:
                    print(f"H={H} seed={seed}: mse={report.mse:.6f} mae={report.mae:.6f} "
                          f"rounds={report.rounds}")
            cells.append((H, per_seed))
    except Exception as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    summary = {"cells": []}
    for H, per_seed in cells:
        mses = [r.mse for _, _, r in per_seed]
        maes = [r.mae for _, _, r in per_seed]
        summary["cells"].append({
            "H": H,
            "seeds": [s for s, _, _ in per_seed],
            "reports": [n for _, n, _ in per_seed],
            "mse_mean": float(np.mean(mses)), "mse_std": float(np.std(mses)),
            "mae_mean": float(np.mean(maes)), "mae_std": float(np.std(maes)),
        })
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    if not args.quiet:
        for cell in summary["cells"]:
            print(f"H={cell['H']}: mse {cell['mse_mean']:.6f} +/- {cell['mse_std']:.6f}, "
                  f"mae {cell['mae_mean']:.6f} +/- {cell['mae_std']:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# plot data


def emit_plotdata(doc, kind, out_path):
    if kind not in PLOT_KINDS:
        raise ConfigError(f"unknown plot kind {kind!r}; valid: {', '.join(PLOT_KINDS)}")
    rows = [("round", "series", "value")]
    if kind == "weights":
        weights = np.asarray(doc["weights"])  # (T, M, d)
        T, M, d = weights.shape
        for t in range(T):
            for j in range(M):
                for i in range(d):
                    rows.append((t + 1, f"v{j}_expert{i}", weights[t, j, i]))
    elif kind == "cum-mse":
        for t, v in enumerate(doc["cum_mse_curve"], start=1):
            rows.append((t, "cum_mse", v))
    else:  # regret
        ledger = ledger_from_report(doc)
        L = ledger.loss_matrix()
        W = ledger.weight_matrix()
        T, d = L.shape
        combined = np.cumsum((W * L).sum(axis=1))
        cum_losses = np.cumsum(L, axis=0)
        running_internal = []
        wl = np.cumsum(W * L, axis=0)
        cross = np.zeros((d, d))
        for t in range(T):
            cross += np.outer(W[t], L[t])
            pair = wl[t][:, None] - cross
            np.fill_diagonal(pair, -np.inf)
            running_internal.append(pair.max())
        for t in range(T):
            rows.append((t + 1, "external_regret",
                         float(combined[t] - cum_losses[t].min())))
            if d >= 2:  # internal regret is undefined for a single expert
                rows.append((t + 1, "internal_regret", float(running_internal[t])))
    with open(out_path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)


def cmd_plotdata(args):
    try:
        doc = load_report(args.report)
        emit_plotdata(doc, args.kind, args.out or f"{args.kind}.csv")
    except (ConfigError, OSError, KeyError) as exc:
        print(f"plotdata error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare


def compare_reports(docs, metric):
    if metric not in VALID_METRICS:
        raise ConfigError(f"unknown metric {metric!r}; valid: {', '.join(VALID_METRICS)}")
    if len(docs) < 2:
        raise ConfigError("need at least two reports to compare")
    keys = ("L", "H")
    base = {k: docs[0]["config"].get(k) for k in keys}
    for doc in docs[1:]:
        if {k: doc["config"].get(k) for k in keys} != base:
            raise ConfigError("reports have mismatched stream configs")
    values = [float(doc[metric]) for doc in docs]
    best = min(values)
    lines = []
    header = []
    row = []
    for doc, v in zip(docs, values):
        label = f"{doc['config'].get('combiner', '?')}/s{doc.get('seed')}"
        marker = "*" if np.isclose(v, best, rtol=0, atol=1e-12) else " "
        header.append(label)
        row.append(f"{v:.6f}{marker}")
    width = max(len(c) for c in header + row) + 2
    lines.append("".join(c.rjust(width) for c in [metric] + header))
    lines.append("".join(c.rjust(width) for c in [""] + row))
    return "\n".join(lines)


def cmd_compare(args):
    try:
        docs = [load_report(p) for p in args.reports]
        print(compare_reports(docs, args.metric))
    except (ConfigError, OSError) as exc:
        print(f"compare error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args):
    try:
        boundaries = [int(b) for b in args.boundary]
        n = len(boundaries) + 1

        def cycle(lst):
            # stretch the default per-regime settings to the regime count
            return [lst[i % len(lst)] for i in range(n)]

        spec = data_mod.SynthSpec(
            scenario=args.scenario, T_total=args.T, M=args.M,
            boundaries=boundaries,
            noise_sigma=args.noise, seed=args.seed or 0,
            ar_coefs=cycle([[0.6, 0.2], [0.2]]), coupling=cycle([0.0, 0.6]),
            freqs=cycle([1.0, 2.0]), phases=cycle([0.0, 0.0]))
        ds = data_mod.generate(spec)
        data_mod.save_csv(ds, args.out or f"{args.scenario}.csv")
    except data_mod.DataError as exc:
        print(f"synth error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def _add_common(parser, suppress=False):
    # the common flags are accepted before or after the subcommand; the
    # subcommand-level copies use SUPPRESS so they never clobber values
    # given at the top level
    kw = {"default": argparse.SUPPRESS} if suppress else {"default": None}
    parser.add_argument("--seed", type=int, help="override config seeds", **kw)
    parser.add_argument("--out", help="output directory or file", **kw)
    if suppress:
        parser.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)
    else:
        parser.add_argument("--quiet", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="driftens",
                                     description="online ensemble forecasting experiments")
    _add_common(parser)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("--config", required=True)
    _add_common(p_run, suppress=True)
    p_run.set_defaults(func=cmd_run)

    p_plot = sub.add_parser("plotdata", help="emit plottable CSV from a report")
    p_plot.add_argument("report")
    p_plot.add_argument("--kind", required=True)
    _add_common(p_plot, suppress=True)
    p_plot.set_defaults(func=cmd_plotdata)

    p_cmp = sub.add_parser("compare", help="tabulate metrics across reports")
    p_cmp.add_argument("reports", nargs="+")
    p_cmp.add_argument("--metric", default="mse")
    _add_common(p_cmp, suppress=True)
    p_cmp.set_defaults(func=cmd_compare)

    p_synth = sub.add_parser("synth", help="write a synthetic dataset CSV")
    p_synth.add_argument("--scenario", default="piecewise-ar")
    p_synth.add_argument("--T", type=int, default=1000)
    p_synth.add_argument("--M", type=int, default=4)
    p_synth.add_argument("--boundary", nargs="*", default=[])
    p_synth.add_argument("--noise", type=float, default=0.1)
    _add_common(p_synth, suppress=True)
    p_synth.set_defaults(func=cmd_synth)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
