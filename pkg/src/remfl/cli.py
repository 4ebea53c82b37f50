"""Operator entry point: gen-data, partition, train, sweep, report.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.
Run configuration is a flat key=value file (see ``train --print-config``);
unknown keys are rejected.  Every run directory gets a manifest recording
the configuration and its hash.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import logging
import os
import sys

import numpy as np

from . import data as dat
from . import federation as fed
from . import metrics as met
from . import nn

log = logging.getLogger("remfl")

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3

ABLATIONS = {
    "no-split-head": ("split_head", False),
    "no-periodic-sync": ("periodic_sync", False),
    "no-topk": ("topk", False),
    "no-quantization": ("quantization", False),
    "no-ema": ("ema", False),
}

_BOOL_KEYS = {"ema", "split_head", "periodic_sync", "topk", "quantization",
              "resync_every_round", "size_weighted"}
_INT_KEYS = {"rounds", "local_epochs", "sync_period", "batch_size", "seed",
             "hidden1", "hidden2", "latent", "head_hidden"}
_FLOAT_KEYS = {"sparsity", "client_fraction", "ema_beta", "lr", "huber_delta",
               "dropout"}
_STR_KEYS = {"mode", "head", "precision"}
CONFIG_KEYS = _BOOL_KEYS | _INT_KEYS | _FLOAT_KEYS | _STR_KEYS


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {v!r}")


def load_config_file(path) -> dict:
    values = {}
    unknown = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, raw = line.partition("=")
            key = key.strip()
            raw = raw.strip()
            if key not in CONFIG_KEYS:
                unknown.append(key)
                continue
            if key in _BOOL_KEYS:
                values[key] = _parse_bool(raw)
            elif key in _INT_KEYS:
                values[key] = int(raw)
            elif key in _FLOAT_KEYS:
                values[key] = float(raw)
            else:
                values[key] = raw
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return values


def config_items(cfg: fed.RunConfig):
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        yield f.name, v


def write_manifest(cfg: fed.RunConfig, path, extra=()):
    lines = [f"{k}={v}" for k, v in config_items(cfg)]
    digest = hashlib.sha256("\n".join(lines).encode()).hexdigest()
    with open(path, "w") as f:
        for k, v in extra:
            f.write(f"{k}={v}\n")
        for line in lines:
            f.write(line + "\n")
        f.write(f"config_sha256={digest}\n")


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.size is None:
        size = 64 if args.preset == "desk" else 256
    else:
        size = args.size
    if size <= 0:
        raise UsageError("--size must be positive")
    tx = None
    if args.tx:
        tx = []
        for spec in args.tx:
            r, _, c = spec.partition(",")
            tx.append((float(r), float(c)))
    cfg = dat.SyntheticMapConfig(
        seed=args.seed, width=size, height=size, n_bs=args.bs,
        n_features=args.features, tx_positions=tx,
        obstacle_density=args.obstacle_density,
        shadowing_db=args.shadowing, path_loss_exp=args.path_loss_exp)
    grid = dat.generate_synthetic_map(cfg)
    dat.save_grid(grid, args.out)
    if args.csv:
        dat.save_grid_csv(grid, args.csv)
    print(f"wrote {args.out}: {grid.width}x{grid.height}, "
          f"M={grid.n_bs}, P={grid.n_features}")
    return 0


# ---------------------------------------------------------------------------
# partition
# ---------------------------------------------------------------------------

def _parse_clients(spec: str):
    r, _, c = spec.lower().partition("x")
    try:
        rows, cols = int(r), int(c)
    except ValueError:
        raise UsageError(f"bad --clients value {spec!r}, expected RxC")
    if rows < 1 or cols < 1:
        raise UsageError("client grid dimensions must be positive")
    return rows, cols


def cmd_partition(args) -> int:
    if args.scenario not in dat.SCENARIOS:
        raise UsageError(f"scenario must be one of {dat.SCENARIOS}")
    clients = args.clients or ("3x4" if args.preset == "desk" else "10x9")
    rows, cols = _parse_clients(clients)
    grid = dat.load_grid(args.map)
    field = dat.heterogeneity(grid)
    part = dat.grid_partition(grid, field, args.scenario, rows=rows,
                              cols=cols, neighbor_mix=args.mix,
                              seed=args.seed, train_frac=args.train_frac,
                              per_bs=args.per_bs)
    dat.export_partition(part, args.out)
    total = sum(c.n_train + c.n_test for c in part.clients)
    print(f"wrote {args.out}: scenario={args.scenario}, "
          f"clients={len(part.clients)}, samples={total}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def build_run_config(args) -> fed.RunConfig:
    values = {}
    if args.config:
        values.update(load_config_file(args.config))
    if args.preset == "desk":
        values.setdefault("rounds", 40)
        values.setdefault("local_epochs", 1)
    overrides = {
        "mode": args.mode, "rounds": args.rounds, "seed": args.seed,
        "local_epochs": args.epochs, "sync_period": args.sync_period,
        "sparsity": args.rho, "client_fraction": args.fraction,
        "lr": args.lr, "batch_size": args.batch_size, "head": args.head,
    }
    for k, v in overrides.items():
        if v is not None:
            values[k] = v
    for name in args.ablate or []:
        if name not in ABLATIONS:
            raise UsageError(
                f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        key, val = ABLATIONS[name]
        values[key] = val
    try:
        return fed.RunConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc))


def _save_models(result: fed.RunResult, outdir):
    np.savez(os.path.join(outdir, "backbone.npz"),
             global_flat=result.global_flat)
    heads = {f"head_{i:03d}": nn.flatten_head(h)
             for i, h in enumerate(result.heads)}
    np.savez(os.path.join(outdir, "heads.npz"), **heads)


def _run_and_export(partition, cfg, outdir, scenario):
    os.makedirs(outdir, exist_ok=True)
    result = fed.run_training(partition, cfg)
    fed.write_roundlog(result, scenario, os.path.join(outdir, "roundlog.csv"))
    write_manifest(cfg, os.path.join(outdir, "manifest.txt"),
                   extra=[("scenario", scenario)])
    _save_models(result, outdir)
    return result


def cmd_train(args) -> int:
    cfg = build_run_config(args)
    if args.print_config:
        for k, v in config_items(cfg):
            print(f"{k}={v}")
        return 0
    if not args.partition or not args.out:
        raise UsageError("train requires --partition and -o")
    partition = dat.load_partition(args.partition)
    result = _run_and_export(partition, cfg, args.out, partition.scenario)
    final = result.final.bundle
    print(f"mode={cfg.mode} scenario={partition.scenario} "
          f"rounds={cfg.rounds}")
    print(f"rmse_micro={final.rmse_micro:.4f} rmse_macro={final.rmse_macro:.4f} "
          f"mae_macro={final.mae_macro:.4f} "
          f"cum_uplink_mb={result.final.cum_bytes / 1e6:.4f}")
    return 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def cmd_sweep(args) -> int:
    cfg0 = build_run_config(args)
    if not args.partition or not args.out:
        raise UsageError("sweep requires --partition and -o")
    rhos = [float(v) for v in args.rho_grid.split(",")]
    periods = [int(v) for v in args.period_grid.split(",")]
    quants = [_parse_bool(v) for v in args.quant_grid.split(",")]
    if not rhos or not periods or not quants:
        raise UsageError("empty sweep grid")
    partition = dat.load_partition(args.partition)
    os.makedirs(args.out, exist_ok=True)
    points = []
    for rho in rhos:
        for period in periods:
            for quant in quants:
                label = f"rho{rho:g}_R{period}_q{'on' if quant else 'off'}"
                cfg = dataclasses.replace(
                    cfg0, sparsity=rho, sync_period=period,
                    quantization=quant,
                    topk=rho < 1.0 or cfg0.topk)
                try:
                    result = _run_and_export(
                        partition, cfg, os.path.join(args.out, label),
                        partition.scenario)
                except Exception as exc:  # keep sweeping past bad cells
                    log.warning("sweep cell %s failed: %s", label, exc)
                    continue
                points.append(met.ParetoPoint(
                    label, result.final.bundle.rmse_macro,
                    result.final.cum_bytes / 1e6))
                print(f"{label}: rmse_macro={points[-1].rmse_macro:.4f} "
                      f"mb={points[-1].uplink_mb:.4f}")
    if not points:
        raise RuntimeError("every sweep cell failed")
    met.write_pareto_csv(points, os.path.join(args.out, "pareto.csv"))
    print(f"wrote {os.path.join(args.out, 'pareto.csv')} "
          f"({len(points)} points)")
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

_REPORT_COLS = ["rmse_micro", "rmse_macro", "mae_macro", "cum_uplink_mb"]


def cmd_report(args) -> int:
    rows = []
    for rundir in args.runs:
        logpath = os.path.join(rundir, "roundlog.csv")
        try:
            header, entries = fed.read_roundlog(logpath)
        except OSError as exc:
            log.warning("skipping %s: %s", rundir, exc)
            continue
        if not entries:
            log.warning("skipping %s: empty round log", rundir)
            continue
        for col in ("scenario", "mode", *_REPORT_COLS):
            if col not in header:
                raise dat.IngestionError(
                    f"{logpath}: missing column {col!r}")
        last = entries[-1]
        rows.append({
            "scenario": last["scenario"], "mode": last["mode"],
            **{c: float(last[c]) for c in _REPORT_COLS}})
    if not rows:
        raise dat.IngestionError("no readable run directories")
    rows.sort(key=lambda r: (r["scenario"], r["mode"]))
    header = ["scenario", "mode"] + _REPORT_COLS
    fmt = "{:<8} {:<8} {:>12} {:>12} {:>12} {:>14}"
    print(fmt.format(*header))
    for r in rows:
        print(fmt.format(r["scenario"], r["mode"],
                         f"{r['rmse_micro']:.4f}", f"{r['rmse_macro']:.4f}",
                         f"{r['mae_macro']:.4f}",
                         f"{r['cum_uplink_mb']:.4f}"))
    if args.out:
        with open(args.out, "w") as f:
            f.write(",".join(header) + "\n")
            for r in rows:
                f.write(",".join([r["scenario"], r["mode"]]
                                 + [repr(r[c]) for c in _REPORT_COLS]) + "\n")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_train_flags(p):
    p.add_argument("--partition", help="partition directory")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--mode", choices=["pfl", "epfl", "fedavg"])
    p.add_argument("--rounds", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--sync-period", type=int, dest="sync_period")
    p.add_argument("--rho", type=float)
    p.add_argument("--fraction", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--head", choices=["single", "two-layer"])
    p.add_argument("--seed", type=int)
    p.add_argument("--ablate", action="append",
                   help="disable a component: " + ", ".join(sorted(ABLATIONS)))
    p.add_argument("--preset", choices=["desk"])
    p.add_argument("-o", "--out", help="run directory")


def build_parser() -> _Parser:
    parser = _Parser(prog="remfl",
                     description="Federated radio-map training harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic radio map")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, help="square grid side (default 256)")
    p.add_argument("--bs", type=int, default=4, help="number of base stations")
    p.add_argument("--features", type=int, default=100)
    p.add_argument("--obstacle-density", type=float, default=0.05)
    p.add_argument("--shadowing", type=float, default=6.0)
    p.add_argument("--path-loss-exp", type=float, default=3.0)
    p.add_argument("--tx", action="append", help="transmitter 'row,col'")
    p.add_argument("--preset", choices=["desk"])
    p.add_argument("--csv", help="also write the debug CSV form")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("partition", help="build a Non-IID client partition")
    p.add_argument("map", help="REMG1 grid file")
    p.add_argument("--scenario", required=True,
                   choices=list(dat.SCENARIOS))
    p.add_argument("--clients", help="client grid RxC (default 10x9)")
    p.add_argument("--mix", type=float, default=0.1,
                   help="neighbor-mix fraction")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--per-bs", action="store_true",
                   help="per-base-station label standardization")
    p.add_argument("--preset", choices=["desk"])
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("train", help="run one federated training")
    _add_train_flags(p)
    p.add_argument("--print-config", action="store_true",
                   help="print the effective config and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="grid sweep emitting a Pareto CSV")
    _add_train_flags(p)
    p.add_argument("--rho-grid", default="0.005,0.01,0.05,1.0",
                   dest="rho_grid")
    p.add_argument("--period-grid", default="5", dest="period_grid")
    p.add_argument("--quant-grid", default="on", dest="quant_grid")
    p.set_defaults(func=cmd_sweep, print_config=False)

    p = sub.add_parser("report", help="summarize completed runs")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("-o", "--out", help="write the table as CSV")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (dat.IngestionError, dat.ConfigError, dat.DegenerateClientError,
            FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # pragma: no cover - defensive
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
