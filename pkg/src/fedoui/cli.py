"""Command-line interface.

Exit codes: 0 ok, 1 numeric failure, 2 config error, 3 dataset error,
4 no logs to report, 5 round out of range.
"""

import argparse
import csv
import hashlib
import io
import json
import logging
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from itertools import product
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .aggregation import METHODS
from .exceptions import ConfigError, DataError, NumericError
from .harness import ExperimentConfig, ExperimentLog, round_checks, run_experiment

EXIT_OK, EXIT_NUMERIC, EXIT_CONFIG, EXIT_DATA, EXIT_REPORT, EXIT_INSPECT = 0, 1, 2, 3, 4, 5

ROUNDS_COLUMNS = ("round", "test_accuracy", "mean_train_loss", "selected_ids", "oui_values",
                  "scores", "weights", "alpha", "beta", "degenerate_fit")

log = logging.getLogger("fedoui")


# ---------------------------------------------------------------------------
# Config handling


def parse_overrides(tokens):
    """``["--lr=0.1", "--rounds", "3"]`` -> ``{"lr": 0.1, "rounds": 3}``."""
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(tokens):
                raise ConfigError(f"missing value for --{key}", key.replace("-", "_"))
            value = tokens[i + 1]
            i += 1
        out[key.replace("-", "_")] = yaml.safe_load(value)
        i += 1
    return out


def read_config_file(path):
    """Flat YAML mapping, or a ``manifest.json`` written by a previous run.

    Returns ``(config_dict, data_dir_or_None)``.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a key-value mapping")
    if "resolved_config" in doc:
        return dict(doc["resolved_config"]), doc.get("data_dir")
    for key, value in doc.items():
        if isinstance(value, (dict, list)):
            raise ConfigError(f"{key}: nested values are not allowed", key)
    return doc, None


def resolve_config(path, overrides):
    base, data_dir = read_config_file(path) if path else ({}, None)
    base.update(overrides)
    return ExperimentConfig.from_dict(base), data_dir


def dump_config(config):
    return yaml.safe_dump(config.to_dict(), sort_keys=False)


# ---------------------------------------------------------------------------
# Artifacts


def _fmt(x):
    return repr(float(x))


def rounds_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROUNDS_COLUMNS)
    for r in records:
        w.writerow([
            r.round, _fmt(r.test_accuracy), _fmt(r.mean_train_loss),
            ";".join(str(c) for c in r.selected),
            ";".join(_fmt(v) for v in r.oui_values),
            ";".join(_fmt(v) for v in r.scores),
            ";".join(_fmt(v) for v in r.weights),
            "" if r.degenerate else _fmt(r.beta_fit.alpha),
            "" if r.degenerate else _fmt(r.beta_fit.beta),
            int(r.degenerate),
        ])
    return buf.getvalue()


def sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_run(out, config, result, config_path, data_dir, started):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "rounds.csv").write_text(rounds_csv(result.records))
    (out / "log.json").write_text(json.dumps(result.to_dict(), indent=1))
    manifest = {
        "config_path": str(config_path) if config_path else None,
        "resolved_config": config.to_dict(),
        "output_dir": str(out),
        "data_dir": str(data_dir) if data_dir else None,
        "started_at": started,
        "finished_at": datetime.now(timezone.utc).isoformat(),
        "checksums": {name: sha256(out / name) for name in ("rounds.csv", "log.json")},
        "versions": {"fedoui": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def execute(config, out, config_path=None, data_dir=None, n_jobs=1):
    """Run one experiment and write its artifacts; returns an exit code."""
    started = datetime.now(timezone.utc).isoformat()
    try:
        result = run_experiment(config, data_dir=data_dir, n_jobs=n_jobs)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    write_run(out, config, result, config_path, data_dir, started)
    s = result.summary
    if s["final"] is not None:
        print(f"{config.method} seed={config.seed}: final={s['final']:.4f} best={s['best']:.4f} "
              f"auc={s['auc']:.4f} -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Commands


def cmd_run(args, overrides):
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.method is not None:
        overrides["method"] = args.method
    config, manifest_data_dir = resolve_config(args.config, overrides)
    return execute(config, args.out, args.config, args.data_dir or manifest_data_dir, args.jobs)


def cell_dir(root, method, seed):
    return Path(root) / f"{method}-seed{seed}"


def cell_complete(path):
    manifest = Path(path) / "manifest.json"
    if not manifest.exists():
        return False
    try:
        sums = json.loads(manifest.read_text())["checksums"]
        return all(sha256(Path(path) / name) == digest for name, digest in sums.items())
    except (OSError, KeyError, ValueError):
        return False


def _run_cell(payload):
    config_dict, out, config_path, data_dir, n_jobs = payload
    return execute(ExperimentConfig.from_dict(config_dict), out, config_path, data_dir, n_jobs)


def _split_list(text, cast):
    return [cast(v) for v in str(text).split(",") if v.strip()]


def cmd_sweep(args, overrides):
    base, manifest_data_dir = resolve_config(args.config, overrides)
    data_dir = args.data_dir or manifest_data_dir
    methods = _split_list(args.methods, str) if args.methods else [base.method]
    seeds = _split_list(args.seeds, int) if args.seeds else [base.seed]
    cells = []
    for method, seed in product(methods, seeds):
        config = base.replace(method=method, seed=seed)
        out = cell_dir(args.out, method, seed)
        if args.resume and cell_complete(out):
            print(f"skip {out} (complete)")
            continue
        cells.append((config.to_dict(), str(out), args.config, data_dir, args.jobs))
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            codes = list(pool.map(_run_cell, cells))
    else:
        codes = [_run_cell(c) for c in cells]
    failed = [c for c in codes if c != EXIT_OK]
    return failed[0] if failed else EXIT_OK


def collect_logs(directory):
    logs = []
    for path in sorted(Path(directory).rglob("log.json")):
        try:
            doc = json.loads(path.read_text())
        except (OSError, ValueError):
            log.warning("unreadable log %s", path)
            continue
        if doc.get("summary", {}).get("final") is None:
            continue
        logs.append(doc)
    return logs


def summary_table(logs):
    """``{method: {metric: (mean, std_or_None), "n": count}}`` in canonical method order."""
    groups = {}
    for doc in logs:
        groups.setdefault(doc["config"]["method"], []).append(doc["summary"])
    order = [m for m in METHODS if m in groups] + sorted(m for m in groups if m not in METHODS)
    table = {}
    for method in order:
        rows = groups[method]
        entry = {"n": len(rows)}
        for metric in ("final", "best", "auc"):
            vals = np.array([r[metric] for r in rows], dtype=np.float64)
            std = float(vals.std(ddof=1)) if len(vals) >= 2 else None
            entry[metric] = (float(vals.mean()), std)
        table[method] = entry
    return table


def format_table(table):
    def cell(ms):
        mean, std = ms
        return f"{mean:.4f}" if std is None else f"{mean:.4f} ± {std:.4f}"

    header = ("Method", "Seeds", "Final accuracy", "Best accuracy", "Accuracy AUC")
    rows = [(m, str(e["n"]), cell(e["final"]), cell(e["best"]), cell(e["auc"])) for m, e in table.items()]
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in [header] + rows]
    return "\n".join(lines) + "\n"


def table_csv(table):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "n_seeds", "final_mean", "final_std", "best_mean", "best_std", "auc_mean", "auc_std"])
    for method, e in table.items():
        row = [method, e["n"]]
        for metric in ("final", "best", "auc"):
            mean, std = e[metric]
            row += [_fmt(mean), "" if std is None else _fmt(std)]
        w.writerow(row)
    return buf.getvalue()


def cmd_report(args, overrides):
    logs = collect_logs(args.directory)
    if not logs:
        print(f"no completed log.json found under {args.directory}", file=sys.stderr)
        return EXIT_REPORT
    table = summary_table(logs)
    text = format_table(table)
    root = Path(args.directory)
    (root / "summary.txt").write_text(text)
    (root / "summary.csv").write_text(table_csv(table))
    print(text, end="")
    return EXIT_OK


def _load_log(path):
    path = Path(path)
    if path.is_dir():
        path = path / "log.json"
    return ExperimentLog.from_dict(json.loads(path.read_text())), path


def round_rows(record, sizes):
    return [
        {"client_id": c, "n_k": sizes[c], "oui": o, "score": s, "weight": w}
        for c, o, s, w in zip(record.selected, record.oui_values, record.scores, record.weights)
    ]


def cmd_inspect_round(args, overrides):
    try:
        result, path = _load_log(args.log)
    except (OSError, ValueError, KeyError) as exc:
        print(f"cannot read log: {exc}", file=sys.stderr)
        return EXIT_INSPECT
    by_round = {r.round: r for r in result.records}
    if args.round not in by_round:
        print(f"round {args.round} not in log (rounds 1..{len(result.records)})", file=sys.stderr)
        return EXIT_INSPECT
    record = by_round[args.round]
    method = result.config["method"]
    used = method == "fedoui"
    sizes = result.meta["partition_sizes"]
    rows = round_rows(record, sizes)
    if args.format == "csv":
        w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (_fmt(v) if isinstance(v, float) else v) for k, v in row.items()})
        return EXIT_OK
    note = "" if used else f" (unused by {method})"
    print(f"round {record.round}  method {method}  test_accuracy {record.test_accuracy:.4f}")
    if record.degenerate:
        print(f"fit: degenerate{note}; all scores 1")
    else:
        check = round_checks(record, [sizes[c] for c in record.selected])
        print(f"fit: alpha={record.beta_fit.alpha:.6g} beta={record.beta_fit.beta:.6g} "
              f"median={check['median']:.6f}{note}")
    print(f"{'client':>6} {'n_k':>6} {'oui':>10} {'score' + ('' if used else '*'):>10} {'weight':>10}")
    for row in rows:
        print(f"{row['client_id']:>6} {row['n_k']:>6} {row['oui']:>10.6f} {row['score']:>10.6f} "
              f"{row['weight']:>10.6f}")
    if not used:
        print(f"* scores computed for diagnostics only; {method} weights do not use them")
    elif not record.degenerate:
        yes = {True: "yes", False: "no"}
        print(f"max per-sample weight at OUI nearest median (probability scale): {yes[check['probability']]}")
        print(f"max per-sample weight at OUI nearest median (OUI scale): {yes[check['oui']]}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="fedoui", description="Federated OUI-weighted aggregation simulator.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config or manifest.json")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--data-dir", help="CIFAR-10 directory (default $FEDOUI_DATA_DIR or ./data)")
        p.add_argument("--jobs", type=int, default=1, help="threads for client training")

    p = sub.add_parser("run", help="run one experiment")
    common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--method", choices=METHODS)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a method x seed grid")
    common(p)
    p.add_argument("--methods", help="comma-separated methods")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--resume", action="store_true", help="skip cells whose checksums verify")
    p.add_argument("--workers", type=int, default=1, help="cells run in parallel processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="summarize a sweep directory")
    p.add_argument("directory")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("inspect-round", help="show OUI values, fit, scores and weights of a round")
    p.add_argument("log", help="log.json or run directory")
    p.add_argument("round", type=int, help="round number (1-based)")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.set_defaults(func=cmd_inspect_round)
    return parser


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = parse_overrides(extra) if args.command in ("run", "sweep") else {}
        if extra and args.command not in ("run", "sweep"):
            parser.error(f"unrecognized arguments: {' '.join(extra)}")
        return args.func(args, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
