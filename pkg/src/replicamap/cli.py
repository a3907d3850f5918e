"""Command-line front end.

    replicamap predict  <file|preset> [--out-dir D] [--workers N]
    replicamap simulate <file|preset> [--out-dir D] [--workers N] [--seed S]
    replicamap compare  <a.csv> <b.csv> [--tolerance-db X] [--out-dir D]
    replicamap presets list | show <name>

Exit codes: 0 success, 1 config or input error, 2 a solve did not converge,
3 comparison outside tolerance.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import experiments as ex
from .experiments import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_COMPARE = 0, 1, 2, 3
COMPARE_COLUMNS = ("median_se_db", "signal_se_db", "se_db")

log = logging.getLogger("replicamap")


def format_value(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def render_csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([format_value(r[c]) for c in columns])
    return buf.getvalue()


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_csv(path: Path) -> tuple[list[str], list[dict]]:
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
            return list(reader.fieldnames or []), rows
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc


def load_experiments(source: str) -> list[ex.Experiment]:
    p = Path(source)
    if p.is_file():
        return ex.parse_experiment_file(p.read_text(encoding="utf-8"), str(p))
    if source in ex.preset_names():
        return ex.load_preset(source)
    raise ConfigError(f"{source}: no such file or preset (see 'presets list')")


def _predict_task(args):
    exp, value = args
    return ex.predict_point(exp, value)[0]


def cmd_predict(args) -> int:
    exps = load_experiments(args.file)
    out_dir = Path(args.out_dir)
    failed = 0
    for exp in exps:
        tasks = [(exp, v) for v in exp.sweep_values]
        if args.workers > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=args.workers) as pool:
                rows = list(pool.map(_predict_task, tasks))
        else:
            rows = [_predict_task(t) for t in tasks]
        for v, r in zip(exp.sweep_values, rows):
            r[exp.sweep_parameter] = v
            if r["status"] != "ok":
                failed += 1
                log.error("%s: %s=%s %s", exp.name, exp.sweep_parameter, format_value(v), r["status"])
        path = out_dir / exp.outputs["predict"]
        write_atomic(path, render_csv((exp.sweep_parameter,) + ex.PREDICT_COLUMNS, rows))
        print(f"wrote {path} ({len(rows)} rows)")
    return EXIT_SOLVER if failed else EXIT_OK


def cmd_simulate(args) -> int:
    exps = [e for e in load_experiments(args.file) if e.montecarlo is not None]
    if not exps:
        raise ConfigError(f"{args.file}: no experiment has a montecarlo section")
    out_dir = Path(args.out_dir)
    failed = 0
    for exp in exps:
        p = exp.sweep_parameter
        rows, trials, cdf = [], [], []
        for v in exp.sweep_values:
            pt = ex.simulate_point(exp, v, workers=args.workers, seed=args.seed)
            pt.row[p] = v
            rows.append(pt.row)
            trials += [{p: v, **t} for t in pt.trials]
            cdf += [{p: v, **c} for c in pt.cdf]
            if pt.row["status"] != "ok":
                failed += 1
                log.error("%s: %s=%s %s", exp.name, p, format_value(v), pt.row["status"])
        outputs = [
            ("simulate", ex.SIMULATE_COLUMNS, rows),
            ("trials", ex.TRIAL_COLUMNS, trials),
            ("cdf", ex.CDF_COLUMNS, cdf),
        ]
        for metric, cols, data in outputs:
            if metric in exp.outputs:
                path = out_dir / exp.outputs[metric]
                write_atomic(path, render_csv((p,) + cols, data))
                print(f"wrote {path} ({len(data)} rows)")
    return EXIT_SOLVER if failed else EXIT_OK


def _metric_column(fields: list[str], path) -> str:
    for c in COMPARE_COLUMNS:
        if c in fields:
            return c
    raise ConfigError(f"{path}: none of the columns {', '.join(COMPARE_COLUMNS)} present")


def _keyed(path) -> tuple[str, str, dict]:
    fields, rows = read_csv(path)
    if not fields:
        raise ConfigError(f"{path}: empty file")
    key, col = fields[0], _metric_column(fields, path)
    table = {}
    for i, r in enumerate(rows, start=2):
        try:
            k = float(r[key])
            val = float(r[col])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}:{i}: unreadable value ({exc})") from exc
        if k in table:
            raise ConfigError(f"{path}:{i}: duplicate sweep value {r[key]}")
        table[k] = val
    return key, col, table


def compare_tables(a_path, b_path, tolerance_db: float) -> tuple[list[dict], dict]:
    key_a, col_a, a = _keyed(a_path)
    key_b, col_b, b = _keyed(b_path)
    if key_a != key_b:
        raise ConfigError(f"sweep parameters differ: {key_a!r} vs {key_b!r}")
    unmatched = sorted(set(a) ^ set(b))
    if unmatched:
        raise ConfigError("sweep grids differ; unmatched points: " + ", ".join(format_value(v) for v in unmatched))
    rows, failures, max_gap = [], [], 0.0
    for k in sorted(a):
        gap = abs(a[k] - b[k]) if math.isfinite(a[k]) and math.isfinite(b[k]) else math.inf
        ok = gap <= tolerance_db
        max_gap = max(max_gap, gap)
        rows.append({key_a: k, "a": a[k], "b": b[k], "gap_db": gap, "pass": int(ok)})
        if not ok:
            failures.append(k)
    summary = {
        "sweep_parameter": key_a,
        "column_a": col_a,
        "column_b": col_b,
        "tolerance_db": tolerance_db,
        "max_gap_db": max_gap,
        "points": len(rows),
        "failures": failures,
    }
    return rows, summary


def cmd_compare(args) -> int:
    rows, summary = compare_tables(Path(args.a), Path(args.b), args.tolerance_db)
    out_dir = Path(args.out_dir)
    key = summary["sweep_parameter"]
    write_atomic(out_dir / "compare.csv", render_csv((key, "a", "b", "gap_db", "pass"), rows))
    text = json.dumps(summary, indent=2, sort_keys=True) + "\n"
    write_atomic(out_dir / "compare.json", text)
    sys.stdout.write(text)
    return EXIT_COMPARE if summary["failures"] else EXIT_OK


def cmd_presets(args) -> int:
    if args.action == "list":
        for name in ex.preset_names():
            print(f"{name}\t{ex.preset_description(name)}")
        return EXIT_OK
    if not args.name:
        raise ConfigError("presets show: need a preset name")
    sys.stdout.write(ex.preset_text(args.name))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="replicamap", description="Replica predictions and Monte Carlo checks.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out-dir", default=".", help="directory for output files")
        p.add_argument("--workers", type=int, default=1, help="worker processes")

    p = sub.add_parser("predict", help="solve fixed points over each sweep")
    p.add_argument("file", help="experiment JSON file or preset name")
    common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("simulate", help="run the Monte Carlo sections")
    p.add_argument("file", help="experiment JSON file or preset name")
    common(p)
    p.add_argument("--seed", type=int, default=None, help="override every master_seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="join two result tables by sweep value")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--tolerance-db", type=float, default=0.5)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("presets", help="list or show bundled presets")
    p.add_argument("action", choices=("list", "show"))
    p.add_argument("name", nargs="?")
    p.set_defaults(func=cmd_presets)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    if getattr(args, "seed", None) is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be a 64-bit unsigned integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
