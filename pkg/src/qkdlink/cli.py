"""Command-line entry point.

Errors are reported as a single JSON object on stderr with a nonzero exit
code, so scripts can tell failure kinds apart.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, load_config
from .finite_key import SecurityParams, SiftedCounts, key_rate_report
from .harness import TABLE_HEADER, feedback_bench, simulate, sync_bench, sync_bench_csv, table_row
from .optics import IntensitySetting

COUNT_FIELDS = ("n_z_mu", "n_z_nu", "n_x_mu", "n_x_nu", "m_z_mu", "m_z_nu", "m_x_mu", "m_x_nu")
REQUIRED = COUNT_FIELDS + ("t", "mu", "nu", "p_mu", "p_z")
OPTIONAL = ("eps_sec", "eps_cor", "f_ec", "description", "length_km", "loss_db")


class SchemaError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def read_counts_file(path) -> dict:
    """Load a counts record from JSON (an object) or CSV (header plus one row)."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".csv":
        rows = list(csv.DictReader(line for line in text.splitlines() if not line.startswith("#")))
        if len(rows) != 1:
            raise SchemaError([f"expected exactly one data row, found {len(rows)}"])
        return {k.strip(): v.strip() for k, v in rows[0].items() if k}
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError([f"invalid JSON at line {exc.lineno}: {exc.msg}"]) from None
    if not isinstance(data, dict):
        raise SchemaError(["top level must be an object"])
    return data


def validate_counts(data: dict):
    """Check every field and report all problems at once."""
    problems = []
    values = {}
    for key in REQUIRED:
        if key not in data:
            problems.append(f"{key}: missing")
    for key in data:
        if key not in REQUIRED and key not in OPTIONAL:
            problems.append(f"{key}: unknown field")
    for key in REQUIRED + OPTIONAL[:3] + OPTIONAL[4:]:
        if key not in data:
            continue
        raw = data[key]
        try:
            if isinstance(raw, bool):
                raise ValueError
            val = float(raw)
        except (TypeError, ValueError):
            problems.append(f"{key}: not a number ({raw!r})")
            continue
        if key in COUNT_FIELDS:
            if val != int(val) or val < 0:
                problems.append(f"{key}: must be a non-negative integer")
                continue
            val = int(val)
        values[key] = val
    for b in "zx":
        for k in ("mu", "nu"):
            n, m = values.get(f"n_{b}_{k}"), values.get(f"m_{b}_{k}")
            if n is not None and m is not None and m > n:
                problems.append(f"m_{b}_{k}: exceeds n_{b}_{k}")
    if "t" in values and not values["t"] > 0:
        problems.append("t: must be positive")
    if "mu" in values and "nu" in values and not values["mu"] > values["nu"] > 0:
        problems.append("mu, nu: need mu > nu > 0")
    for key in ("p_mu", "p_z"):
        if key in values and not 0 < values[key] < 1:
            problems.append(f"{key}: must lie in (0, 1)")
    if problems:
        raise SchemaError(problems)
    counts = SiftedCounts(**{k: values[k] for k in COUNT_FIELDS}, t=values["t"])
    it = IntensitySetting(values["mu"], values["nu"], values["p_mu"], values["p_z"])
    return counts, it, values


def keyrate_from_file(path, eps_sec=None, eps_cor=None, f_ec=None) -> dict:
    data = read_counts_file(path)
    counts, it, values = validate_counts(data)
    sec = {"eps_sec": values.get("eps_sec"), "eps_cor": values.get("eps_cor"), "f_ec": values.get("f_ec")}
    for key, override in (("eps_sec", eps_sec), ("eps_cor", eps_cor), ("f_ec", f_ec)):
        if override is not None:
            sec[key] = override
    params = SecurityParams(**{k: v for k, v in sec.items() if v is not None})
    report = key_rate_report(counts, it, params)
    out = report.to_dict()
    length = float(data.get("length_km", 0.0))
    loss = float(data.get("loss_db", 0.0))
    out["table_header"] = ",".join(TABLE_HEADER)
    out["table_row"] = table_row(report, length, loss, it)
    out["security"] = dataclasses.asdict(params)
    return out


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    summary = simulate(cfg)
    _emit({k: summary[k] for k in ("name", "seed", "n_blocks", "qber", "keyrate", "sync", "table_row")}
          | {"output_dir": cfg.output_dir})
    return 0


def cmd_keyrate(args) -> int:
    result = keyrate_from_file(args.counts, args.eps_sec, args.eps_cor, args.f_ec)
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_sync_bench(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    trials = sync_bench(cfg, args.trials)
    text = sync_bench_csv(trials)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_feedback_bench(args) -> int:
    cfg = load_config(args.config)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, output_dir=args.out)
    _emit(feedback_bench(cfg))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qkdlink", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run the end-to-end link simulation")
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--out", help="output directory (default: output_dir from the config)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("keyrate", help="finite-key rate from a counts file")
    p.add_argument("--counts", required=True, help="JSON or CSV counts file")
    p.add_argument("--eps-sec", type=float)
    p.add_argument("--eps-cor", type=float)
    p.add_argument("--f-ec", type=float)
    p.add_argument("--out", help="also write the report here")
    p.set_defaults(func=cmd_keyrate)

    p = sub.add_parser("sync-bench", help="Monte Carlo synchronization benchmark")
    p.add_argument("--config", required=True)
    p.add_argument("--trials", type=int, default=50, help="seeds per loss point")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="also write the CSV here")
    p.set_defaults(func=cmd_sync_bench)

    p = sub.add_parser("feedback-bench", help="paired feedback on/off drift traces")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_feedback_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SchemaError as exc:
        err = {"error": "schema", "problems": exc.problems}
    except ConfigError as exc:
        err = {"error": "config", "message": str(exc)}
    except FileNotFoundError as exc:
        err = {"error": "io", "message": f"{exc.filename}: not found"}
    except (ValueError, RuntimeError, OSError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
    sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
    return 2


if __name__ == "__main__":
    sys.exit(main())
