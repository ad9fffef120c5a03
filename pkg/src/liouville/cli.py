"""Command-line driver: ``liouville <experiment> [--key value ...]`` and ``liouville plotdata``."""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

from .errors import ConfigError, LiouvilleError
from .experiments import (CONFIG_FIELDS, EXPERIMENTS, ExperimentConfig, default_config,
                          run_experiment, wlsq)

LEDGER_COLUMNS = ["experiment", "digest", "kind", "gamma", "mu", "alpha", "t", "abscissa", "r",
                  "N", "mean", "std_error", "seed_base"]
TUPLE_KEYS = {"gamma", "t", "x", "b", "weights"}
INT_KEYS = {"n", "seed", "steps", "n_theta", "steps_per_unit", "cutoff", "batch", "workers"}
FLOAT_KEYS = {"mu", "alpha", "r", "lam"}


# ------------------------------------------------------------------ config parsing

def _coerce(key: str, raw: str):
    raw = raw.strip()
    try:
        if key in TUPLE_KEYS:
            return tuple(float(v) for v in raw.split(",") if v.strip())
        if key in INT_KEYS:
            return int(float(raw))
        if key in FLOAT_KEYS:
            return None if raw.lower() in ("", "none") else float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def parse_flat(text: str) -> dict:
    """Parse the flat ``key = value`` format; ``#`` starts a comment, ``threshold.<name>`` sets a verdict threshold."""
    out, thresholds = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key.startswith("threshold."):
            thresholds[key.split(".", 1)[1]] = float(value)
        elif key in CONFIG_FIELDS and key != "thresholds":
            out[key] = _coerce(key, value)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    if thresholds:
        out["thresholds"] = thresholds
    return out


def _fmt_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return "none" if v is None else str(v)


def to_flat(cfg: ExperimentConfig) -> str:
    lines = []
    for key, value in cfg.resolved().items():
        if key == "thresholds":
            lines.extend(f"threshold.{k} = {float(v)!r}" for k, v in sorted(value.items()))
        else:
            lines.append(f"{key} = {_fmt_value(value)}")
    return "\n".join(lines) + "\n"


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="liouville", description=__doc__)
    ap.add_argument("experiment", help="experiment name, 'plotdata', or 'list'")
    ap.add_argument("--config", help="flat key = value config file")
    ap.add_argument("--gamma")
    ap.add_argument("--mu")
    ap.add_argument("--alpha")
    ap.add_argument("--t")
    ap.add_argument("--x")
    ap.add_argument("--b")
    ap.add_argument("--r")
    ap.add_argument("--lam")
    ap.add_argument("--weights")
    ap.add_argument("--n")
    ap.add_argument("--seed")
    ap.add_argument("--steps")
    ap.add_argument("--n-theta", dest="n_theta")
    ap.add_argument("--steps-per-unit", dest="steps_per_unit")
    ap.add_argument("--cutoff")
    ap.add_argument("--batch")
    ap.add_argument("--workers")
    ap.add_argument("--out")
    ap.add_argument("--threshold", action="append", default=[], metavar="NAME=VALUE")
    ap.add_argument("--ledger", help="results ledger for plotdata (default <out>/ledger.csv)")
    return ap


def resolve_config(args: argparse.Namespace, env=None) -> ExperimentConfig:
    """Defaults < config file < command line < LIOUVILLE_SEED."""
    env = os.environ if env is None else env
    cfg = default_config(args.experiment)
    updates = {}
    if args.config:
        try:
            updates.update(parse_flat(Path(args.config).read_text(encoding="utf-8")))
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if updates.pop("experiment", args.experiment) != args.experiment:
            raise ConfigError("config file names a different experiment")
    for key in CONFIG_FIELDS - {"experiment", "thresholds"}:
        raw = getattr(args, key, None)
        if raw is not None:
            updates[key] = _coerce(key, raw)
    thresholds = dict(updates.pop("thresholds", {}))
    for item in args.threshold:
        if "=" not in item:
            raise ConfigError(f"--threshold expects NAME=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        thresholds[k.strip()] = float(v)
    if "LIOUVILLE_SEED" in env:
        updates["seed"] = _coerce("seed", env["LIOUVILLE_SEED"])
    cfg = replace(cfg, **updates, thresholds=thresholds)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    from .experiments import DEFAULT_THRESHOLDS
    unknown = set(cfg.thresholds) - set(DEFAULT_THRESHOLDS[cfg.experiment])
    if unknown:
        raise ConfigError(f"unknown thresholds for {cfg.experiment}: {sorted(unknown)}")
    if cfg.n < 2 or cfg.batch < 1 or cfg.workers < 1 or cfg.steps < 2:
        raise ConfigError("n >= 2, batch >= 1, workers >= 1 and steps >= 2 are required")
    if not 0 < cfg.mu or not all(0 < g < 2 for g in cfg.gamma):
        raise ConfigError("gamma must lie in (0, 2) and mu must be positive")
    if any(v <= 0 for v in cfg.t) or any(v < 0 for v in cfg.x) or any(v <= 0 for v in cfg.b):
        raise ConfigError("t and b values must be positive, x values non-negative")


# ------------------------------------------------------------------ output

def _num(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return format(v, ".17g")
    return "" if v is None else str(v)


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_num(float(v)) if hasattr(v, "dtype") else _num(v) for v in row])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "item"):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def append_ledger(path: Path, rows: list) -> None:
    new = not path.exists()
    with open(path, "a", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, LEDGER_COLUMNS, lineterminator="\n")
        if new:
            w.writeheader()
        for row in rows:
            w.writerow({k: _num(row.get(k)) for k in LEDGER_COLUMNS})


def run(cfg: ExperimentConfig, stream=None) -> int:
    """Run one experiment, write its artifacts and print the verdicts; returns the exit status."""
    stream = sys.stdout if stream is None else stream
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    digest = cfg.digest()
    result = run_experiment(cfg)
    stem = out / cfg.experiment
    write_csv(stem.with_suffix(".csv"), ["experiment", "digest", "seed_base"] + result.columns,
              [[cfg.experiment, digest, cfg.seed] + list(row) for row in result.rows])
    record = {"experiment": cfg.experiment, "digest": digest, "seed_base": cfg.seed,
              "params": cfg.resolved(), "records": result.records,
              "verdicts": [v.__dict__ for v in result.verdicts]}
    stem.with_suffix(".json").write_text(json.dumps(_jsonable(record), indent=2, sort_keys=True)
                                         + "\n", encoding="utf-8")
    (out / f"{cfg.experiment}.config.txt").write_text(to_flat(cfg), encoding="utf-8")
    (out / f"{cfg.experiment}.config.json").write_text(
        json.dumps(_jsonable(cfg.resolved()), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    append_ledger(out / "ledger.csv", [{**row, "experiment": cfg.experiment, "digest": digest,
                                        "seed_base": cfg.seed} for row in result.ledger])
    print(f"# {cfg.experiment} digest={digest} seed_base={cfg.seed}", file=stream)
    for line in result.info:
        print(line, file=stream)
    for v in result.verdicts:
        print(v.line(), file=stream)
    return 0 if result.passed else 1


# ------------------------------------------------------------------ plot data

def _float(v: str):
    return float(v) if v not in ("", None) else None


def emit_plotdata(ledger: Path, out: Path) -> list:
    """Tidy per-experiment CSV series from the results ledger; returns the files written."""
    try:
        with open(ledger, encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
    except FileNotFoundError:
        rows = []
    except OSError as exc:
        raise LiouvilleError(f"cannot read ledger {ledger}: {exc}") from exc
    out.mkdir(parents=True, exist_ok=True)
    written = []
    generic = out / "plotdata.csv"
    write_csv(generic, ["experiment", "kind", "t", "abscissa", "mean", "stderr"],
              [[r["experiment"], r["kind"], _float(r["t"]), _float(r["abscissa"]),
                _float(r["mean"]), _float(r["std_error"])] for r in rows])
    written.append(generic)
    by_exp = {}
    for r in rows:
        by_exp.setdefault(r["experiment"], []).append(r)
    for exp, items in sorted(by_exp.items()):
        path = out / f"plot_{exp}.csv"
        if exp == "slope-theorem":
            series = [(float(r["t"]), float(r["mean"]), float(r["std_error"])) for r in items]
            write_csv(path, ["t", "log_t", "log_corr", "stderr_log"],
                      [[t, math.log(t), math.log(m), se / m] for t, m, se in series])
        elif exp == "green-decay":
            series = [(float(r["t"]), float(r["mean"])) for r in items]
            write_csv(path, ["t", "sup_diff", "log_sup_diff"],
                      [[t, d, math.log(d)] for t, d in series])
            if len(series) >= 2:
                fit = wlsq([s[0] for s in series], [math.log(s[1]) for s in series])
                side = out / f"plot_{exp}.fit.json"
                side.write_text(json.dumps(_jsonable(fit), indent=2, sort_keys=True) + "\n",
                                encoding="utf-8")
                written.append(side)
        else:
            key = "abscissa" if any(r["abscissa"] for r in items) else "t"
            write_csv(path, ["kind", key, "mean", "stderr"],
                      [[r["kind"], _float(r[key]), _float(r["mean"]), _float(r["std_error"])]
                       for r in items])
        written.append(path)
    return written


# ------------------------------------------------------------------ entry point

def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] == "run":
        argv = argv[1:]
    args = build_parser().parse_args(argv)
    try:
        if args.experiment == "list":
            print("\n".join(EXPERIMENTS))
            return 0
        if args.experiment == "plotdata":
            out = Path(args.out or "results")
            ledger = Path(args.ledger) if args.ledger else out / "ledger.csv"
            for path in emit_plotdata(ledger, out / "plotdata"):
                print(f"wrote {path}")
            return 0
        return run(resolve_config(args))
    except (LiouvilleError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
