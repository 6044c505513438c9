"""Command line front end.

Three subcommands:

* ``simulate`` runs a configured grid of Monte Carlo scenarios and writes
  a results CSV plus a run manifest,
* ``predict`` fits on a training CSV and writes effect intervals for a
  CSV of probe covariate rows,
* ``report`` reshapes a results CSV into per-process panel files
  (coverage and relative length against sample size) ready for plotting.

Exit codes: 0 success, 1 runtime failure (partial results are flushed),
2 usage or configuration error. The ``ITE_LOG`` environment variable sets
verbosity (debug, info, warning, error).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .core import (
    ArmIntervalPair,
    CsvFormatError,
    Dataset,
    read_dataset_csv,
    validate_dataset,
)
from .conformal import GridSpec, full_conformal_set, split_calibration
from .ite import (
    CombineRule,
    IteMethod,
    PipelineConfig,
    arm_level,
    combine_pair,
    make_procedure,
    split_point,
)
from .predictors import TrainConfig
from .sim import Method, Scenario, SimOptions, run_experiment

log = logging.getLogger("ite_conformal")

RESULT_COLUMNS = [
    "scenario_id",
    "regression",
    "error_dist",
    "rho",
    "n",
    "method",
    "coverage",
    "coverage_se",
    "mean_rel_length",
    "frac_infinite",
    "runtime_s",
]

PREDICT_COLUMNS = [
    "lo",
    "hi",
    "arm_plus_lo",
    "arm_plus_hi",
    "arm_minus_lo",
    "arm_minus_hi",
    "degenerate",
]

REFERENCE_HEADER = "# reference lines: coverage=0.9 length=1.0"


class ConfigError(ValueError):
    """Configuration file missing, unreadable, or invalid."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

DEFAULT_CONFIG: dict[str, Any] = {
    "alpha": 0.1,
    "nonconformity": "abs",
    "sim": {
        "seed": 20260810,
        "replications": 500,
        "d": 10,
        "p_treat": 0.5,
        "n": [300, 700, 1200, 2000],
        "rho": [0.2, 0.8],
        "regression": ["F1", "F2"],
        "error_dist": ["NORMAL", "LAPLACE"],
        "methods": ["LM1", "LM2", "NN1", "NN2"],
    },
    "conformal": {
        "mode": "full",
        "split_frac": 2.0 / 3.0,
        "grid": {"step": 0.1},
    },
    "ite": {"rule": "th1b"},
    "nn": {"hidden": 10, "epochs": 500, "lr": 0.01, "batch": 32, "seed": 0},
    "kernel": {"bandwidth": 0.0},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = dict(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a table")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path: str | None) -> dict[str, Any]:
    """Defaults overlaid with the TOML file at ``path`` (if given)."""
    if path is None:
        return json.loads(json.dumps(DEFAULT_CONFIG))
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        with open(p, "rb") as fh:
            user = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {p}: {exc}") from None
    return _merge(DEFAULT_CONFIG, user)


def config_hash(payload: Any) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _fmt(v: float) -> str:
    return repr(float(v))


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _scenario_grid(cfg: dict, replications: int, master_seed: int) -> list[Scenario]:
    """All configured cells in a fixed enumeration order.

    Each cell's seed derives from the master seed and the cell's position
    in the unfiltered grid, so a filtered run reproduces exactly the rows
    of the full run.
    """
    sim = cfg["sim"]
    cells = []
    index = 0
    for regression in sim["regression"]:
        for error_dist in sim["error_dist"]:
            for rho in sim["rho"]:
                for n in sim["n"]:
                    for method in sim["methods"]:
                        seed_seq = np.random.SeedSequence(
                            entropy=int(master_seed), spawn_key=(index,)
                        )
                        cell_seed = int(seed_seq.generate_state(1, np.uint64)[0])
                        cells.append(
                            Scenario(
                                n=int(n),
                                method=Method(method),
                                regression=regression,
                                error_dist=error_dist,
                                rho=float(rho),
                                d=int(sim["d"]),
                                p_treat=float(sim["p_treat"]),
                                alpha=float(cfg["alpha"]),
                                replications=int(replications),
                                seed=cell_seed,
                            )
                        )
                        index += 1
    return cells


def scenario_id(scn: Scenario) -> str:
    return (
        f"{scn.regression.value}-{scn.error_dist.value}"
        f"-rho{scn.rho:g}-n{scn.n}-{scn.method.value}"
    )


def _parse_only(spec: str | None) -> dict[str, str]:
    if not spec:
        return {}
    out = {}
    for piece in spec.split(","):
        if "=" not in piece:
            raise ConfigError(f"--only expects key=value pairs, got {piece!r}")
        key, value = piece.split("=", 1)
        key = key.strip()
        if key not in ("method", "regression", "error_dist", "rho", "n"):
            raise ConfigError(f"--only cannot filter on {key!r}")
        out[key] = value.strip()
    return out


def _matches(scn: Scenario, only: dict[str, str]) -> bool:
    actual = {
        "method": scn.method.value,
        "regression": scn.regression.value,
        "error_dist": scn.error_dist.value,
        "rho": f"{scn.rho:g}",
        "n": str(scn.n),
    }
    return all(actual[k].lower() == v.lower() for k, v in only.items())


def _write_manifest(path: Path, payload: dict) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    master_seed = int(args.seed if args.seed is not None else cfg["sim"]["seed"])
    replications = int(
        args.replications if args.replications is not None else cfg["sim"]["replications"]
    )
    only = _parse_only(args.only)
    options = SimOptions(
        grid_step=float(cfg["conformal"]["grid"]["step"]),
        nn_hidden=int(cfg["nn"]["hidden"]),
        nn_train=TrainConfig(
            epochs=int(cfg["nn"]["epochs"]),
            lr=float(cfg["nn"]["lr"]),
            batch=int(cfg["nn"]["batch"]),
            seed=int(cfg["nn"]["seed"]),
        ),
    )
    cells = [s for s in _scenario_grid(cfg, replications, master_seed) if _matches(s, only)]
    if not cells:
        log.warning("filter %r matches no scenarios", args.only)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results_path = out_dir / "results.csv"
    manifest_path = out_dir / "manifest.json"

    runtimes: dict[str, float] = {}
    wall_start = time.time()
    with open(results_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        fh.flush()
        for i, scn in enumerate(cells, 1):
            sid = scenario_id(scn)
            log.info("scenario %d/%d: %s", i, len(cells), sid)
            result = run_experiment(scn, options, threads=args.threads)
            runtimes[sid] = result.runtime
            writer.writerow(
                [
                    sid,
                    scn.regression.value,
                    scn.error_dist.value,
                    f"{scn.rho:g}",
                    str(scn.n),
                    scn.method.value,
                    _fmt(result.coverage),
                    _fmt(result.coverage_se),
                    _fmt(result.mean_rel_length),
                    _fmt(result.frac_infinite),
                    f"{result.runtime:.3f}" if args.timings else "0.000",
                ]
            )
            fh.flush()

    manifest = {
        "tool": "ite-conformal",
        "version": __version__,
        "config_hash": config_hash(
            {"config": cfg, "only": only, "replications": replications, "timings": args.timings}
        ),
        "seed": master_seed,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(wall_start)),
        "outputs": [str(results_path)],
        "scenario_runtimes_s": {k: round(v, 3) for k, v in runtimes.items()},
    }
    _write_manifest(manifest_path, manifest)
    print(f"wrote {results_path} ({len(cells)} scenarios) and {manifest_path}")
    return 0


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------


def _read_probes(path: str, d: int) -> np.ndarray:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CsvFormatError(f"{path}: empty file, expected a header row")
    header = [h.strip() for h in rows[0]]
    expected = [f"x{j + 1}" for j in range(d)]
    if header != expected:
        raise CsvFormatError(f"{path}: probe header must be {','.join(expected)}")
    probes = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != d:
            raise CsvFormatError(f"{path}:{lineno}: expected {d} fields, got {len(row)}")
        try:
            probes.append([float(v) for v in row])
        except ValueError as exc:
            raise CsvFormatError(f"{path}:{lineno}: {exc}") from None
    return np.array(probes, dtype=float).reshape(len(probes), d)


def _pipeline_from_args(args: argparse.Namespace, cfg: dict) -> tuple[PipelineConfig, IteMethod]:
    alpha = float(args.alpha if args.alpha is not None else cfg["alpha"])
    rule = CombineRule.from_token(args.rule if args.rule else cfg["ite"]["rule"])
    kernel_bw = (
        args.kernel_bandwidth
        if args.kernel_bandwidth is not None
        else (cfg["kernel"]["bandwidth"] or None)
    )
    pipeline = PipelineConfig(
        predictor=args.predictor or "ols",
        nonconformity=args.nonconformity or cfg["nonconformity"],
        mode=args.mode or cfg["conformal"]["mode"],
        split_frac=float(
            args.split_frac if args.split_frac is not None else cfg["conformal"]["split_frac"]
        ),
        grid_step=float(
            args.grid_step if args.grid_step is not None else cfg["conformal"]["grid"]["step"]
        ),
        kernel_bandwidth=kernel_bw,
        nn_hidden=int(args.nn_hidden if args.nn_hidden is not None else cfg["nn"]["hidden"]),
        nn_train=TrainConfig(
            epochs=int(cfg["nn"]["epochs"]),
            lr=float(cfg["nn"]["lr"]),
            batch=int(cfg["nn"]["batch"]),
            seed=int(args.seed if args.seed is not None else cfg["nn"]["seed"]),
        ),
    )
    return pipeline, IteMethod(rule, alpha)


def _interval_row(pair: ArmIntervalPair, rule: CombineRule) -> list[str]:
    combined = combine_pair(pair, rule)
    return [
        _fmt(combined.lo),
        _fmt(combined.hi),
        _fmt(pair.interval_plus.lo),
        _fmt(pair.interval_plus.hi),
        _fmt(pair.interval_minus.lo),
        _fmt(pair.interval_minus.hi),
        "true" if combined.is_infinite else "false",
    ]


def cmd_predict(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    ds = read_dataset_csv(args.train)
    problems = validate_dataset(ds)
    if problems:
        for msg in problems:
            log.error("%s: %s", args.train, msg)
        raise CsvFormatError(f"{args.train}: invalid training data ({len(problems)} problems)")
    probes = _read_probes(args.probes, ds.d)
    pipeline, method = _pipeline_from_args(args, cfg)
    alpha_arm = 1.0 - arm_level(method.alpha, method.rule)
    proc = make_procedure(pipeline)

    rows = []
    if pipeline.mode == "split":
        cal = split_calibration(ds, split_point(ds.n, pipeline.split_frac), proc)
        for x in probes:
            pair = ArmIntervalPair(
                cal.interval(x, 1, alpha_arm).hull,
                cal.interval(x, -1, alpha_arm).hull,
                cal.measure.center(x, 1),
                cal.measure.center(x, -1),
            )
            rows.append(_interval_row(pair, method.rule))
    else:
        measure = proc.fit(ds)
        for x in probes:
            res_plus = full_conformal_set(ds, proc, x, 1, alpha_arm, grid_step=pipeline.grid_step)
            res_minus = full_conformal_set(
                ds, proc, x, -1, alpha_arm, grid_step=pipeline.grid_step
            )
            if res_plus.hull is None or res_minus.hull is None:
                raise RuntimeError("empty conformal set on the grid; coarsen alpha")
            pair = ArmIntervalPair(
                res_plus.hull, res_minus.hull, measure.center(x, 1), measure.center(x, -1)
            )
            rows.append(_interval_row(pair, method.rule))

    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        writer = csv.writer(out)
        writer.writerow(PREDICT_COLUMNS)
        writer.writerows(rows)
    finally:
        if args.out:
            out.close()
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

_RHO_LABEL = {"0.2": "LOWCOR", "0.8": "HIGHCOR"}
_REG_LABEL = {"F1": "LINEAR", "F2": "NONLINEAR"}
_METHOD_ORDER = ["LM1", "LM2", "NN1", "NN2"]


def _dgp_label(regression: str, error_dist: str, rho: str) -> str:
    reg = _REG_LABEL.get(regression, regression)
    cor = _RHO_LABEL.get(rho, f"rho{rho}")
    return f"{reg}_{error_dist}_{cor}"


def cmd_report(args: argparse.Namespace) -> int:
    path = Path(args.results)
    if not path.is_file():
        raise CsvFormatError(f"results file not found: {path}")
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not set(RESULT_COLUMNS) <= set(reader.fieldnames):
            missing = set(RESULT_COLUMNS) - set(reader.fieldnames or [])
            raise CsvFormatError(f"{path}: missing columns {sorted(missing)}")
        rows = list(reader)
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")

    panels: dict[str, dict[int, dict[str, dict[str, str]]]] = {}
    for row in rows:
        label = _dgp_label(row["regression"], row["error_dist"], row["rho"])
        n = int(row["n"])
        panels.setdefault(label, {}).setdefault(n, {})[row["method"]] = {
            "coverage": row["coverage"],
            "length": row["mean_rel_length"],
        }

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for label, by_n in sorted(panels.items()):
        for metric in ("coverage", "length"):
            out_path = out_dir / f"{label}_{metric}.csv"
            with open(out_path, "w", newline="", encoding="utf-8") as fh:
                fh.write(REFERENCE_HEADER + "\n")
                writer = csv.writer(fh)
                writer.writerow(["n"] + _METHOD_ORDER)
                for n in sorted(by_n):
                    cells = by_n[n]
                    writer.writerow(
                        [str(n)]
                        + [cells.get(m, {}).get(metric, "") for m in _METHOD_ORDER]
                    )
            written.append(out_path)
    print(f"wrote {len(written)} panel files to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ite-conformal",
        description="Conformal prediction intervals for individual treatment effects.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run the Monte Carlo scenario grid")
    sim.add_argument("--config", help="TOML configuration file")
    sim.add_argument("--seed", type=int, help="master seed (overrides config)")
    sim.add_argument("--replications", type=int, help="replications per scenario")
    sim.add_argument("--threads", type=int, default=1, help="worker threads per scenario")
    sim.add_argument("--only", help="comma-separated key=value scenario filter")
    sim.add_argument("--out-dir", default=".", help="directory for results.csv and manifest.json")
    sim.add_argument(
        "--timings",
        action="store_true",
        help="record wall-clock runtimes in results.csv "
        "(off by default so reruns are byte-identical)",
    )
    sim.set_defaults(func=cmd_simulate)

    pred = sub.add_parser("predict", help="effect intervals for probe covariates")
    pred.add_argument("train", help="training data CSV (x1..xd,t,y)")
    pred.add_argument("probes", help="probe covariates CSV (x1..xd)")
    pred.add_argument("--out", help="output CSV (default: stdout)")
    pred.add_argument("--config", help="TOML configuration file")
    pred.add_argument("--alpha", type=float)
    pred.add_argument("--predictor", choices=["ols", "kernel", "nn"])
    pred.add_argument("--nonconformity", choices=["abs", "std"])
    pred.add_argument("--mode", choices=["full", "split"])
    pred.add_argument("--rule", choices=[r.value for r in CombineRule])
    pred.add_argument("--split-frac", type=float, dest="split_frac")
    pred.add_argument("--grid-step", type=float, dest="grid_step")
    pred.add_argument("--kernel-bandwidth", type=float, dest="kernel_bandwidth")
    pred.add_argument("--nn-hidden", type=int, dest="nn_hidden")
    pred.add_argument("--seed", type=int, help="network training seed")
    pred.set_defaults(func=cmd_predict)

    rep = sub.add_parser("report", help="figure-ready panels from a results CSV")
    rep.add_argument("results", help="results.csv from the simulate command")
    rep.add_argument("--out-dir", default="report", help="directory for panel CSVs")
    rep.set_defaults(func=cmd_report)
    return parser


def _configure_logging() -> None:
    level_name = os.environ.get("ITE_LOG", "warning").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CsvFormatError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure; partial outputs stay on disk
        log.exception("run failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
