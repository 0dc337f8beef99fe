"""Command-line entry point: ``dyngroup <command> [options]``.

Commands
--------
simulate      draw a synthetic data set from a JSON model description
fit           run EM on a data set directory
select-order  k-means based choice of group and state counts
evaluate      score a fit, or run a paired sweep and write its tables
ingest        turn an event or co-authorship CSV into a data set directory
replay        re-run a command from its manifest

Every command writes ``manifest.json`` next to its outputs.  ``fit`` exits
with 0 when EM converged and 2 when it stopped at the iteration cap.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import tempfile
import time
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .estimator import FitConfig, FitReport, config_to_dict, e_step, fit, mse, recover
from .evaluation import parameter_errors
from .experiments import SWEEPABLE, ExperimentConfig, summarize, sweep
from .generator import GenConfig, HiddenRecord, ObservationSet, apply_missing_mask, random_params, sample_dataset
from .ingest import build_coauthor_tensor, load_events, read_coauthor_records
from .model import InvalidArgumentError, ModelParams
from .order import (
    best_init,
    degree_features,
    init_params,
    kmeans,
    nmf_init_params,
    select_order,
    select_orders,
    slice_features,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_ITERATION_CAP = 2

log = logging.getLogger("dyngroup")


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict | None
    seed: int | None
    inputs: list
    outputs: list
    started: str = ""
    seconds: float = 0.0
    version: str = __version__
    python: str = field(default_factory=platform.python_version)
    numpy: str = np.__version__

    def save(self, directory) -> Path:
        path = Path(directory) / "manifest.json"
        path.write_text(json.dumps(self.__dict__, indent=1, default=str), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidArgumentError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise InvalidArgumentError(f"config {path} must hold a JSON object")
    return doc


def _parse_orders(text: str):
    """``auto`` or a comma list of state counts, one per group (``2,3``)."""
    if text == "auto":
        return "auto"
    try:
        Q = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"orders must be 'auto' or integers like 2,3; got {text!r}") from None
    if not Q or min(Q) < 1:
        raise argparse.ArgumentTypeError("every state count must be >= 1")
    return Q


def _parse_values(text: str):
    out = []
    for v in text.split(","):
        v = v.strip()
        out.append(int(v) if v.lstrip("-").isdigit() else float(v))
    return out


# ---------------------------------------------------------------- simulate

SIM_KEYS = {"K", "N", "I", "Q", "T", "n", "poisson_rate", "concentration", "stay", "params", "seed", "missing_fraction"}


def cmd_simulate(args) -> int:
    cfg = _read_config(args.config)
    unknown = set(cfg) - SIM_KEYS
    if unknown:
        raise InvalidArgumentError(f"unknown simulate keys: {sorted(unknown)}")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    rng = np.random.default_rng(seed)
    if "params" in cfg:
        params = ModelParams.from_dict(cfg["params"]) if isinstance(cfg["params"], dict) else ModelParams.load(cfg["params"])
    else:
        try:
            K, N, I, Q = int(cfg["K"]), int(cfg["N"]), int(cfg["I"]), tuple(cfg["Q"])
        except KeyError as exc:
            raise InvalidArgumentError(f"simulate config needs {exc.args[0]!r} (or a 'params' entry)") from None
        params = random_params(rng, K, N, I, Q, float(cfg.get("concentration", 1.0)), float(cfg.get("stay", 0.8)))
    if "n" not in cfg and "poisson_rate" not in cfg:
        raise InvalidArgumentError("simulate config needs 'n' or 'poisson_rate'")
    gen = GenConfig(
        params,
        T=int(cfg.get("T", 100)),
        fixed_n=int(cfg["n"]) if "n" in cfg else None,
        poisson_rate=float(cfg["poisson_rate"]) if "poisson_rate" in cfg else None,
        seed=int(rng.integers(2**31)),
    )
    obs, hidden = sample_dataset(gen)
    fraction = args.missing_fraction if args.missing_fraction is not None else float(cfg.get("missing_fraction", 0.0))
    out = Path(args.out)
    if fraction > 0:
        complete = out / "complete"
        obs.save(complete)
        obs = apply_missing_mask(obs, fraction, seed=int(rng.integers(2**31)))
    obs.save(out)
    hidden.save(out)
    params.save(out / "truth.json")
    args._outputs = [str(out)]
    return EXIT_OK


# -------------------------------------------------------------------- fit

def _orders_for(obs, args, seed):
    if args.orders == "auto":
        feats = degree_features(obs) if args.symmetric else slice_features(obs)
        J, Q = select_orders(feats, args.j_max, args.q_max, seed=seed)
        return J, Q
    return len(args.orders), args.orders


def cmd_fit(args) -> int:
    doc = _read_config(args.config)
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    unknown = set(doc) - set(FitConfig.__dataclass_fields__)
    if unknown:
        raise InvalidArgumentError(f"unknown fit config keys: {sorted(unknown)}")
    cfg = FitConfig(**{**doc, "seed": seed})
    obs = ObservationSet.load(args.dataset)
    if args.init_params:
        init = ModelParams.load(args.init_params)
        if (init.K, init.N, init.I) != (obs.K, obs.N, obs.I):
            raise InvalidArgumentError(
                f"initial parameters have K,N,I = {init.K},{init.N},{init.I} but the data has {obs.K},{obs.N},{obs.I}"
            )
        if args.orders != "auto" and tuple(args.orders) != init.Q:
            raise InvalidArgumentError(f"--orders {args.orders} disagrees with the initial parameters {init.Q}")
    else:
        J, Q = _orders_for(obs, args, seed)
        if args.symmetric and obs.K != obs.N:
            raise InvalidArgumentError("--symmetric needs square slices")
        if args.init == "kmeans":
            init = init_params(obs, J, Q, symmetric=args.symmetric, seed=seed)
        elif args.init == "nmf":
            init = nmf_init_params(obs, J, Q, symmetric=args.symmetric, seed=seed)
        else:
            init, _ = best_init(obs, J, Q, symmetric=args.symmetric, seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = fit(obs, init, cfg, trace_path=out / "filter_trace.csv" if args.trace else None)
    report.save(out)
    args._config_snapshot = config_to_dict(cfg)
    args._outputs = [str(out)]
    log.info("fit: %d iterations, final MSE %.6g, converged=%s", report.iterations, report.mse_trace[-1], report.converged)
    return EXIT_OK if report.converged else EXIT_ITERATION_CAP


# ----------------------------------------------------------- select-order

def cmd_select_order(args) -> int:
    obs = ObservationSet.load(args.dataset)
    seed = args.seed if args.seed is not None else 0
    feats = degree_features(obs) if args.features == "degree" else slice_features(obs)
    top = select_order(feats, args.j_max, seed=seed)
    J, Q = select_orders(feats, args.j_max, args.q_max, seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "f_k.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "k", "f", "distortion"])
        for k in sorted(top.scores):
            w.writerow(["groups", k, repr(float(top.scores[k])), repr(float(top.distortions[k]))])
        labels = kmeans(feats, J, seed).labels
        for j in range(J):
            rows = np.flatnonzero(labels == j)
            if len(rows) < 2:
                continue
            sel = select_order(feats.vectors[rows], args.q_max, seed=seed)
            for k in sorted(sel.scores):
                w.writerow([f"states_group_{j}", k, repr(float(sel.scores[k])), repr(float(sel.distortions[k]))])
    (out / "orders.json").write_text(json.dumps({"J": J, "Q": list(Q)}, indent=1), encoding="utf-8")
    args._outputs = [str(out)]
    print(f"J={J} Q={','.join(map(str, Q))}")
    return EXIT_OK


# --------------------------------------------------------------- evaluate

def _write_rows(path, rows: list[dict]) -> None:
    if not rows:
        return
    keys = list(rows[0])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.sweep:
        doc = _read_config(args.config)
        if args.runs is not None:
            doc["runs"] = args.runs
        if args.seed is not None:
            doc["seed"] = args.seed
        if args.missing_fraction is not None and args.sweep != "missing_fraction":
            doc["missing_fraction"] = args.missing_fraction
        cfg = ExperimentConfig.from_dict(doc)
        values = _parse_values(args.values) if args.values else DEFAULT_SWEEPS[args.sweep]
        records = sweep(cfg, args.sweep, values, workers=args.workers)
        _write_rows(out / "sweep_runs.csv", [{k: v for k, v in r.items() if k != "mse_trace"} for r in records])
        _write_rows(out / "sweep_summary.csv", summarize(records))
        args._config_snapshot = cfg.to_dict()
        args._outputs = [str(out / "sweep_runs.csv"), str(out / "sweep_summary.csv")]
        return EXIT_OK

    if not (args.report and args.dataset):
        raise InvalidArgumentError("evaluate needs --report and --dataset, or --sweep")
    report = FitReport.load(args.report)
    obs = ObservationSet.load(args.dataset)
    stats = e_step(report.params, obs)
    row = {"mse": mse(recover(report.params, stats), obs.Z), "iterations": report.iterations, "converged": report.converged}
    complete = Path(args.dataset) / "complete"
    if (complete / "meta.json").exists():
        full = ObservationSet.load(complete)
        row["mse_vs_original"] = mse(recover(report.params, stats), full.Z)
        row["mse_input_vs_original"] = mse(obs.Z, full.Z)
    truth_dir = Path(args.truth) if args.truth else Path(args.dataset)
    if (truth_dir / "truth.json").exists():
        truth = ModelParams.load(truth_dir / "truth.json")
        hidden = HiddenRecord.load(truth_dir) if (truth_dir / "states.csv").exists() else None
        try:
            row.update(parameter_errors(truth, report.params, hidden.states if hidden else None, report.states))
        except InvalidArgumentError as exc:
            log.warning("skipping parameter errors: %s", exc)
    _write_rows(out / "metrics.csv", [row])
    args._outputs = [str(out / "metrics.csv")]
    return EXIT_OK


DEFAULT_SWEEPS = {"n": [50, 200, 800], "I": [2, 5, 8], "T": [5, 100, 300], "missing_fraction": [0.1, 0.2, 0.3, 0.4]}


# ----------------------------------------------------------------- ingest

def cmd_ingest(args) -> int:
    out = Path(args.out)
    if args.events:
        obs = load_events(args.events, args.meta)
        obs.save(out)
    else:
        records = read_coauthor_records(args.coauthor)
        tensor = build_coauthor_tensor(
            records,
            time_bucket_len=args.bucket_len,
            min_entity_count=args.min_author_count,
            min_source_count=args.min_source_count,
            origin=args.origin,
        )
        tensor.save(out)
    args._outputs = [str(out)]
    return EXIT_OK


# ----------------------------------------------------------------- replay

def cmd_replay(args) -> int:
    """Re-run with the recorded arguments and the recorded config snapshot.

    The snapshot, not the config file on disk, is what gets replayed, so a
    later edit of the file does not change the replay.
    """
    manifest = RunManifest.load(args.manifest)
    argv = list(manifest.argv)
    if args.out:
        argv = _replace_flag(argv, "--out", args.out)
    if manifest.config is None:
        return main(argv)
    with tempfile.TemporaryDirectory() as tmp:
        snap = Path(tmp) / "config.json"
        snap.write_text(json.dumps(manifest.config), encoding="utf-8")
        return main(_replace_flag(argv, "--config", str(snap)))


def _replace_flag(argv: list, flag: str, value: str) -> list:
    argv = list(argv)
    if flag in argv:
        argv[argv.index(flag) + 1] = value
    else:
        argv += [flag, value]
    return argv


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dyngroup", description="Dynamic latent-group tensor model tools.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("simulate", help="draw a synthetic data set")
    common(s)
    s.add_argument("--missing-fraction", type=float)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="estimate the model on a data set")
    f.add_argument("dataset")
    common(f)
    f.add_argument("--orders", type=_parse_orders, default="auto", help="'auto' or state counts per group, e.g. 2,3")
    f.add_argument("--init", choices=("best", "kmeans", "nmf"), default="best")
    f.add_argument("--init-params", help="start from parameters in this JSON file")
    f.add_argument("--symmetric", action="store_true", help="tie Y to X at initialization")
    f.add_argument("--j-max", type=int, default=4)
    f.add_argument("--q-max", type=int, default=5)
    f.add_argument("--trace", action="store_true", help="dump the filtered state posteriors")
    f.set_defaults(func=cmd_fit)

    o = sub.add_parser("select-order", help="choose the number of groups and states")
    o.add_argument("dataset")
    common(o, config=False)
    o.add_argument("--j-max", type=int, default=4)
    o.add_argument("--q-max", type=int, default=5)
    o.add_argument("--features", choices=("slices", "degree"), default="slices")
    o.set_defaults(func=cmd_select_order)

    e = sub.add_parser("evaluate", help="score a fit or run a sweep")
    common(e)
    e.add_argument("--report", help="fit output directory")
    e.add_argument("--dataset", help="data set directory")
    e.add_argument("--truth", help="directory holding truth.json and states.csv")
    e.add_argument("--sweep", choices=SWEEPABLE)
    e.add_argument("--values", help="comma list of values for the swept parameter")
    e.add_argument("--runs", type=int)
    e.add_argument("--missing-fraction", type=float)
    e.add_argument("--workers", type=int)
    e.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("ingest", help="build a data set from CSV records")
    common(g, config=False)
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--events", help="CSV with columns source,time,x,y,count")
    src.add_argument("--coauthor", help="CSV with columns source,time,author_a,author_b,weight")
    g.add_argument("--meta", help="dimension sidecar (default: <events>.meta.json)")
    g.add_argument("--bucket-len", type=float, default=3.0)
    g.add_argument("--min-author-count", type=float, default=30)
    g.add_argument("--min-source-count", type=float, default=100)
    g.add_argument("--origin", type=float)
    g.set_defaults(func=cmd_ingest)

    r = sub.add_parser("replay", help="re-run a command from its manifest")
    r.add_argument("manifest")
    r.add_argument("--out", help="write outputs here instead")
    r.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    warnings.filterwarnings("ignore", module="sklearn")
    if args.command == "replay":
        return args.func(args)
    started = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    try:
        code = args.func(args)
    except (InvalidArgumentError, FileNotFoundError) as exc:
        print(f"dyngroup {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    config = getattr(args, "_config_snapshot", None)
    if config is None and getattr(args, "config", None):
        config = _read_config(args.config)
    inputs = [v for k in ("dataset", "report", "truth", "events", "coauthor", "config", "init_params")
              if (v := getattr(args, k, None))]
    manifest = RunManifest(
        command=args.command,
        argv=argv,
        config=config,
        seed=getattr(args, "seed", None),
        inputs=inputs,
        outputs=getattr(args, "_outputs", []),
        started=started,
        seconds=time.perf_counter() - t0,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest.save(out)
    return code


if __name__ == "__main__":
    sys.exit(main())
