"""Paired synthetic sweeps over sample size, sources, horizon and missing data.

Every run of a sweep shares the same dictionaries and transition matrices;
only the group probabilities and the sampled events change between runs.
Within a run the cells of a sweep are paired: for the sources sweep the
mixture rows of the smaller cell are the leading rows of the larger one.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .estimator import FitConfig, e_step, fit, mse, recover
from .generator import GenConfig, apply_missing_mask, random_mixture, random_params, sample_dataset
from .model import InvalidArgumentError, stacked_factors, tensor_from_factors
from .order import best_init, init_params, nmf_init_params

SWEEPABLE = ("n", "I", "T", "missing_fraction")


@dataclass
class ExperimentConfig:
    K: int = 6
    N: int = 8
    I: int = 5  # noqa: E741
    J: int = 2
    Q: tuple = (2, 3)
    T: int = 100
    n: int = 300
    runs: int = 20
    seed: int = 0
    missing_fraction: float = 0.0
    max_iters: int = 200
    init: str = "best"
    concentration: float = 1.0
    stay: float = 0.8
    max_sources: int = 8
    fit: dict = field(default_factory=dict)

    def __post_init__(self):
        self.Q = tuple(int(q) for q in self.Q)
        if len(self.Q) != self.J:
            raise InvalidArgumentError(f"J={self.J} but Q={self.Q}")
        if self.init not in ("best", "kmeans", "nmf"):
            raise InvalidArgumentError(f"unknown init {self.init!r}")
        if self.runs < 1 or self.n < 1 or self.T < 1 or self.I < 1:
            raise InvalidArgumentError("runs, n, T and I must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["Q"] = list(self.Q)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise InvalidArgumentError(f"unknown experiment keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def derived_seed(*keys) -> int:
    """A 32-bit integer seed determined by ``keys``."""
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


def base_params(cfg: ExperimentConfig):
    """Dictionaries and transitions shared by every run of a sweep."""
    rng = np.random.default_rng([cfg.seed, 0])
    return random_params(rng, cfg.K, cfg.N, max(cfg.I, cfg.max_sources), cfg.Q, cfg.concentration, cfg.stay)


def run_params(cfg: ExperimentConfig, run: int, base=None):
    """Parameters of one run: the shared dictionaries with this run's mixture."""
    base = base if base is not None else base_params(cfg)
    rows = max(cfg.I, cfg.max_sources)
    C = random_mixture(np.random.default_rng([cfg.seed, 1, run]), rows, cfg.J)
    return base.replace(C=C[: cfg.I])


def _initialize(obs, cfg: ExperimentConfig, seed: int):
    if cfg.init == "kmeans":
        return init_params(obs, cfg.J, cfg.Q, seed=seed)
    if cfg.init == "nmf":
        return nmf_init_params(obs, cfg.J, cfg.Q, seed=seed)
    return best_init(obs, cfg.J, cfg.Q, seed=seed)[0]


def run_once(cfg: ExperimentConfig, run: int) -> dict:
    """Simulate, optionally mask, initialize and fit one run; return its metrics."""
    t0 = time.perf_counter()
    params = run_params(cfg, run)
    obs, hidden = sample_dataset(GenConfig(params, T=cfg.T, fixed_n=cfg.n, seed=derived_seed(cfg.seed, 2, run)))
    observed = obs
    if cfg.missing_fraction > 0:
        observed = apply_missing_mask(obs, cfg.missing_fraction, seed=derived_seed(cfg.seed, 3, run))
    init = _initialize(observed, cfg, seed=cfg.seed + run)
    fit_cfg = FitConfig(**{"max_iters": cfg.max_iters, **cfg.fit})
    report = fit(observed, init, fit_cfg)
    recovered = recover(report.params, e_step(report.params, observed), fit_cfg.recovery)
    return {
        "run": run,
        "mse": report.mse_trace[-1],
        "mse_vs_original": mse(recovered, obs.Z),
        "mse_input_vs_original": mse(observed.Z, obs.Z),
        "mse_vs_truth": mse(recovered, true_slices(params, hidden.states)),
        "iterations": report.iterations,
        "converged": report.converged,
        "log_likelihood": report.log_likelihood[-1],
        "max_trace_increase": _max_increase(report.mse_trace, start=2),
        "seconds": time.perf_counter() - t0,
        "mse_trace": list(report.mse_trace),
    }


def true_slices(params, states) -> np.ndarray:
    """Noise-free mean slices ``(T, I, K, N)`` along the realized state paths."""
    return np.stack([tensor_from_factors(*stacked_factors(params, s)) for s in states])


def _max_increase(trace, start: int = 2) -> float:
    d = np.diff(np.asarray(trace)[start:])
    return float(d.max()) if d.size else 0.0


def worker_count(requested: int | None = None) -> int:
    """Pool size: the request, capped by ``DYNGROUP_THREADS`` and the CPU count."""
    limit = os.environ.get("DYNGROUP_THREADS")
    n = requested or os.cpu_count() or 1
    if limit:
        try:
            n = min(n, max(1, int(limit)))
        except ValueError as exc:
            raise InvalidArgumentError(f"DYNGROUP_THREADS must be an integer, got {limit!r}") from exc
    return max(1, n)


def _run_task(task):
    cfg, run = task
    return run_once(cfg, run)


def sweep(cfg: ExperimentConfig, param: str, values, workers: int | None = None) -> list[dict]:
    """Run ``cfg.runs`` paired runs for every value of ``param``.

    Returns one record per (value, run) with the swept value under ``value``.
    """
    if param not in SWEEPABLE:
        raise InvalidArgumentError(f"cannot sweep {param!r}; choose from {SWEEPABLE}")
    cells = [replace(cfg, **{param: v}) for v in values]
    tasks = [(c, r) for c in cells for r in range(cfg.runs)]
    n_workers = min(worker_count(workers), len(tasks))
    if n_workers == 1:
        results = [_run_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_run_task, tasks))
    records = []
    for (c, _), res in zip(tasks, results):
        records.append({"param": param, "value": getattr(c, param), **res})
    return records


def summarize(records: list[dict]) -> list[dict]:
    """Mean and standard deviation per swept value, in first-seen order."""
    values = []
    for r in records:
        if r["value"] not in values:
            values.append(r["value"])
    rows = []
    for v in values:
        cell = [r for r in records if r["value"] == v]
        row = {"param": cell[0]["param"], "value": v, "runs": len(cell)}
        for key in ("mse", "mse_vs_original", "mse_input_vs_original", "mse_vs_truth", "iterations", "seconds"):
            arr = np.array([r[key] for r in cell], dtype=float)
            row[f"{key}_mean"] = float(arr.mean())
            row[f"{key}_std"] = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        row["converged_fraction"] = float(np.mean([r["converged"] for r in cell]))
        rows.append(row)
    return rows
