"""Synthetic data from the dynamic generative process, plus dataset I/O."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import InvalidArgumentError, ModelParams, k_rank


@dataclass
class ObservationSet:
    """Count slices over time.

    ``counts`` has shape ``(T, I, K, N)`` and ``n`` shape ``(T, I)``.  ``Z``
    is ``counts / n`` with zero-event periods left all-zero and flagged in
    ``missing_slices``.  ``mask`` marks entries removed after sampling.
    """

    counts: np.ndarray
    n: np.ndarray
    mask: np.ndarray | None = None
    Z: np.ndarray = field(init=False)
    missing_slices: np.ndarray = field(init=False)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=float)
        self.n = np.asarray(self.n, dtype=float)
        if self.counts.ndim != 4 or self.n.shape != self.counts.shape[:2]:
            raise InvalidArgumentError(
                f"counts must be (T, I, K, N) and n (T, I); got {self.counts.shape}, {self.n.shape}"
            )
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
        self.Z, self.missing_slices = normalize_counts(self.counts, self.n)

    @property
    def T(self) -> int:
        return self.counts.shape[0]

    @property
    def I(self) -> int:  # noqa: E743
        return self.counts.shape[1]

    @property
    def K(self) -> int:
        return self.counts.shape[2]

    @property
    def N(self) -> int:
        return self.counts.shape[3]

    def save(self, directory) -> None:
        """Write ``meta.json``, ``counts_t{t}.csv`` per period and ``mask.csv``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = {
            "dims": {"T": self.T, "I": self.I, "K": self.K, "N": self.N},
            "n": self.n.tolist(),
            "has_mask": self.mask is not None,
        }
        (directory / "meta.json").write_text(json.dumps(meta, indent=1), encoding="utf-8")
        for t in range(self.T):
            with open(directory / f"counts_t{t}.csv", "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["source", "k", "n", "count"])
                for i, k, m in zip(*np.nonzero(self.counts[t])):
                    writer.writerow([i, k, m, _fmt_count(self.counts[t, i, k, m])])
        if self.mask is not None:
            with open(directory / "mask.csv", "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["t", "source", "k", "n"])
                writer.writerows(np.argwhere(self.mask).tolist())

    @classmethod
    def load(cls, directory) -> "ObservationSet":
        directory = Path(directory)
        meta = json.loads((directory / "meta.json").read_text(encoding="utf-8"))
        d = meta["dims"]
        counts = np.zeros((d["T"], d["I"], d["K"], d["N"]))
        for t in range(d["T"]):
            with open(directory / f"counts_t{t}.csv", newline="", encoding="utf-8") as fh:
                for row in csv.DictReader(fh):
                    counts[t, int(row["source"]), int(row["k"]), int(row["n"])] = float(row["count"])
        mask = None
        if meta.get("has_mask"):
            mask = np.zeros(counts.shape, dtype=bool)
            with open(directory / "mask.csv", newline="", encoding="utf-8") as fh:
                for row in csv.DictReader(fh):
                    mask[int(row["t"]), int(row["source"]), int(row["k"]), int(row["n"])] = True
        return cls(counts=counts, n=np.array(meta["n"], dtype=float), mask=mask)


def _fmt_count(x: float):
    return int(x) if float(x).is_integer() else repr(float(x))


@dataclass
class HiddenRecord:
    """True state paths, ``states[t, i, j]`` (0-based), with the initial draw at index -1 kept apart."""

    states: np.ndarray
    initial_states: np.ndarray
    group_draws: list | None = None

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "states.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "source", "group", "state"])
            T, I, J = self.states.shape
            for i in range(I):
                for j in range(J):
                    writer.writerow([-1, i, j, int(self.initial_states[i, j])])
            for t, i, j in np.ndindex(T, I, J):
                writer.writerow([t, i, j, int(self.states[t, i, j])])

    @classmethod
    def load(cls, directory) -> "HiddenRecord":
        rows = []
        with open(Path(directory) / "states.csv", newline="", encoding="utf-8") as fh:
            rows = [tuple(int(v) for v in r) for r in csv.reader(fh) if r and r[0] != "t"]
        arr = np.array(rows)
        T = arr[:, 0].max() + 1
        I = arr[:, 1].max() + 1
        J = arr[:, 2].max() + 1
        states = np.zeros((T, I, J), dtype=int)
        initial = np.zeros((I, J), dtype=int)
        for t, i, j, s in rows:
            if t < 0:
                initial[i, j] = s
            else:
                states[t, i, j] = s
        return cls(states=states, initial_states=initial)


@dataclass
class GenConfig:
    """What to simulate.  Exactly one of ``poisson_rate`` and ``fixed_n`` is set."""

    params: ModelParams
    T: int
    poisson_rate: float | None = None
    fixed_n: int | None = None
    seed: int = 0
    keep_group_draws: bool = False

    def __post_init__(self):
        if (self.poisson_rate is None) == (self.fixed_n is None):
            raise InvalidArgumentError("set exactly one of poisson_rate and fixed_n")
        if self.poisson_rate is not None and not self.poisson_rate > 0:
            raise InvalidArgumentError("poisson_rate must be positive")
        if self.fixed_n is not None and self.fixed_n < 1:
            raise InvalidArgumentError("fixed_n must be >= 1")
        if self.T < 1:
            raise InvalidArgumentError("T must be >= 1")


def sample_dataset(cfg: GenConfig) -> tuple[ObservationSet, HiddenRecord]:
    """Run the generative process for every source and period.

    Each chain starts from a draw of ``params.initial`` and is advanced once
    before the first period, so ``s(1) ~ initial @ A``.
    """
    params = cfg.params
    params.validate(1e-8)
    rng = np.random.default_rng(cfg.seed)
    T, I, J, K, N = cfg.T, params.I, params.J, params.K, params.N
    cum_A = [np.cumsum(a, axis=1) for a in params.A]

    current = np.array([[rng.choice(params.Q[j], p=params.initial[j]) for j in range(J)] for i in range(I)])
    initial_states = current.copy()
    states = np.zeros((T, I, J), dtype=int)
    counts = np.zeros((T, I, K, N))
    n = np.zeros((T, I))
    draws = [] if cfg.keep_group_draws else None
    for t in range(T):
        if cfg.fixed_n is not None:
            n[t] = cfg.fixed_n
        else:
            n[t] = rng.poisson(cfg.poisson_rate, size=I)
        for i in range(I):
            for j in range(J):
                u = rng.random()
                row = cum_A[j][current[i, j]]
                current[i, j] = min(int(np.searchsorted(row, u * row[-1], side="right")), params.Q[j] - 1)
            states[t, i] = current[i]
            n_it = int(n[t, i])
            if n_it == 0:
                continue
            per_group = rng.multinomial(n_it, params.C[i] / params.C[i].sum())
            if draws is not None:
                draws.append((t, i, per_group.tolist()))
            for j, m in enumerate(per_group):
                if m == 0:
                    continue
                l = current[i, j]
                xs = rng.choice(K, size=m, p=params.X[j][:, l] / params.X[j][:, l].sum())
                ys = rng.choice(N, size=m, p=params.Y[j][:, l] / params.Y[j][:, l].sum())
                np.add.at(counts[t, i], (xs, ys), 1.0)
    return ObservationSet(counts=counts, n=n), HiddenRecord(states, initial_states, draws)


def normalize_counts(counts, n):
    """``Z = counts / n`` per slice; zero-event slices come back zero and flagged."""
    counts = np.asarray(counts, dtype=float)
    n = np.asarray(n, dtype=float)
    missing = n <= 0
    safe = np.where(missing, 1.0, n)
    Z = counts / safe[..., None, None]
    Z[missing] = 0.0
    return Z, missing


def apply_missing_mask(obs: ObservationSet, fraction: float, seed=None) -> ObservationSet:
    """Zero a uniformly random subset of entries; ``n`` is left as recorded."""
    if not 0.0 <= fraction < 1.0:
        raise InvalidArgumentError(f"missing fraction must lie in [0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    new_mask = rng.random(obs.counts.shape) < fraction
    mask = new_mask if obs.mask is None else (obs.mask | new_mask)
    counts = np.where(new_mask, 0.0, obs.counts)
    if fraction == 0.0 and obs.mask is None:
        mask = None
    return ObservationSet(counts=counts, n=obs.n.copy(), mask=mask)


def random_dictionary(rng, n_outcomes: int, n_states: int, concentration: float = 1.0) -> np.ndarray:
    """Columns drawn i.i.d. from a symmetric Dirichlet."""
    return rng.dirichlet(np.full(n_outcomes, concentration), size=n_states).T


def random_transition(rng, n_states: int, stay: float = 0.8) -> np.ndarray:
    """Sticky transition matrix: ``stay`` on the diagonal, the rest Dirichlet(1)."""
    if n_states == 1:
        return np.ones((1, 1))
    A = np.zeros((n_states, n_states))
    for q in range(n_states):
        off = rng.dirichlet(np.ones(n_states - 1)) * (1.0 - stay)
        A[q] = np.insert(off, q, stay)
    return A


def random_mixture(rng, I: int, J: int) -> np.ndarray:
    """Rows uniform on the (J-1)-simplex, i.e. Dirichlet(1, ..., 1)."""
    return rng.dirichlet(np.ones(J), size=I)


def random_params(
    rng,
    K: int,
    N: int,
    I: int,
    Q,
    concentration: float = 1.0,
    stay: float = 0.8,
    max_tries: int = 100,
) -> ModelParams:
    """Random model whose stacked dictionaries have full k-rank.

    Full k-rank of ``[X_1..X_J]`` and ``[Y_1..Y_J]`` is the part of Kruskal's
    condition that does not depend on the realised states.
    """
    Q = tuple(Q)
    q_s = sum(Q)
    for _ in range(max_tries):
        X = [random_dictionary(rng, K, q, concentration) for q in Q]
        Y = [random_dictionary(rng, N, q, concentration) for q in Q]
        want_x, want_y = min(K, q_s), min(N, q_s)
        if k_rank(np.hstack(X)) >= want_x and k_rank(np.hstack(Y)) >= want_y:
            break
    else:
        raise InvalidArgumentError("could not draw dictionaries with full k-rank")
    A = [random_transition(rng, q, stay) for q in Q]
    return ModelParams(X=X, Y=Y, C=random_mixture(rng, I, len(Q)), A=A)
