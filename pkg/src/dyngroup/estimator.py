"""Generalized EM for the dynamic group model.

Each iteration runs the filter E-step, updates the transition matrices in
closed form and takes one backtracked projected-gradient step on the
dictionaries and the mixture matrix.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import gaussian
from .filters import (
    EStepStats,
    NumericalDegeneracyError,
    build_product_chain,
    finalize_estep,
    run_source,
)
from .generator import ObservationSet
from .model import (
    InvalidArgumentError,
    ModelParams,
    enumerate_state_index_arrays,
    mean_vectors,
    project_to_simplex,
    unvec,
)

log = logging.getLogger(__name__)


@dataclass
class FitConfig:
    max_iters: int = 200
    alpha_X: float = 1e-2
    alpha_Y: float = 1e-2
    alpha_C: float = 1e-2
    tol: float = 1e-6
    patience: int = 3
    floor: float = 1e-9
    seed: int = 0
    step: str = "multiplicative"
    max_halvings: int = 40
    recovery: str = "mean"

    def __post_init__(self):
        if min(self.alpha_X, self.alpha_Y, self.alpha_C) <= 0:
            raise InvalidArgumentError("step sizes must be positive")
        if not 0.0 <= self.floor <= 1e-6:
            raise InvalidArgumentError("probability floor must lie in [0, 1e-6]")
        if self.step not in ("multiplicative", "additive"):
            raise InvalidArgumentError(f"unknown step form {self.step!r}")
        if self.recovery not in ("mean", "map"):
            raise InvalidArgumentError(f"unknown recovery mode {self.recovery!r}")


@dataclass
class FitReport:
    params: ModelParams
    mse_trace: list
    states: np.ndarray
    iterations: int
    converged: bool
    log_likelihood: list = field(default_factory=list)
    message: str = ""

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        doc = {
            "params": self.params.to_dict(),
            "mse_trace": [float(m) for m in self.mse_trace],
            "log_likelihood": [float(v) for v in self.log_likelihood],
            "iterations": self.iterations,
            "converged": self.converged,
            "message": self.message,
        }
        (directory / "report.json").write_text(json.dumps(doc, indent=1), encoding="utf-8")
        with open(directory / "mse_trace.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "mse", "log_likelihood"])
            for k, m in enumerate(self.mse_trace):
                ll = self.log_likelihood[k] if k < len(self.log_likelihood) else ""
                w.writerow([k, repr(float(m)), repr(float(ll)) if ll != "" else ""])
        with open(directory / "states.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "source", "group", "state"])
            for t, i, j in np.ndindex(*self.states.shape):
                w.writerow([t, i, j, int(self.states[t, i, j])])

    @classmethod
    def load(cls, directory) -> "FitReport":
        directory = Path(directory)
        doc = json.loads((directory / "report.json").read_text(encoding="utf-8"))
        params = ModelParams.from_dict(doc["params"])
        rows = []
        with open(directory / "states.csv", newline="", encoding="utf-8") as fh:
            rows = [[int(v) for v in r.values()] for r in csv.DictReader(fh)]
        arr = np.array(rows, dtype=int).reshape(-1, 4)
        T = arr[:, 0].max() + 1 if len(arr) else 0
        states = np.zeros((T, params.I, params.J), dtype=int)
        states[arr[:, 0], arr[:, 1], arr[:, 2]] = arr[:, 3]
        return cls(
            params=params,
            mse_trace=doc["mse_trace"],
            states=states,
            iterations=doc["iterations"],
            converged=doc["converged"],
            log_likelihood=doc.get("log_likelihood", []),
            message=doc.get("message", ""),
        )


def observation_vectors(obs: ObservationSet) -> np.ndarray:
    """Column-major vectorized slices, shape ``(T, I, K*N)``; masked entries are zero."""
    return np.swapaxes(obs.Z, -1, -2).reshape(obs.T, obs.I, -1)


def check_dims(params: ModelParams, obs: ObservationSet) -> None:
    if (params.I, params.K, params.N) != (obs.I, obs.K, obs.N):
        raise InvalidArgumentError(
            f"model dims (I, K, N) = {(params.I, params.K, params.N)} do not match "
            f"data dims {(obs.I, obs.K, obs.N)}"
        )


def e_step(params: ModelParams, obs: ObservationSet, trace=None) -> EStepStats:
    """Run the filter bank of every source under ``params``.

    ``trace``, if given, is a dict that receives ``trace[i]`` = list of
    per-group filtered posteriors for every period.
    """
    check_dims(params, obs)
    chain = build_product_chain(params.A)
    P = mean_vectors(params, chain.order)  # (I, Q, D)
    z = observation_vectors(obs)
    n = np.where(obs.missing_slices, 0.0, obs.n)
    sp = gaussian.SupportedProbVector.from_p(P)
    observed = n > 0
    log_lam = np.zeros((obs.T, params.I, chain.size))
    if observed.any():
        t_idx, i_idx = np.nonzero(observed)
        sub = gaussian.SupportedProbVector(sp.p[i_idx], sp.chi[i_idx], sp.p_plus[i_idx], sp.support_size[i_idx])
        log_lam[t_idx, i_idx] = gaussian.log_likelihood_ratio(sub, z[t_idx, i_idx, None, :], n[t_idx, i_idx, None])
    _, g2, g3 = gaussian.g_functions(sp, z[:, :, None, :])
    steps = [] if trace is not None else None
    # sources never interact, so they advance together in one batched bank
    bank, posts = run_source(chain, params.initial, log_lam, n, g2, g3, steps)
    if trace is not None:
        for i in range(params.I):
            trace[i] = [[g[i] for g in groups] for groups in steps]
    return finalize_estep([bank], chi=sp.chi, posteriors=posts)


def update_transitions(jumps, previous=None) -> list:
    """Row-normalize the expected jump counts summed over sources.

    ``jumps[j]`` may be ``(Q_j, Q_j)`` or ``(I, Q_j, Q_j)``.  A row without
    any expected jumps keeps its previous value (uniform when there is none).
    """
    out = []
    for j, J in enumerate(jumps):
        J = np.asarray(J, dtype=float)
        if J.ndim == 3:
            J = J.sum(axis=0)
        if np.any(J < 0):
            raise InvalidArgumentError("expected jump counts must be non-negative")
        rows = J.sum(axis=1, keepdims=True)
        A = np.divide(J, rows, out=np.zeros_like(J), where=rows > 0)
        empty = rows[:, 0] <= 0
        if empty.any():
            fallback = previous[j] if previous is not None else np.full(J.shape, 1.0 / J.shape[0])
            A[empty] = np.asarray(fallback)[empty]
        out.append(A)
    return out


def _stat_terms(stats: EStepStats):
    """Per-(i, q) quantities shared by the cost and its gradient."""
    chi = stats.chi
    s = chi.sum(axis=-1)
    zeta_l1 = stats.zetabar.sum(axis=-1)
    kappa = (stats.nbar / 2.0 - zeta_l1) / s**2
    B = stats.bbar / 2.0 + stats.zetabar / s[..., None] + kappa[..., None] * chi
    V = chi * (stats.zetabar + ((stats.nbar - zeta_l1) / s)[..., None])
    return chi, s, B, V


def _support_reciprocal(P, chi):
    return np.divide(1.0, P, out=np.zeros_like(P), where=chi > 0)


def q_cost(params: ModelParams, stats: EStepStats, P=None) -> float:
    """Negative expected complete-data log density of the observations.

    Defined for any non-negative mean vectors (not only points on the
    simplex) through the closed-form pseudo-determinant and generalized
    inverse on the support recorded in ``stats``; terms that do not depend
    on the parameters are dropped.
    """
    if P is None:
        P = mean_vectors(params)
    chi, s, B, V = _stat_terms(stats)
    if np.any(P[chi > 0] <= 0):
        return np.inf
    sigma = (chi * P).sum(axis=-1)
    d = chi * (P - ((sigma - 1.0) / s)[..., None])
    pp = _support_reciprocal(P, chi)
    log_p = np.where(chi > 0, np.log(np.where(chi > 0, P, 1.0)), 0.0).sum(axis=-1)
    h = -0.5 * stats.abar * (np.log(s) + log_p)
    h -= 0.5 * ((2.0 * B - 2.0 * V * d + stats.nbar[..., None] * d * d) * pp).sum(axis=-1)
    return float(-h.sum())


def grad_h(p, abar, nbar, zetabar, bbar, chi=None):
    """Gradient of one expected log-density term with respect to its mean vector.

    ``(b/2 + zeta/s + kappa) * p_plus**2 - (a/2) p_plus - c chi`` with
    ``kappa = (n/2 - |zeta|_1) / s**2`` and
    ``c = (n - |zeta|_1) |p_plus|_1 / s**2 + zeta . p_plus / s - n/2``.
    Broadcasts over leading axes.
    """
    p = np.asarray(p, dtype=float)
    if chi is None:
        chi = gaussian.SupportedProbVector.from_p(p).chi
    abar = np.asarray(abar, dtype=float)
    nbar = np.asarray(nbar, dtype=float)
    zetabar = np.asarray(zetabar, dtype=float)
    bbar = np.asarray(bbar, dtype=float)
    s = chi.sum(axis=-1)
    pp = _support_reciprocal(p, chi)
    zeta_l1 = zetabar.sum(axis=-1)
    kappa = (nbar / 2.0 - zeta_l1) / s**2
    c = (
        (nbar - zeta_l1) * pp.sum(axis=-1) / s**2
        + (zetabar * pp).sum(axis=-1) / s
        - nbar / 2.0
    )
    first = (bbar / 2.0 + zetabar / s[..., None] + kappa[..., None]) * pp * pp
    return first - (abar / 2.0)[..., None] * pp - c[..., None] * chi


def jacobian_transpose(params: ModelParams, i: int, states, g) -> dict:
    """``J(p_i^l)^T g`` for every parameter block.

    The mean vector is linear in each block, so the contributions are
    ``c_ij G y`` for column ``l_j`` of ``X_j``, ``c_ij G^T x`` for ``Y_j``
    and ``x^T G y`` for ``C[i, j]`` with ``G`` the K x N unvec of ``g``.
    """
    G = unvec(np.asarray(g, dtype=float), params.K, params.N)
    out = {
        "X": [np.zeros_like(x) for x in params.X],
        "Y": [np.zeros_like(y) for y in params.Y],
        "C": np.zeros_like(params.C),
    }
    for j, l in enumerate(states):
        x, y = params.X[j][:, l], params.Y[j][:, l]
        out["X"][j][:, l] = params.C[i, j] * (G @ y)
        out["Y"][j][:, l] = params.C[i, j] * (G.T @ x)
        out["C"][i, j] = x @ G @ y
    return out


def cost_gradient(params: ModelParams, stats: EStepStats, P=None) -> dict:
    """``-sum_{i, l} J^T grad_h`` for X, Y and C, vectorized over (i, l)."""
    ell = enumerate_state_index_arrays(params.Q)
    if P is None:
        P = mean_vectors(params, ell)
    H = grad_h(P, stats.abar, stats.nbar, stats.zetabar, stats.bbar, chi=stats.chi)
    G = unvec(H, params.K, params.N)  # (I, Q, K, N)
    grads = {"X": [], "Y": [], "C": np.zeros_like(params.C)}
    for j in range(params.J):
        Xl = params.X[j][:, ell[:, j]]  # (K, Q)
        Yl = params.Y[j][:, ell[:, j]]  # (N, Q)
        member = (ell[:, j][:, None] == np.arange(params.Q[j])[None, :]).astype(float)
        GY = np.einsum("iqkn,nq->iqk", G, Yl)
        GX = np.einsum("iqkn,kq->iqn", G, Xl)
        cj = params.C[:, j]
        grads["X"].append(-np.einsum("i,iqk,qm->km", cj, GY, member))
        grads["Y"].append(-np.einsum("i,iqn,qm->nm", cj, GX, member))
        grads["C"][:, j] = -np.einsum("iqk,kq->i", GY, Xl)
    return grads


def _floor(M, floor: float, axis: int):
    if floor <= 0:
        return M
    M = np.maximum(M, floor)
    return M / M.sum(axis=axis, keepdims=True)


def tangent_gradient(M, grad, axis: int, floor: float = 0.0):
    """Remove the component of ``grad`` normal to the simplex.

    The cost is only constrained on the simplex, so its gradient is defined
    up to a multiple of the all-ones vector.  Picking the representative with
    ``sum(M * g) = 0`` along ``axis`` makes ``(1 - alpha g) * M`` keep every
    column (or row) sum and turns it into a descent direction.

    Entries sitting on the probability floor that would keep shrinking are
    held fixed and left out of the weighted mean; their gradients can be
    many orders of magnitude larger than the rest and would otherwise shift
    every other entry.
    """
    M = np.asarray(M, dtype=float)
    free = np.ones(M.shape, dtype=bool)
    for _ in range(2):
        w = np.where(free, M, 0.0)
        total = np.maximum(w.sum(axis=axis, keepdims=True), np.finfo(float).tiny)
        centred = grad - (w * np.where(free, grad, 0.0)).sum(axis=axis, keepdims=True) / total
        free = ~((M <= 2.0 * floor) & (centred > 0))
    return np.where(free, centred, 0.0)


def _step(M, grad, alpha: float, mode: str, axis: int, floor: float = 0.0):
    if mode == "multiplicative":
        return (1.0 - alpha * tangent_gradient(M, grad, axis, floor)) * M
    return M - alpha * grad


def projected_update(params: ModelParams, grads: dict, cfg: FitConfig, alphas=None, blocks=("X", "Y", "C")) -> ModelParams:
    """One projected step on the requested blocks.

    Columns of ``X_j`` and ``Y_j`` and rows of ``C`` are projected onto the
    simplex, then floored at ``cfg.floor`` and renormalized.
    """
    alphas = alphas or {"X": cfg.alpha_X, "Y": cfg.alpha_Y, "C": cfg.alpha_C}
    for name in blocks:
        g = grads[name]
        arrays = g if isinstance(g, list) else [g]
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise FloatingPointError(f"non-finite gradient for block {name}")
    changes = {}
    if "X" in blocks:
        changes["X"] = [
            _floor(project_to_simplex(_step(x, g, alphas["X"], cfg.step, 0, cfg.floor), axis=0), cfg.floor, 0)
            for x, g in zip(params.X, grads["X"])
        ]
    if "Y" in blocks:
        changes["Y"] = [
            _floor(project_to_simplex(_step(y, g, alphas["Y"], cfg.step, 0, cfg.floor), axis=0), cfg.floor, 0)
            for y, g in zip(params.Y, grads["Y"])
        ]
    if "C" in blocks:
        changes["C"] = _floor(project_to_simplex(_step(params.C, grads["C"], alphas["C"], cfg.step, 1, cfg.floor), axis=1), cfg.floor, 1)
    return params.replace(**changes)


class _StepSizes:
    """Per-block step sizes carried across iterations (grow x2 after success)."""

    def __init__(self, cfg: FitConfig):
        self.cap = {"X": cfg.alpha_X, "Y": cfg.alpha_Y, "C": cfg.alpha_C}
        self.current = dict(self.cap)

    def start(self, block: str) -> float:
        return min(self.cap[block], 2.0 * self.current[block])

    def accept(self, block: str, alpha: float) -> None:
        self.current[block] = alpha


def m_step(params: ModelParams, stats: EStepStats, cfg: FitConfig, sizes: _StepSizes | None = None) -> ModelParams:
    """Closed-form transition update and one backtracked step per block.

    Each block tries ``alpha, alpha/2, alpha/4, ...`` and keeps halving
    while the cost still improves, so the accepted step is the best one on
    that grid rather than the first that helps.  Taking the first improving
    step lets stiff directions zigzag from one iteration to the next.
    """
    sizes = sizes or _StepSizes(cfg)
    params = params.replace(A=update_transitions(stats.jumps, previous=params.A))
    current = q_cost(params, stats)
    for block in ("X", "Y", "C"):
        grads = cost_gradient(params, stats)
        alpha = sizes.start(block)
        best = None
        for _ in range(cfg.max_halvings):
            trial = projected_update(params, grads, cfg, {block: alpha}, blocks=(block,))
            value = q_cost(trial, stats)
            if best is not None and value >= best[0]:
                break
            if value <= current:
                best = (value, trial, alpha)
            alpha /= 2.0
        if best is not None:
            current, params = best[0], best[1]
            sizes.accept(block, best[2])
    return params


def decode_states(posteriors, order, Q) -> np.ndarray:
    """Most probable state per (t, i, j) from filtered joint posteriors.

    Ties go to the lowest state index.
    """
    posteriors = np.asarray(posteriors)
    out = np.zeros(posteriors.shape[:-1] + (len(Q),), dtype=int)
    for j, q in enumerate(Q):
        member = (order[:, j][:, None] == np.arange(q)[None, :]).astype(float)
        out[..., j] = np.argmax(posteriors @ member, axis=-1)
    return out


def recover(params: ModelParams, stats: EStepStats, mode: str = "mean") -> np.ndarray:
    """Recovered slices ``(T, I, K, N)``.

    ``mean`` averages the mean vectors under the filtered joint posterior;
    ``map`` assembles the slice of the decoded states.
    """
    ell = enumerate_state_index_arrays(params.Q)
    P = mean_vectors(params, ell)  # (I, Q, D)
    post = stats.posteriors  # (T, I, Q)
    if mode == "map":
        decoded = decode_states(post, ell, params.Q)
        radix = np.cumprod((1,) + params.Q[::-1])[:-1][::-1]
        q_idx = (decoded * radix).sum(axis=-1)
        vecs = P[np.arange(params.I)[None, :], q_idx]
    else:
        vecs = np.einsum("tiq,iqd->tid", post, P)
    return unvec(vecs, params.K, params.N)


def mse(recovered, observed) -> float:
    """``1/(I T) sum_{t,i} ||R_i(t) - Z_i(t)||_F^2`` over ``(T, I, K, N)`` arrays."""
    recovered = np.asarray(recovered, dtype=float)
    observed = np.asarray(observed, dtype=float)
    if recovered.shape != observed.shape:
        raise InvalidArgumentError(f"shape mismatch {recovered.shape} vs {observed.shape}")
    T, I = observed.shape[:2]
    return float(((recovered - observed) ** 2).sum() / (I * T))


def fit(obs: ObservationSet, init: ModelParams, cfg: FitConfig | None = None, trace_path=None) -> FitReport:
    """Alternate E- and M-steps until the MSE settles or ``max_iters`` is hit.

    The MSE trace entry ``k`` is measured after ``k`` parameter updates.
    """
    cfg = cfg or FitConfig()
    init.validate(1e-8)
    check_dims(init, obs)
    params = init
    sizes = _StepSizes(cfg)
    trace, lls = [], []
    quiet = 0
    converged = False
    message = ""
    stats = None
    last_good = (params, None)
    for it in range(cfg.max_iters + 1):
        filt = {} if trace_path is not None else None
        try:
            stats = e_step(params, obs, filt)
        except NumericalDegeneracyError as exc:
            message = f"stopped at iteration {it}: {exc}"
            log.warning(message)
            params, stats = last_good
            break
        last_good = (params, stats)
        if filt is not None:
            _dump_trace(trace_path, filt)
        trace.append(mse(recover(params, stats, cfg.recovery), obs.Z))
        lls.append(stats.log_likelihood)
        if len(trace) > 1:
            prev = trace[-2]
            rel = abs(trace[-1] - prev) / max(prev, np.finfo(float).tiny)
            quiet = quiet + 1 if rel < cfg.tol else 0
            if quiet >= cfg.patience:
                converged = True
                break
        if it == cfg.max_iters:
            break
        params = m_step(params, stats, cfg, sizes)
    if stats is None:
        raise NumericalDegeneracyError(message or "E-step failed on the initial parameters")
    ell = enumerate_state_index_arrays(params.Q)
    return FitReport(
        params=params,
        mse_trace=trace,
        states=decode_states(stats.posteriors, ell, params.Q),
        iterations=len(trace) - 1,
        converged=converged,
        log_likelihood=lls,
        message=message,
    )


def _dump_trace(path, filt: dict) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "source", "group", "posterior"])
        for i, steps in sorted(filt.items()):
            for t, groups in enumerate(steps):
                for j, post in enumerate(groups):
                    w.writerow([t, i, j, " ".join(repr(float(v)) for v in post)])


def config_to_dict(cfg: FitConfig) -> dict:
    return asdict(cfg)
