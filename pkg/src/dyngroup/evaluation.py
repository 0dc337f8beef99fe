"""Comparing estimates with a known truth, up to label permutations.

The model is identifiable only up to a permutation of the groups and, inside
each group, of the Markov states.  :func:`align` finds the relabeling of an
estimate that best matches the truth before any error is reported.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .model import InvalidArgumentError, ModelParams


@dataclass
class Alignment:
    group_perm: tuple  # group_perm[j] = estimated group matched to true group j
    state_perms: tuple  # state_perms[j][q] = estimated state matched to true state q
    cost: float


def _state_match(xt, yt, xe, ye):
    cost = np.abs(xt[:, :, None] - xe[:, None, :]).sum(axis=0) + np.abs(yt[:, :, None] - ye[:, None, :]).sum(axis=0)
    rows, cols = linear_sum_assignment(cost)
    return tuple(int(c) for c in cols[np.argsort(rows)]), float(cost[rows, cols].sum())


def align(truth: ModelParams, est: ModelParams) -> Alignment:
    """Best group and state relabeling of ``est`` (L1 distance of dictionaries and mixture)."""
    if (truth.K, truth.N, truth.I) != (est.K, est.N, est.I) or sorted(truth.Q) != sorted(est.Q):
        raise InvalidArgumentError(f"cannot align models of shapes {truth.dims} and {est.dims}")
    best = None
    for perm in itertools.permutations(range(truth.J)):
        if any(truth.Q[j] != est.Q[perm[j]] for j in range(truth.J)):
            continue
        cost = float(np.abs(truth.C - est.C[:, list(perm)]).sum())
        states = []
        for j, pj in enumerate(perm):
            sp, c = _state_match(truth.X[j], truth.Y[j], est.X[pj], est.Y[pj])
            states.append(sp)
            cost += c
        if best is None or cost < best.cost:
            best = Alignment(tuple(perm), tuple(states), cost)
    return best


def relabel(est: ModelParams, al: Alignment) -> ModelParams:
    """``est`` with groups and states reordered to line up with the truth."""
    X, Y, A, init = [], [], [], []
    for pj, sp in zip(al.group_perm, al.state_perms):
        sp = list(sp)
        X.append(est.X[pj][:, sp])
        Y.append(est.Y[pj][:, sp])
        A.append(est.A[pj][np.ix_(sp, sp)])
        init.append(est.initial[pj][sp])
    return ModelParams(X=X, Y=Y, C=est.C[:, list(al.group_perm)], A=A, initial=init)


def relabel_states(states: np.ndarray, al: Alignment) -> np.ndarray:
    """Map decoded ``(T, I, J)`` estimated state labels onto the true labels."""
    out = np.empty_like(states)
    for j, (pj, sp) in enumerate(zip(al.group_perm, al.state_perms)):
        inverse = np.argsort(sp)
        out[..., j] = inverse[states[..., pj]]
    return out


def parameter_errors(truth: ModelParams, est: ModelParams, true_states=None, est_states=None) -> dict:
    """Mean absolute errors per block after alignment, plus state accuracy when paths are given."""
    al = align(truth, est)
    r = relabel(est, al)
    out = {
        "x_mae": float(np.mean(np.concatenate([np.abs(a - b).ravel() for a, b in zip(truth.X, r.X)]))),
        "y_mae": float(np.mean(np.concatenate([np.abs(a - b).ravel() for a, b in zip(truth.Y, r.Y)]))),
        "c_mae": float(np.mean(np.abs(truth.C - r.C))),
        "a_mae": float(np.mean(np.concatenate([np.abs(a - b).ravel() for a, b in zip(truth.A, r.A)]))),
    }
    if true_states is not None and est_states is not None:
        mapped = relabel_states(np.asarray(est_states), al)
        out["state_accuracy"] = float(np.mean(mapped == np.asarray(true_states)))
    return out
