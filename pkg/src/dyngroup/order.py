"""Model-order selection and k-means initialization.

The number of clusters is picked with the ``f(K)`` criterion of Pham et al.: ``f(K) = S_K / (alpha_K S_{K-1})`` where ``S_K`` is the
k-means distortion and ``alpha_K`` corrects for the dimension of the data.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.cluster import KMeans
from sklearn.decomposition import NMF
from sklearn.exceptions import ConvergenceWarning

from .estimator import FitConfig, e_step, m_step, mse, recover
from .generator import ObservationSet
from .model import InvalidArgumentError, ModelParams, project_to_simplex, unvec

PHAM_THRESHOLD = 0.85


@dataclass
class FeatureSet:
    """Feature vectors, one per observed (t, i) slice.

    ``index[r] = (t, i)`` locates row ``r`` of ``vectors``.
    """

    vectors: np.ndarray
    index: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=float)
        if self.vectors.ndim != 2 or not np.all(np.isfinite(self.vectors)):
            raise InvalidArgumentError("features must be a finite 2-D array")

    def subset(self, rows) -> "FeatureSet":
        return FeatureSet(self.vectors[rows], self.index[rows])


def slice_features(obs: ObservationSet) -> FeatureSet:
    """Column-major vectorized normalized slices of every observed period."""
    keep = np.argwhere(~obs.missing_slices)
    vecs = np.swapaxes(obs.Z, -1, -2).reshape(obs.T, obs.I, -1)
    return FeatureSet(vecs[keep[:, 0], keep[:, 1]], keep)


def degree_features(obs: ObservationSet) -> FeatureSet:
    """Weighted degree centrality (row sums) of every observed adjacency slice."""
    keep = np.argwhere(~obs.missing_slices)
    return FeatureSet(obs.Z.sum(axis=3)[keep[:, 0], keep[:, 1]], keep)


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    distortion: float


def kmeans(features, k: int, seed: int = 0, n_init: int = 10) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeding.

    Rows are put in a canonical (lexicographic) order before clustering, so
    the result does not depend on the order of the input vectors.
    """
    X = features.vectors if isinstance(features, FeatureSet) else np.asarray(features, dtype=float)
    if k < 1 or k > len(X):
        raise InvalidArgumentError(f"k must lie in 1..{len(X)}, got {k}")
    perm = np.lexsort(X.T[::-1])
    km = KMeans(n_clusters=k, init="k-means++", n_init=n_init, random_state=seed).fit(X[perm])
    labels = np.empty(len(X), dtype=int)
    labels[perm] = km.labels_
    return KMeansResult(labels=labels, centroids=km.cluster_centers_, distortion=float(max(km.inertia_, 0.0)))


def pham_alpha(k: int, dim: int) -> float:
    """Weight ``alpha_k`` of the f(K) criterion (defined for k >= 2)."""
    alpha = 1.0 - 3.0 / (4.0 * dim)
    for _ in range(3, k + 1):
        alpha += (1.0 - alpha) / 6.0
    return alpha


@dataclass
class OrderSelection:
    k: int
    scores: dict
    distortions: dict


def select_order(features, k_max: int, seed: int = 0, threshold: float = PHAM_THRESHOLD) -> OrderSelection:
    """Smallest k with ``f(k) < threshold``, else 1."""
    X = features.vectors if isinstance(features, FeatureSet) else np.asarray(features, dtype=float)
    if k_max < 2:
        raise InvalidArgumentError("k_max must be at least 2")
    distinct = len(np.unique(X, axis=0))
    k_max = min(k_max, distinct)
    S = {1: kmeans(X, 1, seed).distortion}
    f = {1: 1.0}
    if S[1] <= 0:
        return OrderSelection(1, f, S)
    dim = X.shape[1]
    for k in range(2, k_max + 1):
        S[k] = kmeans(X, k, seed).distortion
        f[k] = S[k] / (pham_alpha(k, dim) * S[k - 1]) if S[k - 1] > 0 else 1.0
    chosen = next((k for k in range(2, k_max + 1) if f[k] < threshold), 1)
    return OrderSelection(chosen, f, S)


def select_orders(features: FeatureSet, J_max: int, Q_max: int, seed: int = 0):
    """Number of groups, then number of states for every group's slices."""
    J = select_order(features, J_max, seed).k if len(features.vectors) > 1 else 1
    labels = kmeans(features, J, seed).labels
    Q = []
    for j in range(J):
        rows = np.flatnonzero(labels == j)
        Q.append(select_order(features.vectors[rows], Q_max, seed).k if len(rows) > 1 else 1)
    return J, tuple(Q)


def _centroids_for(points: np.ndarray, all_points: np.ndarray, q: int, seed: int) -> np.ndarray:
    """``q`` centroids for one group; re-seeds on too few points, then merges."""
    if len(points) >= q:
        res = kmeans(points, q, seed)
        if len(np.unique(res.labels)) == q:
            return res.centroids
    # re-seed once from all points of the data set
    pool = all_points if len(all_points) >= q else np.repeat(all_points, q, axis=0)
    res = kmeans(pool, q, seed + 1)
    cents = res.centroids
    if len(points):
        # merge: pull every centroid towards the group's own mean
        cents = 0.5 * (cents + points.mean(axis=0))
    return cents


def init_params(
    obs: ObservationSet,
    J: int,
    Q,
    symmetric: bool = False,
    seed: int = 0,
    features: FeatureSet | None = None,
    n_candidates: int = 5,
    fit_cfg: FitConfig | None = None,
) -> ModelParams:
    """k-means initialization of dictionaries, mixture and transitions.

    Groups come from k-means over all slice features; within each group a
    second k-means gives one centroid per state, whose row and column
    marginals seed ``X_j`` and ``Y_j``.  The mixture starts from per-source
    label counts and the best of ``n_candidates`` perturbations (scored by
    the MSE after one EM iteration) is returned.  When the groups have
    different state counts, each way of matching clusters to groups is
    scored the same way.
    """
    Q = tuple(int(q) for q in Q)
    if len(Q) != J:
        raise InvalidArgumentError(f"need {J} state counts, got {Q}")
    if symmetric and obs.K != obs.N:
        raise InvalidArgumentError("symmetric initialization needs K == N")
    rng = np.random.default_rng(seed)
    slices = slice_features(obs)
    feats = features or slices
    if len(feats.vectors) < J:
        raise InvalidArgumentError("fewer observed slices than groups")
    labels = kmeans(feats, J, seed).labels
    counts = np.zeros((obs.I, J))
    np.add.at(counts, (feats.index[:, 1], labels), 1.0)
    A = [np.full((q, q), 1.0 / q) for q in Q]
    cfg = fit_cfg or FitConfig()

    # k-means labels are arbitrary, so every distinct way of handing the
    # state counts to the clusters is a candidate too
    best, best_score = None, np.inf
    for perm in _cluster_assignments(Q):
        X, Y = _dictionaries(obs, slices, labels, perm, Q, symmetric, seed, rng)
        sub = counts[:, list(perm)]
        base = (sub + 1.0) / (sub + 1.0).sum(axis=1, keepdims=True)
        candidates = [base]
        for _ in range(max(n_candidates, 1) - 1):
            noisy = base * rng.dirichlet(np.ones(J) * 2.0, size=obs.I) * J
            candidates.append(noisy / noisy.sum(axis=1, keepdims=True))
        for C in candidates:
            params = ModelParams(X=X, Y=Y, C=C, A=A)
            if best is None:
                best = params
            if len(candidates) == 1 and len(set(Q)) == 1:
                return params
            score = one_step_score(params, obs, cfg)
            if score < best_score:
                best, best_score = params, score
    return best


def _cluster_assignments(Q, limit: int = 24):
    """Cluster orders ``perm`` (group j uses cluster ``perm[j]``) that give distinct state-count layouts."""
    seen, out = set(), []
    for perm in itertools.permutations(range(len(Q))):
        key = tuple(Q[c] for c in perm)
        if key in seen:
            continue
        seen.add(key)
        out.append(perm)
        if len(out) >= limit:
            break
    return out


def _dictionaries(obs, slices, labels, perm, Q, symmetric, seed, rng):
    """Per-group state centroids turned into dictionary columns."""
    X, Y = [], []
    for j, cluster in enumerate(perm):
        rows = np.flatnonzero(labels == cluster)
        cents = _centroids_for(slices.vectors[rows], slices.vectors, Q[j], seed)
        mats = unvec(np.clip(cents, 0.0, None), obs.K, obs.N)  # (Q_j, K, N)
        xj = mats.sum(axis=2).T
        yj = mats.sum(axis=1).T
        if symmetric:
            xj = 0.5 * (xj + yj)
        xj = _feasible(xj, rng)
        X.append(xj)
        Y.append(xj.copy() if symmetric else _feasible(yj, rng))
    return X, Y


def _feasible(M: np.ndarray, rng, floor: float = 1e-3) -> np.ndarray:
    """Project columns to the simplex and keep every entry strictly positive."""
    M = project_to_simplex(M, axis=0)
    M = M + floor * rng.random(M.shape)
    return M / M.sum(axis=0, keepdims=True)


def _partitions(items, sizes):
    """All ways to split ``items`` into consecutive blocks of the given sizes."""
    if not sizes:
        yield []
        return
    for block in itertools.combinations(items, sizes[0]):
        rest = [a for a in items if a not in block]
        for tail in _partitions(rest, sizes[1:]):
            yield [list(block)] + tail


def _group_atoms(co: np.ndarray, Q, max_partitions: int = 20000):
    """Split atoms into groups of sizes ``Q`` with little within-group co-activation.

    A slice uses exactly one state per group, so two atoms that often fire
    together belong to different groups.
    """
    R = len(co)
    n_parts = 1
    left = R
    for q in Q:
        n_parts *= int(np.prod(range(left - q + 1, left + 1)) // np.prod(range(1, q + 1)))
        left -= q
    if n_parts <= max_partitions:
        best, best_score = None, np.inf
        for groups in _partitions(list(range(R)), list(Q)):
            score = sum(co[np.ix_(g, g)].sum() - np.trace(co[np.ix_(g, g)]) for g in groups)
            if score < best_score:
                best, best_score = groups, score
        return best
    # greedy: strongest atoms first, each to the open group it overlaps least
    groups = [[] for _ in Q]
    for a in np.argsort(-np.diag(co)):
        open_ = [j for j, q in enumerate(Q) if len(groups[j]) < q]
        j = min(open_, key=lambda j: co[a, groups[j]].sum())
        groups[j].append(int(a))
    return groups


def nmf_init_params(obs: ObservationSet, J: int, Q, symmetric: bool = False, seed: int = 0) -> ModelParams:
    """Initialization from a nonnegative factorization of the stacked slices.

    Every slice is a convex combination of one rank-one atom ``x y^T`` per
    group, so an NMF with ``sum(Q)`` components recovers the atoms up to
    grouping.  Atoms are assigned to groups by :func:`_group_atoms` and the
    mixture comes from each source's average activation per group.
    """
    Q = tuple(int(q) for q in Q)
    if len(Q) != J:
        raise InvalidArgumentError(f"need {J} state counts, got {Q}")
    rng = np.random.default_rng(seed)
    feats = slice_features(obs)
    R = sum(Q)
    if len(feats.vectors) < R:
        raise InvalidArgumentError("fewer observed slices than dictionary columns")
    model = NMF(n_components=R, init="nndsvda", random_state=seed, max_iter=500)
    with warnings.catch_warnings():
        # a rough factorization is enough for a starting point
        warnings.simplefilter("ignore", ConvergenceWarning)
        W = model.fit_transform(feats.vectors)
    H = model.components_
    mass = H.sum(axis=1)
    mass[mass <= 0] = 1.0
    W = W * mass
    mats = unvec(H / mass[:, None], obs.K, obs.N)
    xs, ys = mats.sum(axis=2).T, mats.sum(axis=1).T
    act = W / np.maximum(W.sum(axis=1, keepdims=True), 1e-300)
    groups = _group_atoms(act.T @ act, Q)

    X, Y = [], []
    weights = np.full((obs.I, J), 1e-3)
    for j, g in enumerate(groups):
        xj, yj = xs[:, g], ys[:, g]
        if symmetric:
            xj = 0.5 * (xj + yj)
        xj = _feasible(xj, rng)
        X.append(xj)
        Y.append(xj.copy() if symmetric else _feasible(yj, rng))
        np.add.at(weights[:, j], feats.index[:, 1], act[:, g].sum(axis=1))
    C = weights / weights.sum(axis=1, keepdims=True)
    A = [np.full((q, q), 1.0 / q) for q in Q]
    return ModelParams(X=X, Y=Y, C=C, A=A)


def one_step_score(params: ModelParams, obs: ObservationSet, cfg: FitConfig | None = None) -> float:
    """MSE after one EM iteration from ``params``; ``inf`` if the filters degenerate."""
    cfg = cfg or FitConfig()
    try:
        stepped = m_step(params, e_step(params, obs), cfg)
        return mse(recover(stepped, e_step(stepped, obs), cfg.recovery), obs.Z)
    except (RuntimeError, FloatingPointError):
        return np.inf


def best_init(obs: ObservationSet, J: int, Q, symmetric: bool = False, seed: int = 0,
              features: FeatureSet | None = None, methods=("kmeans", "nmf")) -> tuple[ModelParams, str]:
    """Build one initialization per method and keep the lowest one-step MSE."""
    builders = {
        "kmeans": lambda: init_params(obs, J, Q, symmetric=symmetric, seed=seed, features=features),
        "nmf": lambda: nmf_init_params(obs, J, Q, symmetric=symmetric, seed=seed),
    }
    unknown = set(methods) - set(builders)
    if unknown or not methods:
        raise InvalidArgumentError(f"unknown init methods {sorted(unknown)}")
    scored = []
    for name in methods:
        params = builders[name]()
        scored.append((one_step_score(params, obs), name, params))
    score, name, params = min(scored, key=lambda item: item[0])
    return params, name
