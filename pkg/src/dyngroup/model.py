"""Static and dynamic latent-group tensor model.

Every slice ``P_i(t)`` of the dynamic tensor is a mixture over groups of
rank-one PMF outer products, each selected by the group's current Markov
state::

    P_i(t) = sum_j C[i, j] * outer(X_j[:, l_j], Y_j[:, l_j])

State indices are 0-based throughout the package.  Slices are vectorized
column-major (``k + K * n``), the only ordering used anywhere.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

STOCHASTIC_TOL = 1e-10


class InvalidArgumentError(ValueError):
    """Raised when inputs violate a documented precondition."""


def project_to_simplex(v, axis=None):
    """Euclidean projection onto the probability simplex.

    Sort-based algorithm (Held et al. / Duchi et al.).  With ``axis=None``
    the input is treated as a single vector; ``axis=0`` projects every column
    and ``axis=1`` every row of a matrix.
    """
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise InvalidArgumentError("cannot project a non-finite vector")
    if v.size == 0:
        raise InvalidArgumentError("cannot project an empty vector")
    if axis is None:
        return _project_rows(v.reshape(1, -1))[0].reshape(v.shape)
    if axis == 0:
        return _project_rows(v.T).T
    if axis == 1:
        return _project_rows(v)
    raise InvalidArgumentError(f"axis must be None, 0 or 1, got {axis}")


def _project_rows(V):
    n_features = V.shape[1]
    U = np.sort(V, axis=1)[:, ::-1]
    cssv = np.cumsum(U, axis=1) - 1.0
    ind = np.arange(1, n_features + 1)
    rho = np.count_nonzero(U - cssv / ind > 0, axis=1)
    theta = cssv[np.arange(len(V)), rho - 1] / rho
    return np.maximum(V - theta[:, None], 0.0)


def vec(M):
    """Column-major vectorization of a K x N slice (or a stack of them)."""
    M = np.asarray(M)
    return np.swapaxes(M, -1, -2).reshape(*M.shape[:-2], -1)


def unvec(v, K, N):
    """Inverse of :func:`vec`."""
    v = np.asarray(v)
    return np.swapaxes(v.reshape(*v.shape[:-1], N, K), -1, -2)


def enumerate_state_index_arrays(Q: Sequence[int]) -> np.ndarray:
    """All joint state index arrays, mixed radix with the last group fastest.

    Returns an integer array of shape ``(prod(Q), J)``.
    """
    Q = tuple(int(q) for q in Q)
    if not Q or any(q < 1 for q in Q):
        raise InvalidArgumentError(f"state counts must all be >= 1, got {Q}")
    return np.array(list(itertools.product(*(range(q) for q in Q))), dtype=int)


def membership(ell: np.ndarray, j: int, n_states: int) -> np.ndarray:
    """One-hot matrix ``M[q, m] = 1`` iff ``ell[q, j] == m``."""
    return (ell[:, j][:, None] == np.arange(n_states)[None, :]).astype(float)


@dataclass(frozen=True)
class ModelParams:
    """All unknowns of the dynamic model.

    ``X[j]`` is K x Q_j and ``Y[j]`` is N x Q_j (column-stochastic),
    ``C`` is I x J and every ``A[j]`` is Q_j x Q_j (row-stochastic).
    """

    X: tuple
    Y: tuple
    C: np.ndarray
    A: tuple
    initial: tuple = field(default=None)

    def __post_init__(self):
        X = tuple(np.array(x, dtype=float) for x in self.X)
        Y = tuple(np.array(y, dtype=float) for y in self.Y)
        A = tuple(np.array(a, dtype=float) for a in self.A)
        C = np.array(self.C, dtype=float)
        if self.initial is None:
            initial = tuple(np.full(a.shape[0], 1.0 / a.shape[0]) for a in A)
        else:
            initial = tuple(np.array(p, dtype=float) for p in self.initial)
        for arr in (*X, *Y, *A, C, *initial):
            arr.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "initial", initial)
        self._check_shapes()

    def _check_shapes(self):
        J = len(self.X)
        if J == 0 or len(self.Y) != J or len(self.A) != J or len(self.initial) != J:
            raise InvalidArgumentError("X, Y, A and initial must all have one entry per group")
        if self.C.ndim != 2 or self.C.shape[1] != J:
            raise InvalidArgumentError(f"C must be I x {J}, got {self.C.shape}")
        K, N = self.X[0].shape[0], self.Y[0].shape[0]
        for j in range(J):
            q = self.A[j].shape[0]
            if self.A[j].shape != (q, q):
                raise InvalidArgumentError(f"A[{j}] must be square, got {self.A[j].shape}")
            if self.X[j].shape != (K, q) or self.Y[j].shape != (N, q):
                raise InvalidArgumentError(
                    f"group {j}: X must be {K}x{q} and Y {N}x{q}, got "
                    f"{self.X[j].shape} and {self.Y[j].shape}"
                )
            if self.initial[j].shape != (q,):
                raise InvalidArgumentError(f"initial[{j}] must have length {q}")

    @property
    def K(self) -> int:
        return self.X[0].shape[0]

    @property
    def N(self) -> int:
        return self.Y[0].shape[0]

    @property
    def I(self) -> int:  # noqa: E743
        return self.C.shape[0]

    @property
    def J(self) -> int:
        return len(self.X)

    @property
    def Q(self) -> tuple:
        return tuple(a.shape[0] for a in self.A)

    @property
    def dims(self) -> dict:
        return {"K": self.K, "N": self.N, "I": self.I, "J": self.J, "Q": list(self.Q)}

    def validate(self, tol: float = STOCHASTIC_TOL) -> None:
        """Raise :class:`InvalidArgumentError` unless every block is stochastic."""
        checks = [(f"X[{j}]", x, 0) for j, x in enumerate(self.X)]
        checks += [(f"Y[{j}]", y, 0) for j, y in enumerate(self.Y)]
        checks += [(f"A[{j}]", a, 1) for j, a in enumerate(self.A)]
        checks += [("C", self.C, 1)]
        for name, M, axis in checks:
            if not np.all(np.isfinite(M)) or M.min() < -tol:
                raise InvalidArgumentError(f"{name} has negative or non-finite entries")
            if np.abs(M.sum(axis=axis) - 1.0).max() > tol:
                raise InvalidArgumentError(f"{name} is not stochastic along axis {axis}")
        for j, p in enumerate(self.initial):
            if p.min() < -tol or abs(p.sum() - 1.0) > tol:
                raise InvalidArgumentError(f"initial[{j}] is not a probability vector")

    def replace(self, **changes) -> "ModelParams":
        fields = {"X": self.X, "Y": self.Y, "C": self.C, "A": self.A, "initial": self.initial}
        fields.update(changes)
        return ModelParams(**fields)

    def to_dict(self) -> dict:
        return {
            "dims": self.dims,
            "X": [x.tolist() for x in self.X],
            "Y": [y.tolist() for y in self.Y],
            "C": self.C.tolist(),
            "A": [a.tolist() for a in self.A],
            "initial": [p.tolist() for p in self.initial],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelParams":
        params = cls(X=doc["X"], Y=doc["Y"], C=doc["C"], A=doc["A"], initial=doc.get("initial"))
        dims = doc.get("dims")
        if dims is not None and dict(dims, Q=list(dims["Q"])) != params.dims:
            raise InvalidArgumentError(f"dims header {dims} does not match arrays {params.dims}")
        return params

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ModelParams":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _check_source(params: ModelParams, i: int) -> None:
    if not 0 <= i < params.I:
        raise InvalidArgumentError(f"source index {i} outside 0..{params.I - 1}")


def _check_states(params: ModelParams, states) -> np.ndarray:
    states = np.asarray(states, dtype=int)
    if states.shape != (params.J,):
        raise InvalidArgumentError(f"expected {params.J} state indices, got shape {states.shape}")
    for j, (s, q) in enumerate(zip(states, params.Q)):
        if not 0 <= s < q:
            raise InvalidArgumentError(f"state {s} of group {j} outside 0..{q - 1}")
    return states


def assemble_static_slice(x, y, c) -> np.ndarray:
    """``P_i = sum_j c_j x_j y_j^T`` for fixed per-group PMFs.

    ``x`` is K x J, ``y`` is N x J and ``c`` is the length-J mixture row.
    """
    x, y, c = np.asarray(x, float), np.asarray(y, float), np.asarray(c, float)
    if x.ndim != 2 or y.ndim != 2 or c.ndim != 1 or not (x.shape[1] == y.shape[1] == c.shape[0]):
        raise InvalidArgumentError(
            f"incompatible shapes x={x.shape}, y={y.shape}, c={c.shape}"
        )
    return (x * c) @ y.T


def assemble_dynamic_slice(params: ModelParams, i: int, states) -> np.ndarray:
    """The K x N slice ``P_i(t)`` for one joint state index array."""
    _check_source(params, i)
    states = _check_states(params, states)
    out = np.zeros((params.K, params.N))
    for j, l in enumerate(states):
        out += params.C[i, j] * np.outer(params.X[j][:, l], params.Y[j][:, l])
    return out


def mean_vector(params: ModelParams, i: int, states) -> np.ndarray:
    """Column-major vec of :func:`assemble_dynamic_slice`."""
    return vec(assemble_dynamic_slice(params, i, states))


def mean_vectors(params: ModelParams, ell: np.ndarray | None = None) -> np.ndarray:
    """Mean vectors for every source and joint state, shape ``(I, Q, K*N)``."""
    if ell is None:
        ell = enumerate_state_index_arrays(params.Q)
    out = np.zeros((params.I, len(ell), params.N, params.K))
    for j in range(params.J):
        # outer(y, x) laid out (N, K) so that reshape gives column-major vec
        outer = params.Y[j].T[:, :, None] * params.X[j].T[:, None, :]
        out += params.C[:, j][:, None, None, None] * outer[ell[:, j]][None]
    return out.reshape(params.I, len(ell), -1)


def build_cbar(c_j, states, n_states: int) -> np.ndarray:
    """``diag(c_j) [s_1, ..., s_I]^T``: row i holds ``c_j[i]`` at column ``states[i]``."""
    c_j = np.asarray(c_j, dtype=float)
    states = np.asarray(states, dtype=int)
    if states.shape != c_j.shape:
        raise InvalidArgumentError("need exactly one state per source")
    if np.any(states < 0) or np.any(states >= n_states):
        raise InvalidArgumentError(f"state index outside 0..{n_states - 1}")
    out = np.zeros((len(c_j), n_states))
    out[np.arange(len(c_j)), states] = c_j
    return out


def stacked_factors(params: ModelParams, states) -> tuple:
    """``(Xbar, Ybar, Cbar)`` of the Q_s-term PARAFAC form at one time.

    ``states`` is an I x J array of the current state of every (source, group).
    """
    states = np.asarray(states, dtype=int)
    Xbar = np.hstack(params.X)
    Ybar = np.hstack(params.Y)
    Cbar = np.hstack([build_cbar(params.C[:, j], states[:, j], params.Q[j]) for j in range(params.J)])
    return Xbar, Ybar, Cbar


def tensor_from_factors(Xbar, Ybar, Cbar) -> np.ndarray:
    """I x K x N tensor ``sum_q xbar_q o ybar_q o cbar_q``."""
    return np.einsum("kq,nq,iq->ikn", Xbar, Ybar, Cbar)


def k_rank(M, tol: float = 1e-10) -> int:
    """Largest k such that every set of k columns is linearly independent."""
    M = np.asarray(M, dtype=float)
    n_cols = M.shape[1]
    best = 0
    for k in range(1, n_cols + 1):
        for cols in itertools.combinations(range(n_cols), k):
            sub = M[:, cols]
            sv = np.linalg.svd(sub, compute_uv=False)
            if sv.size < k or sv[-1] <= tol * max(1.0, sv[0]):
                return best
        best = k
    return best


@dataclass(frozen=True)
class KruskalReport:
    k_x: int
    k_y: int
    k_c: int
    n_terms: int

    @property
    def unique(self) -> bool:
        return self.k_x + self.k_y + self.k_c >= 2 * self.n_terms + 2


def kruskal_diagnostic(params: ModelParams, states) -> KruskalReport:
    """k-ranks of the stacked factors and Kruskal's sufficient condition."""
    Xbar, Ybar, Cbar = stacked_factors(params, states)
    return KruskalReport(k_rank(Xbar), k_rank(Ybar), k_rank(Cbar), Xbar.shape[1])
