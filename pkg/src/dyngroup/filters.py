"""Change-of-measure recursive filters for the E-step.

Every filtered quantity is an unnormalized conditional expectation under the
reference measure, e.g. ``F(pi(t)) = E_Q[Lambda(t) pi(t) | Z_t]``.  Ratios of
inner products against ``F(pi(T))`` give the smoothed terminal totals the
M-step needs, with a single forward pass and O(1) memory in T.

The single-vector ``step_*`` functions implement the recursions as written
for one quantity at a time.  :class:`FilterBank` runs all of them together
for one source, vectorized and rescaled after every step to avoid
underflow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import enumerate_state_index_arrays, membership


class NumericalDegeneracyError(RuntimeError):
    """A filter lost all its mass: model support and data disagree."""


@dataclass(frozen=True)
class ProductChain:
    """Joint Markov chain over all groups' states.

    ``order[q]`` is the state index array of joint state ``q`` and
    ``Phi[k, m] = prod_j A_j[order[k, j], order[m, j]]``.
    """

    order: np.ndarray
    Phi: np.ndarray
    Q: tuple
    memberships: tuple
    A: tuple

    @property
    def size(self) -> int:
        return len(self.order)


def build_product_chain(transitions) -> ProductChain:
    A = [np.asarray(a, dtype=float) for a in transitions]
    Q = tuple(a.shape[0] for a in A)
    order = enumerate_state_index_arrays(Q)
    Phi = np.ones((len(order), len(order)))
    for j, a in enumerate(A):
        Phi *= a[np.ix_(order[:, j], order[:, j])]
    members = tuple(membership(order, j, q) for j, q in enumerate(Q))
    return ProductChain(order=order, Phi=Phi, Q=Q, memberships=members, A=tuple(A))


def product_prior(initial) -> np.ndarray:
    """Joint distribution of independent per-group priors in enumeration order."""
    out = np.ones(1)
    for p in initial:
        out = np.outer(out, np.asarray(p, dtype=float)).ravel()
    return out


def omega_weights(lambdas, order: np.ndarray, j: int, n_states: int) -> np.ndarray:
    """``omega[m] = sum of lambda over joint states whose group-j entry is m``."""
    return np.asarray(lambdas, dtype=float) @ membership(order, j, n_states)


def _check_mass(F, what: str):
    if not np.sum(F) > 0:
        raise NumericalDegeneracyError(f"{what} filter has no mass left")
    return F


def step_state_filter(F_s, A, omega) -> np.ndarray:
    """``F(s(t+1)) = diag(omega(t+1)) A^T F(s(t))``."""
    return _check_mass(np.asarray(omega) * (np.asarray(A).T @ F_s), "state")


def step_pi_filter(F_pi, Phi, lam) -> np.ndarray:
    """``F(pi(t+1)) = diag(lambda(t+1)) Phi^T F(pi(t))``."""
    return _check_mass(np.asarray(lam) * (np.asarray(Phi).T @ F_pi), "product-state")


def step_jump_filter(F_J, F_s, A, omega, k: int, m: int) -> np.ndarray:
    """Group-level jump filter for transitions ``k -> m``."""
    A = np.asarray(A)
    out = np.asarray(omega) * (A.T @ F_J)
    out[m] += omega[m] * A[k, m] * F_s[k]
    return out


def step_occupation_filter(F_Gamma, F_pi, Phi, lam, q: int) -> np.ndarray:
    """Occupation-time filter for joint state ``q``."""
    Phi = np.asarray(Phi)
    out = np.asarray(lam) * (Phi.T @ F_Gamma)
    out[q] += lam[q] * (Phi[:, q] @ F_pi)
    return out


def step_T_filter(F_T, F_pi, Phi, lam, q: int, n_t: float, g_val: float) -> np.ndarray:
    """Weighted occupation filter: increment scaled by ``n(t+1) g(t+1)``."""
    Phi = np.asarray(Phi)
    out = np.asarray(lam) * (Phi.T @ F_T)
    out[q] += n_t * g_val * lam[q] * (Phi[:, q] @ F_pi)
    return out


def step_product_jump_filter(F_J, F_pi, Phi, lam, member_j, k: int, m: int) -> np.ndarray:
    """Jump filter for group j lifted to the product chain.

    Counts ``k -> m`` transitions of group j while conditioning on the joint
    state, so it stays exact when the likelihood couples groups.  For a
    single group it coincides with :func:`step_jump_filter`.
    """
    Phi = np.asarray(Phi)
    out = np.asarray(lam) * (Phi.T @ F_J)
    from_k = member_j[:, k] * F_pi
    out += member_j[:, m] * lam * (from_k @ Phi)
    return out


@dataclass
class SourceStats:
    """Terminal conditional expectations for one source."""

    jumps: list
    abar: np.ndarray
    nbar: np.ndarray
    zetabar: np.ndarray
    bbar: np.ndarray
    log_likelihood: float


class FilterBank:
    """All filters of one source advanced together.

    Every filter is linear in ``Lambda``, so all of them share a single
    running scale: after each step everything is divided by the mass of
    ``F(pi)`` and the log of the divisor is accumulated.

    With ``batch=B`` the bank holds ``B`` independent sources stacked on a
    leading axis; each source keeps its own scale and nothing is shared
    between them except the chain.
    """

    def __init__(self, chain: ProductChain, initial, dim: int, batch: int | None = None):
        self.chain = chain
        self.batch = batch
        lead = () if batch is None else (batch,)
        Q = chain.size
        self.F_pi = np.broadcast_to(product_prior(initial), lead + (Q,)).copy()
        self.F_s = [np.broadcast_to(np.asarray(p, dtype=float), lead + (len(p),)).copy() for p in initial]
        self.F_J = [np.zeros(lead + (q, q, Q)) for q in chain.Q]
        self.F_Gamma = np.zeros(lead + (Q, Q))
        self.F_Tn = np.zeros(lead + (Q, Q))
        # weighted-sum filters are stored component-major: (..., D, Q, Q)
        self.F_Tz = np.zeros(lead + (dim, Q, Q))
        self.F_Tb = np.zeros(lead + (dim, Q, Q))
        self.log_scale = np.zeros(lead)
        self.t = 0

    def step(self, log_lam, n_t, g2, g3) -> None:
        """Advance by one period.

        ``log_lam`` is the length-Q log likelihood-ratio vector; ``g2`` and
        ``g3`` are ``(Q, D)`` arrays of the g-functions at this period.  In
        batch mode every argument gains a leading source axis.
        """
        Phi = self.chain.Phi
        log_lam = np.asarray(log_lam, dtype=float)
        shift = np.max(log_lam, axis=-1, keepdims=True)
        with np.errstate(invalid="ignore"):
            lam = np.exp(log_lam - shift)
        n_t = np.asarray(n_t, dtype=float)[..., None]
        f_old = self.F_pi
        f_new = lam * (f_old @ Phi)
        mass = f_new.sum(axis=-1, keepdims=True)
        if not np.all(mass > 0) or not np.all(np.isfinite(mass)):
            raise NumericalDegeneracyError(f"product-state filter lost its mass at t={self.t + 1}")
        d = np.arange(self.chain.size)
        lam_cols = lam[..., None, :]

        self.F_Gamma = (self.F_Gamma @ Phi) * lam_cols
        self.F_Gamma[..., d, d] += f_new
        self.F_Tn = (self.F_Tn @ Phi) * lam_cols
        self.F_Tn[..., d, d] += n_t * f_new
        self.F_Tz = (self.F_Tz @ Phi) * lam[..., None, None, :]
        self.F_Tz[..., d, d] += np.swapaxes(np.asarray(g2) * (n_t * f_new)[..., None], -1, -2)
        self.F_Tb = (self.F_Tb @ Phi) * lam[..., None, None, :]
        self.F_Tb[..., d, d] += np.swapaxes(np.asarray(g3) * (n_t * f_new)[..., None], -1, -2)

        flow = f_old[..., :, None] * Phi
        for j, member in enumerate(self.chain.memberships):
            F = (self.F_J[j] @ Phi) * lam[..., None, None, :]
            if self.t > 0:
                from_k = member.T @ flow
                F += (from_k * lam_cols)[..., :, None, :] * member.T[None, :, :]
            self.F_J[j] = F
            omega = lam @ member
            F_s = omega * (self.F_s[j] @ self.chain.A[j])
            total = F_s.sum(axis=-1, keepdims=True)
            self.F_s[j] = np.divide(F_s, total, out=F_s.copy(), where=total > 0)

        self.F_pi = f_new / mass
        self.F_Gamma /= mass[..., None]
        self.F_Tn /= mass[..., None]
        self.F_Tz /= mass[..., None, None]
        self.F_Tb /= mass[..., None, None]
        for j in range(len(self.F_J)):
            self.F_J[j] /= mass[..., None, None]
        self.log_scale = self.log_scale + (np.log(mass) + shift)[..., 0]
        self.t += 1

    @property
    def posterior(self) -> np.ndarray:
        return self.F_pi / self.F_pi.sum(axis=-1, keepdims=True)

    def group_posteriors(self) -> list:
        """Per-group state marginals of the joint posterior."""
        post = self.posterior
        return [post @ m for m in self.chain.memberships]

    def finalize(self) -> SourceStats:
        """Read off expectations as inner-product ratios at the current time."""
        denom = self.F_pi.sum(axis=-1)
        if not np.all(denom > 0):
            raise NumericalDegeneracyError("zero denominator at finalization")
        dn = denom[..., None]
        return SourceStats(
            jumps=[F.sum(axis=-1) / dn[..., None] for F in self.F_J],
            abar=self.F_Gamma.sum(axis=-1) / dn,
            nbar=self.F_Tn.sum(axis=-1) / dn,
            zetabar=np.swapaxes(self.F_Tz.sum(axis=-1), -1, -2) / dn[..., None],
            bbar=np.swapaxes(self.F_Tb.sum(axis=-1), -1, -2) / dn[..., None],
            log_likelihood=self.log_scale + np.log(denom),
        )


def run_source(chain: ProductChain, initial, log_lam, n, g2, g3, trace=None):
    """Run one source's filters over all periods.

    Returns the advanced :class:`FilterBank` and the ``(T, Q)`` filtered
    joint posteriors.  ``trace`` may be a list that receives the per-group
    posteriors at every step.  Arrays with an extra source axis after the
    time axis (``log_lam`` of shape ``(T, B, Q)``) run a batched bank.
    """
    log_lam = np.asarray(log_lam, dtype=float)
    batch = log_lam.shape[1] if log_lam.ndim == 3 else None
    bank = FilterBank(chain, initial, np.shape(g2)[-1], batch=batch)
    posts = np.zeros(log_lam.shape)
    for t in range(log_lam.shape[0]):
        bank.step(log_lam[t], n[t], g2[t], g3[t])
        posts[t] = bank.posterior
        if trace is not None:
            trace.append(bank.group_posteriors())
    return bank, posts


@dataclass
class EStepStats:
    """Conditional expectations for every source, stacked.

    ``jumps[j]`` is ``(I, Q_j, Q_j)``; ``abar``/``nbar`` are ``(I, Q)``;
    ``zetabar``/``bbar`` are ``(I, Q, D)``.  ``chi`` records the support of
    every mean vector the statistics were computed with.
    """

    jumps: list
    abar: np.ndarray
    nbar: np.ndarray
    zetabar: np.ndarray
    bbar: np.ndarray
    chi: np.ndarray
    log_likelihood: float
    posteriors: np.ndarray | None = None


def finalize_estep(banks, chi=None, posteriors=None) -> EStepStats:
    """Stack the terminal expectations of the given banks along the source axis.

    Each bank may hold one source or a batch of them.
    """
    parts = []
    for bank in banks:
        st = bank.finalize()
        lift = (lambda a: a) if bank.batch is not None else (lambda a: np.asarray(a)[None])
        parts.append(SourceStats(
            jumps=[lift(x) for x in st.jumps],
            abar=lift(st.abar),
            nbar=lift(st.nbar),
            zetabar=lift(st.zetabar),
            bbar=lift(st.bbar),
            log_likelihood=lift(st.log_likelihood),
        ))
    J = len(parts[0].jumps)
    cat = np.concatenate
    return EStepStats(
        jumps=[cat([p.jumps[j] for p in parts]) for j in range(J)],
        abar=cat([p.abar for p in parts]),
        nbar=cat([p.nbar for p in parts]),
        zetabar=cat([p.zetabar for p in parts]),
        bbar=cat([p.bbar for p in parts]),
        chi=chi,
        log_likelihood=float(cat([p.log_likelihood for p in parts]).sum()),
        posteriors=posteriors,
    )
