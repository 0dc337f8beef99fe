"""Degenerate multivariate normal approximation of normalized multinomial counts.

For a PMF ``p`` the covariance ``diag(p) - p p^T`` is singular.  Its
pseudo-determinant and Moore-Penrose inverse have closed forms in terms of
the support indicator ``chi`` and the support reciprocal ``p_plus``, so no
dense matrix is ever inverted.  Densities are with respect to Lebesgue
measure on the affine hull of the support; residual mass outside the
support of ``p`` is ignored by the quadratic form.

All functions broadcast over leading axes: ``p`` may be ``(..., D)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SUPPORT_TOL = 1e-12
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class SupportedProbVector:
    """A PMF together with its support indicator and support reciprocal."""

    p: np.ndarray
    chi: np.ndarray
    p_plus: np.ndarray
    support_size: np.ndarray

    @classmethod
    def from_p(cls, p, tol: float = SUPPORT_TOL) -> "SupportedProbVector":
        p = np.asarray(p, dtype=float)
        on = p >= tol
        chi = on.astype(float)
        p_plus = np.divide(1.0, p, out=np.zeros_like(p), where=on)
        return cls(p=p, chi=chi, p_plus=p_plus, support_size=chi.sum(axis=-1))


def _sp(p) -> SupportedProbVector:
    return p if isinstance(p, SupportedProbVector) else SupportedProbVector.from_p(p)


def covariance(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return np.diag(p) - np.outer(p, p)


def log_pseudo_determinant(p) -> np.ndarray:
    """``log(|chi|_1 * prod_{p_k > 0} p_k)``."""
    sp = _sp(p)
    logs = np.log(np.where(sp.chi > 0, sp.p, 1.0))
    return np.log(sp.support_size) + logs.sum(axis=-1)


def pseudo_determinant(p):
    return np.exp(log_pseudo_determinant(p))


def generalized_inverse(p) -> np.ndarray:
    """``C diag(p_plus) C^T`` with ``C = diag(chi) (I - 1 1^T / |chi|_1)``."""
    sp = _sp(p)
    m = sp.p.shape[-1]
    C = sp.chi[:, None] * (np.eye(m) - 1.0 / sp.support_size)
    return (C * sp.p_plus) @ C.T


def centered_residual(p, z) -> np.ndarray:
    """``C^T (z - p)`` restricted to the support.

    Works for ``p`` off the simplex too: the residual is ``chi*(z-p)`` minus
    its support mean.
    """
    sp = _sp(p)
    z = np.asarray(z, dtype=float)
    w = sp.chi * (z - sp.p)
    mean = w.sum(axis=-1, keepdims=True) / sp.support_size[..., None]
    return sp.chi * (w - mean)


def quadratic_form(p, z) -> np.ndarray:
    """``(z - p)^T Sigma^+ (z - p)`` via the closed form."""
    sp = _sp(p)
    u = centered_residual(sp, z)
    return (u * u * sp.p_plus).sum(axis=-1)


def log_density(p, z, n) -> np.ndarray:
    """Log density of ``z ~ N(p, Sigma(p) / n)`` on the support hyperplane."""
    sp = _sp(p)
    rank = sp.support_size - 1.0
    n = np.asarray(n, dtype=float)
    log_pdet = rank * (LOG_2PI - np.log(n)) + log_pseudo_determinant(sp)
    return -0.5 * log_pdet - 0.5 * n * quadratic_form(sp, z)


def g_functions(p, z):
    """The three weights feeding the E-step sufficient statistics.

    Returns ``(g1, g2, g3)`` where ``g1 = 1``, ``g2 = chi * z`` and
    ``g3 = beta * beta`` with ``beta`` the support-centred ``g2``.
    """
    sp = _sp(p)
    z = np.asarray(z, dtype=float)
    g2 = sp.chi * z
    beta = sp.chi * (g2 - g2.sum(axis=-1, keepdims=True) / sp.support_size[..., None])
    g1 = np.ones(np.broadcast_shapes(sp.p.shape[:-1], z.shape[:-1]))
    return g1, g2, beta * beta


def log_likelihood_ratio(p, z, n) -> np.ndarray:
    """``log f(z | p) - log f_Q(z)`` with ``f_Q = N(0, Sigma^+ Sigma)``.

    Closed form in terms of ``g2 = chi * z`` and
    ``eta = (1 - |g2|_1) / |chi|_1``::

        (s-1)/2 log n - 1/2 log|Sigma|_+ + |g2|_2^2 / 2 - |g2|_1^2 / (2 s)
          - n/2 [z^T (p_plus * z) - 1 + 2 eta z^T p_plus + eta^2 |p_plus|_1]

    The bracket equals the quadratic form only when ``p`` lies on the simplex.
    """
    sp = _sp(p)
    z = np.asarray(z, dtype=float)
    n = np.asarray(n, dtype=float)
    s = sp.support_size
    g2 = sp.chi * z
    g2_l1 = g2.sum(axis=-1)
    eta = (1.0 - g2_l1) / s
    z_pp = (z * sp.p_plus).sum(axis=-1)
    quad = (z * z * sp.p_plus).sum(axis=-1) - 1.0 + 2.0 * eta * z_pp + eta**2 * sp.p_plus.sum(axis=-1)
    return (
        0.5 * (s - 1.0) * np.log(n)
        - 0.5 * log_pseudo_determinant(sp)
        + 0.5 * (g2 * g2).sum(axis=-1)
        - g2_l1**2 / (2.0 * s)
        - 0.5 * n * quad
    )


def likelihood_ratio(p, z, n):
    """Linear-domain ratio; overflows for large ``n``, prefer the log form."""
    return np.exp(log_likelihood_ratio(p, z, n))


@dataclass(frozen=True)
class DegenerateGaussian:
    mean: SupportedProbVector
    n: float

    @classmethod
    def from_p(cls, p, n) -> "DegenerateGaussian":
        return cls(SupportedProbVector.from_p(p), float(n))

    @property
    def covariance(self) -> np.ndarray:
        return covariance(self.mean.p) / self.n

    def log_density(self, z):
        return log_density(self.mean, z, self.n)
