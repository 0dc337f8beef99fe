import itertools

import numpy as np
import pytest

from dyngroup import gaussian
from dyngroup.estimator import observation_vectors
from dyngroup.filters import build_product_chain, product_prior
from dyngroup.generator import GenConfig, random_params, sample_dataset
from dyngroup.model import mean_vectors


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_params():
    """(K, N, I, J, Q) = (3, 3, 1, 2, (2, 2))."""
    return random_params(np.random.default_rng(7), 3, 3, 1, (2, 2))


@pytest.fixture
def small_dataset(small_params):
    obs, hidden = sample_dataset(GenConfig(small_params, T=5, fixed_n=40, seed=3))
    return small_params, obs, hidden


@pytest.fixture
def medium_params():
    return random_params(np.random.default_rng(11), 6, 8, 3, (2, 3))


def enumerate_expectations(params, obs):
    """Brute-force smoothed statistics: sum over every joint state path.

    A path ``s_0, ..., s_T`` has weight ``pi_0(s_0) prod_t Phi(s_{t-1}, s_t)
    lambda_t(s_t)`` with observations at ``t = 1..T``.  Jumps count the
    transitions between observed periods.  Returns a dict of per-source arrays.
    """
    chain = build_product_chain(params.A)
    order = chain.order
    P = mean_vectors(params, order)
    z = observation_vectors(obs)
    n = np.where(obs.missing_slices, 0.0, obs.n)
    S, T, D = chain.size, obs.T, P.shape[-1]
    prior = product_prior(params.initial)
    out = {k: [] for k in ("abar", "nbar", "zetabar", "bbar", "loglik")}
    out["jumps"] = [[] for _ in params.Q]
    for i in range(params.I):
        loglam = np.zeros((T, S))
        for t in range(T):
            if n[t, i] > 0:
                loglam[t] = gaussian.log_likelihood_ratio(P[i], z[t, i][None, :], n[t, i])
        _, g2, g3 = gaussian.g_functions(P[i], z[:, i][:, None, :])
        logw_all, stats = [], []
        for path in itertools.product(range(S), repeat=T + 1):
            lw = np.log(prior[path[0]])
            for t in range(1, T + 1):
                lw += np.log(chain.Phi[path[t - 1], path[t]]) + loglam[t - 1, path[t]]
            a = np.zeros(S)
            nb = np.zeros(S)
            zb = np.zeros((S, D))
            bb = np.zeros((S, D))
            for t in range(1, T + 1):
                q = path[t]
                a[q] += 1
                nb[q] += n[t - 1, i]
                zb[q] += n[t - 1, i] * g2[t - 1, q]
                bb[q] += n[t - 1, i] * g3[t - 1, q]
            jumps = []
            for j, qj in enumerate(params.Q):
                Jm = np.zeros((qj, qj))
                for t in range(1, T):
                    Jm[order[path[t], j], order[path[t + 1], j]] += 1
                jumps.append(Jm)
            logw_all.append(lw)
            stats.append((a, nb, zb, bb, jumps))
        logw = np.array(logw_all)
        top = logw.max()
        w = np.exp(logw - top)
        total = w.sum()
        w /= total
        out["abar"].append(sum(wk * s[0] for wk, s in zip(w, stats)))
        out["nbar"].append(sum(wk * s[1] for wk, s in zip(w, stats)))
        out["zetabar"].append(sum(wk * s[2] for wk, s in zip(w, stats)))
        out["bbar"].append(sum(wk * s[3] for wk, s in zip(w, stats)))
        for j in range(params.J):
            out["jumps"][j].append(sum(wk * s[4][j] for wk, s in zip(w, stats)))
        out["loglik"].append(top + np.log(total))
    res = {k: np.array(v) for k, v in out.items() if k != "jumps"}
    res["jumps"] = [np.array(v) for v in out["jumps"]]
    return res


ACCEPTANCE_LINES = {}


def record_criterion(number: int, passed: bool, detail: str) -> str:
    line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
