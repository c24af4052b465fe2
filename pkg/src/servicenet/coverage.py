"""Larson-style approximation of expected covered demand.

The number of broken machines is modelled as a finite-source birth-death
chain: breakdown rate ``lam * (K - k)`` and "broken period" completion rate
``mu_hat * min(k, M)``.  From its stationary law we get the distribution of
busy engineers, and from that (assuming exchangeable engineers) the
probability that a call is served by its i-th closest engineer.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from .network import TIME_TOL, NetworkMap

log = logging.getLogger(__name__)


def stationary_distribution(K: int, M: int, lam: float, mu_hat: float) -> np.ndarray:
    """P(k broken), k = 0..K, computed in log space."""
    if K < 1 or M < 1:
        raise ValueError("K and M must be positive")
    if not (lam > 0 and mu_hat > 0):
        raise ValueError(f"rates must be positive, got lam={lam}, mu_hat={mu_hat}")
    k = np.arange(K + 1)
    log_binom = gammaln(K + 1) - gammaln(k + 1) - gammaln(K - k + 1)
    logw = log_binom + k * math.log(lam / mu_hat)
    if M <= K:
        tail = k >= M
        # k!/(M! M^(k-M)) correction once all M engineers are busy
        logw[tail] += gammaln(k[tail] + 1) - gammaln(M + 1) - (k[tail] - M) * math.log(M)
    return np.exp(logw - logsumexp(logw))


def busy_probabilities(p_broken: np.ndarray, M: int) -> np.ndarray:
    """P(S_m) for m = 0..M busy engineers; all mass with >= M broken goes to M."""
    p_broken = np.asarray(p_broken, dtype=float)
    K = len(p_broken) - 1
    out = np.zeros(M + 1)
    upto = min(M, K + 1)
    out[:upto] = p_broken[:upto]
    out[M] = p_broken[M:].sum() if M <= K else 0.0
    return out


def ith_closest_response_prob(p_busy: np.ndarray, M: int) -> np.ndarray:
    """P_i, i = 1..M (returned 0-based): the i-1 closest engineers are busy and
    the i-th is idle."""
    p_busy = np.asarray(p_busy, dtype=float)
    if len(p_busy) != M + 1:
        raise ValueError(f"p_busy must have length M+1={M + 1}")
    out = np.zeros(M)
    for i in range(1, M + 1):
        total = 0.0
        for m in range(i - 1, M + 1):
            # m!/(m-i+1)! * (M-i)!/M!  ==  prod_{j<i-1} (m-j)/(M-j) / (M-i+1)
            coef = 1.0 / (M - i + 1)
            for j in range(i - 1):
                coef *= (m - j) / (M - j)
            total += (M - m) * p_busy[m] * coef
        out[i - 1] = total
    return out


@dataclass(frozen=True)
class CoverageModel:
    lam: float
    mu_hat: float
    K: int
    M: int
    p_broken: np.ndarray
    p_busy: np.ndarray
    p_ith: np.ndarray

    @classmethod
    def build(cls, K: int, M: int, lam: float, mu_hat: float) -> "CoverageModel":
        pb = stationary_distribution(K, M, lam, mu_hat)
        busy = busy_probabilities(pb, M)
        return cls(lam, mu_hat, K, M, pb, busy, ith_closest_response_prob(busy, M))

    @property
    def cum_p(self) -> np.ndarray:
        """cum_p[c] = P_1 + ... + P_c, the covered demand of a machine with c
        engineers within t*."""
        return np.concatenate([[0.0], np.cumsum(self.p_ith)])

    def covered_sum(self, counts: np.ndarray, working: np.ndarray) -> np.ndarray | float:
        """Unnormalized covered demand sum_k sum_i P_i z_ki over working machines.

        ``counts`` has the per-machine number of engineers within t* in its last
        axis (extra leading axes are evaluated in a batch).
        """
        c = np.minimum(counts, self.M)
        return self.cum_p[c][..., working].sum(axis=-1)

    def to_json(self) -> str:
        return json.dumps({
            "lam": self.lam, "mu_hat": self.mu_hat, "K": self.K, "M": self.M,
            "p_broken": self.p_broken.tolist(), "p_busy": self.p_busy.tolist(),
            "p_ith": self.p_ith.tolist(),
        })


def initial_mu_hat(t_star: float, mu: float) -> float:
    return 1.0 / (t_star + 1.0 / mu)


def expected_covered_demand(net: NetworkMap, positions: Sequence[int], p_ith: np.ndarray,
                            working: Sequence[int] | np.ndarray) -> float:
    """Expected fraction of demand from ``working`` machines answered in time.

    ``positions`` are travel-matrix node indices of the engineers considered.
    The i-th closest engineer to machine k counts iff it is within t*.
    """
    working = np.asarray(working, dtype=int)
    if len(working) == 0:
        return 0.0
    p_ith = np.asarray(p_ith, dtype=float)
    pos = np.asarray(positions, dtype=int)
    total = 0.0
    for k in working:
        times = np.sort(net.travel[pos, k]) if len(pos) else np.empty(0)
        z = times[: len(p_ith)] <= net.t_star + TIME_TOL
        total += float(p_ith[: len(z)][z].sum())
    return total / len(working)


def calibrate_mu_hat(
    net: NetworkMap,
    make_policies: Callable[[CoverageModel], tuple],
    config,
    allocation: Sequence[int],
    max_iter: int = 3,
    rtol: float = 0.01,
) -> float:
    """Fixed-point iteration on mu_hat using simulated broken durations.

    The broken duration of a call runs from the moment an engineer is sent to
    the machine until the repair finishes (queue waiting excluded).
    """
    from .sim import run_simulation

    M = int(sum(allocation))
    mu_hat = initial_mu_hat(net.t_star, config.mu)
    for it in range(max_iter):
        model = CoverageModel.build(net.K, M, config.lam, mu_hat)
        dispatcher, relocator = make_policies(model)
        report = run_simulation(net, dispatcher, relocator, config.replace(seed=config.seed + 7919 * (it + 1)),
                                allocation=allocation)
        if not report.service_durations:
            log.warning("no completed repairs in calibration run %d; keeping mu_hat=%g", it, mu_hat)
            break
        new = 1.0 / float(np.mean(report.service_durations))
        change = abs(new - mu_hat) / mu_hat
        mu_hat = new
        if change < rtol:
            break
    return mu_hat
