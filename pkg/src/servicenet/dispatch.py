"""Dispatching policies: which engineer answers a new call.

Every policy also fixes the queue discipline: a freed engineer first serves
the call committed to it, then the longest-waiting uncommitted call; an
engineer arriving at a base pulls the longest-waiting uncommitted call.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .coverage import CoverageModel
from .network import TIME_TOL
from .sim import SystemState

SCORE_DIGITS = 12


@dataclass(frozen=True)
class DispatchDecision:
    kind: str  # "dispatch" | "commit" | "enqueue"
    engineer: int | None = None

    @classmethod
    def dispatch(cls, m: int) -> "DispatchDecision":
        return cls("dispatch", m)

    @classmethod
    def commit(cls, m: int) -> "DispatchDecision":
        return cls("commit", m)


ENQUEUE = DispatchDecision("enqueue")


def _longest_waiting(state: SystemState, machines: list[int]) -> int | None:
    if not machines:
        return None
    return min(machines, key=lambda k: (state.machines[k].broken_at, k))


class DispatchPolicy:
    name = "base"
    uses_repair_times = False

    def on_call(self, state: SystemState, k: int) -> DispatchDecision:
        raise NotImplementedError

    def next_job(self, state: SystemState, m: int) -> int | None:
        mine = state.commitments(m)
        if mine:
            return mine[0]
        return _longest_waiting(state, state.uncommitted())

    def pull(self, state: SystemState, m: int) -> int | None:
        return _longest_waiting(state, state.uncommitted())


def _idle_response(state: SystemState, k: int) -> list[tuple[float, int]]:
    return [(state.time_to(n, k), n) for n in state.idle_engineers()]


def dp1_closest(state: SystemState, k: int) -> DispatchDecision:
    """Idle engineer with the smallest response time (ties: lowest index)."""
    cands = _idle_response(state, k)
    if not cands:
        return ENQUEUE
    return DispatchDecision.dispatch(min(cands)[1])


def _candidates(state: SystemState, k: int) -> list[tuple[float, int]]:
    cands = _idle_response(state, k)
    on_time = [c for c in cands if c[0] <= state.env.t_star + TIME_TOL]
    return on_time or cands


def _counts_without(state: SystemState, idle: list[int], within: np.ndarray) -> np.ndarray:
    """(len(idle) x K): for each idle engineer removed, per-machine count of the
    others within t*."""
    nodes = [state.node_of(n) for n in idle]
    per = within[nodes].astype(int)
    return per.sum(axis=0)[None, :] - per


def dp2_max_coverage(state: SystemState, k: int) -> DispatchDecision:
    """Among idle engineers that make it in time (else all idle), send the one
    whose absence leaves the most working machines covered."""
    cands = _candidates(state, k)
    if not cands:
        return ENQUEUE
    idle = state.idle_engineers()
    rest = _counts_without(state, idle, state.env.within)
    working = state.working_mask()
    row = {n: i for i, n in enumerate(idle)}
    best = min(cands, key=lambda c: (-int(((rest[row[c[1]]] >= 1) & working).sum()), c[0], c[1]))
    return DispatchDecision.dispatch(best[1])


def dp3_max_ecd(state: SystemState, k: int, model: CoverageModel) -> DispatchDecision:
    """Like DP2 but scores the remaining configuration by expected covered demand."""
    cands = _candidates(state, k)
    if not cands:
        return ENQUEUE
    idle = state.idle_engineers()
    rest = _counts_without(state, idle, state.env.within)
    scores = np.round(model.covered_sum(rest, state.working_mask()), SCORE_DIGITS)
    row = {n: i for i, n in enumerate(idle)}
    best = min(cands, key=lambda c: (-scores[row[c[1]]], c[0], c[1]))
    return DispatchDecision.dispatch(best[1])


def repair_estimate(mu: float, alpha: float) -> float:
    """alpha-percentile of an Exp(mu) repair duration."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    return -math.log(1.0 - alpha) / mu


def dp_min_response(state: SystemState, k: int, repair_time) -> DispatchDecision:
    """Engineer (idle or busy) with the smallest expected response time.

    ``repair_time(engineer_state, t)`` gives the remaining repair time booked
    for a busy engineer.  Busy engineers that already carry a queued call are
    skipped.  A busy winner receives the call as a commitment.
    """
    best: tuple[float, int, int] | None = None
    for n, e in enumerate(state.engineers):
        if e.idle:
            key = (state.time_to(n, k), 0, n)
        else:
            if state.commitments(n):
                continue
            key = (state.time_to(n, k) + repair_time(e, state.t), 1, n)
        if best is None or key < best:
            best = key
    if best is None:
        return ENQUEUE
    _, busy, n = best
    return DispatchDecision.commit(n) if busy else DispatchDecision.dispatch(n)


class ClosestIdle(DispatchPolicy):
    name = "DP1"

    def on_call(self, state, k):
        return dp1_closest(state, k)


class MaxCoverage(DispatchPolicy):
    name = "DP2"

    def on_call(self, state, k):
        return dp2_max_coverage(state, k)


class MaxExpectedCoverage(DispatchPolicy):
    name = "DP3"

    def __init__(self, model: CoverageModel):
        self.model = model

    def on_call(self, state, k):
        return dp3_max_ecd(state, k, self.model)


class MinResponseEstimated(DispatchPolicy):
    """DP4: remaining repair of a busy engineer guessed as the alpha-percentile."""

    name = "DP4"

    def __init__(self, alpha: float = 0.8):
        self.alpha = alpha
        repair_estimate(1.0, alpha)

    def on_call(self, state, k):
        est = repair_estimate(state.env.mu, self.alpha)

        def remaining(e, t):
            return est if (e.traveling or e.repairing) else 0.0

        return dp_min_response(state, k, remaining)


class MinResponseKnown(DispatchPolicy):
    """DP5: repair durations are known at dispatch time."""

    name = "DP5"
    uses_repair_times = True

    def on_call(self, state, k):
        def remaining(e, t):
            if e.repairing:
                if e.repair_completion is None:
                    raise ValueError("DP5 needs booked repair completion times")
                return max(0.0, e.repair_completion - t)
            if e.traveling:
                if e.repair_duration is None:
                    raise ValueError("DP5 needs sampled repair durations")
                return e.repair_duration
            return 0.0

        return dp_min_response(state, k, remaining)


def make_dispatcher(name: str, model: CoverageModel | None = None, alpha: float = 0.8) -> DispatchPolicy:
    name = name.upper()
    if name == "DP1":
        return ClosestIdle()
    if name == "DP2":
        return MaxCoverage()
    if name == "DP3":
        if model is None:
            raise ValueError("DP3 needs a coverage model")
        return MaxExpectedCoverage(model)
    if name == "DP4":
        return MinResponseEstimated(alpha)
    if name == "DP5":
        return MinResponseKnown()
    raise ValueError(f"unknown dispatch policy {name!r}")


DISPATCH_NAMES = ("DP1", "DP2", "DP3", "DP4", "DP5")
