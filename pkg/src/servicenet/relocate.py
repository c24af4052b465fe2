"""Relocation policies: where idle engineers wait.

A policy answers two questions: after a dispatch, should one idle engineer
move to another base; and when an engineer finishes a repair with nothing
queued, which base should it return to.  Idle engineers still travelling to
a base count as already being there.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .coverage import CoverageModel
from .sim import SystemState

SCORE_DIGITS = 9


@dataclass
class ComplianceTable:
    """``levels[m-1][r]``: engineers wanted at base r when m are idle."""

    levels: list[list[int]]

    def __post_init__(self):
        self.levels = [[int(v) for v in row] for row in self.levels]
        if not self.levels or len({len(r) for r in self.levels}) != 1:
            raise ValueError("compliance table needs M rows of equal length R")

    @property
    def M(self) -> int:
        return len(self.levels)

    @property
    def R(self) -> int:
        return len(self.levels[0])

    def level(self, m: int) -> np.ndarray:
        return np.array(self.levels[m - 1])

    def violations(self) -> list[str]:
        out = []
        for m, row in enumerate(self.levels, start=1):
            if any(v < 0 for v in row):
                out.append(f"level {m} has negative entries")
            if sum(row) != m:
                out.append(f"level {m} places {sum(row)} engineers")
        for m in range(1, self.M):
            arrivals = sum(max(0, a - b) for a, b in zip(self.levels[m - 1], self.levels[m]))
            if arrivals > 1:
                out.append(f"going from level {m + 1} to {m} needs {arrivals} arrivals")
        return out

    def to_json(self) -> str:
        return json.dumps({"levels": self.levels})

    @classmethod
    def from_json(cls, text: str) -> "ComplianceTable":
        return cls(json.loads(text)["levels"])


class RelocationPolicy:
    name = "base"
    allocation: list[int] | None = None

    def on_dispatch(self, state: SystemState, dispatched: int, k: int) -> tuple[int, int] | None:
        return None

    def on_free(self, state: SystemState, m: int, k: int) -> tuple[int, tuple[int, int] | None]:
        raise NotImplementedError


class StaticBases(RelocationPolicy):
    """RP1: every engineer returns to its home base."""

    name = "RP1"

    def __init__(self, allocation: Sequence[int]):
        self.allocation = [int(a) for a in allocation]
        self.home = [r for r, c in enumerate(self.allocation) for _ in range(c)]

    def on_free(self, state, m, k):
        return self.home[m], None


def _smallest_idle_at(state: SystemState, r: int, exclude: Sequence[int] = ()) -> int | None:
    for n in state.idle_engineers():
        if n not in exclude and state.engineers[n].dest.index == r:
            return n
    return None


class CompliancePolicy(RelocationPolicy):
    """RP2/RP3: keep the idle configuration equal to the table row."""

    def __init__(self, table: ComplianceTable, name: str = "RP2"):
        bad = table.violations()
        if bad:
            raise ValueError("invalid compliance table: " + "; ".join(bad))
        self.table = table
        self.name = name
        self.allocation = list(table.levels[-1])

    def on_dispatch(self, state, dispatched, k):
        occ = state.idle_occupancy(exclude=[dispatched])
        m = int(occ.sum())
        if m == 0:
            return None
        diff = occ - self.table.level(m)
        surplus = np.flatnonzero(diff > 0)
        deficit = np.flatnonzero(diff < 0)
        if len(deficit) == 0:
            return None
        mb = state.env.net.travel[state.env.net.K:, state.env.net.K:]
        best = None
        for r1 in surplus:
            for r2 in deficit:
                key = (mb[r1, r2], r1, r2)
                if best is None or key < best:
                    best = key
        _, r1, r2 = best
        return _smallest_idle_at(state, int(r1), exclude=[dispatched]), int(r2)

    def on_free(self, state, m, k):
        occ = state.idle_occupancy()
        target = self.table.level(min(int(occ.sum()) + 1, self.table.M))
        deficit = np.flatnonzero(occ < target)
        if len(deficit) == 0:
            deficit = np.arange(state.env.net.R)
        dist = state.env.net.machine_base[k, deficit]
        return int(deficit[int(np.argmin(dist))]), None


@dataclass(frozen=True)
class RP5Restrictions:
    max_redeploy_dist: float = math.inf
    max_reloc_dist: float = math.inf
    min_improvement: float = 0.0

    def to_dict(self) -> dict:
        return {"max_redeploy_dist": self.max_redeploy_dist, "max_reloc_dist": self.max_reloc_dist,
                "min_improvement": self.min_improvement}


UNRESTRICTED = RP5Restrictions()


def dmexclp_redeploy(state: SystemState, k: int, model: CoverageModel,
                     restrictions: RP5Restrictions = UNRESTRICTED) -> int:
    """Base maximizing expected covered demand once the freed engineer sits there."""
    net = state.env.net
    dist = net.machine_base[k]
    allowed = np.flatnonzero(dist <= restrictions.max_redeploy_dist)
    if len(allowed) == 0:
        allowed = np.arange(net.R)
    occ = state.idle_occupancy()
    base_counts = net.cover.astype(int) @ occ
    counts = base_counts[None, :] + net.cover.T[allowed].astype(int)
    scores = np.round(model.covered_sum(counts, state.working_mask()), SCORE_DIGITS)
    return int(allowed[int(np.argmax(scores))])


def dmexclp_relocate_on_dispatch(state: SystemState, dispatched: int, model: CoverageModel,
                                 restrictions: RP5Restrictions = UNRESTRICTED) -> tuple[int, int] | None:
    """Single idle-engineer move r1 -> r2 with the largest coverage gain.

    Gains are in machine units (unnormalized expected covered demand) and
    must exceed ``min_improvement``.
    """
    net = state.env.net
    occ = state.idle_occupancy(exclude=[dispatched])
    if occ.sum() == 0:
        return None
    cover = net.cover.astype(int)
    working = state.working_mask()
    base_counts = cover @ occ
    current = model.covered_sum(base_counts, working)
    # counts[r1, r2, k] after moving one engineer r1 -> r2
    counts = base_counts[None, None, :] - cover.T[:, None, :] + cover.T[None, :, :]
    gain = np.round(model.covered_sum(counts, working) - current, SCORE_DIGITS)
    bb = net.travel[net.K:, net.K:]
    valid = (occ[:, None] > 0) & ~np.eye(net.R, dtype=bool) & (bb <= restrictions.max_reloc_dist)
    gain = np.where(valid, gain, -np.inf)
    idx = int(np.argmax(gain))
    r1, r2 = divmod(idx, net.R)
    if not gain[r1, r2] > restrictions.min_improvement + 10.0 ** -SCORE_DIGITS:
        return None
    return _smallest_idle_at(state, r1, exclude=[dispatched]), r2


class DMEXCLP(RelocationPolicy):
    """RP4 (unrestricted) and RP5 (with restrictions)."""

    def __init__(self, model: CoverageModel, allocation: Sequence[int],
                 restrictions: RP5Restrictions | None = None):
        self.model = model
        self.allocation = [int(a) for a in allocation]
        self.restrictions = restrictions or UNRESTRICTED
        self.name = "RP4" if restrictions is None else "RP5"

    def on_dispatch(self, state, dispatched, k):
        return dmexclp_relocate_on_dispatch(state, dispatched, self.model, self.restrictions)

    def on_free(self, state, m, k):
        return dmexclp_redeploy(state, k, self.model, self.restrictions), None


def rp5_grid(t_star: float) -> list[RP5Restrictions]:
    dists = [f * t_star for f in (0.5, 1, 2, 100)]
    return [RP5Restrictions(a, b, c) for a in dists for b in dists for c in (0, 1, 5, 100)]


@dataclass
class TuneResult:
    best: RP5Restrictions
    scores: list[tuple[RP5Restrictions, float]] = field(default_factory=list)


def tune_rp5(evaluate: Callable[[RP5Restrictions], float], grid: Sequence[RP5Restrictions]) -> TuneResult:
    """Grid search.  ``evaluate`` returns the mean on-time fraction of a
    setting; ties prefer smaller distances, then a smaller threshold."""
    scores = [(g, float(evaluate(g))) for g in grid]
    best = min(scores, key=lambda s: (-round(s[1], 12), s[0].max_redeploy_dist,
                                      s[0].max_reloc_dist, s[0].min_improvement))[0]
    return TuneResult(best, scores)


RELOCATION_NAMES = ("RP1", "RP2", "RP3", "RP4", "RP5")
