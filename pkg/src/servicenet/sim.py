"""Continuous-time event-driven simulation of the service network.

The process is observed right after each event.  Decision events are call
arrivals (1), repair completions (2) and arrivals at a base (3); arrivals at
a machine (4) start a repair and need no decision.  Between decisions the
next event is the earlier of an exponential clock for breakdowns / repairs
and the deterministic arrival of the first travelling engineer.
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterator, Sequence

import numpy as np

from .network import BASE, MACHINE, TIME_TOL, Location, NetworkMap

WORKING, IN_REPAIR, WAITING = 0, -1, 1


class IllegalActionError(ValueError):
    pass


class SimulationError(RuntimeError):
    pass


class EventKind(IntEnum):
    CALL = 1
    REPAIR_DONE = 2
    ARRIVE_BASE = 3
    ARRIVE_MACHINE = 4


@dataclass(frozen=True)
class Event:
    kind: EventKind
    machine: int | None = None
    engineer: int | None = None
    base: int | None = None


@dataclass
class EngineerState:
    dest: Location
    remaining: float = 0.0
    traveling: bool = False
    repairing: bool = False
    # sampled when the engineer is sent to a machine; only DP5 may look
    repair_duration: float | None = None
    repair_completion: float | None = None
    sent_at: float | None = None

    @property
    def idle(self) -> bool:
        return self.dest.kind == BASE


@dataclass
class MachineState:
    status: int = WORKING
    broken_at: float | None = None
    engineer: int | None = None  # en route or repairing
    late: bool = False
    counted: bool = False

    def waiting_time(self, t: float) -> float:
        return t - self.broken_at if self.status == WAITING else 0.0


@dataclass
class QueueEntry:
    machine: int
    committed: int | None = None


@dataclass(frozen=True)
class SimEnv:
    net: NetworkMap
    lam: float
    mu: float

    @property
    def t_star(self) -> float:
        return self.net.t_star

    @property
    def travel(self) -> np.ndarray:
        return self.net.travel

    @property
    def within(self) -> np.ndarray:
        """(nodes x K) bool: a position reaches machine k within t*."""
        return self.net.travel[:, : self.net.K] <= self.net.t_star + TIME_TOL


@dataclass
class SystemState:
    env: SimEnv
    t: float
    event: Event | None
    engineers: list[EngineerState]
    machines: list[MachineState]
    queue: list[QueueEntry] = field(default_factory=list)

    def copy(self) -> "SystemState":
        return SystemState(self.env, self.t, self.event,
                           [copy.copy(e) for e in self.engineers],
                           [copy.copy(m) for m in self.machines],
                           [copy.copy(q) for q in self.queue])

    def redacted(self) -> "SystemState":
        """Copy with all repair-time knowledge removed."""
        out = self.copy()
        for e in out.engineers:
            e.repair_duration = None
            e.repair_completion = None
        return out

    @property
    def M(self) -> int:
        return len(self.engineers)

    def idle_engineers(self) -> list[int]:
        return [i for i, e in enumerate(self.engineers) if e.dest.kind == BASE]

    def queued(self) -> list[int]:
        return [q.machine for q in self.queue]

    def uncommitted(self) -> list[int]:
        return [q.machine for q in self.queue if q.committed is None]

    def commitments(self, m: int) -> list[int]:
        return [q.machine for q in self.queue if q.committed == m]

    def working_mask(self) -> np.ndarray:
        return np.array([ms.status == WORKING for ms in self.machines])

    def node_of(self, m: int) -> int:
        return self.env.net.node(self.engineers[m].dest)

    def time_to(self, m: int, node: int) -> float:
        """Remaining travel of engineer m plus the trip from its destination."""
        e = self.engineers[m]
        return (e.remaining if e.traveling else 0.0) + float(self.env.travel[self.node_of(m), node])

    def idle_occupancy(self, exclude: Sequence[int] = ()) -> np.ndarray:
        """Idle engineers per base, counting travellers at their destination."""
        occ = np.zeros(self.env.net.R, dtype=int)
        for i, e in enumerate(self.engineers):
            if e.dest.kind == BASE and i not in exclude:
                occ[e.dest.index] += 1
        return occ


@dataclass(frozen=True)
class Action:
    """One decision.  Which fields may be set depends on the event type:

    call arrival: ``dispatch`` (idle engineer) with optional ``relocate``
    ``(engineer, base)``; or neither, optionally annotated with ``commit``
    (a busy engineer promised the queued call).  Repair finished:
    ``redeploy`` (a queued machine or a base) plus optional ``relocate``.
    Arrival at base: optional ``pull`` of a queued machine.
    """

    dispatch: int | None = None
    relocate: tuple[int, int] | None = None
    commit: int | None = None
    redeploy: Location | None = None
    pull: int | None = None

    def summary(self) -> str:
        parts = []
        if self.dispatch is not None:
            parts.append(f"dispatch e{self.dispatch}")
        if self.commit is not None:
            parts.append(f"queue->e{self.commit}")
        if self.redeploy is not None:
            parts.append(f"redeploy {self.redeploy.kind}{self.redeploy.index}")
        if self.pull is not None:
            parts.append(f"pull m{self.pull}")
        if self.relocate is not None:
            parts.append(f"relocate e{self.relocate[0]}->b{self.relocate[1]}")
        return "; ".join(parts) or "-"


NO_ACTION = Action()


@dataclass(frozen=True)
class SimConfig:
    lam: float
    mu: float
    horizon: float = 1000.0
    seed: int = 0
    warmup: float = 0.0
    t_star: float | None = None  # defaults to the map's
    validate: bool = True

    def __post_init__(self):
        if not (self.lam > 0 and self.mu > 0 and self.horizon > 0):
            raise ValueError("rates and horizon must be positive")

    def replace(self, **kw) -> "SimConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class SimReport:
    calls_total: int
    calls_on_time: int
    penalties: int
    response_times: list[float]
    service_durations: list[float]
    events: int
    no_calls: bool = False

    @property
    def fraction_on_time(self) -> float:
        return 1.0 if self.calls_total == 0 else self.calls_on_time / self.calls_total

    def to_dict(self) -> dict:
        return {
            "calls_total": self.calls_total,
            "calls_on_time": self.calls_on_time,
            "fraction_on_time": self.fraction_on_time,
            "penalties": self.penalties,
            "no_calls": self.no_calls,
            "events": self.events,
            "response_times": self.response_times,
            "mean_service_duration": float(np.mean(self.service_durations)) if self.service_durations else None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


# ---------------------------------------------------------------------------
# state construction and action spaces


def initial_state(net: NetworkMap, allocation: Sequence[int], M: int | None = None,
                  lam: float = 0.01, mu: float = 0.2) -> SystemState:
    """All machines working, engineers idle at their bases (filled in base order)."""
    allocation = [int(a) for a in allocation]
    if len(allocation) != net.R or any(a < 0 for a in allocation):
        raise ValueError(f"allocation needs {net.R} nonnegative counts")
    if M is not None and sum(allocation) != M:
        raise ValueError(f"allocation places {sum(allocation)} engineers, expected M={M}")
    if sum(allocation) == 0:
        raise ValueError("allocation places no engineers")
    engineers = [EngineerState(Location.base(r)) for r, c in enumerate(allocation) for _ in range(c)]
    return SystemState(SimEnv(net, lam, mu), 0.0, None, engineers, [MachineState() for _ in range(net.K)])


def _relocations(state: SystemState, movers: Sequence[int]) -> list[tuple[int, int] | None]:
    out: list[tuple[int, int] | None] = [None]
    for n in movers:
        for r in range(state.env.net.R):
            if state.engineers[n].dest != Location.base(r):
                out.append((n, r))
    return out


def legal_actions(state: SystemState) -> list[Action]:
    """Every admissible action (commitment annotations are not enumerated)."""
    ev = state.event
    if ev is None or ev.kind == EventKind.ARRIVE_MACHINE:
        return []
    idle = state.idle_engineers()
    if ev.kind == EventKind.CALL:
        acts = [NO_ACTION]
        for m in idle:
            for rel in _relocations(state, [n for n in idle if n != m]):
                acts.append(Action(dispatch=m, relocate=rel))
        return acts
    if ev.kind == EventKind.REPAIR_DONE:
        m = ev.engineer
        mine = state.commitments(m)
        if mine:
            targets = [Location.machine(mine[0])]
        else:
            targets = [Location.machine(j) for j in state.uncommitted()]
            targets += [Location.base(r) for r in range(state.env.net.R)]
        return [Action(redeploy=loc, relocate=rel) for loc in targets for rel in _relocations(state, idle)]
    # arrival at a base: stay or pull one uncommitted queued machine
    return [NO_ACTION] + [Action(pull=j) for j in state.uncommitted()]


def check_action(state: SystemState, a: Action) -> None:
    ev = state.event

    def bad(msg):
        raise IllegalActionError(f"{msg} (event={ev}, action={a})")

    if ev is None or ev.kind == EventKind.ARRIVE_MACHINE:
        if a != NO_ACTION:
            bad("no decision is allowed here")
        return
    idle = set(state.idle_engineers())
    R = state.env.net.R

    def check_reloc(exclude):
        if a.relocate is None:
            return
        n, r = a.relocate
        if n not in idle or n in exclude:
            bad("relocated engineer must be idle and not the dispatched one")
        if not 0 <= r < R or state.engineers[n].dest == Location.base(r):
            bad("relocation target must be a different base")

    if ev.kind == EventKind.CALL:
        if a.redeploy is not None or a.pull is not None:
            bad("call arrival admits only dispatch/relocation")
        if a.dispatch is not None:
            if a.dispatch not in idle:
                bad("dispatched engineer must be idle")
            if a.commit is not None:
                bad("cannot commit a dispatched call")
            check_reloc({a.dispatch})
        else:
            if a.relocate is not None:
                bad("no relocation when the call is queued")
            if a.commit is not None:
                c = a.commit
                if not 0 <= c < state.M or c in idle or state.commitments(c):
                    bad("commitment must name a busy engineer without another commitment")
        return
    if ev.kind == EventKind.REPAIR_DONE:
        if a.dispatch is not None or a.commit is not None or a.pull is not None or a.redeploy is None:
            bad("repair completion needs exactly one redeployment")
        mine = state.commitments(ev.engineer)
        loc = a.redeploy
        if mine:
            if loc != Location.machine(mine[0]):
                bad("engineer must serve its committed call")
        elif loc.kind == MACHINE:
            if loc.index not in state.uncommitted():
                bad("redeployment machine must be an uncommitted queued call")
        elif not 0 <= loc.index < R:
            bad("unknown base")
        check_reloc(set())
        return
    # ARRIVE_BASE
    if a.dispatch is not None or a.commit is not None or a.redeploy is not None or a.relocate is not None:
        bad("arrival at a base admits only a queue pull")
    if a.pull is not None and a.pull not in state.uncommitted():
        bad("pulled machine must be an uncommitted queued call")


# ---------------------------------------------------------------------------
# transitions


def _send(state: SystemState, m: int, loc: Location, rng: np.random.Generator) -> None:
    e = state.engineers[m]
    net = state.env.net
    start = e.remaining if e.traveling else 0.0
    e.remaining = start + float(net.travel[net.node(e.dest), net.node(loc)])
    e.dest = loc
    e.traveling = True
    e.repairing = False
    e.repair_completion = None
    if loc.kind == MACHINE:
        state.machines[loc.index].engineer = m
        e.repair_duration = float(rng.exponential(1.0 / state.env.mu))
        e.sent_at = state.t
    else:
        e.repair_duration = None
        e.sent_at = None


def _dequeue(state: SystemState, k: int) -> None:
    state.queue = [q for q in state.queue if q.machine != k]


def apply_action(state: SystemState, a: Action, rng: np.random.Generator) -> None:
    ev = state.event
    if ev is None or ev.kind == EventKind.ARRIVE_MACHINE:
        return
    if ev.kind == EventKind.CALL:
        if a.dispatch is not None:
            _send(state, a.dispatch, Location.machine(ev.machine), rng)
        else:
            state.queue.append(QueueEntry(ev.machine, a.commit))
    elif ev.kind == EventKind.REPAIR_DONE:
        if a.redeploy.kind == MACHINE:
            _dequeue(state, a.redeploy.index)
        _send(state, ev.engineer, a.redeploy, rng)
    elif ev.kind == EventKind.ARRIVE_BASE and a.pull is not None:
        _dequeue(state, a.pull)
        _send(state, ev.engineer, Location.machine(a.pull), rng)
    if a.relocate is not None:
        n, r = a.relocate
        _send(state, n, Location.base(r), rng)


def _count_crossings(state: SystemState, t_next: float) -> list[int]:
    """Machines whose waiting time passes t* by time ``t_next``."""
    limit = state.env.t_star + TIME_TOL
    out = []
    for k, ms in enumerate(state.machines):
        if ms.status == WAITING and not ms.late and t_next - ms.broken_at > limit:
            ms.late = True
            out.append(k)
    return out


def _step(state: SystemState, rng: np.random.Generator, until: float = math.inf) -> tuple[list[int], bool]:
    """Sample the next event and move ``state`` to it in place.

    Returns the machines that became late and whether the run stopped
    (no further event, or the next event lies beyond ``until``).
    """
    env = state.env
    travel_dt, mover = math.inf, -1
    sched_dt, finisher = math.inf, -1
    unscheduled: list[int] = []
    for i, e in enumerate(state.engineers):
        if e.traveling:
            if e.remaining < travel_dt:
                travel_dt, mover = e.remaining, i
        elif e.repairing:
            if e.repair_completion is None:
                unscheduled.append(e.dest.index)
            elif e.repair_completion - state.t < sched_dt:
                sched_dt, finisher = e.repair_completion - state.t, i
    working = [k for k, ms in enumerate(state.machines) if ms.status == WORKING]
    eta = env.lam * len(working) + env.mu * len(unscheduled)
    expo_dt = float(rng.exponential(1.0 / eta)) if eta > 0 else math.inf
    dt = min(expo_dt, travel_dt, max(sched_dt, 0.0))
    if dt == math.inf or state.t + dt > until:
        if until < math.inf:
            late = _count_crossings(state, until)
            for e in state.engineers:
                if e.traveling:
                    e.remaining = max(0.0, e.remaining - (until - state.t))
            state.t = until
            return late, True
        return [], True

    t_next = state.t + dt
    late = _count_crossings(state, t_next)
    for i, e in enumerate(state.engineers):
        if e.traveling:
            e.remaining = 0.0 if i == mover and dt == travel_dt else max(0.0, e.remaining - dt)
    state.t = t_next

    if dt == travel_dt:
        e = state.engineers[mover]
        e.traveling = False
        e.remaining = 0.0
        if e.dest.kind == BASE:
            state.event = Event(EventKind.ARRIVE_BASE, engineer=mover, base=e.dest.index)
        else:
            k = e.dest.index
            ms = state.machines[k]
            ms.status = IN_REPAIR
            e.repairing = True
            if e.repair_duration is not None:
                e.repair_completion = t_next + e.repair_duration
            state.event = Event(EventKind.ARRIVE_MACHINE, machine=k, engineer=mover)
    elif dt == expo_dt:
        if rng.uniform() * eta < env.lam * len(working):
            k = working[int(rng.integers(len(working)))]
            ms = state.machines[k]
            ms.status, ms.broken_at, ms.engineer, ms.late, ms.counted = WAITING, t_next, None, False, False
            state.event = Event(EventKind.CALL, machine=k)
        else:
            k = unscheduled[int(rng.integers(len(unscheduled)))]
            _finish_repair(state, k)
    else:
        _finish_repair(state, state.engineers[finisher].dest.index)
    return late, False


def _finish_repair(state: SystemState, k: int) -> None:
    ms = state.machines[k]
    m = ms.engineer
    e = state.engineers[m]
    e.repairing = False
    e.repair_completion = None
    e.repair_duration = None
    ms.status, ms.broken_at, ms.engineer, ms.late = WORKING, None, None, False
    state.event = Event(EventKind.REPAIR_DONE, machine=k, engineer=m)


def advance(state: SystemState, action: Action, rng: np.random.Generator) -> tuple[SystemState | None, int]:
    """Apply ``action`` and sample the next event.

    Returns the post-event state and the number of machines whose waiting
    time crossed t* during the transition; the state is ``None`` when no
    further event can occur.
    """
    check_action(state, action)
    nxt = state.copy()
    apply_action(nxt, action, rng)
    late, stopped = _step(nxt, rng)
    return (None if stopped else nxt), len(late)


# ---------------------------------------------------------------------------
# policy glue and the run loop


def decide(state: SystemState, dispatcher, relocator) -> Action:
    ev = state.event
    if ev is None or ev.kind == EventKind.ARRIVE_MACHINE:
        return NO_ACTION
    view = state if getattr(dispatcher, "uses_repair_times", False) else state.redacted()
    if ev.kind == EventKind.CALL:
        dec = dispatcher.on_call(view, ev.machine)
        if dec.kind == "dispatch":
            move = relocator.on_dispatch(view, dec.engineer, ev.machine)
            return Action(dispatch=dec.engineer, relocate=move)
        return Action(commit=dec.engineer if dec.kind == "commit" else None)
    if ev.kind == EventKind.REPAIR_DONE:
        job = dispatcher.next_job(view, ev.engineer)
        if job is not None:
            return Action(redeploy=Location.machine(job))
        base, move = relocator.on_free(view, ev.engineer, ev.machine)
        return Action(redeploy=Location.base(base), relocate=move)
    return Action(pull=dispatcher.pull(view, ev.engineer))


TRACE_COLUMNS = ["time", "event_kind", "machine", "engineer", "action_summary", "queue_len"]


def run_simulation(net: NetworkMap, dispatcher, relocator, config: SimConfig,
                   allocation: Sequence[int] | None = None, trace: list | None = None) -> SimReport:
    """Simulate until ``config.horizon``.

    A call is on time iff an engineer reaches its machine within t*.  Calls
    whose outcome is still open at the horizon are left out; calls arriving
    before ``config.warmup`` are not counted.
    """
    if config.t_star is not None and abs(config.t_star - net.t_star) > TIME_TOL:
        raise ValueError("config.t_star disagrees with the map")
    if allocation is None:
        allocation = getattr(relocator, "allocation", None)
        if allocation is None:
            raise ValueError("no initial allocation given")
    rng = np.random.default_rng(config.seed)
    state = initial_state(net, allocation, lam=config.lam, mu=config.mu)
    on_time = penalties = events = 0
    responses: list[float] = []
    service: list[float] = []
    while True:
        action = decide(state, dispatcher, relocator)
        if config.validate:
            try:
                check_action(state, action)
            except IllegalActionError as exc:
                raise SimulationError(f"policy returned an illegal action at t={state.t:.4f}: {exc}\n"
                                      f"state dump: {_dump(state)}") from exc
        if trace is not None and state.event is not None:
            ev = state.event
            trace.append([f"{state.t:.6f}", ev.kind.name, "" if ev.machine is None else ev.machine,
                          "" if ev.engineer is None else ev.engineer, action.summary(), len(state.queue)])
        apply_action(state, action, rng)
        late, stopped = _step(state, rng, until=config.horizon)
        penalties += sum(1 for k in late if state.machines[k].counted)
        if stopped:
            break
        events += 1
        ev = state.event
        if ev.kind == EventKind.CALL:
            state.machines[ev.machine].counted = state.t >= config.warmup
        elif ev.kind == EventKind.ARRIVE_MACHINE:
            ms = state.machines[ev.machine]
            if ms.counted:
                responses.append(state.t - ms.broken_at)
                if not ms.late:
                    on_time += 1
        elif ev.kind == EventKind.REPAIR_DONE:
            sent = state.engineers[ev.engineer].sent_at
            if sent is not None:
                service.append(state.t - sent)
    total = on_time + penalties
    return SimReport(total, on_time, penalties, responses, service, events, no_calls=total == 0)


def _dump(state: SystemState) -> str:
    return json.dumps({
        "t": state.t,
        "event": None if state.event is None else dataclasses.asdict(state.event),
        "engineers": [[e.dest.kind, e.dest.index, e.remaining, e.traveling, e.repairing] for e in state.engineers],
        "machines": [[m.status, m.broken_at, m.engineer] for m in state.machines],
        "queue": [[q.machine, q.committed] for q in state.queue],
    }, default=str)


def write_trace(rows: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        w.writerows(rows)


def iter_states(net: NetworkMap, dispatcher, relocator, config: SimConfig,
                allocation: Sequence[int]) -> Iterator[SystemState]:
    """Yield copies of every post-event state of a run (for audits/tests)."""
    rng = np.random.default_rng(config.seed)
    state = initial_state(net, allocation, lam=config.lam, mu=config.mu)
    while True:
        action = decide(state, dispatcher, relocator)
        check_action(state, action)
        apply_action(state, action, rng)
        _, stopped = _step(state, rng, until=config.horizon)
        if stopped:
            return
        yield state.copy()
