"""Discrete-time Markov decision model for small instances.

Time advances in unit steps on an integer travel matrix.  A state is
``(engineers, kappa)``:

* ``engineers[m] = (dest_node, remaining)`` with integer remaining travel;
* ``kappa[k]`` is -1 (in repair), 0 (working) or ``1 + w`` for a machine
  that has waited ``w`` steps, saturating at ``t* + 1``.  The shift keeps a
  just-broken machine (``w = 0``) distinct from a working one.

The event sets are derived rather than stored: newly broken machines are
those with ``kappa == 1``, and an engineer standing at a working machine has
just finished a repair and must be redeployed.  Arrivals carry no
information that actions or costs depend on, so they are not tracked.

Actions are sorted tuples of ``(engineer, target_node)`` pairs.  Applying an
action gives a post-decision state; the random step (breakdowns, repair
completions, then travel and waiting clocks) only depends on that.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import bicgstab, spsolve

from .coverage import CoverageModel, initial_mu_hat
from .network import NetworkMap
from .relocate import RP5Restrictions, UNRESTRICTED

log = logging.getLogger(__name__)

Engineer = tuple[int, int]
State = tuple[tuple[Engineer, ...], tuple[int, ...]]
Action = tuple[tuple[int, int], ...]


class StateSpaceTooLarge(RuntimeError):
    pass


class PolicyDomainError(KeyError):
    pass


@dataclass(frozen=True)
class MDPConfig:
    t_star: int
    lam: float
    mu: float
    gamma: float = 0.99
    epsilon: float = 0.001
    state_cap: int = 5_000_000

    def __post_init__(self):
        if self.t_star < 0 or int(self.t_star) != self.t_star:
            raise ValueError("t_star must be a nonnegative integer")
        if not (0 < self.gamma < 1):
            raise ValueError("gamma must lie in (0, 1)")
        if not (self.lam > 0 and self.mu > 0):
            raise ValueError("rates must be positive")

    @property
    def p(self) -> float:
        return 1.0 - math.exp(-self.lam)

    @property
    def q(self) -> float:
        return 1.0 - math.exp(-self.mu)

    @property
    def sat(self) -> int:
        return int(self.t_star) + 1


def round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(x, dtype=float) + 0.5).astype(int)


@dataclass
class DiscreteInstance:
    """Integer travel matrix over nodes (machines first, then bases)."""

    travel: np.ndarray
    K: int
    R: int
    allocation: list[int]

    @classmethod
    def from_map(cls, net: NetworkMap, allocation: Sequence[int]) -> "DiscreteInstance":
        return cls(round_half_up(net.travel), net.K, net.R, [int(a) for a in allocation])

    def __post_init__(self):
        self.travel = np.asarray(self.travel, dtype=int)
        if self.travel.shape != (self.K + self.R,) * 2:
            raise ValueError("travel matrix must cover K + R nodes")
        if len(self.allocation) != self.R:
            raise ValueError("allocation needs one entry per base")

    @property
    def M(self) -> int:
        return sum(self.allocation)

    def is_base(self, node: int) -> bool:
        return node >= self.K

    def initial_state(self) -> State:
        engs = tuple((self.K + r, 0) for r, c in enumerate(self.allocation) for _ in range(c))
        return engs, (0,) * self.K


def toy_instance() -> tuple[NetworkMap, DiscreteInstance]:
    """Two bases and four machines on a line: bases at 0 and 4, machines at
    -1, 1, 3, 5; one engineer per base.  The outer machines are reachable in
    time only from their own side."""
    machines = np.array([[-1.0, 0.0], [1.0, 0.0], [3.0, 0.0], [5.0, 0.0]])
    bases = np.array([[0.0, 0.0], [4.0, 0.0]])
    net = NetworkMap(machines, bases, t_star=3.0)
    return net, DiscreteInstance.from_map(net, [1, 1])


# ---------------------------------------------------------------------------
# state queries


def _assigned(engs: Sequence[Engineer], k: int) -> bool:
    return any(d == k for d, _ in engs)


def queue_of(inst: DiscreteInstance, s: State) -> list[int]:
    engs, kappa = s
    return [k for k in range(inst.K) if kappa[k] >= 1 and not _assigned(engs, k)]


def freed_engineers(inst: DiscreteInstance, s: State) -> list[int]:
    engs, kappa = s
    return [m for m, (d, rem) in enumerate(engs) if d < inst.K and rem == 0 and kappa[d] == 0]


def idle_engineers(inst: DiscreteInstance, s: State) -> list[int]:
    return [m for m, (d, _) in enumerate(s[0]) if d >= inst.K]


def new_calls(s: State) -> list[int]:
    """Machines that broke during the last step (with t* = 0 every waiting
    machine looks new)."""
    return [k for k, v in enumerate(s[1]) if v == 1]


def legal_actions_discrete(inst: DiscreteInstance, s: State) -> list[Action]:
    """All actions allowed by the discrete action-space constraints, sorted.

    Relocations are offered only to idle engineers standing at a base, which
    keeps travel distances (and the state space) bounded.
    """
    engs, _ = s
    Q = queue_of(inst, s)
    freed = freed_engineers(inst, s)
    idle = idle_engineers(inst, s)
    K1 = set(new_calls(s))
    bases = [inst.K + r for r in range(inst.R)]
    options: list[list[tuple[int, int] | None]] = []
    movers = sorted(freed + idle)
    for m in movers:
        if m in freed:
            options.append([(m, t) for t in Q + bases])
        else:
            opts: list[tuple[int, int] | None] = [None] + [(m, k) for k in Q]
            if engs[m][1] == 0:
                opts += [(m, b) for b in bases if b != engs[m][0]]
            options.append(opts)
    out = []
    for combo in itertools.product(*options):
        act = tuple(c for c in combo if c is not None)
        machines = [t for _, t in act if t < inst.K]
        if len(machines) != len(set(machines)):
            continue
        relocs = [(m, t) for m, t in act if m in idle and t >= inst.K]
        if len(relocs) > 1:
            continue
        if relocs and not freed and not any(m in idle and t in K1 for m, t in act):
            continue
        out.append(act)
    out.sort()
    return out


def apply_action_discrete(inst: DiscreteInstance, s: State, a: Action) -> State:
    engs = list(s[0])
    for m, target in a:
        d, rem = engs[m]
        dist = rem + int(inst.travel[d, target])
        if target < inst.K:
            dist = max(dist, 1)
        engs[m] = (target, dist)
    return tuple(engs), s[1]


def step_outcomes(inst: DiscreteInstance, cfg: MDPConfig, x: State) -> list[tuple[State, float, float]]:
    """Successors of a post-decision state: (next_state, probability, cost)."""
    engs, kappa = x
    W = [k for k in range(inst.K) if kappa[k] == 0]
    H = [k for k in range(inst.K) if kappa[k] == -1]
    out = []
    for broke in itertools.product((False, True), repeat=len(W)):
        for done in itertools.product((False, True), repeat=len(H)):
            nb, nd = sum(broke), sum(done)
            prob = cfg.p**nb * (1 - cfg.p) ** (len(W) - nb) * cfg.q**nd * (1 - cfg.q) ** (len(H) - nd)
            broken = {k for k, b in zip(W, broke) if b}
            repaired = {k for k, b in zip(H, done) if b}
            s2, cost, _, _ = _advance_clocks(inst, cfg, x, broken, repaired)
            out.append((s2, prob, cost))
    return out


def _advance_clocks(inst: DiscreteInstance, cfg: MDPConfig, x: State, broken: set, repaired: set):
    """Deterministic part of a step.  Returns (state, cost, on_time, late)."""
    engs, kappa = x
    sat = cfg.sat
    new_engs = []
    arrived: set[int] = set()
    for d, rem in engs:
        if rem > 0:
            rem -= 1
            if rem == 0 and d < inst.K:
                arrived.add(d)
        new_engs.append((d, rem))
    new_kappa = list(kappa)
    on_time = late = 0
    cost = cfg.epsilon * sum(1 for v in kappa if v == sat)
    for k, v in enumerate(kappa):
        if k in broken:
            new_kappa[k] = 1
        elif k in repaired:
            new_kappa[k] = 0
        elif v >= 1:
            if k in arrived:
                new_kappa[k] = -1
                on_time += v != sat
            else:
                new_kappa[k] = min(v + 1, sat)
        if new_kappa[k] == sat and v != sat:
            cost += 1.0
            late += 1
    return (tuple(new_engs), tuple(new_kappa)), cost, on_time, late


# ---------------------------------------------------------------------------
# enumeration and solvers


@dataclass
class MDPModel:
    inst: DiscreteInstance
    cfg: MDPConfig
    states: list[State]
    index: dict[State, int]
    posts: list[State]
    actions: list[list[Action]]  # per state, sorted
    action_post: list[list[int]]  # post-decision index of each action
    T: sparse.csr_matrix  # posts x states
    cost: np.ndarray  # expected one-step cost per post-decision state

    @property
    def n_states(self) -> int:
        return len(self.states)

    def flat(self) -> tuple[np.ndarray, np.ndarray]:
        ptr = np.cumsum([0] + [len(a) for a in self.action_post])
        return np.concatenate([np.asarray(a, dtype=int) for a in self.action_post]), ptr


def enumerate_states(inst: DiscreteInstance, cfg: MDPConfig) -> MDPModel:
    """Breadth-first closure from the initial state under all actions."""
    start = inst.initial_state()
    index = {start: 0}
    states = [start]
    post_index: dict[State, int] = {}
    posts: list[State] = []
    rows, cols, vals, costs = [], [], [], []
    actions: list[list[Action]] = []
    action_post: list[list[int]] = []
    frontier = deque([0])
    while frontier:
        i = frontier.popleft()
        s = states[i]
        acts = legal_actions_discrete(inst, s)
        actions.append(acts)
        xs = []
        for a in acts:
            x = apply_action_discrete(inst, s, a)
            j = post_index.get(x)
            if j is None:
                j = post_index[x] = len(posts)
                posts.append(x)
                c = 0.0
                for s2, prob, cost in step_outcomes(inst, cfg, x):
                    t = index.get(s2)
                    if t is None:
                        if len(states) >= cfg.state_cap:
                            raise StateSpaceTooLarge(
                                f"more than {cfg.state_cap} states reachable "
                                f"(enumerated {len(states)}, frontier {len(frontier)})")
                        t = index[s2] = len(states)
                        states.append(s2)
                        frontier.append(t)
                    rows.append(j)
                    cols.append(t)
                    vals.append(prob)
                    c += prob * cost
                costs.append(c)
            xs.append(j)
        action_post.append(xs)
    T = sparse.csr_matrix((vals, (rows, cols)), shape=(len(posts), len(states)))
    T.sum_duplicates()
    return MDPModel(inst, cfg, states, index, posts, actions, action_post, T, np.array(costs))


def q_values(model: MDPModel, V: np.ndarray) -> np.ndarray:
    """Q value of every post-decision state."""
    return model.cost + model.cfg.gamma * (model.T @ V)


def evaluate_policy(model: MDPModel, policy: np.ndarray, x0: np.ndarray | None = None,
                    rtol: float = 1e-13) -> np.ndarray:
    """V of a stationary policy (action index per state): solves
    (I - gamma P) V = c iteratively, falling back to a direct solve."""
    xs = np.array([model.action_post[i][a] for i, a in enumerate(policy)])
    A = sparse.identity(model.n_states, format="csr") - model.cfg.gamma * model.T[xs]
    b = model.cost[xs]
    V, info = bicgstab(A, b, x0=x0, rtol=rtol, atol=0.0, maxiter=10_000)
    if info != 0 or np.abs(A @ V - b).max() > 1e-10:
        V = spsolve(A.tocsc(), b)
    return V


@dataclass
class SolveResult:
    policy: np.ndarray
    V: np.ndarray
    iterations: int
    history: list[np.ndarray] = field(default_factory=list, repr=False)


def _greedy(model: MDPModel, V: np.ndarray, current: np.ndarray | None, tol: float) -> np.ndarray:
    qx = q_values(model, V)
    out = np.empty(model.n_states, dtype=int)
    for i, xs in enumerate(model.action_post):
        qs = qx[xs]
        best = qs.min()
        if current is not None and qs[current[i]] <= best + tol:
            out[i] = current[i]
        else:
            out[i] = int(np.flatnonzero(qs <= best + tol)[0])
    return out


def policy_iteration(model: MDPModel, max_iter: int = 1000, tol: float = 1e-10,
                     keep_history: bool = False) -> SolveResult:
    """Howard's policy iteration.  Ties keep the incumbent action, otherwise
    the lexicographically first optimal action."""
    policy = np.zeros(model.n_states, dtype=int)
    history = []
    V = None
    for it in range(1, max_iter + 1):
        V = evaluate_policy(model, policy, x0=V)
        if keep_history:
            history.append(V)
        new = _greedy(model, V, policy, tol)
        if np.array_equal(new, policy):
            return SolveResult(policy, V, it, history)
        policy = new
    raise RuntimeError(f"policy iteration did not converge in {max_iter} iterations")


def value_iteration(model: MDPModel, tol: float = 1e-11, max_iter: int = 200_000) -> SolveResult:
    flat_x, ptr = model.flat()
    V = np.zeros(model.n_states)
    gamma = model.cfg.gamma
    for it in range(1, max_iter + 1):
        qx = q_values(model, V)[flat_x]
        new = np.minimum.reduceat(qx, ptr[:-1])
        delta = np.abs(new - V).max()
        V = new
        if delta * gamma / (1 - gamma) < tol:
            return SolveResult(_greedy(model, V, None, 1e-10), V, it)
    raise RuntimeError("value iteration did not converge")


def bellman_residual(model: MDPModel, V: np.ndarray) -> float:
    flat_x, ptr = model.flat()
    best = np.minimum.reduceat(q_values(model, V)[flat_x], ptr[:-1])
    return float(np.abs(best - V).max())


def transition_sums(model: MDPModel) -> np.ndarray:
    return np.asarray(model.T.sum(axis=1)).ravel()


# ---------------------------------------------------------------------------
# discrete-time simulation


@dataclass
class DiscreteRun:
    calls: int
    on_time: int
    late: int

    @property
    def fraction_on_time(self) -> float:
        done = self.on_time + self.late
        return 1.0 if done == 0 else self.on_time / done


def simulate_discrete(inst: DiscreteInstance, cfg: MDPConfig, controller: Callable[[State], Action],
                      horizon: int, seed: int) -> DiscreteRun:
    """One run.  Each machine draws one uniform per step, so runs with the
    same seed share breakdown and repair randomness across controllers."""
    rng = np.random.default_rng(seed)
    s = inst.initial_state()
    calls = on_time = late = 0
    for _ in range(horizon):
        a = controller(s)
        x = apply_action_discrete(inst, s, a)
        u = rng.uniform(size=inst.K)
        kappa = x[1]
        broken = {k for k in range(inst.K) if kappa[k] == 0 and u[k] < cfg.p}
        repaired = {k for k in range(inst.K) if kappa[k] == -1 and u[k] < cfg.q}
        s, _, ot, lt = _advance_clocks(inst, cfg, x, broken, repaired)
        calls += len(broken)
        on_time += ot
        late += lt
    return DiscreteRun(calls, on_time, late)


def table_controller(model: MDPModel, policy: np.ndarray) -> Callable[[State], Action]:
    def act(s: State) -> Action:
        i = model.index.get(s)
        if i is None:
            raise PolicyDomainError(f"state {s} is outside the policy's domain")
        return model.actions[i][policy[i]]

    return act


def evaluate_policy_by_simulation(inst: DiscreteInstance, cfg: MDPConfig,
                                  make_controller: Callable[[], Callable[[State], Action]],
                                  runs: int = 10, horizon: int = 1000, seed: int = 0) -> list[float]:
    """On-time fraction of each run; run ``i`` uses seed ``seed + i``."""
    return [simulate_discrete(inst, cfg, make_controller(), horizon, seed + i).fraction_on_time
            for i in range(runs)]


class HeuristicController:
    """Minimum-response-time dispatching with queue commitments plus
    DMEXCLP relocation with restrictions, adapted to the discrete model.

    Freed engineers serve their committed call or else the longest-waiting
    uncommitted call.  Each new call then goes to the engineer with the
    smallest estimated response time; a busy winner gets a commitment.
    Leftover freed engineers are redeployed by expected covered demand, and
    after a dispatch to a new call one standing idle engineer may relocate.
    Commitments live in the controller, not in the state.
    """

    def __init__(self, inst: DiscreteInstance, cfg: MDPConfig, alpha: float = 0.8,
                 restrictions: RP5Restrictions = UNRESTRICTED, model: CoverageModel | None = None):
        self.inst = inst
        self.cfg = cfg
        self.t_est = -math.log(1.0 - alpha) / cfg.mu
        self.restrictions = restrictions
        self.model = model or CoverageModel.build(inst.K, inst.M, cfg.lam, initial_mu_hat(cfg.t_star, cfg.mu))
        self.cover = inst.travel[: inst.K, inst.K:] <= cfg.t_star
        self.commit: dict[int, int] = {}  # machine -> engineer

    def __call__(self, s: State) -> Action:
        inst = self.inst
        engs, kappa = s
        queue = queue_of(inst, s)
        self.commit = {k: m for k, m in self.commit.items() if k in queue}
        freed = freed_engineers(inst, s)
        idle = idle_engineers(inst, s)
        acts: dict[int, int] = {}
        taken: set[int] = set()

        def waiting_order(ks):
            return sorted(ks, key=lambda k: (-kappa[k], k))

        K1 = set(new_calls(s))
        old = [k for k in queue if k not in K1]
        for m in freed:
            mine = [k for k, e in self.commit.items() if e == m]
            if mine:
                job = waiting_order(mine)[0]
            else:
                free_jobs = [k for k in waiting_order(old) if k not in self.commit and k not in taken]
                job = free_jobs[0] if free_jobs else None
            if job is not None:
                acts[m] = job
                taken.add(job)
                self.commit.pop(job, None)
        available = [m for m in freed if m not in acts] + idle
        dispatched_new = False
        for k in sorted(K1 & set(queue)):
            best = None
            for m in range(len(engs)):
                d, rem = engs[m]
                if m in acts:
                    continue
                if m in available:
                    key = (max(rem + int(inst.travel[d, k]), 1), 0, m)
                elif d < inst.K and m not in self.commit.values():
                    key = (rem + self.t_est + int(inst.travel[d, k]), 1, m)
                else:
                    continue
                if best is None or key < best:
                    best = key
            if best is None:
                continue
            _, busy, m = best
            if busy:
                self.commit[k] = m
            else:
                acts[m] = k
                taken.add(k)
                dispatched_new = True
        # idle engineers pull uncommitted calls nobody else took
        for k in waiting_order(queue):
            if k in taken or k in self.commit:
                continue
            cands = [m for m in idle if m not in acts]
            if not cands:
                break
            m = min(cands, key=lambda m: (engs[m][1] + int(inst.travel[engs[m][0], k]), m))
            acts[m] = k
            taken.add(k)
        working = np.array([v == 0 for v in kappa])
        for m in freed:
            if m not in acts:
                acts[m] = inst.K + self._redeploy(s, acts, engs[m][0], working)
        if dispatched_new or freed:
            move = self._relocate(s, acts, working)
            if move is not None:
                acts[move[0]] = move[1]
        return tuple(sorted(acts.items()))

    def _occupancy(self, s: State, acts: dict[int, int]) -> np.ndarray:
        occ = np.zeros(self.inst.R, dtype=int)
        for m, (d, _) in enumerate(s[0]):
            dest = acts.get(m, d)
            if dest >= self.inst.K:
                occ[dest - self.inst.K] += 1
        return occ

    def _redeploy(self, s, acts, k, working) -> int:
        inst = self.inst
        dist = inst.travel[k, inst.K:]
        allowed = np.flatnonzero(dist <= self.restrictions.max_redeploy_dist)
        if len(allowed) == 0:
            allowed = np.arange(inst.R)
        counts = self.cover.astype(int) @ self._occupancy(s, acts)
        batch = counts[None, :] + self.cover.T[allowed].astype(int)
        return int(allowed[int(np.argmax(np.round(self.model.covered_sum(batch, working), 9)))])

    def _relocate(self, s, acts, working):
        inst = self.inst
        engs = s[0]
        occ = self._occupancy(s, acts)
        cover = self.cover.astype(int)
        base_counts = cover @ occ
        current = self.model.covered_sum(base_counts, working)
        best = None
        for m, (d, rem) in enumerate(engs):
            if m in acts or d < inst.K or rem != 0:
                continue
            r1 = d - inst.K
            for r2 in range(inst.R):
                if r2 == r1 or inst.travel[d, inst.K + r2] > self.restrictions.max_reloc_dist:
                    continue
                counts = base_counts - cover[:, r1] + cover[:, r2]
                gain = round(float(self.model.covered_sum(counts, working) - current), 9)
                key = (-gain, r1, r2, m)
                if best is None or key < best:
                    best = key
        if best is None or not -best[0] > self.restrictions.min_improvement + 1e-9:
            return None
        return best[3], inst.K + best[2]


@dataclass
class BenchmarkResult:
    n_states: int
    optimal: list[float]
    heuristic: list[float]
    restrictions: RP5Restrictions
    pi_vi_max_diff: float

    @property
    def ratio(self) -> float:
        return float(np.mean(self.heuristic) / np.mean(self.optimal))

    def rows(self) -> list[dict]:
        return [{"policy": name, "mean_fraction": float(np.mean(v)), "std": float(np.std(v, ddof=1)) if len(v) > 1 else 0.0,
                 "runs": len(v)} for name, v in (("optimal", self.optimal), ("DP4+RP5", self.heuristic))]

    def to_json(self) -> str:
        return json.dumps({"n_states": self.n_states, "ratio": self.ratio, "pi_vi_max_diff": self.pi_vi_max_diff,
                           "restrictions": self.restrictions.to_dict(), "rows": self.rows()})


def rp5_grid_discrete(t_star: int) -> list[RP5Restrictions]:
    dists = [f * t_star for f in (0.5, 1, 2, 100)]
    return [RP5Restrictions(a, b, c) for a in dists for b in dists for c in (0, 1, 5, 100)]


def mdp_benchmark(inst: DiscreteInstance, cfg: MDPConfig, runs: int = 10, horizon: int = 1000,
                  seed: int = 0, tune_seed: int = 10_000) -> BenchmarkResult:
    """Optimal policy (policy iteration, checked by value iteration) against
    the tuned heuristic, both simulated on paired seeds."""
    model = enumerate_states(inst, cfg)
    pi = policy_iteration(model)
    vi = value_iteration(model)
    diff = float(np.abs(pi.V - vi.V).max())

    def tune_score(r):
        vals = evaluate_policy_by_simulation(inst, cfg, lambda: HeuristicController(inst, cfg, restrictions=r),
                                             runs=runs, horizon=horizon, seed=tune_seed)
        return float(np.mean(vals))

    grid = rp5_grid_discrete(cfg.t_star)
    scored = [(g, tune_score(g)) for g in grid]
    best = min(scored, key=lambda s: (-round(s[1], 12), s[0].max_redeploy_dist, s[0].max_reloc_dist,
                                      s[0].min_improvement))[0]
    opt = evaluate_policy_by_simulation(inst, cfg, lambda: table_controller(model, pi.policy),
                                        runs=runs, horizon=horizon, seed=seed)
    heur = evaluate_policy_by_simulation(inst, cfg, lambda: HeuristicController(inst, cfg, restrictions=best),
                                         runs=runs, horizon=horizon, seed=seed)
    return BenchmarkResult(model.n_states, opt, heur, best, diff)
