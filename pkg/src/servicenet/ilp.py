"""Small exact integer programming: a model container, a best-bound
branch-and-bound solver on top of LP relaxations, and builders for the
allocation, MCRP and MEXCRP models.

All programs are maximizations over bounded integer variables.
"""
from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .coverage import CoverageModel, busy_probabilities, ith_closest_response_prob, stationary_distribution
from .network import NetworkMap
from .relocate import ComplianceTable

INT_TOL = 1e-6
OBJ_TOL = 1e-9


class SolverLimitError(RuntimeError):
    pass


@dataclass
class IntegerProgram:
    names: list[str] = field(default_factory=list)
    lower: list[int] = field(default_factory=list)
    upper: list[int] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    rows: list[dict[int, float]] = field(default_factory=list)
    senses: list[str] = field(default_factory=list)
    rhs: list[float] = field(default_factory=list)
    _index: dict[str, int] = field(default_factory=dict, repr=False)

    @property
    def n_vars(self) -> int:
        return len(self.names)

    @property
    def n_constraints(self) -> int:
        return len(self.rows)

    def add_var(self, name: str, lower: int, upper: int, obj: float = 0.0) -> int:
        if name in self._index:
            raise ValueError(f"duplicate variable {name}")
        if not (np.isfinite(lower) and np.isfinite(upper)) or lower > upper:
            raise ValueError(f"variable {name} needs finite bounds lower <= upper")
        self._index[name] = len(self.names)
        self.names.append(name)
        self.lower.append(int(lower))
        self.upper.append(int(upper))
        self.objective.append(float(obj))
        return self._index[name]

    def add_constraint(self, coeffs: dict[int, float], sense: str, rhs: float) -> None:
        if sense not in ("<=", "==", ">="):
            raise ValueError(f"bad relation {sense!r}")
        if any(not 0 <= j < self.n_vars for j in coeffs):
            raise ValueError("constraint refers to an unknown variable")
        self.rows.append({j: float(c) for j, c in coeffs.items() if c != 0})
        self.senses.append(sense)
        self.rhs.append(float(rhs))

    def var(self, name: str) -> int:
        return self._index[name]

    def value(self, x: Sequence[float]) -> float:
        return float(np.dot(self.objective, x))

    def is_feasible(self, x: Sequence[float], tol: float = 1e-7) -> bool:
        x = np.asarray(x, dtype=float)
        if np.any(x < np.asarray(self.lower) - tol) or np.any(x > np.asarray(self.upper) + tol):
            return False
        for row, sense, b in zip(self.rows, self.senses, self.rhs):
            lhs = sum(c * x[j] for j, c in row.items())
            if sense == "<=" and lhs > b + tol:
                return False
            if sense == ">=" and lhs < b - tol:
                return False
            if sense == "==" and abs(lhs - b) > tol:
                return False
        return True

    def copy(self) -> "IntegerProgram":
        return IntegerProgram(list(self.names), list(self.lower), list(self.upper), list(self.objective),
                              [dict(r) for r in self.rows], list(self.senses), list(self.rhs), dict(self._index))

    def to_lp(self) -> str:
        """CPLEX LP text, for cross-checking with external solvers."""
        def expr(coeffs):
            parts = [f"{c:+.12g} {self.names[j]}" for j, c in sorted(coeffs.items())]
            return " ".join(parts) if parts else "0"

        lines = ["Maximize", " obj: " + expr(dict(enumerate(self.objective))), "Subject To"]
        for i, (row, sense, b) in enumerate(zip(self.rows, self.senses, self.rhs)):
            op = {"<=": "<=", ">=": ">=", "==": "="}[sense]
            lines.append(f" c{i}: {expr(row)} {op} {b:.12g}")
        lines.append("Bounds")
        lines += [f" {lo} <= {n} <= {hi}" for n, lo, hi in zip(self.names, self.lower, self.upper)]
        lines += ["General", " " + " ".join(self.names), "End"]
        return "\n".join(lines) + "\n"


@dataclass
class IPSolution:
    status: str  # "optimal" | "infeasible"
    assignment: np.ndarray | None
    objective_value: float | None
    nodes: int = 0

    def __getitem__(self, j: int) -> int:
        return int(self.assignment[j])


class _Relaxation:
    def __init__(self, prog: IntegerProgram):
        n = prog.n_vars
        self.c = -np.asarray(prog.objective, dtype=float)
        ub_rows, ub_rhs, eq_rows, eq_rhs = [], [], [], []
        for row, sense, b in zip(prog.rows, prog.senses, prog.rhs):
            if sense == "==":
                eq_rows.append(row)
                eq_rhs.append(b)
            elif sense == "<=":
                ub_rows.append(row)
                ub_rhs.append(b)
            else:
                ub_rows.append({j: -c for j, c in row.items()})
                ub_rhs.append(-b)
        self.A_ub = self._matrix(ub_rows, n)
        self.b_ub = np.array(ub_rhs) if ub_rows else None
        self.A_eq = self._matrix(eq_rows, n)
        self.b_eq = np.array(eq_rhs) if eq_rows else None

    @staticmethod
    def _matrix(rows, n):
        if not rows:
            return None
        data, ri, ci = [], [], []
        for i, row in enumerate(rows):
            for j, c in row.items():
                ri.append(i)
                ci.append(j)
                data.append(c)
        return sparse.csr_matrix((data, (ri, ci)), shape=(len(rows), n))

    def solve(self, lo: np.ndarray, hi: np.ndarray):
        res = linprog(self.c, A_ub=self.A_ub, b_ub=self.b_ub, A_eq=self.A_eq, b_eq=self.b_eq,
                      bounds=np.column_stack([lo, hi]), method="highs")
        if res.status == 2:
            return None
        if res.status != 0:
            raise RuntimeError(f"LP relaxation failed: {res.message}")
        return -res.fun, res.x


def _branch_and_bound(prog: IntegerProgram, node_limit: int) -> IPSolution:
    relax = _Relaxation(prog)
    lo0 = np.asarray(prog.lower, dtype=float)
    hi0 = np.asarray(prog.upper, dtype=float)
    best_val, best_x = -np.inf, None
    counter = itertools.count()
    nodes = 0

    def consider(x_int: np.ndarray):
        nonlocal best_val, best_x
        if not prog.is_feasible(x_int):
            return
        v = prog.value(x_int)
        if best_x is None:
            best_val, best_x = v, x_int.copy()
            return
        better = v > best_val + OBJ_TOL * max(1.0, abs(best_val))
        tie = abs(v - best_val) <= OBJ_TOL * max(1.0, abs(best_val))
        if better or (tie and tuple(x_int) < tuple(best_x)):
            best_val, best_x = v, x_int.copy()

    heap = []

    def push(lo, hi):
        nonlocal nodes
        nodes += 1
        if nodes > node_limit:
            raise SolverLimitError(f"branch-and-bound exceeded {node_limit} nodes")
        out = relax.solve(lo, hi)
        if out is None:
            return
        bound, x = out
        if best_x is not None and bound <= best_val + OBJ_TOL * max(1.0, abs(best_val)):
            return
        rounded = np.round(x)
        frac = np.abs(x - rounded) > INT_TOL
        if not frac.any():
            consider(rounded)
            return
        # cheap incumbent: nearest-integer rounding of the relaxation
        consider(np.clip(rounded, lo, hi))
        heapq.heappush(heap, (-bound, next(counter), lo, hi, x))

    push(lo0, hi0)
    while heap:
        neg_bound, _, lo, hi, x = heapq.heappop(heap)
        if best_x is not None and -neg_bound <= best_val + OBJ_TOL * max(1.0, abs(best_val)):
            continue
        j = int(np.flatnonzero(np.abs(x - np.round(x)) > INT_TOL)[0])
        down_hi = hi.copy()
        down_hi[j] = np.floor(x[j])
        up_lo = lo.copy()
        up_lo[j] = np.ceil(x[j])
        push(lo, down_hi)
        push(up_lo, hi)

    if best_x is None:
        return IPSolution("infeasible", None, None, nodes)
    return IPSolution("optimal", best_x.astype(int), best_val, nodes)


def solve(prog: IntegerProgram, lexicographic: bool = False, node_limit: int = 200_000) -> IPSolution:
    """Exact maximization by branch-and-bound with best-bound node selection.

    Without ``lexicographic`` the returned optimum is deterministic (branching
    on the lowest-index fractional variable, ties in node order by creation
    order).  With ``lexicographic`` the lexicographically smallest optimal
    assignment is found by fixing variables one at a time, which costs one
    extra solve per variable.
    """
    sol = _branch_and_bound(prog, node_limit)
    if sol.status != "optimal" or not lexicographic:
        return sol
    target = sol.objective_value
    work = prog.copy()
    work.add_constraint(dict(enumerate(prog.objective)), ">=", target - 1e-7 * max(1.0, abs(target)))
    x = sol.assignment.copy()
    total_nodes = sol.nodes
    for j in range(prog.n_vars):
        probe = work.copy()
        probe.objective = [0.0] * prog.n_vars
        probe.objective[j] = -1.0
        sub = _branch_and_bound(probe, node_limit)
        total_nodes += sub.nodes
        xj = int(sub.assignment[j])
        work.lower[j] = work.upper[j] = xj
        x[j] = xj
    return IPSolution("optimal", x, prog.value(x), total_nodes)


# ---------------------------------------------------------------------------
# model builders


def build_allocation_ilp(net: NetworkMap, p_ith: np.ndarray, M: int) -> IntegerProgram:
    """Static allocation maximizing expected covered demand (x_r, z_ki)."""
    prog = IntegerProgram()
    xs = [prog.add_var(f"x[{r}]", 0, M) for r in range(net.R)]
    cover = net.cover
    for k in range(net.K):
        zs = [prog.add_var(f"z[{k},{i}]", 0, 1, float(p_ith[i - 1])) for i in range(1, M + 1)]
        row = {z: 1.0 for z in zs}
        row.update({xs[r]: -1.0 for r in np.flatnonzero(cover[k])})
        prog.add_constraint(row, "<=", 0)
    prog.add_constraint({x: 1.0 for x in xs}, "<=", M)
    return prog


def allocation_from_solution(sol: IPSolution, prog: IntegerProgram, net: NetworkMap, M: int) -> list[int]:
    counts = [sol[prog.var(f"x[{r}]")] for r in range(net.R)]
    # the model only asks sum <= M; leftover engineers go to the base covering most machines
    spare = M - sum(counts)
    if spare > 0:
        counts[int(np.argmax(net.cover.sum(axis=0)))] += spare
    return counts


def optimal_allocation(net: NetworkMap, model: CoverageModel) -> list[int]:
    prog = build_allocation_ilp(net, model.p_ith, model.M)
    sol = solve(prog)
    return allocation_from_solution(sol, prog, net, model.M)


def level_weights(p_busy: np.ndarray, M: int) -> np.ndarray:
    """Probability of exactly m idle engineers, m = 1..M (0-based array)."""
    return np.array([p_busy[M - m] for m in range(1, M + 1)])


def _add_levels_and_transitions(prog: IntegerProgram, R: int, M: int) -> None:
    for m in range(1, M + 1):
        for r in range(R):
            prog.add_var(f"x[{m},{r}]", 0, m)
    for m in range(1, M):
        alphas = [prog.add_var(f"a[{m},{r}]", 0, 1) for r in range(R)]
        for r in range(R):
            prog.add_constraint({prog.var(f"x[{m},{r}]"): 1.0, prog.var(f"x[{m + 1},{r}]"): -1.0,
                                 alphas[r]: -1.0}, "<=", 0)
        prog.add_constraint({a: 1.0 for a in alphas}, "<=", 1)


def build_mcrp_ilp(net: NetworkMap, p_busy: np.ndarray, M: int) -> IntegerProgram:
    """Maximum coverage compliance table, one level per number of idle engineers."""
    prog = IntegerProgram()
    _add_levels_and_transitions(prog, net.R, M)
    weights = level_weights(p_busy, M)
    cover = net.cover
    for m in range(1, M + 1):
        for k in range(net.K):
            z = prog.add_var(f"z[{m},{k}]", 0, 1, float(weights[m - 1]))
            row = {z: 1.0}
            row.update({prog.var(f"x[{m},{r}]"): -1.0 for r in np.flatnonzero(cover[k])})
            prog.add_constraint(row, "<=", 0)
        prog.add_constraint({prog.var(f"x[{m},{r}]"): 1.0 for r in range(net.R)}, "==", m)
    return prog


def mexcrp_level_probs(K: int, M: int, lam: float, mu_hat: float) -> list[np.ndarray]:
    """P_{m,i}, i = 1..m, recomputed as if the system had m engineers."""
    out = []
    for m in range(1, M + 1):
        busy = busy_probabilities(stationary_distribution(K, m, lam, mu_hat), m)
        out.append(ith_closest_response_prob(busy, m))
    return out


def build_mexcrp_ilp(net: NetworkMap, level_probs: Sequence[np.ndarray], M: int) -> IntegerProgram:
    """Maximum expected coverage compliance table.

    ``level_probs[m-1][i-1]`` is the probability that a call is served by the
    i-th closest of m engineers; it is the same for every machine.
    """
    prog = IntegerProgram()
    _add_levels_and_transitions(prog, net.R, M)
    cover = net.cover
    for m in range(1, M + 1):
        for k in range(net.K):
            ys = [prog.add_var(f"y[{m},{k},{i}]", 0, 1, float(level_probs[m - 1][i - 1])) for i in range(1, m + 1)]
            row = {y: 1.0 for y in ys}
            row.update({prog.var(f"x[{m},{r}]"): -1.0 for r in np.flatnonzero(cover[k])})
            prog.add_constraint(row, "<=", 0)
        prog.add_constraint({prog.var(f"x[{m},{r}]"): 1.0 for r in range(net.R)}, "<=", m)
    return prog


class ComplianceTableError(RuntimeError):
    pass


def compliance_table(net: NetworkMap, model: CoverageModel, kind: str) -> ComplianceTable:
    """Solve the MCRP ("mcrp") or MEXCRP ("mexcrp") program for ``model.M`` engineers."""
    if kind == "mcrp":
        prog = build_mcrp_ilp(net, model.p_busy, model.M)
    elif kind == "mexcrp":
        prog = build_mexcrp_ilp(net, mexcrp_level_probs(net.K, model.M, model.lam, model.mu_hat), model.M)
    else:
        raise ValueError(f"unknown compliance table kind {kind!r}")
    preferred = int(np.argmax(net.cover.sum(axis=0)))
    return extract_compliance_table(solve(prog), prog, model.M, net.R, preferred)


def fill_levels(levels: list[list[int]], preferred_base: int = 0) -> list[list[int]]:
    """Top up levels that place fewer than m engineers.

    Level M gets its missing engineers at ``preferred_base``; each lower
    level m is then topped up at bases where level m+1 holds more, lowest
    index first.  This never adds an arrival between levels and, with
    nonnegative objective weights, keeps an optimal table optimal.
    """
    levels = [list(row) for row in levels]
    M = len(levels)
    for m in range(M, 0, -1):
        row = levels[m - 1]
        while sum(row) < m:
            if m == M:
                row[preferred_base] += 1
                continue
            above = levels[m]
            r = next(r for r in range(len(row)) if above[r] > row[r])
            row[r] += 1
    return levels


def extract_compliance_table(sol: IPSolution, prog: IntegerProgram, M: int, R: int,
                             preferred_base: int = 0) -> ComplianceTable:
    if sol.status != "optimal":
        raise ComplianceTableError(f"cannot extract a table from a {sol.status} solution")
    levels = [[sol[prog.var(f"x[{m},{r}]")] for r in range(R)] for m in range(1, M + 1)]
    table = ComplianceTable(fill_levels(levels, preferred_base))
    problems = table.violations()
    if problems:
        raise ComplianceTableError("; ".join(problems))
    return table
