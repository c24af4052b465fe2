"""Parameter sweeps over maps and policy pairs, and tabular reports."""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .coverage import CoverageModel, calibrate_mu_hat, initial_mu_hat
from .dispatch import DISPATCH_NAMES, make_dispatcher
from .ilp import compliance_table, optimal_allocation
from .network import MapGenConfig, NetworkMap, generate_map
from .relocate import (DMEXCLP, RELOCATION_NAMES, CompliancePolicy, RP5Restrictions, StaticBases, rp5_grid,
                       tune_rp5)
from .sim import SimConfig, run_simulation

log = logging.getLogger(__name__)

TUNE_SEED_OFFSET = 1_000_003


@dataclass
class ExperimentSpec:
    K: int = 20
    R: int = 12
    lam: float = 0.01
    M: list[int] = field(default_factory=lambda: [10])
    d: list[float] = field(default_factory=lambda: [0.3])
    t_star: list[float] = field(default_factory=lambda: [5.0])
    mu: list[float] = field(default_factory=lambda: [0.2])
    maps_per_config: int = 10
    horizon: float = 1000.0
    warmup: float = 0.0
    seed: int = 0
    dispatch: list[str] = field(default_factory=lambda: ["DP1"])
    relocate: list[str] = field(default_factory=lambda: ["RP1"])
    alpha: float = 0.8
    mu_hat_iterations: int = 0
    rp5: dict | str | None = "tune"
    workers: int = 1

    def __post_init__(self):
        for name in ("M", "d", "t_star", "mu", "dispatch", "relocate"):
            if not getattr(self, name):
                raise ValueError(f"spec field {name!r} must be a nonempty list")
        if self.maps_per_config < 1:
            raise ValueError("maps_per_config must be >= 1")
        self.dispatch = [p.upper() for p in self.dispatch]
        self.relocate = [p.upper() for p in self.relocate]
        for p in self.dispatch:
            if p not in DISPATCH_NAMES:
                raise ValueError(f"unknown dispatch policy {p!r}")
        for p in self.relocate:
            if p not in RELOCATION_NAMES:
                raise ValueError(f"unknown relocation policy {p!r}")
        if isinstance(self.rp5, str) and self.rp5 != "tune":
            raise ValueError("rp5 must be 'tune', null or a restriction object")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown spec fields: {sorted(unknown)}")
        data = dict(data)
        for key in ("M", "d", "t_star", "mu", "dispatch", "relocate"):
            if key in data and not isinstance(data[key], list):
                data[key] = [data[key]]
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentSpec":
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ResultRow:
    K: int
    R: int
    lam: float
    M: int
    d: float
    t_star: float
    mu: float
    dispatch: str
    relocate: str
    maps: int
    mean: float
    std: float
    runtime: float = 0.0

    def key(self) -> tuple:
        return (self.M, self.d, self.t_star, self.mu, self.dispatch, self.relocate)


CSV_COLUMNS = ["K", "R", "lam", "M", "d", "t_star", "mu", "dispatch", "relocate", "maps", "mean", "std"]


def map_seed(base: int, d: float, t_star: float, replicate: int) -> int:
    """Seed of one map replicate; independent of M, mu and the policies."""
    ss = np.random.SeedSequence([base, int(round(d * 1e6)), int(round(t_star * 1e6)), replicate])
    return int(ss.generate_state(1)[0])


def sim_seed(base: int, M: int, mu: float, replicate: int) -> int:
    ss = np.random.SeedSequence([base, 7, M, int(round(mu * 1e9)), replicate])
    return int(ss.generate_state(1)[0])


def make_maps(spec: ExperimentSpec, d: float, t_star: float) -> list[NetworkMap]:
    return [generate_map(MapGenConfig(spec.K, spec.R, d, t_star, seed=map_seed(spec.seed, d, t_star, i)))
            for i in range(spec.maps_per_config)]


@dataclass
class _Setup:
    net: NetworkMap
    model: CoverageModel
    allocation: list[int]
    config: SimConfig


def _setup(spec: ExperimentSpec, net: NetworkMap, M: int, mu: float, replicate: int) -> _Setup:
    config = SimConfig(spec.lam, mu, horizon=spec.horizon, seed=sim_seed(spec.seed, M, mu, replicate),
                       warmup=spec.warmup)
    model = CoverageModel.build(spec.K, M, spec.lam, initial_mu_hat(net.t_star, mu))
    allocation = optimal_allocation(net, model)
    if spec.mu_hat_iterations > 0:
        mu_hat = calibrate_mu_hat(net, lambda m: (make_dispatcher("DP1"), StaticBases(allocation)), config,
                                  allocation, max_iter=spec.mu_hat_iterations)
        model = CoverageModel.build(spec.K, M, spec.lam, mu_hat)
    return _Setup(net, model, allocation, config)


def _relocator(name: str, setup: _Setup, restrictions: RP5Restrictions | None, tables: dict):
    if name == "RP1":
        return StaticBases(setup.allocation)
    if name in ("RP2", "RP3"):
        kind = "mcrp" if name == "RP2" else "mexcrp"
        if kind not in tables:
            tables[kind] = compliance_table(setup.net, setup.model, kind)
        return CompliancePolicy(tables[kind], name)
    if name == "RP4":
        return DMEXCLP(setup.model, setup.allocation)
    return DMEXCLP(setup.model, setup.allocation, restrictions or RP5Restrictions())


def _run(setup: _Setup, dispatch: str, relocator, alpha: float, seed_offset: int = 0) -> float:
    dispatcher = make_dispatcher(dispatch, setup.model, alpha)
    cfg = setup.config if not seed_offset else setup.config.replace(seed=setup.config.seed + seed_offset)
    return run_simulation(setup.net, dispatcher, relocator, cfg, allocation=relocator.allocation).fraction_on_time


def tune_rp5_for(setups: Sequence[_Setup], dispatch: str, alpha: float,
                 grid: Sequence[RP5Restrictions] | None = None):
    """Grid search on tuning seeds (distinct from the evaluation seeds)."""
    t_star = setups[0].net.t_star
    grid = grid or rp5_grid(t_star)

    def evaluate(r: RP5Restrictions) -> float:
        return float(np.mean([_run(s, dispatch, DMEXCLP(s.model, s.allocation, r), alpha, TUNE_SEED_OFFSET)
                              for s in setups]))

    return tune_rp5(evaluate, grid)


def _cell_group(args) -> tuple[list[ResultRow], list[dict]]:
    spec, d, t_star, M, mu = args
    start = time.perf_counter()
    rows: list[ResultRow] = []
    errors: list[dict] = []
    maps = make_maps(spec, d, t_star)
    setups = [_setup(spec, net, M, mu, i) for i, net in enumerate(maps)]
    tables = [dict() for _ in setups]
    for dispatch in spec.dispatch:
        restrictions = None
        if "RP5" in spec.relocate:
            if spec.rp5 == "tune":
                restrictions = tune_rp5_for(setups, dispatch, spec.alpha).best
                log.info("RP5 tuned for d=%s t*=%s M=%s mu=%s %s: %s", d, t_star, M, mu, dispatch, restrictions)
            elif isinstance(spec.rp5, dict):
                restrictions = RP5Restrictions(**spec.rp5)
        for reloc in spec.relocate:
            cell_start = time.perf_counter()
            try:
                vals = [_run(s, dispatch, _relocator(reloc, s, restrictions, tables[i]), spec.alpha)
                        for i, s in enumerate(setups)]
            except Exception as exc:  # one failed cell must not stop the sweep
                log.error("cell d=%s t*=%s M=%s mu=%s %s/%s failed: %s", d, t_star, M, mu, dispatch, reloc, exc)
                errors.append({"d": d, "t_star": t_star, "M": M, "mu": mu, "dispatch": dispatch,
                               "relocate": reloc, "error": repr(exc)})
                continue
            rows.append(ResultRow(spec.K, spec.R, spec.lam, M, d, t_star, mu, dispatch, reloc, len(vals),
                                  float(np.mean(vals)), float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0,
                                  time.perf_counter() - cell_start))
    log.debug("group d=%s t*=%s M=%s mu=%s took %.1fs", d, t_star, M, mu, time.perf_counter() - start)
    return rows, errors


def run_sweep(spec: ExperimentSpec, errors: list | None = None) -> list[ResultRow]:
    """Every (M, d, t*, mu) x dispatch x relocation cell, sorted by cell key."""
    jobs = [(spec, d, t, M, mu) for d, t, M, mu in itertools.product(spec.d, spec.t_star, spec.M, spec.mu)]
    if spec.workers > 1:
        with ProcessPoolExecutor(spec.workers) as pool:
            results = list(pool.map(_cell_group, jobs))
    else:
        results = [_cell_group(j) for j in jobs]
    rows = [r for rs, _ in results for r in rs]
    if errors is not None:
        errors.extend(e for _, es in results for e in es)
    order = {n: i for i, n in enumerate(DISPATCH_NAMES + RELOCATION_NAMES)}
    rows.sort(key=lambda r: (r.M, r.d, r.t_star, r.mu, order[r.dispatch], order[r.relocate]))
    return rows


# ---------------------------------------------------------------------------
# reporting


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def rows_to_csv(rows: Sequence[ResultRow]) -> str:
    """Canonical CSV (no runtimes, floats in round-trip repr)."""
    if not rows:
        raise ValueError("no rows to report")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def parse_csv(text: str) -> list[ResultRow]:
    out = []
    for rec in csv.DictReader(io.StringIO(text)):
        out.append(ResultRow(int(rec["K"]), int(rec["R"]), float(rec["lam"]), int(rec["M"]), float(rec["d"]),
                             float(rec["t_star"]), float(rec["mu"]), rec["dispatch"], rec["relocate"],
                             int(rec["maps"]), float(rec["mean"]), float(rec["std"])))
    return out


def _num(v: float) -> str:
    return f"{v:g}"


def rows_to_table(rows: Sequence[ResultRow]) -> str:
    """Aligned text: one line per (M, d, t*), columns mu x policy."""
    if not rows:
        raise ValueError("no rows to report")
    mus = sorted({r.mu for r in rows}, reverse=True)
    pols = []
    for r in rows:
        label = _policy_label(r, rows)
        if label not in pols:
            pols.append(label)
    cells = {(r.M, r.d, r.t_star, r.mu, _policy_label(r, rows)): r.mean for r in rows}
    header = ["M", "d", "t*"] + [f"mu={_num(mu)}:{p}" for mu in mus for p in pols]
    lines = [header]
    for M, d, t in sorted({(r.M, r.d, r.t_star) for r in rows}):
        line = [str(M), _num(d), _num(t)]
        for mu in mus:
            for p in pols:
                v = cells.get((M, d, t, mu, p))
                line.append("-" if v is None else f"{v:.2f}")
        lines.append(line)
    widths = [max(len(l[i]) for l in lines) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(l, widths)) for l in lines) + "\n"


def _policy_label(r: ResultRow, rows: Sequence[ResultRow]) -> str:
    if len({x.relocate for x in rows}) == 1:
        return r.dispatch
    if len({x.dispatch for x in rows}) == 1:
        return r.relocate
    return f"{r.dispatch}+{r.relocate}"


def report(rows: Sequence[ResultRow], fmt: str = "csv") -> str:
    if fmt == "csv":
        return rows_to_csv(rows)
    if fmt in ("table", "text"):
        return rows_to_table(rows)
    raise ValueError(f"unknown report format {fmt!r}")


def cell_means(rows: Sequence[ResultRow]) -> dict[tuple, dict[str, float]]:
    """{(M, d, t*, mu): {policy label: mean}} for quick comparisons."""
    out: dict[tuple, dict[str, float]] = {}
    for r in rows:
        out.setdefault((r.M, r.d, r.t_star, r.mu), {})[_policy_label(r, rows)] = r.mean
    return out
