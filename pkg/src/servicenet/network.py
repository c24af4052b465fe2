"""Service region: machines, base stations and deterministic travel times.

Locations are addressed by a ``Location(kind, index)`` pair with 0-based
indices.  Internally every location also has a *node* number used to index the
travel matrix: machines occupy nodes ``0..K-1`` and bases ``K..K+R-1``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np
from scipy.spatial.distance import pdist, squareform

# slack used for every "within t*" comparison
TIME_TOL = 1e-9

MACHINE = "machine"
BASE = "base"


class MapGenerationError(RuntimeError):
    pass


class Location(NamedTuple):
    kind: str
    index: int

    @classmethod
    def machine(cls, k: int) -> "Location":
        return cls(MACHINE, k)

    @classmethod
    def base(cls, r: int) -> "Location":
        return cls(BASE, r)

    @property
    def is_base(self) -> bool:
        return self.kind == BASE


@dataclass(frozen=True)
class MapGenConfig:
    K: int
    R: int
    d: float
    t_star: float
    seed: int = 0
    max_attempts: int = 1000

    def __post_init__(self):
        if self.K < 1 or self.R < 1:
            raise ValueError(f"need K >= 1 and R >= 1, got K={self.K}, R={self.R}")
        if not self.d > 0 or not self.t_star > 0:
            raise ValueError(f"need d > 0 and t_star > 0, got d={self.d}, t_star={self.t_star}")


@dataclass(eq=False)
class NetworkMap:
    """Machines and bases in the plane; travel time is Euclidean distance.

    ``travel`` can be supplied explicitly (e.g. a rounded integer matrix for
    the discrete-time model); otherwise it is computed from the coordinates.
    """

    machine_coords: np.ndarray
    base_coords: np.ndarray
    t_star: float
    d: float | None = None
    seed: int | None = None
    travel_override: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.machine_coords = np.asarray(self.machine_coords, dtype=float).reshape(-1, 2)
        self.base_coords = np.asarray(self.base_coords, dtype=float).reshape(-1, 2)
        if self.travel_override is not None:
            t = np.asarray(self.travel_override, dtype=float)
            n = self.K + self.R
            if t.shape != (n, n):
                raise ValueError(f"travel matrix must be {n}x{n}, got {t.shape}")
            if not np.allclose(t, t.T) or np.any(np.diag(t) != 0) or np.any(t < 0):
                raise ValueError("travel matrix must be symmetric, nonnegative, zero diagonal")
            self.travel_override = t

    @property
    def K(self) -> int:
        return len(self.machine_coords)

    @property
    def R(self) -> int:
        return len(self.base_coords)

    @property
    def n_nodes(self) -> int:
        return self.K + self.R

    @cached_property
    def travel(self) -> np.ndarray:
        if self.travel_override is not None:
            return self.travel_override
        pts = np.vstack([self.machine_coords, self.base_coords])
        return squareform(pdist(pts))

    @cached_property
    def machine_base(self) -> np.ndarray:
        """K x R block of travel times machine -> base."""
        return self.travel[: self.K, self.K :]

    @cached_property
    def cover(self) -> np.ndarray:
        """Boolean K x R matrix: base r reaches machine k within t*."""
        return self.machine_base <= self.t_star + TIME_TOL

    def node(self, loc: Location) -> int:
        kind, i = loc
        if kind == MACHINE and 0 <= i < self.K:
            return i
        if kind == BASE and 0 <= i < self.R:
            return self.K + i
        raise KeyError(f"unknown location {loc!r}")

    def location(self, node: int) -> Location:
        if 0 <= node < self.K:
            return Location.machine(node)
        if self.K <= node < self.n_nodes:
            return Location.base(node - self.K)
        raise KeyError(f"unknown node {node}")

    def is_feasible(self) -> bool:
        return bool(self.cover.any(axis=1).all())

    def diameter(self) -> float:
        return float(self.travel.max())

    # serialization ---------------------------------------------------------
    def to_dict(self) -> dict:
        out = {
            "K": self.K,
            "R": self.R,
            "t_star": self.t_star,
            "d": self.d,
            "seed": self.seed,
            "machine_coords": self.machine_coords.tolist(),
            "base_coords": self.base_coords.tolist(),
        }
        if self.travel_override is not None:
            out["travel"] = self.travel_override.tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkMap":
        net = cls(
            machine_coords=np.array(data["machine_coords"], dtype=float),
            base_coords=np.array(data["base_coords"], dtype=float),
            t_star=float(data["t_star"]),
            d=data.get("d"),
            seed=data.get("seed"),
            travel_override=None if data.get("travel") is None else np.array(data["travel"]),
        )
        if net.K != data.get("K", net.K) or net.R != data.get("R", net.R):
            raise ValueError("K/R fields disagree with coordinate lists")
        return net

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "NetworkMap":
        return cls.from_dict(json.loads(text))


def _scaled(points: np.ndarray, target_mean: float) -> np.ndarray | None:
    mean = pdist(points).mean()
    if not mean > 0:
        return None
    return points * (target_mean / mean)


def generate_map(config: MapGenConfig) -> NetworkMap:
    """Random map whose mean pairwise distance over all K+R points is t*/d.

    Points are drawn uniformly in the unit square and rescaled.  Machines that
    end up with no base within t* are redrawn (uniformly, only those machines)
    and the whole set is rescaled again, until every machine is covered.
    """
    K, R = config.K, config.R
    rng = np.random.default_rng(config.seed)
    target = config.t_star / config.d
    pts = rng.uniform(size=(K + R, 2))
    for _ in range(config.max_attempts):
        scaled = _scaled(pts, target)
        if scaled is None:
            pts = rng.uniform(size=(K + R, 2))
            continue
        diff = scaled[:K, None, :] - scaled[None, K:, :]
        dist = np.sqrt((diff**2).sum(axis=2))
        uncovered = ~(dist <= config.t_star + TIME_TOL).any(axis=1)
        if not uncovered.any():
            return NetworkMap(scaled[:K], scaled[K:], config.t_star, config.d, config.seed)
        if K == 1 and R == 1:
            # both points are forced to distance t*/d; redrawing cannot help
            break
        pts[np.flatnonzero(uncovered)] = rng.uniform(size=(int(uncovered.sum()), 2))
    raise MapGenerationError(
        f"no feasible map for K={K}, R={R}, d={config.d}, t_star={config.t_star}, "
        f"seed={config.seed} within {config.max_attempts} attempts"
    )


def travel_time(net: NetworkMap, a: Location, b: Location) -> float:
    return float(net.travel[net.node(a), net.node(b)])


def coverage_sets(net: NetworkMap) -> list[list[int]]:
    """For each machine, the (0-based) bases that reach it within t*."""
    return [[int(r) for r in np.flatnonzero(row)] for row in net.cover]
