"""Weighted particle measures on R^d and on trajectory space.

Probability measures are represented exactly as weighted point clouds; a
trajectory measure is a weighted collection of discrete paths sharing one time
grid. Wasserstein-1 distances are exact: the sorted-quantile coupling in one
dimension, a transportation LP otherwise. Instances are immutable values.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse
from scipy.optimize import linprog

from .dynamics import Path, TimeGrid, velocity_l2_sq
from .errors import InvalidArgumentError, NumericalFailureError

__all__ = [
    "ParticleMeasure",
    "TrajectoryEnsemble",
    "FlowOfMeasures",
    "AdmissibilityReport",
    "pushforward_eval",
    "wasserstein1",
    "moment_alpha",
    "check_admissible",
    "disintegrate",
]

WEIGHT_TOL = 1e-12
# Exact assignment only at desk scale; refuse to silently approximate above it.
MAX_TRANSPORT_PARTICLES = 512


@dataclass(frozen=True)
class ParticleMeasure:
    """Probability measure sum_j w_j * delta_{x_j} with nonnegative weights summing to 1."""

    points: np.ndarray  # (n, d)
    weights: np.ndarray  # (n,)

    def __post_init__(self):
        points = np.atleast_2d(np.asarray(self.points, dtype=float))
        weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if points.shape[0] != weights.shape[0]:
            raise InvalidArgumentError(
                f"{points.shape[0]} points but {weights.shape[0]} weights"
            )
        if not np.all(np.isfinite(points)):
            raise InvalidArgumentError("particle points must be finite")
        if np.any(weights < 0):
            raise InvalidArgumentError("particle weights must be nonnegative")
        if abs(float(weights.sum()) - 1.0) > WEIGHT_TOL:
            raise InvalidArgumentError(
                f"weights must sum to 1 within {WEIGHT_TOL}, got {weights.sum()!r}"
            )
        points.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def dirac(cls, point) -> "ParticleMeasure":
        return cls(points=np.atleast_2d(np.asarray(point, dtype=float)), weights=np.ones(1))

    @classmethod
    def uniform(cls, points) -> "ParticleMeasure":
        points = np.atleast_2d(np.asarray(points, dtype=float))
        n = points.shape[0]
        return cls(points=points, weights=np.full(n, 1.0 / n))

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @cached_property
    def mean(self) -> np.ndarray:
        return self.weights @ self.points

    def to_csv(self) -> str:
        """Serialize as `w,x1,...,xd`, one particle per row."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["w"] + [f"x{i + 1}" for i in range(self.dim)])
        for w, x in zip(self.weights, self.points):
            writer.writerow([_fmt(w)] + [_fmt(v) for v in x])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ParticleMeasure":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if not header or header[0] != "w":
            raise InvalidArgumentError("particle CSV must start with header w,x1,...,xd")
        points, weights = [], []
        for row_number, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                values = [float(v) for v in row]
            except ValueError as exc:
                raise InvalidArgumentError(f"row {row_number}: non-numeric entry") from exc
            if len(values) != len(header):
                raise InvalidArgumentError(f"row {row_number}: expected {len(header)} columns")
            if values[0] < 0:
                raise InvalidArgumentError(f"row {row_number}: negative weight {values[0]}")
            weights.append(values[0])
            points.append(values[1:])
        if not points:
            raise InvalidArgumentError("particle CSV has no data rows")
        return cls(points=np.asarray(points), weights=np.asarray(weights))


def _fmt(x: float) -> str:
    return "%.17g" % float(x)


@dataclass(frozen=True)
class TrajectoryEnsemble:
    """Probability measure on discrete paths: weighted paths on a shared grid."""

    paths: tuple[Path, ...]
    weights: np.ndarray
    grid: TimeGrid

    def __post_init__(self):
        paths = tuple(self.paths)
        weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if len(paths) != weights.shape[0]:
            raise InvalidArgumentError(f"{len(paths)} paths but {weights.shape[0]} weights")
        if np.any(weights < 0):
            raise InvalidArgumentError("ensemble weights must be nonnegative")
        if abs(float(weights.sum()) - 1.0) > WEIGHT_TOL:
            raise InvalidArgumentError(
                f"ensemble weights must sum to 1 within {WEIGHT_TOL}, got {weights.sum()!r}"
            )
        for p in paths:
            if p.grid != self.grid:
                raise InvalidArgumentError("all ensemble paths must share the ensemble grid")
            if p.start_index != 0:
                raise InvalidArgumentError("ensemble paths must start at the first grid node")
        weights.setflags(write=False)
        object.__setattr__(self, "paths", paths)
        object.__setattr__(self, "weights", weights)

    @property
    def size(self) -> int:
        return len(self.paths)

    @property
    def dim(self) -> int:
        return self.paths[0].states.shape[1]

    def flow(self) -> "FlowOfMeasures":
        """All node marginals e_{t_i} # eta, in node order."""
        snapshots = tuple(
            pushforward_eval(self, i) for i in range(self.grid.intervals + 1)
        )
        return FlowOfMeasures(snapshots=snapshots, grid=self.grid)


@dataclass(frozen=True)
class FlowOfMeasures:
    """Time-indexed marginals, one ParticleMeasure per grid node."""

    snapshots: tuple[ParticleMeasure, ...]
    grid: TimeGrid

    def __post_init__(self):
        if len(self.snapshots) != self.grid.intervals + 1:
            raise InvalidArgumentError(
                f"need {self.grid.intervals + 1} snapshots, got {len(self.snapshots)}"
            )
        object.__setattr__(self, "snapshots", tuple(self.snapshots))

    def at(self, i: int) -> ParticleMeasure:
        return self.snapshots[i]

    def to_csv(self) -> str:
        """Long format: t,w,x1,...,xd with one row per (node, particle)."""
        dim = self.snapshots[0].dim
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t", "w"] + [f"x{i + 1}" for i in range(dim)])
        for i, snap in enumerate(self.snapshots):
            t = self.grid.time(i)
            for w, x in zip(snap.weights, snap.points):
                writer.writerow([_fmt(t), _fmt(w)] + [_fmt(v) for v in x])
        return buf.getvalue()


def pushforward_eval(ensemble: TrajectoryEnsemble, i: int) -> ParticleMeasure:
    """Marginal of the ensemble at grid node i (the evaluation-map push-forward)."""
    if not 0 <= i <= ensemble.grid.intervals:
        raise InvalidArgumentError(f"node index {i} outside 0..{ensemble.grid.intervals}")
    points = np.stack([p.states[i] for p in ensemble.paths])
    return ParticleMeasure(points=points, weights=ensemble.weights)


def _wasserstein_sorted_1d(mu: ParticleMeasure, nu: ParticleMeasure) -> float:
    """Exact W1 in one dimension via the quantile coupling."""
    ax = np.argsort(mu.points[:, 0], kind="stable")
    bx = np.argsort(nu.points[:, 0], kind="stable")
    xs, xw = mu.points[ax, 0], mu.weights[ax]
    ys, yw = nu.points[bx, 0], nu.weights[bx]
    total = 0.0
    i = j = 0
    remaining_i = xw[0]
    remaining_j = yw[0]
    while i < len(xs) and j < len(ys):
        step = min(remaining_i, remaining_j)
        total += step * abs(xs[i] - ys[j])
        remaining_i -= step
        remaining_j -= step
        if remaining_i <= WEIGHT_TOL:
            i += 1
            if i < len(xs):
                remaining_i = xw[i]
        if remaining_j <= WEIGHT_TOL:
            j += 1
            if j < len(ys):
                remaining_j = yw[j]
    return float(total)


def _cost_matrix(mu: ParticleMeasure, nu: ParticleMeasure) -> np.ndarray:
    diff = mu.points[:, None, :] - nu.points[None, :, :]
    return np.sqrt(np.sum(diff**2, axis=2))


def _wasserstein_lp(mu: ParticleMeasure, nu: ParticleMeasure) -> float:
    """Exact W1 from the primal transportation LP (HiGHS simplex)."""
    n, m = mu.size, nu.size
    cost = _cost_matrix(mu, nu).ravel()
    rows, cols, vals = [], [], []
    for i in range(n):
        rows.extend([i] * m)
        cols.extend(range(i * m, (i + 1) * m))
        vals.extend([1.0] * m)
    for j in range(m):
        rows.extend([n + j] * n)
        cols.extend(range(j, n * m, m))
        vals.extend([1.0] * n)
    a_eq = scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(n + m, n * m))
    b_eq = np.concatenate([mu.weights, nu.weights])
    res = linprog(cost, A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:
        raise NumericalFailureError(
            f"transport LP failed: {res.message}", {"status": res.status}
        )
    return float(res.fun)


def wasserstein1(mu: ParticleMeasure, nu: ParticleMeasure, method: str = "auto") -> float:
    """Exact optimal-transport distance with Euclidean ground cost.

    `method` is "auto" (sorted coupling in 1D, LP otherwise), "sorted", or "lp".
    """
    if mu.dim != nu.dim:
        raise InvalidArgumentError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    if mu.size > MAX_TRANSPORT_PARTICLES or nu.size > MAX_TRANSPORT_PARTICLES:
        raise InvalidArgumentError(
            f"exact transport capped at {MAX_TRANSPORT_PARTICLES} particles"
        )
    if method == "sorted" or (method == "auto" and mu.dim == 1):
        if mu.dim != 1:
            raise InvalidArgumentError("sorted coupling requires dimension 1")
        return _wasserstein_sorted_1d(mu, nu)
    if method in ("lp", "auto"):
        return _wasserstein_lp(mu, nu)
    raise InvalidArgumentError(f"unknown method {method!r}")


def moment_alpha(mu: ParticleMeasure, alpha: float) -> float:
    """Weighted alpha-moment sum_j w_j |x_j|^alpha, defined for alpha > 1."""
    if not alpha > 1:
        raise InvalidArgumentError(f"moment order must exceed 1, got {alpha}")
    norms = np.linalg.norm(mu.points, axis=1)
    return float(np.sum(mu.weights * norms**alpha))


@dataclass(frozen=True)
class AdmissibilityReport:
    initial_match: float  # d1 between the time-0 marginal and the prescribed m0
    moment: float  # velocity moment sum_j w_j |gamma_j'|_2^alpha
    radius: float
    alpha: float
    admissible: bool

    def as_dict(self) -> dict:
        return {
            "initial_match": self.initial_match,
            "moment": self.moment,
            "radius": self.radius,
            "alpha": self.alpha,
            "admissible": self.admissible,
        }


def check_admissible(
    ensemble: TrajectoryEnsemble,
    m0: ParticleMeasure,
    radius: float,
    alpha: float,
    dyn,
) -> AdmissibilityReport:
    """Verify the two admissibility conditions: start marginal and velocity moment."""
    initial_match = wasserstein1(pushforward_eval(ensemble, 0), m0)
    norms_sq = np.array([velocity_l2_sq(dyn, p) for p in ensemble.paths])
    moment = float(np.sum(ensemble.weights * norms_sq ** (alpha / 2.0)))
    return AdmissibilityReport(
        initial_match=initial_match,
        moment=moment,
        radius=float(radius),
        alpha=float(alpha),
        admissible=bool(initial_match <= 1e-9 and moment <= radius),
    )


@dataclass(frozen=True)
class DisintegrationGroup:
    """Conditional measure over the paths sharing one initial point."""

    start: np.ndarray
    mass: float
    weights: np.ndarray  # renormalized to sum 1 within the group
    paths: tuple[Path, ...]


def disintegrate(ensemble: TrajectoryEnsemble) -> dict[bytes, DisintegrationGroup]:
    """Group paths by bit-identical initial point; keys are the raw start bytes.

    Reassembling the groups with their masses reproduces the ensemble exactly.
    """
    groups: dict[bytes, list[int]] = {}
    for idx, p in enumerate(ensemble.paths):
        groups.setdefault(p.start.tobytes(), []).append(idx)
    out = {}
    for key, indices in groups.items():
        w = ensemble.weights[indices]
        mass = float(w.sum())
        if mass <= 0:
            local = np.full(len(indices), 1.0 / len(indices))
        else:
            local = w / mass
        out[key] = DisintegrationGroup(
            start=ensemble.paths[indices[0]].start,
            mass=mass,
            weights=local,
            paths=tuple(ensemble.paths[i] for i in indices),
        )
    return out
