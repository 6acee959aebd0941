"""Single-agent optimal control against a frozen flow of measures.

The problem is transcribed directly: piecewise-constant controls on the grid,
exact interval propagation, left-endpoint quadrature of the running cost. The
cost gradient comes from the discrete adjoint recursion, the outer loop is
limited-memory quasi-Newton, and the Pontryagin system is evaluated afterwards
as a certificate rather than used for the solve.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from .dynamics import LinearDynamics, Path, StepOperator, TimeGrid, integrate_path
from .errors import InvalidArgumentError, InvalidModelError, NumericalFailureError
from .measures import FlowOfMeasures, ParticleMeasure, moment_alpha
from .models import LagrangianModel, legendre_hamiltonian, hamiltonian_grad

__all__ = [
    "SolverOptions",
    "OcpSolution",
    "ValueProbe",
    "AprioriBounds",
    "solve_best_response",
    "value_function",
    "pmp_residual",
    "dpp_residual",
    "apriori_bounds",
]


@dataclass(frozen=True)
class SolverOptions:
    """Tolerances and multistart policy for the control solver.

    `certify` controls whether each returned solution carries its Pontryagin
    residual; probes that only need values may disable it for speed, in which
    case the field is NaN (never silently zero).
    """

    tol_grad_rel: float = 1e-8  # gradient 2-norm target, relative to 1 + |cost|
    max_iterations: int = 500
    multistarts: int = 3
    random_start_scale: float = 0.5
    seed: int = 0
    certify: bool = True


@dataclass(frozen=True)
class OcpSolution:
    """A locally optimal control with its adjoint arc and certificates."""

    path: Path
    cost: float
    adjoint: np.ndarray  # (M+1, d), terminal entry equals the terminal cost gradient
    grad_norm: float
    pmp_residual: float
    iterations: int

    def __post_init__(self):
        if not np.isfinite(self.cost):
            raise InvalidModelError(f"solver produced non-finite cost {self.cost}")

    @property
    def controls(self) -> np.ndarray:
        return self.path.controls

    def control_l2(self) -> float:
        """Discrete L2 norm of the control, sqrt(sum dt |u_i|^2)."""
        return float(np.sqrt(self.path.grid.dt * np.sum(self.controls**2)))


class _CostAssembler:
    """Cost, gradient, and adjoint of the transcribed problem for one start node."""

    def __init__(self, dyn, model, flow, start_index):
        self.dyn = dyn
        self.model = model
        self.grid = flow.grid
        self.start_index = start_index
        self.steps = self.grid.intervals - start_index
        self.step_op = StepOperator.build(dyn, self.grid)
        self.running_measures = flow.snapshots[start_index : self.grid.intervals]
        self.profile = model.coupling_profile(self.running_measures)
        self.terminal_measure = flow.snapshots[self.grid.intervals]

    def forward(self, controls: np.ndarray, x0: np.ndarray) -> np.ndarray:
        states = np.empty((self.steps + 1, self.dyn.dim_state))
        states[0] = x0
        emat, smat = self.step_op.state_map, self.step_op.control_map
        for i in range(self.steps):
            states[i + 1] = emat @ states[i] + smat @ controls[i]
        return states

    def cost_only(self, controls: np.ndarray, x0: np.ndarray) -> float:
        states = self.forward(controls, x0)
        return self._cost_from_states(states, controls)

    def _cost_from_states(self, states, controls) -> float:
        dt = self.grid.dt
        run = self.model.running_batch(states[:-1], controls)
        coup = self.model.coupling_batch(states[:-1], self.profile)
        return float(
            dt * (np.sum(run) + np.sum(coup))
            + self.model.terminal(states[-1], self.terminal_measure)
        )

    def cost_grad(self, controls: np.ndarray, x0: np.ndarray):
        """Return (cost, control gradient, adjoint arc) in one forward/backward sweep."""
        states = self.forward(controls, x0)
        dt = self.grid.dt
        run = self.model.running_batch(states[:-1], controls)
        coup = self.model.coupling_batch(states[:-1], self.profile)
        cost = float(
            dt * (np.sum(run) + np.sum(coup))
            + self.model.terminal(states[-1], self.terminal_measure)
        )
        grad_x = dt * (
            self.model.running_grad_x_batch(states[:-1], controls)
            + self.model.coupling_grad_x_batch(states[:-1], self.profile)
        )
        grad_u = dt * self.model.running_grad_u_batch(states[:-1], controls)
        emat_t = self.step_op.state_map.T
        smat_t = self.step_op.control_map.T
        adjoint = np.empty((self.steps + 1, self.dyn.dim_state))
        q = self.model.terminal_grad_x(states[-1], self.terminal_measure)
        adjoint[-1] = q
        grad = np.empty_like(controls)
        for i in range(self.steps - 1, -1, -1):
            grad[i] = grad_u[i] + smat_t @ q
            q = emat_t @ q + grad_x[i]
            adjoint[i] = q
        return cost, grad, adjoint, states


def _terminal_solution(dyn, model, flow, x) -> OcpSolution:
    grid = flow.grid
    x = np.atleast_1d(np.asarray(x, dtype=float))
    m_t = flow.snapshots[grid.intervals]
    path = Path(
        states=x.reshape(1, -1),
        controls=np.zeros((0, dyn.dim_control)),
        grid=grid,
        start_index=grid.intervals,
    )
    return OcpSolution(
        path=path,
        cost=float(model.terminal(x, m_t)),
        adjoint=np.atleast_2d(model.terminal_grad_x(x, m_t)),
        grad_norm=0.0,
        pmp_residual=0.0,
        iterations=0,
    )


def _start_rng(seed: int, start_index: int, x: np.ndarray) -> np.random.Generator:
    words = np.frombuffer(np.asarray(x, dtype=float).tobytes(), dtype=np.uint64)
    entropy = [np.uint64(seed), np.uint64(start_index)] + list(words)
    return np.random.default_rng(np.random.SeedSequence([int(w) for w in entropy]))


def solve_best_response(
    dyn: LinearDynamics,
    model: LagrangianModel,
    flow: FlowOfMeasures,
    start_index: int,
    x,
    init: np.ndarray | None = None,
    options: SolverOptions | None = None,
) -> OcpSolution:
    """Locally minimize the discrete cost from (t_{start_index}, x) against `flow`.

    When `init` is given it is used as the single warm start; otherwise the
    zero control is used. Raises NumericalFailureError when the quasi-Newton
    loop cannot reach the gradient tolerance.
    """
    options = options or SolverOptions()
    grid = flow.grid
    if not 0 <= start_index <= grid.intervals:
        raise InvalidArgumentError(f"start index {start_index} outside 0..{grid.intervals}")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if start_index == grid.intervals:
        return _terminal_solution(dyn, model, flow, x)
    assembler = _CostAssembler(dyn, model, flow, start_index)
    steps, k = assembler.steps, dyn.dim_control
    if init is None:
        u0 = np.zeros((steps, k))
    else:
        u0 = np.asarray(init, dtype=float).reshape(steps, k)
    sol = _solve_from(assembler, x, u0, options)
    if options.certify:
        sol = replace(sol, pmp_residual=pmp_residual(dyn, model, flow, sol))
    return sol


def _solve_from(assembler, x, u0, options) -> OcpSolution:
    steps, k = u0.shape
    dim = steps * k

    def objective(u_flat):
        cost, grad, _, _ = assembler.cost_grad(u_flat.reshape(steps, k), x)
        if not np.isfinite(cost) or not np.all(np.isfinite(grad)):
            raise InvalidModelError("model returned non-finite cost or gradient")
        return cost, grad.ravel()

    gtol = options.tol_grad_rel / np.sqrt(dim)
    res = minimize(
        objective,
        u0.ravel(),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": options.max_iterations, "maxfun": 10 * options.max_iterations,
                 "ftol": 1e-18, "gtol": gtol},
    )
    controls = res.x.reshape(steps, k)
    cost, grad, adjoint, _ = assembler.cost_grad(controls, x)
    grad_norm = float(np.linalg.norm(grad))
    tol = options.tol_grad_rel * (1.0 + abs(cost))
    if grad_norm > tol:
        # one polish pass before giving up; L-BFGS-B sometimes stops early on ftol
        res = minimize(
            objective,
            controls.ravel(),
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": options.max_iterations, "ftol": 0.0, "gtol": gtol * 1e-2},
        )
        controls = res.x.reshape(steps, k)
        cost, grad, adjoint, _ = assembler.cost_grad(controls, x)
        grad_norm = float(np.linalg.norm(grad))
    if grad_norm > tol:
        raise NumericalFailureError(
            f"best-response solver stalled: |grad|={grad_norm:.3e} > {tol:.3e} "
            f"({res.message})",
            {"controls": controls, "cost": cost, "grad_norm": grad_norm},
        )
    path = integrate_path(assembler.dyn, assembler.grid, assembler.start_index, x, controls)
    return OcpSolution(
        path=path,
        cost=cost,
        adjoint=adjoint,
        grad_norm=grad_norm,
        pmp_residual=float("nan"),
        iterations=int(res.nit),
    )


def pmp_residual(
    dyn: LinearDynamics, model: LagrangianModel, flow: FlowOfMeasures, sol: OcpSolution
) -> float:
    """Max nodewise defect of the Pontryagin system along a solution.

    Sums the Hamiltonian-system defects (finite-difference time derivatives of
    state and adjoint against the Hamiltonian gradients) with the maximum-
    condition gap |u_i - u*_i|.
    """
    grid = sol.path.grid
    i0 = sol.path.start_index
    states, adjoint, controls = sol.path.states, sol.adjoint, sol.path.controls
    steps = controls.shape[0]
    if steps == 0:
        return 0.0
    dt = grid.dt

    def fd(series):
        out = np.empty_like(series)
        out[0] = (series[1] - series[0]) / dt
        out[-1] = (series[-1] - series[-2]) / dt
        if series.shape[0] > 2:
            out[1:-1] = (series[2:] - series[:-2]) / (2 * dt)
        return out

    dstates = fd(states)
    dadjoint = fd(adjoint)
    worst = 0.0
    for local in range(steps + 1):
        node = i0 + local
        m = flow.snapshots[node]
        grad_x, grad_p = hamiltonian_grad(dyn, model, states[local], adjoint[local], m)
        value = float(np.linalg.norm(dstates[local] + grad_p))
        value += float(np.linalg.norm(dadjoint[local] - grad_x))
        if local < steps:
            _, u_star = legendre_hamiltonian(dyn, model, states[local], adjoint[local], m)
            value += float(np.linalg.norm(controls[local] - u_star))
        worst = max(worst, value)
    return worst


@dataclass
class ValueProbe:
    """Memoized value-function evaluator for a frozen flow.

    Each query runs a small multistart (zero control, warm start from the
    nearest cached neighbour at the same node, then seeded random starts) and
    caches the best solution. Safe for concurrent readers; writes are locked.
    """

    dyn: LinearDynamics
    model: LagrangianModel
    flow: FlowOfMeasures
    options: SolverOptions = field(default_factory=SolverOptions)
    _cache: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def grid(self) -> TimeGrid:
        return self.flow.grid

    def value(self, i: int, x) -> float:
        return self.solution(i, x).cost

    def solution(self, i: int, x) -> OcpSolution:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        key = (int(i), x.tobytes())
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        sol = self._solve_multistart(i, x)
        with self._lock:
            self._cache[key] = sol
        return sol

    def cache_size(self) -> int:
        return len(self._cache)

    def _nearest_cached_controls(self, i: int, x: np.ndarray):
        best, best_dist = None, np.inf
        with self._lock:
            entries = [
                (k, s) for (k, s) in self._cache.items() if k[0] == i
            ]
        for key, sol in entries:
            pt = np.frombuffer(key[1], dtype=float)
            dist = float(np.linalg.norm(pt - x))
            if dist < best_dist:
                best, best_dist = sol, dist
        return None if best is None else best.path.controls

    def _solve_multistart(self, i: int, x: np.ndarray) -> OcpSolution:
        if i == self.grid.intervals:
            return _terminal_solution(self.dyn, self.model, self.flow, x)
        steps = self.grid.intervals - i
        starts = [np.zeros((steps, self.dyn.dim_control))]
        warm = self._nearest_cached_controls(i, x)
        if warm is not None:
            starts.append(warm)
        rng = _start_rng(self.options.seed, i, x)
        while len(starts) < self.options.multistarts:
            starts.append(
                self.options.random_start_scale
                * rng.standard_normal((steps, self.dyn.dim_control))
            )
        trial_options = replace(self.options, certify=False)
        best = None
        failures = []
        for u0 in starts:
            try:
                sol = solve_best_response(
                    self.dyn, self.model, self.flow, i, x, init=u0, options=trial_options
                )
            except NumericalFailureError as exc:
                failures.append(str(exc))
                continue
            if best is None or sol.cost < best.cost - 1e-15 or (
                abs(sol.cost - best.cost) <= 1e-15 and sol.control_l2() < best.control_l2()
            ):
                best = sol
        if best is None:
            raise NumericalFailureError(
                f"all {len(starts)} starts failed at node {i}", {"failures": failures}
            )
        if self.options.certify:
            best = replace(best, pmp_residual=pmp_residual(self.dyn, self.model, self.flow, best))
        return best


def value_function(probe: ValueProbe, i: int, x) -> float:
    """Best multistart cost from (t_i, x); memoized in the probe."""
    return probe.value(i, x)


def dpp_residual(probe: ValueProbe, i: int, j: int, x) -> float:
    """Dynamic-programming defect |V(t_i,x) - V(t_j, g*(t_j)) - partial cost|."""
    if j < i:
        raise InvalidArgumentError(f"need j >= i, got i={i}, j={j}")
    if j > probe.grid.intervals:
        raise InvalidArgumentError(f"node {j} beyond final node {probe.grid.intervals}")
    if j == i:
        return 0.0
    sol = probe.solution(i, x)
    states, controls = sol.path.states, sol.path.controls
    dt = probe.grid.dt
    partial = 0.0
    for local in range(j - i):
        node = i + local
        partial += dt * probe.model.lagrangian(
            states[local], controls[local], probe.flow.snapshots[node]
        )
    tail = probe.value(j, states[j - i])
    return float(abs(sol.cost - (tail + partial)))


@dataclass(frozen=True)
class AprioriBounds:
    """Structural constants implied by the data, used as runtime certificates.

    `control_l2` bounds the optimal control norm; `state_sup_coeff` and
    `velocity_coeff` bound the optimal path and its velocity via c*(1+|x|);
    `ensemble_radius` bounds the velocity moment of best-response ensembles;
    `holder_coeff` is the 1/2-Hoelder constant of equilibrium flows. The
    velocity coefficient is the max of the square-root and linear readings of
    the drift/gain norms; `binding_reading` records which one was larger.
    """

    control_l2: float
    state_sup_coeff: float
    velocity_coeff: float
    velocity_coeff_sqrt: float
    velocity_coeff_linear: float
    binding_reading: str
    ensemble_radius: float
    reference_radius: float
    radius: float
    holder_coeff: float
    quad_lower: float
    envelope_offset: float
    terminal_sup: float
    alpha: float

    def as_dict(self) -> dict:
        return {
            "control_l2": self.control_l2,
            "state_sup_coeff": self.state_sup_coeff,
            "velocity_coeff": self.velocity_coeff,
            "velocity_coeff_sqrt": self.velocity_coeff_sqrt,
            "velocity_coeff_linear": self.velocity_coeff_linear,
            "binding_reading": self.binding_reading,
            "ensemble_radius": self.ensemble_radius,
            "reference_radius": self.reference_radius,
            "radius": self.radius,
            "holder_coeff": self.holder_coeff,
            "quad_lower": self.quad_lower,
            "envelope_offset": self.envelope_offset,
            "terminal_sup": self.terminal_sup,
            "alpha": self.alpha,
        }


def apriori_bounds(
    dyn: LinearDynamics,
    model: LagrangianModel,
    m0: ParticleMeasure,
    alpha: float,
    sample_radius: float | None = None,
    n_samples: int = 512,
    seed: int = 0,
) -> AprioriBounds:
    """Compute the certificate constants from the growth envelope and data sups.

    The envelope offset and terminal sup are estimated by sampling over a box
    covering the zero-control reachable set of the initial particles, inflated
    once by the first-pass control bound (they may also be read off declared
    model constants when those dominate).
    """
    if model.growth is None:
        raise InvalidModelError("model must declare growth constants")
    quad_lower = model.growth.quad_lower
    horizon = dyn.horizon
    drift_norm = dyn.drift_norm()
    gain_norm = dyn.gain_norm()
    amplification = float(np.exp(horizon * drift_norm))
    rng = np.random.default_rng(seed)
    r0 = float(np.max(np.linalg.norm(m0.points, axis=1)))

    def estimate_sups(radius: float):
        pts = rng.uniform(-radius, radius, size=(n_samples, dyn.dim_state))
        zero_u = np.zeros((n_samples, dyn.dim_control))
        run = model.running_batch(pts, zero_u)
        coup = model.coupling_batch(pts, model.coupling_profile([m0] * n_samples))
        term = np.array([model.terminal(p, m0) for p in pts])
        offset = model.growth.offset + float(np.max(np.abs(run + coup)))
        return offset, float(np.max(np.abs(term)))

    if sample_radius is None:
        radius = amplification * (r0 + 1.0)
        offset, terminal_sup = estimate_sups(radius)
        k_first = np.sqrt((2.0 / quad_lower) * (offset * horizon + terminal_sup))
        radius = amplification * (r0 + gain_norm * np.sqrt(horizon) * k_first)
        offset, terminal_sup = estimate_sups(max(radius, amplification * (r0 + 1.0)))
    else:
        offset, terminal_sup = estimate_sups(float(sample_radius))

    control_l2 = float(np.sqrt((2.0 / quad_lower) * (offset * horizon + terminal_sup)))
    state_sup_coeff = float(amplification * max(1.0, gain_norm * np.sqrt(horizon) * control_l2))
    sqrt_reading = float(
        np.sqrt(drift_norm) * np.sqrt(horizon) * state_sup_coeff + np.sqrt(gain_norm) * control_l2
    )
    linear_reading = float(
        drift_norm * np.sqrt(horizon) * state_sup_coeff + gain_norm * control_l2
    )
    velocity_coeff = max(sqrt_reading, linear_reading)
    binding = "sqrt" if sqrt_reading >= linear_reading else "linear"
    mass_alpha = moment_alpha(m0, alpha) if alpha > 1 else float(
        np.sum(m0.weights * np.linalg.norm(m0.points, axis=1) ** alpha)
    )
    ensemble_radius = float(velocity_coeff**alpha * (mass_alpha + 1.0))
    reference_radius = float((drift_norm * amplification) ** alpha * mass_alpha)
    first_moment = float(np.sum(m0.weights * np.linalg.norm(m0.points, axis=1)))
    holder_coeff = float(velocity_coeff * (1.0 + first_moment))
    return AprioriBounds(
        control_l2=control_l2,
        state_sup_coeff=state_sup_coeff,
        velocity_coeff=velocity_coeff,
        velocity_coeff_sqrt=sqrt_reading,
        velocity_coeff_linear=linear_reading,
        binding_reading=binding,
        ensemble_radius=ensemble_radius,
        reference_radius=reference_radius,
        radius=float(max(ensemble_radius, reference_radius)),
        holder_coeff=holder_coeff,
        quad_lower=float(quad_lower),
        envelope_offset=float(offset),
        terminal_sup=float(terminal_sup),
        alpha=float(alpha),
    )
