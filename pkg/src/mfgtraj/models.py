"""Cost models and Hamiltonian computations.

A model supplies the running cost (strictly convex in the control), a
mean-field coupling, and a terminal cost, together with analytic first
derivatives and the control Hessian. The Hamiltonian is evaluated by solving
the strictly concave inner maximization with a damped Newton method.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import LinearDynamics
from .errors import InvalidArgumentError, InvalidModelError, NumericalFailureError
from .measures import ParticleMeasure

__all__ = [
    "TonelliConstants",
    "GrowthConstants",
    "LagrangianModel",
    "QuadraticControlModel",
    "MeanAttractionModel",
    "ConvolutionCouplingModel",
    "MODEL_FAMILIES",
    "build_model",
    "Box",
    "legendre_hamiltonian",
    "hamiltonian_grad",
    "check_tonelli",
    "check_h1",
]


@dataclass(frozen=True)
class TonelliConstants:
    """Declared structural constants of the running cost.

    hessian: two-sided control-Hessian bound (I/hessian <= D2_uu <= hessian*I);
    mixed: mixed-derivative growth coefficient; origin: bound on the data at u=0.
    """

    hessian: float
    mixed: float
    origin: float


@dataclass(frozen=True)
class GrowthConstants:
    """Declared growth envelope and coercivity constants.

    quad_lower * |u|^2 - offset <= L <= offset + |u|^2 / quad_lower.
    `p_grad_growth` bounds |D_p H| / (1 + |x| + |p|); the coercivity pair
    (coercivity, coercivity_offset) asserts <D_x H, p> >= coercivity*|p|^2 - offset.
    """

    quad_lower: float
    offset: float
    p_grad_growth: float | None = None
    coercivity: float | None = None
    coercivity_offset: float | None = None

    def __post_init__(self):
        if not self.quad_lower > 0:
            raise InvalidModelError(f"quad_lower must be positive, got {self.quad_lower}")


class LagrangianModel:
    """Contract for the cost data; subclasses provide analytic evaluators.

    All evaluators must be pure functions of their arguments (no internal
    mutable state) so they can be called concurrently.
    """

    dim_state: int
    dim_control: int
    tonelli: TonelliConstants
    growth: GrowthConstants | None = None
    coupling_lipschitz: float = 0.0
    semiconcavity_running: float = 0.0
    semiconcavity_terminal: float = 0.0

    # running cost and derivatives
    def running(self, x: np.ndarray, u: np.ndarray) -> float:
        raise NotImplementedError

    def running_grad_x(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def running_grad_u(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def running_hess_u(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    # mean-field coupling
    def coupling(self, x: np.ndarray, m: ParticleMeasure) -> float:
        return 0.0

    def coupling_grad_x(self, x: np.ndarray, m: ParticleMeasure) -> np.ndarray:
        return np.zeros_like(np.atleast_1d(x), dtype=float)

    # terminal cost
    def terminal(self, x: np.ndarray, m: ParticleMeasure) -> float:
        raise NotImplementedError

    def terminal_grad_x(self, x: np.ndarray, m: ParticleMeasure) -> np.ndarray:
        raise NotImplementedError

    # combined running cost L = running + coupling
    def lagrangian(self, x, u, m) -> float:
        return self.running(x, u) + self.coupling(x, m)

    def lagrangian_grad_x(self, x, u, m) -> np.ndarray:
        return self.running_grad_x(x, u) + self.coupling_grad_x(x, m)

    # Batched evaluators over node sequences; the defaults loop, builtin
    # families override with vectorized versions (the solver's hot path).
    def running_batch(self, xs: np.ndarray, us: np.ndarray) -> np.ndarray:
        return np.array([self.running(x, u) for x, u in zip(xs, us)])

    def running_grad_x_batch(self, xs: np.ndarray, us: np.ndarray) -> np.ndarray:
        return np.stack([self.running_grad_x(x, u) for x, u in zip(xs, us)])

    def running_grad_u_batch(self, xs: np.ndarray, us: np.ndarray) -> np.ndarray:
        return np.stack([self.running_grad_u(x, u) for x, u in zip(xs, us)])

    def coupling_profile(self, measures):
        """Precompute per-node coupling data reused across solver iterations."""
        return tuple(measures)

    def coupling_batch(self, xs: np.ndarray, profile) -> np.ndarray:
        return np.array([self.coupling(x, m) for x, m in zip(xs, profile)])

    def coupling_grad_x_batch(self, xs: np.ndarray, profile) -> np.ndarray:
        return np.stack([self.coupling_grad_x(x, m) for x, m in zip(xs, profile)])


class _QuadraticBase(LagrangianModel):
    """Shared quadratic running cost r/2 |u|^2 + 1/2 <x, Q x> and quadratic terminal."""

    def __init__(
        self,
        dim_state: int,
        dim_control: int,
        control_weight: float = 1.0,
        state_weight=None,
        terminal_weight: float = 1.0,
        terminal_linear=None,
        terminal_offset: float = 0.0,
    ):
        if control_weight <= 0:
            raise InvalidModelError("control_weight must be positive")
        self.dim_state = int(dim_state)
        self.dim_control = int(dim_control)
        self.control_weight = float(control_weight)
        if state_weight is None:
            q = np.zeros((self.dim_state, self.dim_state))
        else:
            q = np.asarray(state_weight, dtype=float)
            if q.ndim == 0:
                q = float(q) * np.eye(self.dim_state)
            if q.shape != (self.dim_state, self.dim_state):
                raise InvalidModelError(f"state_weight must be {self.dim_state}x{self.dim_state}")
        self.state_weight = 0.5 * (q + q.T)
        self.terminal_weight = float(terminal_weight)
        if terminal_linear is None:
            self.terminal_linear = np.zeros(self.dim_state)
        else:
            self.terminal_linear = np.asarray(terminal_linear, dtype=float).reshape(self.dim_state)
        self.terminal_offset = float(terminal_offset)
        r = self.control_weight
        self.tonelli = TonelliConstants(hessian=max(r, 1.0 / r), mixed=0.0, origin=1.0)
        self.growth = GrowthConstants(quad_lower=min(r, 1.0 / r) / 2.0, offset=0.0)

    def running(self, x, u):
        x = np.atleast_1d(x)
        u = np.atleast_1d(u)
        return float(0.5 * self.control_weight * u @ u + 0.5 * x @ self.state_weight @ x)

    def running_grad_x(self, x, u):
        return self.state_weight @ np.atleast_1d(x)

    def running_grad_u(self, x, u):
        return self.control_weight * np.atleast_1d(np.asarray(u, dtype=float))

    def running_hess_u(self, x, u):
        return self.control_weight * np.eye(self.dim_control)

    def terminal(self, x, m):
        x = np.atleast_1d(x)
        return float(
            0.5 * self.terminal_weight * x @ x + self.terminal_linear @ x + self.terminal_offset
        )

    def terminal_grad_x(self, x, m):
        return self.terminal_weight * np.atleast_1d(np.asarray(x, dtype=float)) + self.terminal_linear

    def running_batch(self, xs, us):
        return 0.5 * self.control_weight * np.sum(us**2, axis=1) + 0.5 * np.sum(
            (xs @ self.state_weight) * xs, axis=1
        )

    def running_grad_x_batch(self, xs, us):
        return xs @ self.state_weight

    def running_grad_u_batch(self, xs, us):
        return self.control_weight * us


class QuadraticControlModel(_QuadraticBase):
    """Decoupled benchmark family: no mean-field term."""


class MeanAttractionModel(_QuadraticBase):
    """Mean-field coupling theta * <x, mean(m)>; monotone for theta > 0."""

    def __init__(self, dim_state, dim_control, theta: float = 1.0, **kwargs):
        super().__init__(dim_state, dim_control, **kwargs)
        self.theta = float(theta)
        self.coupling_lipschitz = abs(self.theta)

    def coupling(self, x, m):
        return float(self.theta * np.atleast_1d(x) @ m.mean)

    def coupling_grad_x(self, x, m):
        return self.theta * m.mean

    def coupling_profile(self, measures):
        return np.stack([m.mean for m in measures]) if measures else np.zeros((0, self.dim_state))

    def coupling_batch(self, xs, profile):
        return self.theta * np.sum(xs * profile, axis=1)

    def coupling_grad_x_batch(self, xs, profile):
        return self.theta * profile


class ConvolutionCouplingModel(_QuadraticBase):
    """Smooth bounded convolution coupling sum_j w_j phi(x - x_j), Gaussian profile."""

    def __init__(self, dim_state, dim_control, amplitude: float = 1.0, width: float = 1.0, **kwargs):
        super().__init__(dim_state, dim_control, **kwargs)
        if width <= 0:
            raise InvalidModelError("width must be positive")
        self.amplitude = float(amplitude)
        self.width = float(width)
        self.coupling_lipschitz = abs(self.amplitude) / self.width * np.exp(-0.5)

    def _profile(self, z: np.ndarray) -> np.ndarray:
        return self.amplitude * np.exp(-0.5 * np.sum(z**2, axis=-1) / self.width**2)

    def coupling(self, x, m):
        z = np.atleast_1d(x)[None, :] - m.points
        return float(np.sum(m.weights * self._profile(z)))

    def coupling_grad_x(self, x, m):
        z = np.atleast_1d(x)[None, :] - m.points
        vals = self._profile(z)
        return -(m.weights * vals) @ z / self.width**2

    def coupling_profile(self, measures):
        sizes = {m.size for m in measures}
        if len(sizes) == 1:
            return (
                np.stack([m.points for m in measures]),
                np.stack([m.weights for m in measures]),
            )
        return tuple(measures)

    def coupling_batch(self, xs, profile):
        if isinstance(profile, tuple) and len(profile) == 2 and isinstance(profile[0], np.ndarray):
            points, weights = profile
            z = xs[:, None, :] - points
            return np.sum(weights * self._profile(z), axis=1)
        return super().coupling_batch(xs, profile)

    def coupling_grad_x_batch(self, xs, profile):
        if isinstance(profile, tuple) and len(profile) == 2 and isinstance(profile[0], np.ndarray):
            points, weights = profile
            z = xs[:, None, :] - points
            vals = weights * self._profile(z)
            return -np.einsum("mn,mnd->md", vals, z) / self.width**2
        return super().coupling_grad_x_batch(xs, profile)


MODEL_FAMILIES = {
    "lq": QuadraticControlModel,
    "mean_attraction": MeanAttractionModel,
    "gaussian_convolution": ConvolutionCouplingModel,
}


def build_model(name: str, dim_state: int, dim_control: int, params: dict) -> LagrangianModel:
    """Instantiate a registered model family from config parameters."""
    if name not in MODEL_FAMILIES:
        raise InvalidArgumentError(
            f"unknown model {name!r}; available: {sorted(MODEL_FAMILIES)}"
        )
    try:
        return MODEL_FAMILIES[name](dim_state, dim_control, **params)
    except TypeError as exc:
        raise InvalidArgumentError(f"bad parameters for model {name!r}: {exc}") from exc


@dataclass(frozen=True)
class Box:
    """Axis-aligned sampling box."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lower.shape != upper.shape or np.any(lower > upper):
            raise InvalidArgumentError("box bounds must satisfy lower <= upper elementwise")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def centered(cls, radius: float, dim: int) -> "Box":
        r = abs(float(radius))
        return cls(lower=-r * np.ones(dim), upper=r * np.ones(dim))

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def radius(self) -> float:
        return float(max(np.max(np.abs(self.lower)), np.max(np.abs(self.upper))))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(n, self.dim))


_NEWTON_MAX_ITER = 100
_NEWTON_GRAD_TOL = 1e-10


def _maximize_inner(dyn, model, x, p, m, u0=None):
    """Minimize g(u) = <B^T p, u> + L(x, u, m) by damped Newton with backtracking."""
    bt_p = dyn.gain.T @ p
    u = np.array(-bt_p if u0 is None else u0, dtype=float).reshape(model.dim_control)

    def grad(uu):
        return bt_p + model.running_grad_u(x, uu)

    def value(uu):
        return float(bt_p @ uu + model.running(x, uu))

    g = grad(u)
    for iteration in range(_NEWTON_MAX_ITER):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= _NEWTON_GRAD_TOL:
            return u, iteration
        hess = model.running_hess_u(x, u)
        try:
            step = np.linalg.solve(hess, g)
        except np.linalg.LinAlgError as exc:
            raise NumericalFailureError(
                "singular control Hessian in inner maximization",
                {"x": x, "p": p, "u": u},
            ) from exc
        # Armijo backtracking on the strictly convex objective
        base = value(u)
        slope = float(g @ step)
        t = 1.0
        while t > 1e-12:
            candidate = u - t * step
            if value(candidate) <= base - 1e-4 * t * slope:
                u = candidate
                break
            t *= 0.5
        else:
            raise NumericalFailureError(
                "line search failed in inner maximization",
                {"x": x, "p": p, "u": u, "grad_norm": gnorm},
            )
        g = grad(u)
    raise NumericalFailureError(
        "inner maximization did not converge",
        {"x": x, "p": p, "u": u, "grad_norm": float(np.linalg.norm(g))},
    )


def legendre_hamiltonian(dyn: LinearDynamics, model: LagrangianModel, x, p, m):
    """Return (H, u*) with H(x,p,m) = sup_u { -<p, Ax + Bu> - L(x,u,m) }.

    The maximizer satisfies D_u running(x, u*) = -B^T p to within 1e-10.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    p = np.atleast_1d(np.asarray(p, dtype=float))
    u_star, _ = _maximize_inner(dyn, model, x, p, m)
    value = -float(p @ (dyn.drift @ x + dyn.gain @ u_star)) - model.lagrangian(x, u_star, m)
    if not np.isfinite(value):
        raise InvalidModelError(f"non-finite Hamiltonian at x={x}, p={p}")
    return value, u_star


def hamiltonian_grad(dyn: LinearDynamics, model: LagrangianModel, x, p, m):
    """Envelope-theorem gradients: D_x H and D_p H at the inner maximizer."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    p = np.atleast_1d(np.asarray(p, dtype=float))
    u_star, _ = _maximize_inner(dyn, model, x, p, m)
    grad_x = -dyn.drift.T @ p - model.lagrangian_grad_x(x, u_star, m)
    grad_p = -(dyn.drift @ x + dyn.gain @ u_star)
    return grad_x, grad_p


def _mixed_hessian_fd(model, x, u, h=1e-6):
    """Finite-difference D^2_{xu} of the running cost (columns: x directions)."""
    d = len(x)
    k = model.dim_control
    out = np.zeros((k, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        out[:, j] = (model.running_grad_u(x + e, u) - model.running_grad_u(x - e, u)) / (2 * h)
    return out


@dataclass(frozen=True)
class TonelliReport:
    hessian_low: float  # smallest Hessian eigenvalue seen
    hessian_high: float  # largest Hessian eigenvalue seen
    hessian_ok: bool
    mixed_worst: float  # max |D2_xu| / (1 + |u|)
    mixed_ok: bool
    origin_worst: float  # max of the u=0 data bound
    origin_ok: bool
    envelope_worst: float  # worst violation of the quadratic growth envelope
    envelope_ok: bool

    @property
    def passed(self) -> bool:
        return self.hessian_ok and self.mixed_ok and self.origin_ok and self.envelope_ok

    def as_dict(self) -> dict:
        return {
            "hessian_low": self.hessian_low,
            "hessian_high": self.hessian_high,
            "hessian_ok": self.hessian_ok,
            "mixed_worst": self.mixed_worst,
            "mixed_ok": self.mixed_ok,
            "origin_worst": self.origin_worst,
            "origin_ok": self.origin_ok,
            "envelope_worst": self.envelope_worst,
            "envelope_ok": self.envelope_ok,
            "passed": self.passed,
        }


def check_tonelli(
    model: LagrangianModel,
    state_box: Box,
    control_box: Box,
    n_samples: int = 200,
    seed: int = 0,
    measure: ParticleMeasure | None = None,
) -> TonelliReport:
    """Sample (x, u) pairs and report worst-case violations of the declared constants.

    The growth envelope is checked on the combined running-plus-coupling cost
    when a measure is supplied, on the running cost alone otherwise.
    """
    rng = np.random.default_rng(seed)
    xs = state_box.sample(rng, n_samples)
    us = control_box.sample(rng, n_samples)
    c = model.tonelli
    eig_low, eig_high = np.inf, -np.inf
    mixed_worst = 0.0
    origin_worst = 0.0
    envelope_worst = -np.inf
    g = model.growth
    for x, u in zip(xs, us):
        hess = model.running_hess_u(x, u)
        eigs = np.linalg.eigvalsh(0.5 * (hess + hess.T))
        eig_low = min(eig_low, float(eigs[0]))
        eig_high = max(eig_high, float(eigs[-1]))
        mixed = np.linalg.norm(_mixed_hessian_fd(model, x, u), 2)
        mixed_worst = max(mixed_worst, float(mixed / (1.0 + np.linalg.norm(u))))
        zero_u = np.zeros(model.dim_control)
        origin = (
            abs(model.running(x, zero_u))
            + np.linalg.norm(model.running_grad_x(x, zero_u))
            + np.linalg.norm(model.running_grad_u(x, zero_u))
        )
        origin_worst = max(origin_worst, float(origin))
        if g is not None:
            if measure is None:
                cost = model.running(x, u)
            else:
                cost = model.lagrangian(x, u, measure)
            uu = float(u @ u)
            low_gap = (g.quad_lower * uu - g.offset) - cost
            high_gap = cost - (g.offset + uu / g.quad_lower)
            envelope_worst = max(envelope_worst, low_gap, high_gap)
    tol = 1e-9
    return TonelliReport(
        hessian_low=eig_low,
        hessian_high=eig_high,
        hessian_ok=bool(eig_low >= 1.0 / c.hessian - tol and eig_high <= c.hessian + tol),
        mixed_worst=mixed_worst,
        mixed_ok=bool(mixed_worst <= c.mixed + tol),
        origin_worst=origin_worst,
        origin_ok=bool(origin_worst <= c.origin + tol),
        envelope_worst=float(envelope_worst) if g is not None else 0.0,
        envelope_ok=bool(g is None or envelope_worst <= tol),
    )


@dataclass(frozen=True)
class CoercivityReport:
    coercivity_fit: float  # fitted slope of <D_x H, p> against |p|^2
    offset_fit: float  # smallest intercept making the fitted slope a valid lower bound
    passed: bool  # declared constants hold at every sample
    worst_gap: float

    def as_dict(self) -> dict:
        return {
            "coercivity_fit": self.coercivity_fit,
            "offset_fit": self.offset_fit,
            "passed": self.passed,
            "worst_gap": self.worst_gap,
        }


def check_h1(
    dyn: LinearDynamics,
    model: LagrangianModel,
    state_box: Box,
    covector_box: Box,
    n_samples: int = 200,
    seed: int = 0,
    measure: ParticleMeasure | None = None,
) -> CoercivityReport:
    """Empirical test of the Hamiltonian coercivity inequality <D_x H, p> >= c|p|^2 - c'.

    A least-squares slope is fitted over the samples and floored at zero; the
    reported offset is the smallest that makes the fitted slope a valid lower
    bound on the samples. `passed` checks the model's declared pair instead.
    """
    rng = np.random.default_rng(seed)
    xs = state_box.sample(rng, n_samples)
    ps = covector_box.sample(rng, n_samples)
    m = measure if measure is not None else ParticleMeasure.dirac(np.zeros(model.dim_state))
    psq = np.empty(n_samples)
    inner = np.empty(n_samples)
    for idx, (x, p) in enumerate(zip(xs, ps)):
        grad_x, _ = hamiltonian_grad(dyn, model, x, p, m)
        psq[idx] = p @ p
        inner[idx] = grad_x @ p
    denom = float(np.sum((psq - psq.mean()) ** 2))
    slope = 0.0 if denom == 0 else float(np.sum((psq - psq.mean()) * (inner - inner.mean())) / denom)
    slope = max(slope, 0.0)
    offset = max(0.0, float(np.max(slope * psq - inner)))
    g = model.growth
    if g is None or g.coercivity is None or g.coercivity_offset is None:
        return CoercivityReport(
            coercivity_fit=slope, offset_fit=offset, passed=False, worst_gap=float("nan")
        )
    gaps = g.coercivity * psq - g.coercivity_offset - inner
    worst = float(np.max(gaps))
    return CoercivityReport(
        coercivity_fit=slope,
        offset_fit=offset,
        passed=bool(worst <= 1e-9),
        worst_gap=worst,
    )
