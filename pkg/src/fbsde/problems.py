"""
fbsde/problems.py - Benchmark FBSDE problems

A semi-linear PDE

    u_t = f(t, x, u, Du, D^2u),  u(T, x) = g(x)
    f   = phi(t, x, y, z) - mu(t, x, y, z)^T z - 1/2 Tr[sigma sigma^T gamma]

corresponds to the forward-backward system

    dX = mu dt + sigma dW,  X_0 = xi
    dY = phi dt + z^T sigma dW,  Y_T = g(X_T)

with Y_t = u(t, X_t) and Z_t = Du(t, X_t).

Coefficient conventions (x is a d-vector or an (M, d) batch):
    mu(t, x, y, z)  -> array shaped like x
    sigma(t, x, y)  -> DIAGONAL_OF_STATE: diagonal entries, shaped like x
                       SCALAR_IDENTITY:   a float s, sigma = s I
                       MATRIX:            (..., d, d) array
    phi(t, x, y, z) -> graph node, one value per row (y and z may be nodes)
    g(x), exact(t, x) -> one value per row; exact also accepts graph nodes
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence, Union

import numpy as np

from fbsde.core import DTYPE, ConfigError, ContractError
from fbsde.diffgraph import (
    GraphNode, as_node, constant, grad, hessian, mul, power, scale, square,
    sub, sum_, variable,
)


class DiffusionKind(str, Enum):
    DIAGONAL_OF_STATE = "diagonal_of_state"
    SCALAR_IDENTITY = "scalar_identity"
    MATRIX = "matrix"


# =============================================================================
# Data Classes
# =============================================================================

@dataclass(frozen=True)
class FBSDEProblem:
    """One benchmark: (d, T, xi, mu, sigma, phi, g, optional g', optional exact u)."""
    name: str
    d: int
    T: float
    xi: np.ndarray
    mu: Callable
    sigma: Callable
    sigma_kind: DiffusionKind
    phi: Callable
    g: Callable
    g_grad: Optional[Callable] = None
    exact: Optional[Callable] = None
    oracle: Optional[Callable] = None  # (t, x, samples, seed) -> (estimate, std_error)
    decoupled: bool = True  # mu and sigma ignore y and z
    parameters: dict = field(default_factory=dict)

    def driver(self, t, x, y, z) -> GraphNode:
        return as_node(self.phi(t, x, y, z))

    def sigma_dw(self, t, x, y, dw: np.ndarray) -> np.ndarray:
        """sigma(t, x, y) dW without forming a dense matrix when the structure allows."""
        s = self.sigma(t, x, y)
        if self.sigma_kind is DiffusionKind.MATRIX:
            return np.einsum("...ij,...j->...i", np.asarray(s, dtype=DTYPE), dw)
        return np.asarray(s, dtype=DTYPE) * dw

    def sigma_matrix(self, t, x, y) -> np.ndarray:
        """Dense sigma(t, x, y) with shape (..., d, d)."""
        s = np.asarray(self.sigma(t, x, y), dtype=DTYPE)
        x = np.asarray(x, dtype=DTYPE)
        if self.sigma_kind is DiffusionKind.MATRIX:
            return s
        if self.sigma_kind is DiffusionKind.SCALAR_IDENTITY:
            return np.broadcast_to(s * np.eye(self.d), x.shape[:-1] + (self.d, self.d)).copy()
        diag = np.broadcast_to(s, x.shape)
        return diag[..., :, None] * np.eye(self.d)

    @property
    def has_reference(self) -> bool:
        return self.exact is not None or self.oracle is not None

    def reference(self, t, x, samples: int = 100_000,
                  seed: Union[int, Sequence[int]] = 0) -> tuple[np.ndarray, np.ndarray]:
        """Reference u(t, x) per row with its standard error (zero for closed forms)."""
        x = np.atleast_2d(np.asarray(x, dtype=DTYPE))
        if self.exact is not None:
            values = np.asarray(self.exact(t, x), dtype=DTYPE).reshape(-1)
            return values, np.zeros_like(values)
        if self.oracle is None:
            raise ContractError(f"{self.name}: no exact solution or oracle available")
        times = np.broadcast_to(np.asarray(t, dtype=DTYPE).reshape(-1), (x.shape[0],))
        base = [int(s) for s in np.atleast_1d(seed)]
        results = [self.oracle(float(times[i]), x[i], samples, base + [i]) for i in range(x.shape[0])]
        values = np.array([r[0] for r in results], dtype=DTYPE)
        errors = np.array([r[1] for r in results], dtype=DTYPE)
        return values, errors


@dataclass(frozen=True)
class GeneratorPoint:
    """Arguments (t, x, y, z, gamma) of the PDE generator f."""
    t: float
    x: np.ndarray
    y: float
    z: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        gamma = np.asarray(self.gamma, dtype=DTYPE)
        scale_ = max(1.0, float(np.max(np.abs(gamma)))) if gamma.size else 1.0
        if gamma.size and np.max(np.abs(gamma - gamma.T)) > 1e-10 * scale_:
            raise ContractError("GeneratorPoint: gamma must be symmetric")


# =============================================================================
# Helpers
# =============================================================================

def _validate(d: int, T: float):
    if d < 1:
        raise ConfigError("problem.d", f"must be >= 1, got {d}")
    if T <= 0:
        raise ConfigError("problem.T", f"must be > 0, got {T}")


def _initial(xi, d: int, default: float) -> np.ndarray:
    if xi is None:
        return np.full(d, default, dtype=DTYPE)
    xi = np.asarray(xi, dtype=DTYPE).reshape(-1)
    if xi.size != d:
        raise ConfigError("problem.xi", f"expected {d} entries, got {xi.size}")
    return xi


def _zero_drift(t, x, y, z):
    return np.zeros_like(np.asarray(x, dtype=DTYPE))


def _squared_norm(x):
    x = np.asarray(x, dtype=DTYPE)
    return np.sum(x * x, axis=-1)


# =============================================================================
# Benchmarks
# =============================================================================

def black_scholes(d: int = 100, r: float = 0.05, sigma_scalar: float = 0.4,
                  T: float = 1.0, xi=None) -> FBSDEProblem:
    """Uncorrelated assets with equal volatility; u = exp((r + s^2)(T - t)) ||x||^2."""
    _validate(d, T)
    if sigma_scalar <= 0:
        raise ConfigError("problem.sigma", f"must be > 0, got {sigma_scalar}")
    rate = r + sigma_scalar ** 2

    def phi(t, x, y, z):
        y, z = as_node(y), as_node(z)
        return scale(sub(y, sum_(mul(z, as_node(x)), axis=-1)), r)

    def exact(t, x):
        factor = np.exp(rate * (T - np.asarray(t, dtype=DTYPE)))
        if isinstance(x, GraphNode):
            return mul(constant(factor), sum_(square(x), axis=-1))
        return factor * _squared_norm(x)

    return FBSDEProblem(
        name="black_scholes", d=d, T=T, xi=_initial(xi, d, 1.0),
        mu=_zero_drift,
        sigma=lambda t, x, y: sigma_scalar * np.asarray(x, dtype=DTYPE),
        sigma_kind=DiffusionKind.DIAGONAL_OF_STATE,
        phi=phi,
        g=_squared_norm,
        g_grad=lambda x: 2.0 * np.asarray(x, dtype=DTYPE),
        exact=exact,
        parameters={"r": r, "sigma": sigma_scalar},
    )


def _hjb_terminal(x):
    return np.log(0.5 * (1.0 + _squared_norm(x)))


def hjb_exact_mc(x, t: float, T: float, samples: int,
                 seed: Union[int, Sequence[int]], chunk: int = 10_000) -> tuple[float, float]:
    """
    -ln E[exp(-g(x + sqrt(2) W_{T-t}))] by Monte Carlo.

    Returns the estimate and the delta-method standard error of the log of the mean.
    """
    if samples < 1:
        raise ContractError(f"hjb_exact_mc: samples must be >= 1, got {samples}")
    if t > T:
        raise ContractError(f"hjb_exact_mc: t={t} is after T={T}")
    x = np.asarray(x, dtype=DTYPE).reshape(-1)
    if t == T:
        return float(_hjb_terminal(x)), 0.0

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    root_tau = np.sqrt(T - t)
    weights = []
    for start in range(0, samples, chunk):
        n = min(chunk, samples - start)
        w = rng.standard_normal((n, x.size)) * root_tau
        weights.append(np.exp(-_hjb_terminal(x + np.sqrt(2.0) * w)))
    weights = np.concatenate(weights)
    mean = float(np.mean(weights))
    spread = float(np.std(weights, ddof=1)) if samples > 1 else 0.0
    return float(-np.log(mean)), spread / np.sqrt(samples) / mean


def hjb(d: int = 100, T: float = 1.0, xi=None) -> FBSDEProblem:
    """Hamilton-Jacobi-Bellman with quadratic gradient nonlinearity, sigma = sqrt(2) I."""
    _validate(d, T)

    def phi(t, x, y, z):
        return sum_(square(as_node(z)), axis=-1)

    def g_grad(x):
        x = np.asarray(x, dtype=DTYPE)
        return 2.0 * x / np.asarray(1.0 + _squared_norm(x))[..., None]

    def oracle(t, x, samples, seed):
        return hjb_exact_mc(x, t, T, samples, seed)

    return FBSDEProblem(
        name="hjb", d=d, T=T, xi=_initial(xi, d, 0.0),
        mu=_zero_drift,
        sigma=lambda t, x, y: np.sqrt(2.0),
        sigma_kind=DiffusionKind.SCALAR_IDENTITY,
        phi=phi,
        g=_hjb_terminal,
        g_grad=g_grad,
        oracle=oracle,
    )


def allen_cahn(d: int = 20, T: float = 0.3, xi=None,
               norm: str = "squared", driver: str = "standard") -> FBSDEProblem:
    """
    Allen-Cahn with g(x) = 1 / (2 + 0.4 ||x||^2).

    norm="plain" uses the unsquared norm; driver="flipped" uses y - y^3
    instead of -y + y^3.
    """
    _validate(d, T)
    if norm not in ("squared", "plain"):
        raise ConfigError("problem.allen_cahn_norm", f"unknown value {norm!r}")
    if driver not in ("standard", "flipped"):
        raise ConfigError("problem.allen_cahn_driver", f"unknown value {driver!r}")
    sign = 1.0 if driver == "standard" else -1.0

    def phi(t, x, y, z):
        y = as_node(y)
        return scale(sub(power(y, 3.0), y), sign)

    def g(x):
        sq = _squared_norm(x)
        return 1.0 / (2.0 + 0.4 * (sq if norm == "squared" else np.sqrt(sq)))

    def g_grad(x):
        x = np.asarray(x, dtype=DTYPE)
        sq = np.asarray(_squared_norm(x))[..., None]
        if norm == "squared":
            return -0.8 * x / (2.0 + 0.4 * sq) ** 2
        length = np.sqrt(sq)
        unit = np.divide(x, length, out=np.zeros_like(x), where=length > 0)
        return -0.4 * unit / (2.0 + 0.4 * length) ** 2

    return FBSDEProblem(
        name="allen_cahn", d=d, T=T, xi=_initial(xi, d, 0.0),
        mu=_zero_drift,
        sigma=lambda t, x, y: 1.0,
        sigma_kind=DiffusionKind.SCALAR_IDENTITY,
        phi=phi,
        g=g,
        g_grad=g_grad,
        parameters={"norm": norm, "driver": driver},
    )


def heat(d: int = 2, T: float = 1.0, xi=None, w=None) -> FBSDEProblem:
    """Heat equation with linear terminal g(x) = w^T x; u = w^T x exactly."""
    _validate(d, T)
    weights = np.ones(d, dtype=DTYPE) if w is None else np.asarray(w, dtype=DTYPE).reshape(-1)
    if weights.size != d:
        raise ConfigError("problem.w", f"expected {d} entries, got {weights.size}")

    def phi(t, x, y, z):
        return scale(as_node(y), 0.0)

    def exact(t, x):
        if isinstance(x, GraphNode):
            return sum_(mul(x, constant(weights)), axis=-1)
        return np.asarray(x, dtype=DTYPE) @ weights

    return FBSDEProblem(
        name="heat", d=d, T=T, xi=_initial(xi, d, 1.0),
        mu=_zero_drift,
        sigma=lambda t, x, y: 1.0,
        sigma_kind=DiffusionKind.SCALAR_IDENTITY,
        phi=phi,
        g=lambda x: np.asarray(x, dtype=DTYPE) @ weights,
        g_grad=lambda x: np.broadcast_to(weights, np.shape(x)).copy(),
        exact=exact,
        parameters={"w": weights.tolist()},
    )


PROBLEMS = {
    "black_scholes": black_scholes,
    "hjb": hjb,
    "allen_cahn": allen_cahn,
    "heat": heat,
}


def build_problem(name: str, d: Optional[int] = None, T: Optional[float] = None, xi=None,
                  r: Optional[float] = None, sigma: Optional[float] = None,
                  allen_cahn_norm: str = "squared",
                  allen_cahn_driver: str = "standard") -> FBSDEProblem:
    """Construct a benchmark by name; None keeps the benchmark's default."""
    if name not in PROBLEMS:
        raise ConfigError("problem.name", f"unknown problem {name!r} (choose from {sorted(PROBLEMS)})")
    kwargs = {"d": d, "T": T, "xi": xi}
    if name == "black_scholes":
        kwargs.update(r=r, sigma_scalar=sigma)
    elif name == "allen_cahn":
        kwargs.update(norm=allen_cahn_norm, driver=allen_cahn_driver)
    return PROBLEMS[name](**{k: v for k, v in kwargs.items() if v is not None})


# =============================================================================
# PDE <-> FBSDE driver mapping
# =============================================================================

def generator_point(problem: FBSDEProblem, t: float, x) -> GeneratorPoint:
    """y, z and gamma of the exact solution at (t, x), by nested differentiation."""
    if problem.exact is None:
        raise ContractError(f"{problem.name}: generator_point needs an exact solution")
    x = np.asarray(x, dtype=DTYPE).reshape(-1)
    leaf = variable(x)
    u = as_node(problem.exact(t, leaf))
    (z,) = grad(u, [leaf])
    gamma = hessian(lambda v: problem.exact(t, v), x)
    return GeneratorPoint(t=float(t), x=x, y=u.item(), z=z.value.copy(), gamma=gamma)


def verify_driver_mapping(problem: FBSDEProblem, point: GeneratorPoint, step: float = 1e-6) -> float:
    """|u_t - f(t, x, y, z, gamma)| with u_t by central differences in t."""
    if problem.exact is None:
        raise ContractError(f"{problem.name}: verify_driver_mapping needs an exact solution")
    t, x = point.t, np.asarray(point.x, dtype=DTYPE)
    u_t = (float(problem.exact(t + step, x)) - float(problem.exact(t - step, x))) / (2.0 * step)

    drift = np.asarray(problem.mu(t, x, point.y, point.z), dtype=DTYPE)
    s = problem.sigma_matrix(t, x, point.y)
    diffusion = 0.5 * float(np.trace(s @ s.T @ point.gamma))
    f = problem.driver(t, x, point.y, point.z).item() - float(drift @ point.z) - diffusion
    return abs(u_t - f)
