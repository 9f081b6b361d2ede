"""
fbsde/sampler.py - Brownian increments, Euler-Maruyama stepping, level schedules

Every path m of a batch is drawn from its own counter-based stream keyed by
(seed, m), so any partition of the batch into shards reproduces the same
numbers as one sequential draw.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from fbsde.core import DTYPE, ContractError, NumericalError

logger = logging.getLogger(__name__)


# =============================================================================
# Data Classes
# =============================================================================

@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_n = n T / N, n = 0..N."""
    T: float
    N: int

    def __post_init__(self):
        if not self.T > 0:
            raise ContractError(f"TimeGrid: T must be positive, got {self.T}")
        if self.N < 1:
            raise ContractError(f"TimeGrid: N must be >= 1, got {self.N}")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.N + 1, dtype=DTYPE) * self.T / self.N

    def t(self, n: int) -> float:
        return n * self.T / self.N


@dataclass
class PathBatch:
    """Brownian increments dW with shape (M, N, d) for paths first_path .. first_path + M - 1."""
    grid: TimeGrid
    dW: np.ndarray
    seed: int
    first_path: int = 0

    @property
    def M(self) -> int:
        return self.dW.shape[0]

    @property
    def d(self) -> int:
        return self.dW.shape[2]

    def brownian(self) -> np.ndarray:
        """W_{t_n} per path, shape (M, N + 1, d), starting at zero."""
        W = np.zeros((self.M, self.grid.N + 1, self.d), dtype=DTYPE)
        np.cumsum(self.dW, axis=1, out=W[:, 1:, :])
        return W


@dataclass(frozen=True)
class LevelSchedule:
    """Coarse-to-fine step counts with an iteration budget per level."""
    steps_per_level: tuple
    iterations_per_level: tuple
    level_factor: int = 2
    h0: Optional[float] = None

    def __post_init__(self):
        steps = tuple(int(n) for n in self.steps_per_level)
        iterations = tuple(int(k) for k in self.iterations_per_level)
        object.__setattr__(self, "steps_per_level", steps)
        object.__setattr__(self, "iterations_per_level", iterations)
        if not steps:
            raise ContractError("LevelSchedule: at least one level is required")
        if len(iterations) != len(steps):
            raise ContractError(
                f"LevelSchedule: {len(steps)} levels but {len(iterations)} iteration counts"
            )
        if any(n < 1 for n in steps):
            raise ContractError(f"LevelSchedule: step counts must be >= 1, got {list(steps)}")
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ContractError(f"LevelSchedule: step counts must increase strictly, got {list(steps)}")
        if any(k < 0 for k in iterations):
            raise ContractError(f"LevelSchedule: iteration counts must be >= 0, got {list(iterations)}")
        if self.level_factor < 2:
            raise ContractError(f"LevelSchedule: level factor must be >= 2, got {self.level_factor}")

    @classmethod
    def geometric(cls, T: float, levels: int = 5, total_iterations: int = 0,
                  h0: Optional[float] = None, factor: int = 2) -> "LevelSchedule":
        """Levels h_l = h0 factor^(-l); defaults reproduce N = 2, 4, 8, 16, 32."""
        if levels < 1:
            raise ContractError(f"LevelSchedule.geometric: levels must be >= 1, got {levels}")
        h0 = T / 2.0 if h0 is None else h0
        steps = []
        for level in range(levels):
            h = h0 * float(factor) ** (-level)
            n = T / h
            if abs(n - round(n)) > 1e-9 * max(1.0, n):
                raise ContractError(f"LevelSchedule.geometric: T/h_{level} = {n} is not an integer")
            steps.append(int(round(n)))
        return cls(tuple(steps), split_iterations(total_iterations, levels), factor, h0)

    @property
    def levels(self) -> int:
        return len(self.steps_per_level)

    @property
    def total_iterations(self) -> int:
        return sum(self.iterations_per_level)

    def boundaries(self) -> list[int]:
        """Cumulative iteration counts at which each level starts, plus the total."""
        out = [0]
        for k in self.iterations_per_level:
            out.append(out[-1] + k)
        return out

    def to_dict(self) -> dict:
        return {
            "levels": list(self.steps_per_level),
            "iterations_per_level": list(self.iterations_per_level),
            "level_factor": self.level_factor,
        }


def split_iterations(total: int, levels: int) -> tuple:
    """Equal split; the remainder goes to the finest levels."""
    if total < 0:
        raise ContractError(f"iteration budget must be >= 0, got {total}")
    base, extra = divmod(total, levels)
    return tuple(base + (1 if level >= levels - extra else 0) for level in range(levels))


# =============================================================================
# Increment generation
# =============================================================================

def path_generator(seed: int, path: int) -> np.random.Generator:
    """Independent counter-based stream for one path."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, path])))


def sample_increments(seed: int, M: int, grid: TimeGrid, d: int, first_path: int = 0) -> PathBatch:
    """M x N x d Normal(0, dt) increments; path m depends only on (seed, first_path + m)."""
    if M < 1:
        raise ContractError(f"sample_increments: M must be >= 1, got {M}")
    if d < 1:
        raise ContractError(f"sample_increments: d must be >= 1, got {d}")
    if seed < 0 or first_path < 0:
        raise ContractError("sample_increments: seed and first_path must be non-negative")
    root_dt = np.sqrt(grid.dt)
    dW = np.empty((M, grid.N, d), dtype=DTYPE)
    for m in range(M):
        dW[m] = path_generator(seed, first_path + m).standard_normal((grid.N, d)) * root_dt
    return PathBatch(grid=grid, dW=dW, seed=seed, first_path=first_path)


def coarsen_increments(fine: PathBatch, factor: int) -> PathBatch:
    """Sum consecutive blocks of `factor` increments; the Brownian path is preserved."""
    N = fine.grid.N
    if factor < 1 or N % factor:
        raise ContractError(f"coarsen_increments: factor {factor} does not divide N={N}")
    if factor == 1:
        return fine
    coarse = fine.dW.reshape(fine.M, N // factor, factor, fine.d).sum(axis=2)
    return PathBatch(TimeGrid(fine.grid.T, N // factor), coarse, fine.seed, fine.first_path)


# =============================================================================
# Euler-Maruyama
# =============================================================================

def _require_finite(value, coefficient: str, t) -> np.ndarray:
    value = np.asarray(value, dtype=DTYPE)
    if not np.all(np.isfinite(value)):
        bad = np.argwhere(~np.isfinite(value))[0]
        path = int(bad[0]) if value.ndim > 1 else None
        raise NumericalError(f"coefficient {coefficient} is not finite at t={float(np.min(t))}",
                             coefficient=coefficient, path=path)
    return value


def advance_state(problem, t, x: np.ndarray, y, z, dt: float, dw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """X_{n+1} = X_n + mu dt + sigma dW; also returns sigma dW."""
    drift = _require_finite(problem.mu(t, x, y, z), "mu", t)
    diffusion = _require_finite(problem.sigma_dw(t, x, y, dw), "sigma", t)
    return x + drift * dt + diffusion, diffusion


def euler_step(t: float, x, y, z, dt: float, dw, problem) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    One Euler-Maruyama step of the forward-backward pair.

    Returns (x_next, phi dt, z^T sigma dW). Works on a single state or on an
    (M, d) batch.
    """
    if not dt > 0:
        raise ContractError(f"euler_step: dt must be positive, got {dt}")
    x = np.asarray(x, dtype=DTYPE)
    z = np.asarray(z, dtype=DTYPE)
    dw = np.asarray(dw, dtype=DTYPE)
    x_next, diffusion = advance_state(problem, t, x, y, z, dt, dw)
    phi = _require_finite(problem.driver(t, x, y, z).value, "phi", t)
    return x_next, phi * dt, np.sum(z * diffusion, axis=-1)


# =============================================================================
# Geometric Brownian motion
# =============================================================================

def gbm_exact_path(x0, mu: float, sigma: float, batch: PathBatch) -> np.ndarray:
    """Exact GBM on the batch's increments, shape (M, N + 1, d)."""
    x0 = np.asarray(x0, dtype=DTYPE).reshape(-1)
    if np.any(x0 <= 0):
        raise ContractError("gbm_exact_path: x0 must be positive componentwise")
    dt = batch.grid.dt
    log_steps = (mu - 0.5 * sigma ** 2) * dt + sigma * batch.dW
    out = np.empty((batch.M, batch.grid.N + 1, batch.d), dtype=DTYPE)
    out[:, 0, :] = x0
    out[:, 1:, :] = x0 * np.exp(np.cumsum(log_steps, axis=1))
    return out


def euler_path(x0, mu: float, sigma: float, batch: PathBatch) -> np.ndarray:
    """Euler-Maruyama GBM on the batch's increments, shape (M, N + 1, d)."""
    x0 = np.asarray(x0, dtype=DTYPE).reshape(-1)
    dt = batch.grid.dt
    out = np.empty((batch.M, batch.grid.N + 1, batch.d), dtype=DTYPE)
    out[:, 0, :] = x0
    for n in range(batch.grid.N):
        x = out[:, n, :]
        out[:, n + 1, :] = x + mu * x * dt + sigma * x * batch.dW[:, n, :]
    return out


@dataclass(frozen=True)
class ConvergenceRow:
    N: int
    rms_error: float
    ratio: Optional[float]  # previous rms_error / this one


def strong_convergence_study(mu: float = 0.05, sigma: float = 0.2, T: float = 1.0, x0: float = 1.0,
                             steps: Sequence[int] = (8, 16, 32, 64), paths: int = 4096,
                             seed: int = 0) -> list[ConvergenceRow]:
    """
    RMS terminal error of Euler against exact GBM on shared Brownian paths.

    Increments are drawn once on the finest grid and coarsened for the others.
    """
    steps = [int(n) for n in steps]
    if not steps or any(b <= a for a, b in zip(steps, steps[1:])):
        raise ContractError(f"strong_convergence_study: steps must increase strictly, got {steps}")
    finest = steps[-1]
    if any(finest % n for n in steps):
        raise ContractError(f"strong_convergence_study: every N must divide {finest}")
    fine = sample_increments(seed, paths, TimeGrid(T, finest), 1)

    rows = []
    previous = None
    for n in steps:
        batch = coarsen_increments(fine, finest // n)
        exact = gbm_exact_path([x0], mu, sigma, batch)[:, -1, 0]
        approx = euler_path([x0], mu, sigma, batch)[:, -1, 0]
        rms = float(np.sqrt(np.mean((approx - exact) ** 2)))
        ratio = previous / rms if previous is not None and rms > 0 else None
        logger.debug("N: %4u, rms error: %.4e", n, rms)
        rows.append(ConvergenceRow(n, rms, ratio))
        previous = rms
    return rows
