"""
fbsde/trainer.py - Rollout, loss and Adam training of the shared network

One iteration:
    1. draw fresh increments (seed = base seed + global iteration)
    2. roll the discretized FBSDE forward with Y_n = u(t_n, X_n), Z_n = Du(t_n, X_n)
    3. loss = sum of squared one-step residuals + squared terminal mismatch
    4. differentiate through Z_n back to the parameters, take an Adam step

The batch may be split into shards that run on a thread pool. Shard losses
and gradients are summed in shard order, so results do not depend on which
worker finishes first.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from tqdm import tqdm

from fbsde.core import (
    DTYPE, ConfigError, ContractError, DivergenceError, NumericalError, ShapeError,
)
from fbsde.diffgraph import (
    Graph, GraphNode, add, concat, constant, grad, mul, reshape, scale, slice_,
    square, sub, sum_, variable,
)
from fbsde.nets import (
    NetConfig, NetworkParams, as_approximator, check_compatible, forward,
    init_params, project_params,
)
from fbsde.problems import FBSDEProblem
from fbsde.sampler import LevelSchedule, PathBatch, TimeGrid, advance_state, sample_increments

logger = logging.getLogger(__name__)


# =============================================================================
# Data Classes
# =============================================================================

@dataclass
class TrainConfig:
    batch_M: int = 100
    steps_N: int = 50
    iterations: int = 2000
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    use_terminal_grad_term: bool = False
    seed: int = 0
    network: Optional[NetConfig] = None  # None -> NetConfig defaults for the problem's d
    schedule: Optional[LevelSchedule] = None
    y0_every: int = 100
    log_every: int = 100
    fixed_paths: bool = False
    threads: int = 1
    divergence_threshold: float = 1e12
    progress: bool = False

    def __post_init__(self):
        if self.batch_M < 1:
            raise ConfigError("training.batch_M", f"must be >= 1, got {self.batch_M}")
        if self.steps_N < 1:
            raise ConfigError("training.steps_N", f"must be >= 1, got {self.steps_N}")
        if self.iterations < 0:
            raise ConfigError("training.iterations", f"must be >= 0, got {self.iterations}")
        if not self.learning_rate > 0:
            raise ConfigError("training.learning_rate", f"must be > 0, got {self.learning_rate}")
        for key in ("adam_beta1", "adam_beta2"):
            if not 0.0 <= getattr(self, key) < 1.0:
                raise ConfigError(f"training.{key}", "must be in [0, 1)")
        if not self.adam_eps > 0:
            raise ConfigError("training.adam_eps", "must be > 0")
        if self.y0_every < 1:
            raise ConfigError("training.y0_every", "must be >= 1")
        if self.threads < 1:
            raise ConfigError("training.threads", f"must be >= 1, got {self.threads}")
        if not self.divergence_threshold > 0:
            raise ConfigError("training.divergence_threshold", "must be > 0")

    def net_config(self, problem: FBSDEProblem) -> NetConfig:
        config = self.network if self.network is not None else NetConfig(input_dim=problem.d + 1)
        if config.state_dim != problem.d:
            raise ConfigError("network", f"network expects d={config.state_dim}, problem has d={problem.d}")
        return config


@dataclass
class RolloutState:
    """X (N+1, M, d) array; Y (N+1, M), Z (N+1, M, d) and residuals (N, M) graph nodes."""
    grid: TimeGrid
    X: np.ndarray
    Y: GraphNode
    Z: GraphNode
    residuals: GraphNode
    first_path: int = 0

    @property
    def M(self) -> int:
        return self.X.shape[1]


@dataclass
class IterationRecord:
    iteration: int
    level: int
    loss: float
    elapsed_seconds: float
    y0_estimate: Optional[float] = None


@dataclass
class TrainReport:
    problem: str
    architecture: str
    mode: str  # "single" or "multi"
    records: list = field(default_factory=list)
    steps_per_level: list = field(default_factory=list)
    level_boundaries: list = field(default_factory=lambda: [0])
    final_y0: float = float("nan")
    total_seconds: float = 0.0
    params: Optional[NetworkParams] = None
    checkpoint: Optional[str] = None

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    @property
    def final_loss(self) -> Optional[float]:
        return self.records[-1].loss if self.records else None

    def to_rows(self, record_timing: bool = True) -> list[list]:
        """loss_curve.csv rows: iteration, level, loss, elapsed_seconds, y0_estimate."""
        return [
            [r.iteration, r.level, r.loss, r.elapsed_seconds if record_timing else None, r.y0_estimate]
            for r in self.records
        ]


@dataclass
class AdamState:
    m: dict
    v: dict

    @classmethod
    def zeros(cls, params: NetworkParams) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.arrays.items()},
                   {k: np.zeros_like(a) for k, a in params.arrays.items()})


# =============================================================================
# Rollout
# =============================================================================

def _locate(error: NumericalError, iteration: Optional[int], step: int, first_path: int) -> NumericalError:
    path = None if error.path is None else first_path + error.path
    return NumericalError(f"{error} (iteration {iteration}, step {step}, path {path})",
                          coefficient=error.coefficient, iteration=iteration, step=step, path=path)


def _check_finite(values: np.ndarray, name: str, iteration: Optional[int], first_path: int,
                  step_offset: int = 0):
    """values has shape (steps, M, ...); raise at the first non-finite entry."""
    finite = np.isfinite(values)
    if finite.all():
        return
    n, m = (int(i) for i in np.argwhere(~finite)[0][:2])
    step, path = step_offset + n, first_path + m
    raise NumericalError(f"non-finite {name} at iteration {iteration}, step {step}, path {path}",
                         iteration=iteration, step=step, path=path)


def _residuals(problem: FBSDEProblem, grid: TimeGrid, X: np.ndarray, Y: GraphNode, Z: GraphNode,
               diffusion: np.ndarray) -> GraphNode:
    """Y_{n+1} - Y_n - phi_n dt - Z_n^T sigma_n dW_n for every (n, m)."""
    N, M, d = diffusion.shape
    rows = N * M
    y_now = slice_(Y, (slice(0, N),))
    y_next = slice_(Y, (slice(1, N + 1),))
    z_now = slice_(Z, (slice(0, N),))
    t_rows = np.repeat(grid.times[:N], M)
    phi = problem.driver(t_rows, X[:N].reshape(rows, d), reshape(y_now, (rows,)), reshape(z_now, (rows, d)))
    phi = reshape(phi, (N, M))
    noise = sum_(mul(z_now, constant(diffusion)), axis=-1)
    return sub(sub(sub(y_next, y_now), scale(phi, grid.dt)), noise)


def _rollout_decoupled(problem, approximator, batch: PathBatch, iteration) -> RolloutState:
    # X does not depend on Y or Z: simulate it first, then evaluate the network once on all points.
    grid = batch.grid
    N, M, d = grid.N, batch.M, batch.d
    X = np.empty((N + 1, M, d), dtype=DTYPE)
    X[0] = problem.xi
    diffusion = np.empty((N, M, d), dtype=DTYPE)
    for n in range(N):
        try:
            X[n + 1], diffusion[n] = advance_state(problem, grid.t(n), X[n], None, None, grid.dt, batch.dW[:, n, :])
        except NumericalError as e:
            raise _locate(e, iteration, n, batch.first_path) from e
    _check_finite(X, "X", iteration, batch.first_path)

    leaf = variable(X.reshape((N + 1) * M, d))
    u = approximator(np.repeat(grid.times, M), leaf)
    (z,) = grad(sum_(u), [leaf])
    Y = reshape(u, (N + 1, M))
    Z = reshape(z, (N + 1, M, d))
    _check_finite(Y.value, "Y", iteration, batch.first_path)
    _check_finite(Z.value, "Z", iteration, batch.first_path)
    return RolloutState(grid, X, Y, Z, _residuals(problem, grid, X, Y, Z, diffusion), batch.first_path)


def _rollout_sequential(problem, approximator, batch: PathBatch, iteration) -> RolloutState:
    # Coupled drift/diffusion: step n needs the network's Y_n and Z_n. X is data for the gradient.
    grid = batch.grid
    N, M, d = grid.N, batch.M, batch.d
    X = np.empty((N + 1, M, d), dtype=DTYPE)
    X[0] = problem.xi
    diffusion = np.empty((N, M, d), dtype=DTYPE)
    ys, zs = [], []
    for n in range(N + 1):
        leaf = variable(X[n])
        u = approximator(grid.t(n), leaf)
        (z,) = grad(sum_(u), [leaf])
        _check_finite(u.value[None], "Y", iteration, batch.first_path, n)
        _check_finite(z.value[None], "Z", iteration, batch.first_path, n)
        ys.append(reshape(u, (1, M)))
        zs.append(reshape(z, (1, M, d)))
        if n == N:
            break
        try:
            X[n + 1], diffusion[n] = advance_state(problem, grid.t(n), X[n], u.value, z.value,
                                                   grid.dt, batch.dW[:, n, :])
        except NumericalError as e:
            raise _locate(e, iteration, n, batch.first_path) from e
        _check_finite(X[n + 1][None], "X", iteration, batch.first_path, n + 1)
    Y, Z = concat(ys, axis=0), concat(zs, axis=0)
    return RolloutState(grid, X, Y, Z, _residuals(problem, grid, X, Y, Z, diffusion), batch.first_path)


def rollout(problem: FBSDEProblem, model, batch: PathBatch, iteration: Optional[int] = None) -> RolloutState:
    """
    Discretized FBSDE along the batch's paths with one approximator at every step.

    model is NetworkParams, BoundParams or any (t, x) -> node callable.
    """
    if not np.isclose(batch.grid.T, problem.T, rtol=1e-12, atol=0.0):
        raise ContractError(f"rollout: grid horizon {batch.grid.T} does not match problem T={problem.T}")
    if batch.d != problem.d:
        raise ShapeError("rollout", (batch.d,), (problem.d,))
    approximator = as_approximator(model)
    if problem.decoupled:
        return _rollout_decoupled(problem, approximator, batch, iteration)
    return _rollout_sequential(problem, approximator, batch, iteration)


def loss(state: RolloutState, problem: FBSDEProblem, use_terminal_grad: bool = False) -> GraphNode:
    """Sum of squared residuals and terminal mismatches; optionally ||Z_N - g'(X_N)||^2."""
    if use_terminal_grad and problem.g_grad is None:
        raise ConfigError("training.use_terminal_grad_term", f"{problem.name} has no terminal gradient")
    N = state.grid.N
    terminal_x = state.X[N]
    total = sum_(square(state.residuals))
    mismatch = sub(slice_(state.Y, N), constant(problem.g(terminal_x)))
    total = add(total, sum_(square(mismatch)))
    if use_terminal_grad:
        gradient_mismatch = sub(slice_(state.Z, N), constant(problem.g_grad(terminal_x)))
        total = add(total, sum_(square(gradient_mismatch)))
    return total


def evaluate_loss(problem: FBSDEProblem, model, batch: PathBatch, use_terminal_grad: bool = False) -> float:
    """Loss value without building parameter gradients."""
    with Graph() as graph:
        value = loss(rollout(problem, model, batch), problem, use_terminal_grad).item()
    graph.release()
    return value


def loss_and_gradients(problem: FBSDEProblem, params: NetworkParams, batch: PathBatch,
                       use_terminal_grad: bool = False,
                       iteration: Optional[int] = None) -> tuple[float, dict, float]:
    """(loss, d loss / d theta, Y_0 of the first path) on one batch."""
    with Graph() as graph:
        bound = params.bind(requires_grad=True)
        state = rollout(problem, bound, batch, iteration)
        value = loss(state, problem, use_terminal_grad)
        grads = bound.gradients(value)
        y0 = float(state.Y.value[0, 0])
        result = value.item()
    graph.release()
    return result, grads, y0


# =============================================================================
# Adam
# =============================================================================

def adam_step(params: NetworkParams, grads: dict, moments: AdamState, iteration: int,
              config: TrainConfig) -> tuple[NetworkParams, AdamState]:
    """Bias-corrected Adam update (iteration counts from 1), then NAIS-Net projection."""
    if iteration < 1:
        raise ContractError(f"adam_step: iteration must be >= 1, got {iteration}")
    b1, b2 = config.adam_beta1, config.adam_beta2
    arrays, m_new, v_new = {}, {}, {}
    for name, p in params.arrays.items():
        g = grads.get(name)
        if g is None or np.shape(g) != p.shape:
            raise ShapeError("adam_step", p.shape, np.shape(g) if g is not None else ())
        m = b1 * moments.m[name] + (1.0 - b1) * g
        v = b2 * moments.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** iteration)
        v_hat = v / (1.0 - b2 ** iteration)
        arrays[name] = p - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        m_new[name], v_new[name] = m, v
    return project_params(NetworkParams(params.config, arrays)), AdamState(m_new, v_new)


# =============================================================================
# Training loops
# =============================================================================

def shard_bounds(M: int, threads: int) -> list[tuple[int, int]]:
    """Contiguous path ranges, one per worker."""
    parts = np.array_split(np.arange(M), min(threads, M))
    return [(int(p[0]), int(p[-1]) + 1) for p in parts]


def _batch_step(problem, params, config: TrainConfig, grid: TimeGrid, seed: int, iteration: int,
                shards: list, executor: Optional[ThreadPoolExecutor]) -> tuple[float, dict, float]:
    def run(bounds):
        start, stop = bounds
        batch = sample_increments(seed, stop - start, grid, problem.d, first_path=start)
        return loss_and_gradients(problem, params, batch, config.use_terminal_grad_term, iteration)

    results = list(executor.map(run, shards)) if executor is not None else [run(b) for b in shards]
    total, grads, y0 = results[0]
    grads = {k: v.copy() for k, v in grads.items()}
    for value, shard_grads, _ in results[1:]:
        total += value
        for k in grads:
            grads[k] += shard_grads[k]
    return total, grads, y0


def _train_levels(problem: FBSDEProblem, config: TrainConfig, levels: list[tuple[int, int]], mode: str,
                  params: Optional[NetworkParams] = None,
                  on_level: Optional[Callable[[int, int, int], None]] = None) -> TrainReport:
    net_config = config.net_config(problem)
    if params is None:
        params = init_params(net_config, config.seed)
    else:
        check_compatible(params, net_config)
    moments = AdamState.zeros(params)
    total_iterations = sum(count for _, count in levels)
    shards = shard_bounds(config.batch_M, config.threads)
    executor = ThreadPoolExecutor(max_workers=len(shards)) if len(shards) > 1 else None

    report = TrainReport(problem=problem.name, architecture=net_config.architecture.value, mode=mode,
                         steps_per_level=[steps for steps, _ in levels])
    start = time.perf_counter()
    iteration = 0
    try:
        for level, (steps, count) in enumerate(levels):
            grid = TimeGrid(problem.T, steps)
            logger.info("level %d: N=%d, iterations=%d", level, steps, count)
            if on_level is not None:
                on_level(level, steps, count)
            for _ in tqdm(range(count), desc=f"level {level} N={steps}", disable=not config.progress,
                          leave=False):
                seed = config.seed if config.fixed_paths else config.seed + iteration
                value, grads, y0 = _batch_step(problem, params, config, grid, seed, iteration,
                                               shards, executor)
                if not np.isfinite(value) or value > config.divergence_threshold:
                    raise DivergenceError(
                        f"loss {value:.4e} exceeded divergence threshold "
                        f"{config.divergence_threshold:.1e} at iteration {iteration}",
                        iteration=iteration,
                    )
                params, moments = adam_step(params, grads, moments, iteration + 1, config)
                elapsed = time.perf_counter() - start
                logged = iteration % config.y0_every == 0 or iteration == total_iterations - 1
                report.records.append(IterationRecord(iteration, level, value, elapsed,
                                                      y0 if logged else None))
                if iteration % config.log_every == 0:
                    logger.info("step: %5u, loss: %.4e, Y0: %.4e, elapsed time: %3u",
                                iteration, value, y0, int(elapsed))
                iteration += 1
            report.level_boundaries.append(iteration)
    finally:
        if executor is not None:
            executor.shutdown()

    report.total_seconds = time.perf_counter() - start
    report.params = params
    report.final_y0 = forward(params, 0.0, problem.xi).item()
    logger.info("training done: %d iterations, Y0: %.6e, %.1fs", iteration, report.final_y0,
                report.total_seconds)
    return report


def train_single_level(problem: FBSDEProblem, config: TrainConfig,
                       params: Optional[NetworkParams] = None) -> TrainReport:
    """config.iterations Adam steps at N = config.steps_N."""
    if config.schedule is not None:
        raise ContractError("train_single_level: config has a level schedule; use train_multilevel")
    return _train_levels(problem, config, [(config.steps_N, config.iterations)], "single", params)


def train_multilevel(problem: FBSDEProblem, config: TrainConfig, params: Optional[NetworkParams] = None,
                     on_level: Optional[Callable[[int, int, int], None]] = None) -> TrainReport:
    """Coarse-to-fine levels; parameters, Adam moments and the iteration counter carry over."""
    schedule = config.schedule
    if schedule is None:
        raise ContractError("train_multilevel: config has no level schedule")
    levels = list(zip(schedule.steps_per_level, schedule.iterations_per_level))
    return _train_levels(problem, config, levels, "multi", params, on_level)
