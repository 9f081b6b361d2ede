"""
fbsde/report.py - Post-training evaluation and CSV output

Evaluations:
    evaluate_error_curve   relative error of Y_t against the reference along fresh paths
    generalization_sweep   error at perturbed initial conditions, parameters frozen
    timing_table           wall-clock / loss / Y0 error per training report
    merge_timings          one comparison table from several run directories

Relative errors divide by max(|reference|, REL_ERR_FLOOR).
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from fbsde.core import (
    CONVERGENCE_FILE, DTYPE, ERROR_CURVE_FILE, GENERALIZATION_FILE, LOSS_CURVE_FILE,
    PATH_ERRORS_FILE, SAMPLE_PATHS_FILE, TIMINGS_FILE,
    ContractError, FBSDEError, read_csv, write_csv,
)
from fbsde.diffgraph import Graph
from fbsde.nets import NetworkParams, forward
from fbsde.problems import FBSDEProblem
from fbsde.sampler import ConvergenceRow, TimeGrid, sample_increments
from fbsde.trainer import TrainReport, rollout

logger = logging.getLogger(__name__)

REL_ERR_FLOOR = 1e-12
PERTURBATION_PROTOCOL = "isotropic-averaged"

ERROR_CURVE_HEADER = ["t", "mean_rel_err", "mean_plus_2std"]
SAMPLE_PATHS_HEADER = ["t", "path_id", "y_pred", "y_exact"]
PATH_ERRORS_HEADER = ["t", "path_id", "rel_err", "oracle_stderr"]
GENERALIZATION_HEADER = ["architecture", "rel_distance_pct", "mean_rel_err_pct", "stderr_pct"]
TIMINGS_HEADER = ["architecture", "mode", "total_seconds", "iterations", "final_loss", "y0_rel_err"]
LOSS_CURVE_HEADER = ["iteration", "level", "loss", "elapsed_seconds", "y0_estimate"]
CONVERGENCE_HEADER = ["N", "rms_error", "ratio"]


def relative_error(predicted, reference) -> np.ndarray:
    reference = np.asarray(reference, dtype=DTYPE)
    return np.abs(np.asarray(predicted, dtype=DTYPE) - reference) / np.maximum(np.abs(reference), REL_ERR_FLOOR)


# =============================================================================
# Error curve
# =============================================================================

@dataclass
class ErrorCurve:
    """Per-time statistics over paths plus the raw per-path errors they came from."""
    times: np.ndarray
    mean_rel_err: np.ndarray
    mean_plus_2std: np.ndarray
    path_errors: np.ndarray  # (N+1, M)
    y_pred: np.ndarray  # (N+1, M)
    y_exact: np.ndarray  # (N+1, M)
    oracle_stderr: np.ndarray  # (N+1, M), zero for closed forms
    sample_path_ids: list = field(default_factory=list)

    def rows(self) -> list[list]:
        return [[t, m, s] for t, m, s in zip(self.times, self.mean_rel_err, self.mean_plus_2std)]

    def sample_rows(self) -> list[list]:
        return [
            [t, path, self.y_pred[n, path], self.y_exact[n, path]]
            for path in self.sample_path_ids
            for n, t in enumerate(self.times)
        ]

    def path_rows(self) -> list[list]:
        M = self.path_errors.shape[1]
        return [
            [t, m, self.path_errors[n, m], self.oracle_stderr[n, m]]
            for n, t in enumerate(self.times)
            for m in range(M)
        ]


def summarize_path_errors(path_errors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(mean, mean + 2 std) over paths, population std."""
    # shifted by the first path: a row of identical errors has exactly zero spread
    shift = path_errors[:, :1]
    offsets = path_errors - shift
    mean_offset = np.mean(offsets, axis=1)
    variance = np.maximum(np.mean(offsets * offsets, axis=1) - mean_offset ** 2, 0.0)
    mean = shift[:, 0] + mean_offset
    return mean, mean + 2.0 * np.sqrt(variance)


def evaluate_error_curve(problem: FBSDEProblem, params, M_eval: int, N_eval: int, seed: int,
                         oracle_samples: int = 100_000) -> ErrorCurve:
    """Roll the trained network along M_eval fresh paths and compare Y_n with u(t_n, X_n)."""
    if not problem.has_reference:
        raise ContractError(f"{problem.name}: no exact solution or oracle to evaluate against")
    grid = TimeGrid(problem.T, N_eval)
    batch = sample_increments(seed, M_eval, grid, problem.d)
    with Graph() as graph:
        state = rollout(problem, params, batch)
    graph.release()
    y_pred = state.Y.value.copy()
    # every path starts at xi: one prediction and one reference value for t = 0
    y_pred[0] = y_pred[0, 0]

    y_exact = np.empty_like(y_pred)
    stderr = np.empty_like(y_pred)
    value, error = problem.reference(0.0, problem.xi[None, :], oracle_samples, seed)
    y_exact[0], stderr[0] = value[0], error[0]
    for n in range(1, grid.N + 1):
        y_exact[n], stderr[n] = problem.reference(grid.t(n), state.X[n], oracle_samples, (seed, n))

    errors = relative_error(y_pred, y_exact)
    mean, upper = summarize_path_errors(errors)
    logger.info("error curve: mean relative error at t=0 %.4e, at T %.4e", mean[0], mean[-1])
    return ErrorCurve(
        times=grid.times, mean_rel_err=mean, mean_plus_2std=upper, path_errors=errors,
        y_pred=y_pred, y_exact=y_exact, oracle_stderr=stderr,
        sample_path_ids=list(range(min(2, M_eval))),
    )


# =============================================================================
# Generalization sweep
# =============================================================================

def sample_unit_sphere(rng: np.random.Generator, K: int, d: int) -> np.ndarray:
    """K directions uniform on the unit sphere in R^d."""
    v = rng.standard_normal((K, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@dataclass
class GeneralizationSweep:
    architecture: str
    rel_distances: list  # percent of ||xi||
    rel_errors: list  # mean relative error at t = 0, percent
    stderr: list  # standard error of that mean, percent
    K: int
    absolute_fallback: bool = False
    protocol: str = PERTURBATION_PROTOCOL
    checksum: str = ""

    def rows(self) -> list[list]:
        return [[self.architecture, d, e, s] for d, e, s in zip(self.rel_distances, self.rel_errors, self.stderr)]


def _reference_at_start(problem: FBSDEProblem, points: np.ndarray, samples: int, seed: int,
                        cache: dict) -> np.ndarray:
    """u(0, x) per row; oracle rows share the error curve's t = 0 stream and repeats are estimated once."""
    if problem.exact is not None:
        return problem.reference(0.0, points, samples, seed)[0]
    values = np.empty(points.shape[0], dtype=DTYPE)
    for k, point in enumerate(points):
        key = point.tobytes()
        if key not in cache:
            cache[key] = float(problem.reference(0.0, point[None, :], samples, seed)[0][0])
        values[k] = cache[key]
    return values


def generalization_sweep(problem: FBSDEProblem, params: NetworkParams, distances: Sequence[float], K: int = 100,
                         seed: int = 0, oracle_samples: int = 100_000) -> GeneralizationSweep:
    """
    Mean relative error of u(0, xi') over xi' = xi + delta ||xi|| v, v uniform on the sphere.

    The same K directions are used for every distance. With ||xi|| = 0 the
    perturbation is delta v and the sweep records the fallback.
    """
    distances = [float(delta) for delta in distances]
    if not distances:
        raise ContractError("generalization_sweep: at least one distance is required")
    if any(not 0.0 <= delta <= 1.0 for delta in distances):
        raise ContractError(f"generalization_sweep: distances must lie in [0, 1], got {distances}")
    if any(b <= a for a, b in zip(distances, distances[1:])):
        raise ContractError(f"generalization_sweep: distances must increase strictly, got {distances}")
    if K < 1:
        raise ContractError(f"generalization_sweep: K must be >= 1, got {K}")
    if not problem.has_reference:
        raise ContractError(f"{problem.name}: no exact solution or oracle to evaluate against")

    before = params.checksum()
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed])))
    directions = sample_unit_sphere(rng, K, problem.d)
    radius = float(np.linalg.norm(problem.xi))
    fallback = radius == 0.0
    if fallback:
        logger.warning("||xi|| = 0: using absolute perturbations delta * v")

    cache: dict = {}
    means, errors = [], []
    for delta in distances:
        points = problem.xi + (delta if fallback else delta * radius) * directions
        with Graph() as graph:
            predicted = forward(params, 0.0, points).value.copy()
        graph.release()
        exact = _reference_at_start(problem, points, oracle_samples, seed, cache)
        rel = relative_error(predicted, exact) * 100.0
        means.append(float(np.mean(rel)))
        errors.append(float(np.std(rel, ddof=1) / np.sqrt(K)) if K > 1 else 0.0)

    after = params.checksum()
    if after != before:
        raise FBSDEError("generalization_sweep changed the network parameters")
    return GeneralizationSweep(
        architecture=params.config.architecture.value,
        rel_distances=[delta * 100.0 for delta in distances],
        rel_errors=means, stderr=errors, K=K, absolute_fallback=fallback, checksum=after,
    )


# =============================================================================
# Timing table
# =============================================================================

@dataclass(frozen=True)
class TimingRow:
    architecture: str
    mode: str
    total_seconds: float
    iterations: int
    final_loss: Optional[float]
    y0_rel_err: Optional[float]

    def row(self) -> list:
        return [self.architecture, self.mode, self.total_seconds, self.iterations, self.final_loss, self.y0_rel_err]


def timing_table(reports: Sequence[TrainReport], problem: Optional[FBSDEProblem] = None,
                 oracle_samples: int = 100_000, seed: int = 0) -> list[TimingRow]:
    """One row per report, in the given order."""
    if not reports:
        raise ContractError("timing_table: at least one report is required")
    reference = None
    if problem is not None and problem.has_reference:
        reference = float(problem.reference(0.0, problem.xi[None, :], oracle_samples, seed)[0][0])
    rows = []
    for report in reports:
        y0_err = None
        if reference is not None and np.isfinite(report.final_y0):
            y0_err = float(relative_error(report.final_y0, reference))
        rows.append(TimingRow(report.architecture, report.mode, report.total_seconds,
                              report.iterations, report.final_loss, y0_err))
    return rows


# =============================================================================
# CSV writers
# =============================================================================

def write_error_curve(curve: ErrorCurve, out_dir: Path) -> list[Path]:
    out_dir = Path(out_dir)
    return [
        write_csv(out_dir / ERROR_CURVE_FILE, ERROR_CURVE_HEADER, curve.rows()),
        write_csv(out_dir / SAMPLE_PATHS_FILE, SAMPLE_PATHS_HEADER, curve.sample_rows()),
        write_csv(out_dir / PATH_ERRORS_FILE, PATH_ERRORS_HEADER, curve.path_rows()),
    ]


def write_generalization(sweeps: Sequence[GeneralizationSweep], out_dir: Path) -> Path:
    rows = [row for sweep in sweeps for row in sweep.rows()]
    return write_csv(Path(out_dir) / GENERALIZATION_FILE, GENERALIZATION_HEADER, rows)


def write_timings(rows: Sequence[TimingRow], out_dir: Path) -> Path:
    return write_csv(Path(out_dir) / TIMINGS_FILE, TIMINGS_HEADER, [r.row() for r in rows])


def _optional_float(text: str) -> Optional[float]:
    return None if text == "" else float(text)


def read_timings(path: Path) -> list[TimingRow]:
    """Rows of a timings.csv written by write_timings."""
    path = Path(path)
    with open(path, newline="") as f:
        header = f.readline().strip().split(",")
    if header != TIMINGS_HEADER:
        raise FBSDEError(f"{path}: not a timings table (header {header})")
    return [
        TimingRow(r["architecture"], r["mode"], float(r["total_seconds"]), int(r["iterations"]),
                  _optional_float(r["final_loss"]), _optional_float(r["y0_rel_err"]))
        for r in read_csv(path)
    ]


def merge_timings(run_dirs: Sequence[Path]) -> list[TimingRow]:
    """Concatenate the timing rows of several training runs, in the given order."""
    if not run_dirs:
        raise ContractError("merge_timings: at least one run directory is required")
    rows = []
    for run_dir in run_dirs:
        rows.extend(read_timings(Path(run_dir) / TIMINGS_FILE))
    logger.info("merged %d timing rows from %d runs", len(rows), len(run_dirs))
    return rows


def write_loss_curve(report: TrainReport, out_dir: Path, record_timing: bool = True) -> Path:
    return write_csv(Path(out_dir) / LOSS_CURVE_FILE, LOSS_CURVE_HEADER, report.to_rows(record_timing))


def write_convergence(rows: Sequence[ConvergenceRow], out_dir: Path) -> Path:
    return write_csv(Path(out_dir) / CONVERGENCE_FILE, CONVERGENCE_HEADER,
                     [[r.N, r.rms_error, r.ratio] for r in rows])
