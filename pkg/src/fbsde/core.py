"""
fbsde/core.py - Shared utilities for the deep FBSDE solver

This module contains common functionality used across all fbsde modules:
the exception hierarchy and exit codes, run-directory file names, time
helpers, JSON/JSONL/CSV I/O and parameter checksums.
"""

import csv
import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

# =============================================================================
# Configuration - Single source of truth
# =============================================================================

DTYPE = np.float64

RESOLVED_CONFIG_FILE = "resolved_config.json"
CHECKPOINT_FILE = "checkpoint.json"
EVENTS_FILE = "events.jsonl"
LOSS_CURVE_FILE = "loss_curve.csv"
TIMINGS_FILE = "timings.csv"
ERROR_CURVE_FILE = "error_curve.csv"
SAMPLE_PATHS_FILE = "sample_paths.csv"
PATH_ERRORS_FILE = "path_errors.csv"
GENERALIZATION_FILE = "generalization.csv"
CONVERGENCE_FILE = "convergence.csv"

CHECKPOINT_FORMAT = "fbsde-checkpoint/1"

# Exit codes
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3
EXIT_DIVERGENCE = 4


# =============================================================================
# Errors
# =============================================================================

class FBSDEError(Exception):
    """Base class for all solver errors."""
    exit_code = EXIT_FAILURE


class ShapeError(FBSDEError, ValueError):
    """Operand shapes violate an operation's shape rule."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        rendered = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {rendered}")


class ContractError(FBSDEError):
    """A pre-condition of an operation does not hold."""


class ConfigError(FBSDEError, ValueError):
    """Invalid run configuration."""
    exit_code = EXIT_CONFIG

    def __init__(self, key: str, message: str = "invalid value"):
        self.key = key
        super().__init__(f"{key}: {message}")


class CheckpointError(FBSDEError):
    """Checkpoint cannot be read or does not match the network."""
    exit_code = EXIT_CHECKPOINT


class NumericalError(FBSDEError):
    """Non-finite coefficient output or rollout state."""
    exit_code = EXIT_DIVERGENCE

    def __init__(self, message: str, coefficient: Optional[str] = None,
                 iteration: Optional[int] = None, step: Optional[int] = None,
                 path: Optional[int] = None):
        self.coefficient = coefficient
        self.iteration = iteration
        self.step = step
        self.path = path
        super().__init__(message)


class DivergenceError(NumericalError):
    """Training loss exceeded the divergence threshold."""


# =============================================================================
# Time Utilities
# =============================================================================

def now_iso() -> str:
    """Current UTC timestamp in ISO format."""
    return datetime.now(timezone.utc).isoformat()


# =============================================================================
# Logging
# =============================================================================

def configure_logging(verbose: bool = False):
    """Install one stream handler on the package logger (CLI only)."""
    logger = logging.getLogger("fbsde")
    if not logger.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        logger.addHandler(handler)
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)


# =============================================================================
# File I/O Helpers
# =============================================================================

def save_json(filepath: Path, data: dict):
    """Save dict to JSON file with trailing newline."""
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, "w") as f:
        json.dump(data, f, indent=2)
        f.write("\n")


def load_json(filepath: Path) -> Optional[dict]:
    """Load JSON file or return None."""
    filepath = Path(filepath)
    if not filepath.exists():
        return None
    try:
        with open(filepath) as f:
            return json.load(f)
    except (json.JSONDecodeError, IOError):
        return None


def append_event(run_dir: Path, event: dict):
    """Append event to the run's events.jsonl."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / EVENTS_FILE, "a") as f:
        f.write(json.dumps({"ts": now_iso(), **event}) + "\n")


def read_events(run_dir: Path, limit: int = 100) -> list:
    """Read events from a run's log."""
    events_file = Path(run_dir) / EVENTS_FILE
    if not events_file.exists():
        return []
    with open(events_file) as f:
        events = [json.loads(line) for line in f if line.strip()]
    return events[-limit:]


def format_float(value) -> str:
    """Shortest round-trip representation; blank for None."""
    if value is None:
        return ""
    return repr(float(value))


def write_csv(filepath: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """Write a comma-separated file with LF line endings and a header row."""
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_float(v) if isinstance(v, (float, np.floating)) or v is None else v
                             for v in row])
    return filepath


def read_csv(filepath: Path) -> list[dict]:
    """Read a CSV written by write_csv into a list of row dicts."""
    with open(filepath, newline="") as f:
        return list(csv.DictReader(f))


# =============================================================================
# Checksums
# =============================================================================

def array_checksum(arrays: Iterable[np.ndarray]) -> str:
    """SHA-256 over the raw bytes of a sequence of arrays."""
    digest = hashlib.sha256()
    for array in arrays:
        array = np.ascontiguousarray(array, dtype=DTYPE)
        digest.update(str(array.shape).encode("utf-8"))
        digest.update(array.tobytes())
    return digest.hexdigest()
