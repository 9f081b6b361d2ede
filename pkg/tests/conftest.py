"""
Pytest configuration and fixtures for fbsde tests.
"""

import json
import subprocess
import sys
from pathlib import Path
from typing import Callable

import pytest


# Add src directory to path for fbsde package imports
SRC_DIR = Path(__file__).parent.parent / "src"
if str(SRC_DIR) not in sys.path:
    sys.path.insert(0, str(SRC_DIR))


# =============================================================================
# Paths and CLI
# =============================================================================

@pytest.fixture
def cli_path() -> Path:
    """Return path to fbsde_cli.py entry point."""
    return SRC_DIR / "fbsde" / "fbsde_cli.py"


@pytest.fixture
def run_cli(cli_path: Path, tmp_path: Path) -> Callable[..., subprocess.CompletedProcess]:
    """Run the CLI in a subprocess from the temporary directory."""
    def _run(*args: str) -> subprocess.CompletedProcess:
        return subprocess.run(
            [sys.executable, str(cli_path), *args],
            capture_output=True,
            text=True,
            cwd=tmp_path,
        )
    return _run


@pytest.fixture
def write_config(tmp_path: Path) -> Callable[[dict, str], Path]:
    """Write a config dict as JSON and return its path."""
    def _write(data: dict, name: str = "config.json") -> Path:
        path = tmp_path / name
        path.write_text(json.dumps(data, indent=2))
        return path
    return _write


@pytest.fixture
def small_config(tmp_path: Path) -> dict:
    """Black-Scholes d=2 run that trains in well under a second."""
    return {
        "problem": {"name": "black_scholes", "d": 2},
        "network": {"architecture": "fc", "width": 8, "layers": 1},
        "training": {"batch_M": 8, "steps_N": 4, "iterations": 3, "seed": 7, "y0_every": 1},
        "evaluation": {"M_eval": 8, "N_eval": 4, "seed": 3, "K": 4, "oracle_samples": 200},
        "output": {"directory": str(tmp_path / "run")},
    }


# =============================================================================
# Problems and networks
# =============================================================================

@pytest.fixture
def bs2():
    """Black-Scholes, d=2."""
    from fbsde.problems import black_scholes
    return black_scholes(d=2)


@pytest.fixture
def heat2():
    """Heat equation, d=2, w=(1, 2)."""
    from fbsde.problems import heat
    return heat(d=2, w=[1.0, 2.0])


@pytest.fixture
def tiny_net():
    """Factory for width-8 networks on a d=2 state."""
    from fbsde.nets import NetConfig

    def _make(architecture: str = "fc", layers: int = 2, width: int = 8, d: int = 2):
        return NetConfig(input_dim=d + 1, hidden_width=width, num_hidden_layers=layers,
                         architecture=architecture)
    return _make
