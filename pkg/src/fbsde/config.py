"""
fbsde/config.py - Run configuration

A run is described by one JSON document with flat key/value sections:

    {
      "problem":  {"name": "black_scholes", "d": 5},
      "network":  {"architecture": "naisnet", "width": 64},
      "training": {"iterations": 5000, "batch_M": 64, "steps_N": 20},
      "output":   {"directory": "runs/bs5"}
    }

Anything not given falls back to SCHEMA below. Unknown sections or keys are
rejected with a ConfigError naming "section.key".
"""

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from fbsde.core import ConfigError, ContractError, DTYPE, RESOLVED_CONFIG_FILE, load_json, save_json
from fbsde.nets import NetConfig
from fbsde.problems import PROBLEMS, FBSDEProblem, build_problem
from fbsde.sampler import LevelSchedule, split_iterations
from fbsde.trainer import TrainConfig

# =============================================================================
# Configuration - Single source of truth
# =============================================================================

_INT = (int,)
_NUM = (int, float)
_STR = (str,)
_BOOL = (bool,)
_LIST = (list,)

# section -> key -> (default, accepted types); a None default means "benchmark default"
SCHEMA = {
    "problem": {
        "name": (None, _STR),
        "d": (None, _INT),
        "T": (None, _NUM),
        "r": (None, _NUM),
        "sigma": (None, _NUM),
        "xi_mode": ("default", _STR),
        "xi": (None, _LIST),
        "allen_cahn_norm": ("squared", _STR),
        "allen_cahn_driver": ("standard", _STR),
    },
    "network": {
        "architecture": ("fc", _STR),
        "width": (256, _INT),
        "layers": (4, _INT),
        "epsilon": (0.01, _NUM),
        "h": (1.0, _NUM),
        "activation": ("tanh", _STR),
        "initialization": ("glorot_uniform", _STR),
        "projection_bound": (None, _NUM),
    },
    "training": {
        "batch_M": (100, _INT),
        "steps_N": (50, _INT),
        "iterations": (2000, _INT),
        "learning_rate": (1e-3, _NUM),
        "seed": (0, _INT),
        "use_terminal_grad_term": (False, _BOOL),
        "adam_beta1": (0.9, _NUM),
        "adam_beta2": (0.999, _NUM),
        "adam_eps": (1e-8, _NUM),
        "y0_every": (100, _INT),
        "fixed_paths": (False, _BOOL),
        "threads": (1, _INT),
        "divergence_threshold": (1e12, _NUM),
        "progress": (False, _BOOL),
    },
    "schedule": {
        "levels": (None, (list, int)),
        "iterations_per_level": (None, _LIST),
        "level_factor": (2, _INT),
    },
    "evaluation": {
        "M_eval": (64, _INT),
        "N_eval": (None, _INT),
        "seed": (1, _INT),
        "K": (100, _INT),
        "distances": ([0.0, 0.05, 0.10, 0.15, 0.20], _LIST),
        "oracle_samples": (100_000, _INT),
    },
    "convergence": {
        "mu": (0.05, _NUM),
        "sigma": (0.2, _NUM),
        "T": (1.0, _NUM),
        "x0": (1.0, _NUM),
        "steps": ([8, 16, 32, 64], _LIST),
        "paths": (4096, _INT),
        "seed": (0, _INT),
    },
    "output": {
        "directory": ("runs/default", _STR),
        "record_timing": (False, _BOOL),
    },
}

DEFAULTS = {section: {key: entry[0] for key, entry in keys.items()} for section, keys in SCHEMA.items()}

XI_MODES = ("default", "ones", "zeros", "explicit")


def _check_type(section: str, key: str, value):
    types = SCHEMA[section][key][1]
    if value is None:
        return
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(f"{section}.{key}", f"expected {'/'.join(t.__name__ for t in types)}, got bool")
    if not isinstance(value, types):
        raise ConfigError(f"{section}.{key}",
                          f"expected {'/'.join(t.__name__ for t in types)}, got {type(value).__name__}")


def _float_list(key: str, values) -> list[float]:
    try:
        return [float(v) for v in values]
    except (TypeError, ValueError):
        raise ConfigError(key, f"expected a list of numbers, got {values!r}") from None


def _int_list(key: str, values) -> list[int]:
    if any(isinstance(v, bool) or not isinstance(v, int) for v in values):
        raise ConfigError(key, f"expected a list of integers, got {values!r}")
    return list(values)


# =============================================================================
# RunConfig
# =============================================================================

@dataclass
class RunConfig:
    sections: dict
    source: Optional[Path] = None

    @classmethod
    def from_dict(cls, data: dict, require_problem: bool = True, source: Optional[Path] = None) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config", "top level must be a JSON object")
        sections = copy.deepcopy(DEFAULTS)
        for section, values in data.items():
            if section not in SCHEMA:
                raise ConfigError(section, "unknown section")
            if not isinstance(values, dict):
                raise ConfigError(section, "section must be a JSON object")
            for key, value in values.items():
                if key not in SCHEMA[section]:
                    raise ConfigError(f"{section}.{key}", "unknown key")
                _check_type(section, key, value)
                sections[section][key] = copy.deepcopy(value)
        config = cls(sections, source)
        if require_problem:
            name = sections["problem"]["name"]
            if name is None:
                raise ConfigError("problem.name", "missing required key")
            if name not in PROBLEMS:
                raise ConfigError("problem.name", f"unknown problem {name!r} (choose from {sorted(PROBLEMS)})")
        if sections["problem"]["xi_mode"] not in XI_MODES:
            raise ConfigError("problem.xi_mode", f"expected one of {XI_MODES}")
        return config

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    def to_dict(self) -> dict:
        return copy.deepcopy(self.sections)

    def apply_overrides(self, out: Optional[str] = None, threads: Optional[int] = None) -> "RunConfig":
        """CLI flags take precedence over the file."""
        if out is not None:
            self.sections["output"]["directory"] = str(out)
        if threads is not None:
            if threads < 1:
                raise ConfigError("training.threads", f"must be >= 1, got {threads}")
            self.sections["training"]["threads"] = threads
        return self

    @property
    def output_dir(self) -> Path:
        return Path(self.sections["output"]["directory"])

    # -------------------------------------------------------------------------
    # Builders
    # -------------------------------------------------------------------------

    def problem(self) -> FBSDEProblem:
        p = self.sections["problem"]
        if p["name"] is None:
            raise ConfigError("problem.name", "missing required key")
        xi = p["xi"]
        mode = p["xi_mode"]
        if xi is not None:
            xi = _float_list("problem.xi", xi)
        elif mode == "explicit":
            raise ConfigError("problem.xi", "xi_mode 'explicit' needs problem.xi")
        problem = build_problem(p["name"], d=p["d"], T=p["T"], xi=xi, r=p["r"], sigma=p["sigma"],
                                allen_cahn_norm=p["allen_cahn_norm"],
                                allen_cahn_driver=p["allen_cahn_driver"])
        if xi is None and mode in ("ones", "zeros"):
            fill = 1.0 if mode == "ones" else 0.0
            problem = build_problem(p["name"], d=problem.d, T=problem.T, xi=np.full(problem.d, fill, dtype=DTYPE),
                                    r=p["r"], sigma=p["sigma"], allen_cahn_norm=p["allen_cahn_norm"],
                                    allen_cahn_driver=p["allen_cahn_driver"])
        return problem

    def net_config(self, problem: FBSDEProblem) -> NetConfig:
        n = self.sections["network"]
        return NetConfig(
            input_dim=problem.d + 1,
            hidden_width=n["width"],
            num_hidden_layers=n["layers"],
            architecture=n["architecture"],
            epsilon=float(n["epsilon"]),
            block_step_h=float(n["h"]),
            activation=n["activation"],
            initialization=n["initialization"],
            projection_bound=None if n["projection_bound"] is None else float(n["projection_bound"]),
        )

    def schedule(self, problem: FBSDEProblem) -> Optional[LevelSchedule]:
        s = self.sections["schedule"]
        levels = s["levels"]
        if levels is None:
            if s["iterations_per_level"] is not None:
                raise ConfigError("schedule.iterations_per_level", "given without schedule.levels")
            return None
        total = self.sections["training"]["iterations"]
        try:
            if isinstance(levels, int):
                schedule = LevelSchedule.geometric(problem.T, levels, total, factor=s["level_factor"])
                if s["iterations_per_level"] is not None:
                    schedule = LevelSchedule(schedule.steps_per_level,
                                             tuple(_int_list("schedule.iterations_per_level",
                                                             s["iterations_per_level"])),
                                             schedule.level_factor, schedule.h0)
                return schedule
            steps = _int_list("schedule.levels", levels)
            if s["iterations_per_level"] is None:
                iterations = split_iterations(total, len(steps))
            else:
                iterations = _int_list("schedule.iterations_per_level", s["iterations_per_level"])
            return LevelSchedule(tuple(steps), tuple(iterations), s["level_factor"])
        except ContractError as e:
            raise ConfigError("schedule.levels", str(e)) from e

    def train_config(self, problem: FBSDEProblem) -> TrainConfig:
        t = self.sections["training"]
        return TrainConfig(
            batch_M=t["batch_M"],
            steps_N=t["steps_N"],
            iterations=t["iterations"],
            learning_rate=float(t["learning_rate"]),
            adam_beta1=float(t["adam_beta1"]),
            adam_beta2=float(t["adam_beta2"]),
            adam_eps=float(t["adam_eps"]),
            use_terminal_grad_term=t["use_terminal_grad_term"],
            seed=t["seed"],
            network=self.net_config(problem),
            schedule=self.schedule(problem),
            y0_every=t["y0_every"],
            fixed_paths=t["fixed_paths"],
            threads=t["threads"],
            divergence_threshold=float(t["divergence_threshold"]),
            progress=t["progress"],
        )

    def distances(self, override: Optional[list] = None) -> list[float]:
        values = self.sections["evaluation"]["distances"] if override is None else override
        values = _float_list("evaluation.distances", values)
        if not values:
            raise ConfigError("evaluation.distances", "at least one distance is required")
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ConfigError("evaluation.distances", f"every distance must lie in [0, 1], got {values}")
        if any(b <= a for a, b in zip(values, values[1:])):
            raise ConfigError("evaluation.distances", f"distances must increase strictly, got {values}")
        return values

    def eval_steps(self) -> int:
        e, s = self.sections["evaluation"], self.sections["schedule"]
        if e["N_eval"] is not None:
            if e["N_eval"] < 1:
                raise ConfigError("evaluation.N_eval", "must be >= 1")
            return e["N_eval"]
        if isinstance(s["levels"], list) and s["levels"]:
            return int(s["levels"][-1])
        if isinstance(s["levels"], int) and s["levels"] >= 1:
            # geometric levels start at N = 2
            return 2 * int(s["level_factor"]) ** (s["levels"] - 1)
        return self.sections["training"]["steps_N"]

    def resolve(self, problem: Optional[FBSDEProblem] = None) -> dict:
        """Config with benchmark defaults made explicit."""
        data = self.to_dict()
        if problem is not None:
            data["problem"]["d"] = problem.d
            data["problem"]["T"] = problem.T
            for key in ("r", "sigma"):
                if key in problem.parameters:
                    data["problem"][key] = problem.parameters[key]
            if data["evaluation"]["N_eval"] is None:
                data["evaluation"]["N_eval"] = self.eval_steps()
        return data

    def save_resolved(self, problem: Optional[FBSDEProblem] = None) -> Path:
        path = self.output_dir / RESOLVED_CONFIG_FILE
        save_json(path, self.resolve(problem))
        return path


def load_config(path: Optional[Path], require_problem: bool = True) -> RunConfig:
    """Read a config file; path None gives the defaults."""
    if path is None:
        return RunConfig.from_dict({}, require_problem=require_problem)
    path = Path(path)
    data = load_json(path)
    if data is None:
        raise ConfigError("--config", f"cannot read JSON from {path}")
    return RunConfig.from_dict(data, require_problem=require_problem, source=path)
