"""
fbsde/nets.py - Shared-parameter approximators u(t, x; theta)

One parameter set is used at every time step. The input is the time
prepended to the state, (t, x). Three interchangeable architectures:

    FC        y_{k+1} = act(W_k y_k + b_k)
    RESNET    y_{k+1} = y_k + act(W_k y_k + b_k)
    NAISNET   y_{k+1} = y_k + h * act(A_k y_k + B_k u + C_k),  A_k = -R_k^T R_k - eps I

All of them start with a lift y_0 = act(W_in u + b_in) and end with a linear
head u = w_out^T y_L + b_out. States may be batched as (M, d) matrices.
"""

from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from fbsde.core import (
    CHECKPOINT_FORMAT, DTYPE,
    CheckpointError, ConfigError, ContractError, ShapeError,
    array_checksum, load_json, save_json,
)
from fbsde.diffgraph import (
    GraphNode, add, as_node, concat, constant, grad, matmul, reshape, scale,
    sin, sub, sum_, tanh, transpose, variable,
)

# Rescaled R can land one ulp above the bound; treat that as feasible so the
# projection is idempotent.
PROJECTION_RTOL = 1e-12


# =============================================================================
# Enums
# =============================================================================

class Architecture(str, Enum):
    FC = "fc"
    RESNET = "resnet"
    NAISNET = "naisnet"

    @classmethod
    def parse(cls, value: Union[str, "Architecture"]) -> "Architecture":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace("-", ""))
        except ValueError:
            raise ConfigError("network.architecture", f"unknown architecture {value!r}") from None


class Activation(str, Enum):
    TANH = "tanh"
    SIN = "sin"


class Initialization(str, Enum):
    GLOROT_UNIFORM = "glorot_uniform"
    GLOROT_NORMAL = "glorot_normal"


_ACTIVATIONS: dict[str, Callable[[GraphNode], GraphNode]] = {
    Activation.TANH.value: tanh,
    Activation.SIN.value: sin,
}


# =============================================================================
# Data Classes
# =============================================================================

@dataclass(frozen=True)
class NetConfig:
    """Network shape and architecture hyper-parameters."""
    input_dim: int
    hidden_width: int = 256
    num_hidden_layers: int = 4
    architecture: Architecture = Architecture.FC
    epsilon: float = 0.01
    block_step_h: float = 1.0
    activation: str = Activation.TANH.value
    initialization: str = Initialization.GLOROT_UNIFORM.value
    projection_bound: Optional[float] = None  # None -> 1 - epsilon

    def __post_init__(self):
        object.__setattr__(self, "architecture", Architecture.parse(self.architecture))
        if self.input_dim < 2:
            raise ConfigError("problem.d", f"state dimension must be >= 1, got {self.input_dim - 1}")
        if self.hidden_width < 1:
            raise ConfigError("network.width", f"must be >= 1, got {self.hidden_width}")
        if self.num_hidden_layers < 1:
            raise ConfigError("network.layers", f"must be >= 1, got {self.num_hidden_layers}")
        if self.epsilon <= 0:
            raise ConfigError("network.epsilon", f"must be > 0, got {self.epsilon}")
        if self.block_step_h <= 0:
            raise ConfigError("network.h", f"must be > 0, got {self.block_step_h}")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError("network.activation", f"unknown activation {self.activation!r}")
        if self.initialization not in {i.value for i in Initialization}:
            raise ConfigError("network.initialization", f"unknown scheme {self.initialization!r}")
        if self.projection_bound is not None and self.projection_bound <= 0:
            raise ConfigError("network.projection_bound", "must be > 0")

    @property
    def state_dim(self) -> int:
        return self.input_dim - 1

    @property
    def bound(self) -> float:
        """Frobenius bound on R^T R used by the NAIS-Net projection."""
        return 1.0 - self.epsilon if self.projection_bound is None else self.projection_bound

    def to_dict(self) -> dict:
        data = asdict(self)
        data["architecture"] = self.architecture.value
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "NetConfig":
        return cls(**data)


@dataclass
class NetworkParams:
    """Trainable parameter set, shared across all time steps."""
    config: NetConfig
    arrays: dict = field(default_factory=dict)  # name -> np.ndarray, fixed order

    @property
    def names(self) -> list[str]:
        return list(self.arrays)

    @property
    def num_parameters(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def with_flat(self, vector: np.ndarray) -> "NetworkParams":
        """Same shapes, values taken from a flat vector in name order."""
        vector = np.asarray(vector, dtype=DTYPE)
        if vector.size != self.num_parameters:
            raise ShapeError("with_flat", vector.shape, (self.num_parameters,))
        arrays, offset = {}, 0
        for name, array in self.arrays.items():
            arrays[name] = vector[offset:offset + array.size].reshape(array.shape).copy()
            offset += array.size
        return NetworkParams(self.config, arrays)

    def checksum(self) -> str:
        return array_checksum(self.arrays.values())

    def bind(self, requires_grad: bool = False) -> "BoundParams":
        """Wrap every array as a graph leaf."""
        make = variable if requires_grad else constant
        return BoundParams(self.config, {k: make(v) for k, v in self.arrays.items()})


@dataclass
class BoundParams:
    """Parameters as graph leaves for one graph."""
    config: NetConfig
    nodes: dict

    def gradients(self, loss: GraphNode) -> dict:
        """d loss / d theta as plain arrays, keyed like the parameters."""
        names = list(self.nodes)
        grads = grad(loss, [self.nodes[n] for n in names])
        return {n: g.value for n, g in zip(names, grads)}


ParamsLike = Union[NetworkParams, BoundParams]
Approximator = Callable[[object, GraphNode], GraphNode]


# =============================================================================
# NAIS-Net stability construction
# =============================================================================

def build_A(R, epsilon: float):
    """
    A = -R^T R - eps I, symmetric with every eigenvalue <= -eps.

    Accepts an array (returns an array) or a graph node (returns a node).
    """
    is_node = isinstance(R, GraphNode)
    R = as_node(R)
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        raise ShapeError("build_A", R.shape)
    if epsilon <= 0:
        raise ContractError(f"build_A: epsilon must be positive, got {epsilon}")
    gram = matmul(transpose(R), R)
    # (P + P^T) / 2 makes the result symmetric bit-for-bit
    A = sub(scale(add(gram, transpose(gram)), -0.5), constant(epsilon * np.eye(R.shape[0])))
    return A if is_node else A.value


def project_R(R: np.ndarray, epsilon: float, bound: Optional[float] = None) -> np.ndarray:
    """Rescale R so that ||R^T R||_F <= bound (default 1 - eps)."""
    if not 0.0 < epsilon < 1.0:
        raise ContractError(f"project_R: epsilon must be in (0, 1), got {epsilon}")
    R = np.asarray(R, dtype=DTYPE)
    limit = 1.0 - epsilon if bound is None else bound
    fro = np.linalg.norm(R.T @ R, "fro")
    if fro <= limit * (1.0 + PROJECTION_RTOL):
        return R
    return R * np.sqrt(limit / fro)


def project_params(params: NetworkParams) -> NetworkParams:
    """Apply project_R to every NAIS-Net R_k; other architectures pass through."""
    config = params.config
    if config.architecture is not Architecture.NAISNET:
        return params
    arrays = dict(params.arrays)
    for name in arrays:
        if name.endswith(".R"):
            arrays[name] = project_R(arrays[name], config.epsilon, config.bound)
    return NetworkParams(config, arrays)


# =============================================================================
# Initialization
# =============================================================================

def param_shapes(config: NetConfig) -> dict[str, tuple]:
    """Expected name -> shape map for a configuration."""
    width, n_in = config.hidden_width, config.input_dim
    shapes = {"lift.W": (width, n_in), "lift.b": (width,)}
    for k in range(config.num_hidden_layers):
        if config.architecture is Architecture.NAISNET:
            shapes[f"block{k}.R"] = (width, width)
            shapes[f"block{k}.B"] = (width, n_in)
            shapes[f"block{k}.C"] = (width,)
        else:
            shapes[f"block{k}.W"] = (width, width)
            shapes[f"block{k}.b"] = (width,)
    shapes["head.W"] = (1, width)
    shapes["head.b"] = (1,)
    return shapes


def _init_weight(rng: np.random.Generator, shape: tuple, scheme: str) -> np.ndarray:
    fan_out, fan_in = shape
    if scheme == Initialization.GLOROT_NORMAL.value:
        return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape)
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(config: NetConfig, seed: int = 0) -> NetworkParams:
    """Glorot weights, zero biases; NAIS-Net R_k projected after drawing."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 1:
            arrays[name] = np.zeros(shape, dtype=DTYPE)
        else:
            arrays[name] = _init_weight(rng, shape, config.initialization).astype(DTYPE)
    return project_params(NetworkParams(config, arrays))


# =============================================================================
# Forward pass
# =============================================================================

def _bound(params: ParamsLike) -> BoundParams:
    if isinstance(params, BoundParams):
        return params
    if isinstance(params, NetworkParams):
        return params.bind(requires_grad=False)
    raise ContractError(f"expected NetworkParams or BoundParams, got {type(params).__name__}")


def _fc_block(bound: BoundParams, k: int, hidden, u, act):
    nodes = bound.nodes
    return act(add(matmul(hidden, transpose(nodes[f"block{k}.W"])), nodes[f"block{k}.b"]))


def _resnet_block(bound: BoundParams, k: int, hidden, u, act):
    return add(hidden, _fc_block(bound, k, hidden, u, act))


def _naisnet_block(bound: BoundParams, k: int, hidden, u, act):
    nodes, config = bound.nodes, bound.config
    A = build_A(nodes[f"block{k}.R"], config.epsilon)
    pre = add(add(matmul(hidden, transpose(A)), matmul(u, transpose(nodes[f"block{k}.B"]))),
              nodes[f"block{k}.C"])
    return add(hidden, scale(act(pre), config.block_step_h))


_BLOCKS = {
    Architecture.FC: _fc_block,
    Architecture.RESNET: _resnet_block,
    Architecture.NAISNET: _naisnet_block,
}


def forward(params: ParamsLike, t, x) -> GraphNode:
    """
    u(t, x; theta) as a graph node.

    x is a d-vector (returns a scalar node) or an (M, d) batch (returns an
    (M,) node); t is a scalar or one time per batch row.
    """
    bound = _bound(params)
    config = bound.config
    x = as_node(x)
    single = x.ndim == 1
    states = reshape(x, (1, x.shape[0])) if single else x
    if states.ndim != 2 or states.shape[1] != config.state_dim:
        raise ShapeError("forward", x.shape, (config.state_dim,))
    rows = states.shape[0]
    times = np.asarray(t, dtype=DTYPE)
    if times.size not in (1, rows):
        raise ShapeError("forward", times.shape, (rows,))
    times = np.broadcast_to(times.reshape(-1), (rows,)).reshape(rows, 1)

    act = _ACTIVATIONS[config.activation]
    nodes = bound.nodes
    u = concat([constant(times), states], axis=1)
    hidden = act(add(matmul(u, transpose(nodes["lift.W"])), nodes["lift.b"]))
    block = _BLOCKS[config.architecture]
    for k in range(config.num_hidden_layers):
        hidden = block(bound, k, hidden, u, act)
    out = add(matmul(hidden, transpose(nodes["head.W"])), nodes["head.b"])
    return reshape(out, ()) if single else reshape(out, (rows,))


def as_approximator(model) -> Approximator:
    """Network parameters or any (t, x) -> node callable."""
    if isinstance(model, (NetworkParams, BoundParams)):
        return lambda t, x: forward(model, t, x)
    if callable(model):
        return model
    raise ContractError(f"not an approximator: {type(model).__name__}")


def value_and_gradient_x(model, t, x) -> tuple[GraphNode, GraphNode]:
    """u and du/dx at (t, x); both remain differentiable w.r.t. the parameters."""
    approximator = as_approximator(model)
    x = as_node(x)
    leaf = variable(x.value)
    u = approximator(t, leaf)
    (z,) = grad(sum_(u), [leaf])
    return u, z


def gradient_x(model, t, x) -> GraphNode:
    """du/dx(t, x; theta); rows of a batch are differentiated independently."""
    return value_and_gradient_x(model, t, x)[1]


# =============================================================================
# Checkpoints
# =============================================================================

def check_compatible(params: NetworkParams, config: NetConfig):
    """Raise CheckpointError naming both shapes on the first mismatch."""
    expected = param_shapes(config)
    if list(expected) != list(params.arrays):
        raise CheckpointError(
            f"parameter names differ: checkpoint {list(params.arrays)} vs network {list(expected)}"
        )
    for name, shape in expected.items():
        actual = params.arrays[name].shape
        if tuple(actual) != tuple(shape):
            raise CheckpointError(
                f"{name}: checkpoint shape {tuple(actual)} vs network shape {tuple(shape)}"
            )


def save_checkpoint(params: NetworkParams, path: Path) -> Path:
    """Write a JSON manifest (name, shape, row-major values) that round-trips bit-exactly."""
    path = Path(path)
    save_json(path, {
        "format": CHECKPOINT_FORMAT,
        "config": params.config.to_dict(),
        "checksum": params.checksum(),
        "tensors": [
            {"name": name, "shape": list(array.shape), "values": array.ravel().tolist()}
            for name, array in params.arrays.items()
        ],
    })
    return path


def load_checkpoint(path: Path, expected: Optional[NetConfig] = None) -> NetworkParams:
    """Read a checkpoint; with `expected`, also verify it fits that network."""
    data = load_json(Path(path))
    if data is None:
        raise CheckpointError(f"cannot read checkpoint {path}")
    if data.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {data.get('format')!r}")
    try:
        config = NetConfig.from_dict(data["config"])
        arrays = {}
        for tensor in data["tensors"]:
            values = np.asarray(tensor["values"], dtype=DTYPE)
            arrays[tensor["name"]] = values.reshape(tuple(tensor["shape"]))
    except (KeyError, TypeError, ValueError, ConfigError) as e:
        raise CheckpointError(f"malformed checkpoint {path}: {e}") from e
    params = NetworkParams(config, arrays)
    check_compatible(params, config)
    if expected is not None:
        check_compatible(params, expected)
        if config.architecture is not expected.architecture:
            raise CheckpointError(
                f"architecture: checkpoint {config.architecture.value} vs network {expected.architecture.value}"
            )
    return params
