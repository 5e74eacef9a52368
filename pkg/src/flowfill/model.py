"""The interpolation network: a stack of k x k conv + ELU layers, each
tapped by a linear 1x1 "detour" head that emits a 2-channel flow map."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import BinaryIO

import numpy as np

from . import autodiff as ad
from .preprocess import NetInput

CKPT_MAGIC = b"IFLW"
CKPT_VERSION = 1
IN_CHANNELS = 4


class CheckpointError(ValueError):
    pass


def default_detour_weights(num_layers: int) -> tuple[float, ...]:
    return (0.5,) * (num_layers - 1) + (1.0,)


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 10
    kernel_size: int = 7
    hidden_channels: int = 64
    detour_weights: tuple[float, ...] = field(default=())
    seed: int = 0

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.hidden_channels < 1:
            raise ValueError("hidden_channels must be >= 1")
        if not self.detour_weights:
            object.__setattr__(self, "detour_weights", default_detour_weights(self.num_layers))
        object.__setattr__(self, "detour_weights", tuple(float(x) for x in self.detour_weights))
        if len(self.detour_weights) != self.num_layers:
            raise ValueError(f"{len(self.detour_weights)} detour weights for {self.num_layers} layers")
        if any(x < 0 for x in self.detour_weights):
            raise ValueError("detour weights must be nonnegative")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        k, c = self.kernel_size, self.hidden_channels
        shapes = {}
        cin = IN_CHANNELS
        for l in range(1, self.num_layers + 1):
            shapes[f"conv{l}.w"] = (k, k, cin, c)
            shapes[f"conv{l}.b"] = (c,)
            shapes[f"detour{l}.w"] = (1, 1, c, 2)
            shapes[f"detour{l}.b"] = (2,)
            cin = c
        return shapes


def init_params(config: ModelConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    """Uniform(+-sqrt(6 / fan_in)) weights, zero biases."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    params = {}
    for name, shape in config.param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = shape[0] * shape[1] * shape[2]
            a = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-a, a, size=shape).astype(np.float32)
    return params


def check_params(config: ModelConfig, params: dict[str, np.ndarray]) -> None:
    shapes = config.param_shapes()
    if set(shapes) != set(params):
        raise CheckpointError(f"parameter names do not match config: {sorted(set(shapes) ^ set(params))}")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise CheckpointError(f"{name} has shape {params[name].shape}, config expects {shape}")
        if not np.all(np.isfinite(params[name])):
            raise CheckpointError(f"{name} holds non-finite values")


def forward_tensors(ptensors: dict[str, ad.Tensor], x: ad.Tensor, num_layers: int) -> list[ad.Tensor]:
    """Detour outputs d_1..d_L for an input tensor on some tape."""
    if x.shape[-1] != IN_CHANNELS:
        raise ad.ShapeError(f"input must have {IN_CHANNELS} channels, got {x.shape[-1]}")
    outs = []
    for l in range(1, num_layers + 1):
        x = ad.elu(ad.conv2d(x, ptensors[f"conv{l}.w"], ptensors[f"conv{l}.b"]))
        outs.append(ad.conv2d(x, ptensors[f"detour{l}.w"], ptensors[f"detour{l}.b"]))
    return outs


def _num_layers(params: dict[str, np.ndarray]) -> int:
    return sum(1 for k in params if k.startswith("conv") and k.endswith(".w"))


def forward(params: dict[str, np.ndarray], net_input: NetInput | np.ndarray) -> list[np.ndarray]:
    """All detour flow maps, each (h/8, w/8, 2), without recording gradients."""
    grid = net_input.grid if isinstance(net_input, NetInput) else net_input
    tape = ad.Tape()
    pt = {k: tape.constant(v) for k, v in params.items()}
    outs = forward_tensors(pt, tape.constant(grid), _num_layers(params))
    return [o.data for o in outs]


def predict(params: dict[str, np.ndarray], net_input: NetInput | np.ndarray) -> np.ndarray:
    """The last detour output, the one used at inference."""
    return forward(params, net_input)[-1]


# -- serialization ---------------------------------------------------------


def write_tensor(f: BinaryIO, a: np.ndarray) -> None:
    f.write(struct.pack("<I", a.ndim))
    f.write(struct.pack(f"<{a.ndim}I", *a.shape))
    f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint")
    return b


def read_u32(f: BinaryIO) -> int:
    return struct.unpack("<I", _read_exact(f, 4))[0]


def read_tensor(f: BinaryIO) -> np.ndarray:
    rank = read_u32(f)
    if rank > 8:
        raise CheckpointError(f"implausible tensor rank {rank}")
    dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
    n = int(np.prod(dims)) if rank else 1
    return np.frombuffer(_read_exact(f, 4 * n), dtype="<f4").reshape(dims).astype(np.float32)


def write_blob(f: BinaryIO, text: str) -> None:
    b = text.encode("utf-8")
    f.write(struct.pack("<I", len(b)))
    f.write(b)


def read_blob(f: BinaryIO) -> str:
    return _read_exact(f, read_u32(f)).decode("utf-8")


def write_model(f: BinaryIO, config: ModelConfig, params: dict[str, np.ndarray]) -> None:
    """Header, config and parameter tensors in config order."""
    check_params(config, params)
    f.write(CKPT_MAGIC)
    f.write(struct.pack("<I", CKPT_VERSION))
    write_blob(f, config.to_json())
    names = list(config.param_shapes())
    f.write(struct.pack("<I", len(names)))
    for name in names:
        write_tensor(f, params[name])


def read_model(f: BinaryIO, expect: ModelConfig | None = None) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    if _read_exact(f, 4) != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version = read_u32(f)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        config = ModelConfig.from_json(read_blob(f))
    except (ValueError, TypeError) as e:
        raise CheckpointError(f"bad model config: {e}") from None
    if expect is not None and _arch(expect) != _arch(config):
        raise CheckpointError(f"checkpoint architecture {_arch(config)} is incompatible with {_arch(expect)}")
    names = list(config.param_shapes())
    if read_u32(f) != len(names):
        raise CheckpointError("parameter count does not match config")
    params = {name: read_tensor(f) for name in names}
    check_params(config, params)
    return config, params


def _arch(c: ModelConfig) -> tuple[int, int, int]:
    return (c.num_layers, c.kernel_size, c.hidden_channels)
