"""
Module system and the parameterised layers.

A Module registers Parameters and sub-Modules in assignment order, so
``named_parameters`` (and therefore checkpoints and optimizer state)
always enumerate in one fixed order.
"""

from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
import pandas as pd

from ..errors import ShapeMismatchError
from . import ops
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor."""

    def __init__(self, data, name: Optional[str] = None):
        super().__init__(np.asarray(data), requires_grad=True, name=name)


class Module:
    """Base class for all network components."""

    def __init__(self):
        object.__setattr__(self, "_parameters", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "training", True)
        object.__setattr__(self, "rng", None)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    # ── Traversal ──

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._modules.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for mod_name, module in self.named_modules(prefix):
            for name, param in module._parameters.items():
                yield (f"{mod_name}.{name}" if mod_name else name), param

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for mod_name, module in self.named_modules(prefix):
            for name, buf in module._buffers.items():
                yield (f"{mod_name}.{name}" if mod_name else name), buf

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    # ── Modes and state ──

    def train(self) -> "Module":
        for _, module in self.named_modules():
            object.__setattr__(module, "training", True)
        return self

    def eval(self) -> "Module":
        for _, module in self.named_modules():
            object.__setattr__(module, "training", False)
        return self

    def set_rng(self, rng: Optional[np.random.Generator]) -> "Module":
        """Share one generator with every dropout layer; draws follow forward order."""
        for _, module in self.named_modules():
            object.__setattr__(module, "rng", rng)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
        return self

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, module in self.named_modules():
            for name in list(module._buffers):
                module.register_buffer(name, module._buffers[name].astype(dtype))
        return self

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data.copy()
        for name, buf in self.named_buffers():
            state[name] = buf.copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        expected = list(self.state_dict().keys())
        missing = [k for k in expected if k not in state]
        unexpected = [k for k in state if k not in expected]
        if missing or unexpected:
            raise ShapeMismatchError(f"state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, p in self.named_parameters():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeMismatchError(f"{name}: expected {p.shape}, got {value.shape}")
            p.data = value.astype(p.dtype).copy()
        for mod_name, module in self.named_modules():
            for buf_name, buf in list(module._buffers.items()):
                full = f"{mod_name}.{buf_name}" if mod_name else buf_name
                value = np.asarray(state[full])
                if value.shape != buf.shape:
                    raise ShapeMismatchError(f"{full}: expected {buf.shape}, got {value.shape}")
                module.register_buffer(buf_name, value.astype(buf.dtype).copy())


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        for module in modules:
            self.append(module)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._modules)), module)

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self) -> int:
        return len(self._modules)

    def __getitem__(self, index: int) -> Module:
        return list(self._modules.values())[index]


def summary(net: Module) -> Tuple[pd.DataFrame, int]:
    """Layer table (name, shape, count) and total parameter count."""
    rows = [
        {"name": name, "shape": "x".join(str(s) for s in p.shape), "count": int(p.data.size)}
        for name, p in net.named_parameters()
    ]
    table = pd.DataFrame(rows, columns=["name", "shape", "count"])
    return table, int(table["count"].sum()) if len(table) else 0


def format_summary(net: Module, title: str = "") -> str:
    table, total = summary(net)
    lines = [title] if title else []
    lines.append(table.to_string(index=False))
    lines.append(f"total parameters: {total}")
    return "\n".join(lines) + "\n"


# ══════════════════════════════════════════════════════════════════
# Layers
# ══════════════════════════════════════════════════════════════════

def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv3d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding="same", bias: bool = True):
        super().__init__()
        self.stride = stride
        self.padding = padding
        shape = (out_channels, in_channels, kernel, kernel, kernel)
        self.weight = Parameter(he_uniform(rng, shape, in_channels * kernel ** 3))
        self.bias = Parameter(np.zeros(out_channels, dtype=np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv3d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class TransposedConv3d(Module):
    """Upsampling layer; the kernel uses the convolution layout (in, out, k, k, k)."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 kernel: int = 2, stride: int = 2):
        super().__init__()
        self.stride = stride
        shape = (in_channels, out_channels, kernel, kernel, kernel)
        self.weight = Parameter(he_uniform(rng, shape, in_channels * kernel ** 3))
        self.bias = Parameter(np.zeros(out_channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return ops.transposed_conv3d(x, self.weight, self.bias, stride=self.stride)


class BatchNorm3d(Module):
    def __init__(self, channels: int, momentum: float = 0.1):
        super().__init__()
        self.momentum = momentum
        self.scale = Parameter(np.ones(channels, dtype=np.float32))
        self.shift = Parameter(np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm(x, self.scale, self.shift, self.running_mean, self.running_var,
                             training=self.training, momentum=self.momentum)


class Dropout(Module):
    def __init__(self, rate: float):
        super().__init__()
        self.p = rate

    def forward(self, x: Tensor) -> Tensor:
        return ops.dropout(x, self.p, self.rng, self.training)
