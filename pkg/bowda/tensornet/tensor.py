"""
Tensor and Tape: the reverse-mode differentiation core.

Operations executed while a Tape is active append a node (inputs,
output, backward closure) to it. ``Tape.backward`` walks the nodes in
reverse execution order, which is a valid topological order because a
node can only consume tensors that already exist.
"""

import threading
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ShapeMismatchError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_local = threading.local()


class Tensor:
    """
    An N-d array, usually (batch, channels, depth, height, width).

    Hashes by identity so tensors can key gradient dictionaries.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Same values, cut from the graph."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise ShapeMismatchError(
                f"gradient shape {grad.shape} does not match tensor {self.name or ''} {self.data.shape}"
            )
        grad = grad.astype(self.data.dtype, copy=False)
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward: BackwardFn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """
    Ordered record of executed operations.

    Usage::

        with Tape() as tape:
            out = net(x)
        tape.backward({out: seed})
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self._produced: set = set()

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self._produced.add(id(node.output))

    def backward(self, seeds: Dict[Tensor, np.ndarray]) -> None:
        """
        Propagate seed gradients to every tensor that requires grad.

        Gradients accumulate into ``Tensor.grad``; each node is visited
        once, in reverse order of recording.
        """
        grads: Dict[int, np.ndarray] = {}
        for tensor, seed in seeds.items():
            seed = np.asarray(seed)
            if seed.shape != tensor.shape:
                raise ShapeMismatchError(f"seed shape {seed.shape} does not match output {tensor.shape}")
            key = id(tensor)
            grads[key] = grads[key] + seed if key in grads else seed.astype(tensor.dtype)
            if tensor.requires_grad and self._is_leaf(tensor):
                tensor.accumulate(seed)

        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            input_grads = node.backward(g)
            for tensor, gi in zip(node.inputs, input_grads):
                if gi is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                grads[key] = grads[key] + gi if key in grads else gi
                if self._is_leaf(tensor):
                    tensor.accumulate(gi)

    def _is_leaf(self, tensor: Tensor) -> bool:
        return id(tensor) not in self._produced


def _stack() -> List[Tape]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


def active_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


def record(op: str, inputs: Sequence[Tensor], output_data: np.ndarray, backward: BackwardFn) -> Tensor:
    """
    Wrap ``output_data`` as a Tensor and record the node when a tape is
    active and any input needs gradients.
    """
    inputs = tuple(inputs)
    needs = any(t.requires_grad for t in inputs)
    tape = active_tape()
    out = Tensor(output_data, requires_grad=needs and tape is not None)
    if out.requires_grad:
        tape.record(Node(op, inputs, out, backward))
    return out
