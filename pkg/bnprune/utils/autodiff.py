"""
Autodiff - numpy-backed tensors and a reverse-mode tape
"""
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple
import threading
import logging

import numpy as np

from bnprune.exceptions import NumericalError, ShapeError

logger = logging.getLogger(__name__)

DTYPES = (np.float32, np.float64)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Dense array with an optional gradient requirement

    Images are laid out (batch, height, width, channel).
    """

    __slots__ = ("data", "requires_grad", "name", "is_leaf")

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None, dtype: Any = None):
        array = np.asarray(data, dtype=dtype)
        if array.dtype not in DTYPES:
            array = array.astype(np.float64)
        self.data = array
        self.requires_grad = requires_grad
        self.name = name
        self.is_leaf = True

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.data)):
            raise NumericalError(f"Tensor {self.name or ''} holds non-finite values")

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def as_tensor(value: Any, dtype: Any = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


class Record(NamedTuple):
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class BatchNormParams:
    """Per-channel batch-norm state; gamma and beta are trainable tensors"""

    __slots__ = ("gamma", "beta", "moving_mean", "moving_var", "epsilon", "momentum")

    def __init__(
        self,
        gamma: Any,
        beta: Any,
        moving_mean: Any,
        moving_var: Any,
        epsilon: float = 1e-3,
        momentum: float = 0.99,
    ):
        self.gamma = as_tensor(gamma)
        self.beta = as_tensor(beta)
        self.moving_mean = np.asarray(moving_mean, dtype=self.gamma.dtype)
        self.moving_var = np.asarray(moving_var, dtype=self.gamma.dtype)
        self.epsilon = float(epsilon)
        self.momentum = float(momentum)

        channels = self.gamma.shape
        if len(channels) != 1 or any(v.shape != channels for v in (self.beta.data, self.moving_mean, self.moving_var)):
            raise ShapeError(
                f"Batch-norm vectors must share one channel length: gamma {self.gamma.shape}, "
                f"beta {self.beta.shape}, mean {self.moving_mean.shape}, var {self.moving_var.shape}"
            )
        if self.epsilon <= 0:
            raise ValueError(f"Batch-norm epsilon must be > 0, got {self.epsilon}")
        if not 0 < self.momentum < 1:
            raise ValueError(f"Batch-norm momentum must be in (0, 1), got {self.momentum}")
        if np.any(self.moving_var < 0):
            raise ValueError("Batch-norm moving variance must be >= 0")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def with_moving_stats(self, mean: np.ndarray, var: np.ndarray) -> "BatchNormParams":
        return BatchNormParams(self.gamma, self.beta, mean, var, self.epsilon, self.momentum)


_state = threading.local()


def _tape_stack() -> List["Tape"]:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Records primitive operations in execution (topological) order"""

    def __init__(self):
        self.records: List[Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        _tape_stack().pop()

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward: BackwardFn) -> None:
        self.records.append(Record(op, tuple(inputs), output, backward))

    def backward(self, loss: Tensor) -> Dict[Tensor, np.ndarray]:
        return backward(self, loss)


def record(op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn: BackwardFn) -> Tensor:
    """Attach an op output to the active tape when any input needs a gradient"""
    output.is_leaf = False
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        tape.record(op, inputs, output, backward_fn)
    return output


def backward(tape: Tape, loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Gradient of a scalar loss for every trainable leaf on the tape"""
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}

    for rec in reversed(tape.records):
        upstream = grads.pop(id(rec.output), None)
        if upstream is None:
            continue
        input_grads = rec.backward(upstream)
        for tensor, grad in zip(rec.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            if grad.shape != tensor.shape:
                raise ShapeError(f"{rec.op} backward produced {grad.shape} for input {tensor.shape}")
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + grad
            else:
                grads[key] = grad
            if tensor.is_leaf:
                leaves[key] = tensor

    return {tensor: grads[key] for key, tensor in leaves.items() if key in grads}
