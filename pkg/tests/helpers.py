"""
Test helpers - finite differences and random small networks
"""
from typing import Callable, List, Optional, Sequence

import numpy as np

from bnprune.utils import ops
from bnprune.utils.autodiff import Tape, Tensor
from bnprune.utils.netgraph import GraphBuilder, NetworkGraph, param_key


def numerical_gradient(objective: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of objective() w.r.t. x, perturbing x in place"""
    grad = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        original = x[index]
        x[index] = original + h
        plus = objective()
        x[index] = original - h
        minus = objective()
        x[index] = original
        grad[index] = (plus - minus) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def gradient_errors(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], rng: np.random.Generator) -> List[float]:
    """Autodiff vs finite differences for sum(fn(*inputs) * R) with a random R"""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*tensors)
        weights = Tensor(rng.standard_normal(out.shape))
        loss = ops.sum(ops.mul(out, weights))
    grads = tape.backward(loss)

    def objective() -> float:
        return float(np.sum(fn(*[Tensor(a) for a in arrays]).data * weights.data))

    errors = []
    for array, tensor in zip(arrays, tensors):
        numeric = numerical_gradient(objective, array)
        analytic = grads.get(tensor, np.zeros_like(array))
        errors.append(relative_error(analytic, numeric))
    return errors


def randomize(graph: NetworkGraph, rng: np.random.Generator) -> NetworkGraph:
    """Non-trivial gammas, betas (both signs), moving stats and biases"""
    updates = {}
    for layer in graph.weighted_layers():
        c = layer.channels
        if layer.has_batchnorm:
            updates[param_key(layer.name, "gamma")] = rng.uniform(0.5, 1.5, c) * rng.choice([-1.0, 1.0], c)
            updates[param_key(layer.name, "beta")] = rng.normal(0.0, 1.0, c)
            updates[param_key(layer.name, "moving_mean")] = rng.normal(0.0, 0.5, c)
            updates[param_key(layer.name, "moving_var")] = rng.uniform(0.5, 2.0, c)
        else:
            updates[param_key(layer.name, "bias")] = rng.normal(0.0, 0.5, c)
    return graph.with_params(updates)


def zero_random_gammas(graph: NetworkGraph, rng: np.random.Generator, fraction: float = 0.4) -> NetworkGraph:
    """Set a random subset of prunable gammas to exactly 0, keeping one channel per layer"""
    updates = {}
    for name in graph.prunable_layers():
        gamma = np.array(graph.params[param_key(name, "gamma")])
        drop = rng.random(gamma.size) < fraction
        if drop.all():
            drop[rng.integers(gamma.size)] = False
        gamma[drop] = 0.0
        updates[param_key(name, "gamma")] = gamma
    return graph.with_params(updates)


def random_valid_net(
    rng: np.random.Generator,
    n_conv: Optional[int] = None,
    size: int = 12,
    in_channels: int = 3,
    classes: int = 3,
) -> NetworkGraph:
    """2-4 valid-padding convs, mixed BN / bias layers, pooling sometimes interposed"""
    n_conv = int(n_conv or rng.integers(2, 5))
    builder = GraphBuilder((size, size), in_channels)
    for i in range(n_conv):
        kernel = 3 if size >= 3 else 1
        batchnorm = i == 0 or bool(rng.integers(0, 2))
        builder.conv(f"conv{i}", int(rng.integers(2, 6)), kernel, batchnorm=batchnorm).relu(f"relu{i}")
        size = size - kernel + 1
        if size >= 4 and rng.random() < 0.5:
            builder.pool(f"pool{i}", 2, 2, mode=str(rng.choice(["max", "avg"])))
            size = (size - 2) // 2 + 1
    builder.dense("logits", classes, batchnorm=False).output()
    graph = builder.build(seed=int(rng.integers(1 << 30)), dtype="float64")
    return randomize(graph, rng)
