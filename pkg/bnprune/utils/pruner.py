"""
Pruner - drop channels whose batch-norm scale is exactly zero and fold their
constant output into the layers that read them
"""
from typing import Dict, List, Mapping, Optional
from pathlib import Path
import csv
import logging

import numpy as np
from pydantic import BaseModel, ConfigDict

from bnprune.exceptions import GraphError, PruneError, ShapeError
from bnprune.utils.netgraph import (
    WEIGHTED,
    NetworkGraph,
    consumer_paths,
    count_flops,
    count_layer_params,
    count_params,
    forward,
    param_key,
)

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ("layer_id", "kept", "total", "params_before", "params_after")


class PruneMask:
    """Per prunable layer: keep[k] = (gamma[k] != 0) and the dropped channels' beta"""

    def __init__(self, keep: Mapping[str, np.ndarray], beta: Mapping[str, np.ndarray]):
        self.keep = {name: np.asarray(mask, dtype=bool) for name, mask in keep.items()}
        self.beta = {name: np.asarray(beta[name]) for name in self.keep}
        for name, mask in self.keep.items():
            if mask.shape != self.beta[name].shape:
                raise ShapeError(f"Mask {mask.shape} and beta {self.beta[name].shape} differ for layer '{name}'")

    @classmethod
    def empty(cls) -> "PruneMask":
        return cls({}, {})

    @classmethod
    def from_keep(cls, graph: NetworkGraph, keep: Mapping[str, np.ndarray]) -> "PruneMask":
        """Mask with an imposed keep pattern (constants still come from the graph's beta)"""
        return cls(keep, {name: graph.params[param_key(name, "beta")] for name in keep})

    @classmethod
    def keep_first(cls, graph: NetworkGraph, counts: Mapping[str, int]) -> "PruneMask":
        keep = {}
        for name, count in counts.items():
            total = graph.layer(name).channels
            keep[name] = np.arange(total) < count
        return cls.from_keep(graph, keep)

    def constants(self, name: str, relu: bool = True) -> np.ndarray:
        """Value every position of each channel takes: ReLU(beta) past a ReLU, beta otherwise"""
        beta = self.beta[name]
        return np.maximum(beta, 0.0) if relu else beta

    def dropped(self, name: str) -> np.ndarray:
        return np.flatnonzero(~self.keep[name])

    @property
    def is_empty(self) -> bool:
        return all(mask.all() for mask in self.keep.values())

    def sparsity(self) -> float:
        total = sum(mask.size for mask in self.keep.values())
        if total == 0:
            return 0.0
        return sum(int((~mask).sum()) for mask in self.keep.values()) / total


def detect_constant_channels(graph: NetworkGraph) -> PruneMask:
    """Channels of prunable layers whose gamma is bitwise zero"""
    keep, beta = {}, {}
    for name in graph.prunable_layers():
        gamma = graph.params[param_key(name, "gamma")]
        keep[name] = gamma != 0
        beta[name] = graph.params[param_key(name, "beta")]
    mask = PruneMask(keep, beta)
    for name in keep:
        dropped = mask.dropped(name)
        if dropped.size:
            logger.info(f"Layer {name}: {dropped.size} of {keep[name].size} channels constant")
    return mask


def _absorbed_shift(kernel: np.ndarray, keep: np.ndarray, constants: np.ndarray) -> np.ndarray:
    if kernel.ndim != 4 or kernel.shape[2] != keep.shape[0]:
        raise ShapeError(f"Mask of length {keep.shape[0]} does not match kernel input channels of {kernel.shape}")
    if constants.shape != keep.shape:
        raise ShapeError(f"Constants {constants.shape} do not match mask {keep.shape}")
    dropped = ~keep
    summed = kernel.sum(axis=(0, 1))
    return constants[dropped] @ summed[dropped]


def absorb_into_bias(bias: np.ndarray, kernel: np.ndarray, keep: np.ndarray, constants: np.ndarray) -> np.ndarray:
    """b[o] + sum over dropped k of c[k] * sum_ij W[i, j, k, o]"""
    return bias + _absorbed_shift(kernel, np.asarray(keep, dtype=bool), np.asarray(constants))


def absorb_into_moving_mean(
    moving_mean: np.ndarray, kernel: np.ndarray, keep: np.ndarray, constants: np.ndarray
) -> np.ndarray:
    """mu[o] - sum over dropped k of c[k] * sum_ij W[i, j, k, o]"""
    return moving_mean - _absorbed_shift(kernel, np.asarray(keep, dtype=bool), np.asarray(constants))


def rewrite(graph: NetworkGraph, mask: PruneMask) -> NetworkGraph:
    """Remove dropped channels and absorb their constants into every consumer

    Exact when consumers use valid padding; with same padding the border
    positions differ and the network needs fine-tuning.
    """
    params: Dict[str, np.ndarray] = dict(graph.params)
    channels: Dict[str, int] = {}
    approximate: List[str] = []

    for name, keep in mask.keep.items():
        if keep.all():
            continue
        layer = graph.layer(name)
        if not layer.prunable:
            raise PruneError(f"Layer '{name}' is not prunable")
        if keep.shape != (layer.channels,):
            raise ShapeError(f"Mask for '{name}' has {keep.shape[0]} entries, layer has {layer.channels} channels")
        if not keep.any():
            raise PruneError(
                f"Every channel of layer '{name}' has gamma == 0; the layer would vanish. Lower rho and retrain"
            )

        for consumer, relu_on_path in consumer_paths(graph, name):
            spec = graph.layer(consumer)
            kernel = params[param_key(consumer, "kernel")]
            constants = mask.constants(name, relu_on_path)
            if spec.has_batchnorm:
                key = param_key(consumer, "moving_mean")
                params[key] = absorb_into_moving_mean(params[key], kernel, keep, constants)
            else:
                key = param_key(consumer, "bias")
                params[key] = absorb_into_bias(params[key], kernel, keep, constants)
            params[param_key(consumer, "kernel")] = kernel[:, :, keep, :]
            if spec.kind == "conv" and spec.padding == "same" and spec.kernel != (1, 1):
                approximate.append(consumer)

        params[param_key(name, "kernel")] = params[param_key(name, "kernel")][..., keep]
        for field in ("gamma", "beta", "moving_mean", "moving_var"):
            key = param_key(name, field)
            params[key] = params[key][keep]
        channels[name] = int(keep.sum())
        logger.info(f"Pruned {name}: {layer.channels} -> {channels[name]} channels")

    if not channels:
        return graph
    if approximate:
        logger.warning(f"Same-padding consumers {sorted(set(approximate))} absorb approximately; fine-tune the result")
    layers = [
        layer.model_copy(update={"channels": channels[layer.name]}) if layer.name in channels else layer
        for layer in graph.layers
    ]
    return NetworkGraph(layers, graph.input_dims, params, graph.dtype)


def bn_equivalent_wrap(graph: NetworkGraph, name: str, calibration: np.ndarray, batch_size: int = 500) -> NetworkGraph:
    """Swap a conv's bias for a batch norm that reproduces it

    gamma = sqrt(var + eps), beta = b + mean, moving stats = (mean, var), where
    mean and var are the bias-free conv output moments over the calibration images.
    """
    layer = graph.layer(name)
    if layer.kind not in WEIGHTED or layer.has_batchnorm:
        raise GraphError(f"Layer '{name}' must be a conv/dense layer without batch norm")
    if layer.name == graph.classifier().name:
        raise GraphError(f"Layer '{name}' is the classifier and stays without batch norm")
    calibration = np.asarray(calibration)
    if calibration.ndim != 4 or calibration.shape[0] == 0:
        raise PruneError("bn_equivalent_wrap needs a non-empty calibration set")

    bias = graph.params[param_key(name, "bias")].astype(np.float64)
    outputs = [
        forward(graph, calibration[start:start + batch_size], record_activations=True).activations[name]
        for start in range(0, calibration.shape[0], batch_size)
    ]
    centred = np.concatenate(outputs, axis=0).astype(np.float64) - bias
    mean = centred.mean(axis=(0, 1, 2))
    var = centred.var(axis=(0, 1, 2))

    params = dict(graph.params)
    del params[param_key(name, "bias")]
    params[param_key(name, "gamma")] = np.sqrt(var + layer.bn_epsilon)
    params[param_key(name, "beta")] = bias + mean
    params[param_key(name, "moving_mean")] = mean
    params[param_key(name, "moving_var")] = var

    prunable = graph.prunable_if_normalized(name)
    layers = [
        spec.model_copy(update={"has_batchnorm": True, "prunable": prunable}) if spec.name == name else spec
        for spec in graph.layers
    ]
    logger.info(f"Wrapped {name} in an equivalent batch norm (prunable={prunable})")
    return NetworkGraph(layers, graph.input_dims, params, graph.dtype)


class LayerCount(BaseModel):
    model_config = ConfigDict(frozen=True)

    layer_id: str
    kept: int
    total: int
    params_before: int
    params_after: int


class PruneReport(BaseModel):
    """Per-layer channel counts and whole-network params/flops before and after"""

    layers: List[LayerCount]
    params_before: int
    params_after: int
    flops_before: int
    flops_after: int
    requires_finetune: bool

    @property
    def ratio(self) -> float:
        return self.params_after / self.params_before if self.params_before else 1.0

    @property
    def flops_ratio(self) -> float:
        return self.flops_after / self.flops_before if self.flops_before else 1.0

    def row(self, layer_id: str) -> Optional[LayerCount]:
        return next((row for row in self.layers if row.layer_id == layer_id), None)

    def to_csv(self, path: Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(REPORT_COLUMNS)
            for row in self.layers:
                writer.writerow([getattr(row, column) for column in REPORT_COLUMNS])
        return path

    def render_text(self) -> str:
        width = max([len("layer")] + [len(row.layer_id) for row in self.layers])
        lines = [
            "# flops = 2 x multiply-accumulates of conv/dense layers; pooling, BN and ReLU excluded",
            f"{'layer':<{width}}  {'kept':>6}  {'total':>6}  {'params_before':>13}  {'params_after':>12}",
        ]
        for row in self.layers:
            lines.append(
                f"{row.layer_id:<{width}}  {row.kept:>6}  {row.total:>6}  {row.params_before:>13}  {row.params_after:>12}"
            )
        lines.append(f"params: {self.params_before} -> {self.params_after} (ratio {self.ratio:.4f})")
        lines.append(f"flops:  {self.flops_before} -> {self.flops_after} (ratio {self.flops_ratio:.4f})")
        if self.requires_finetune:
            lines.append("requires fine-tune: same-padding consumers absorbed approximately")
        return "\n".join(lines)


def report(before: NetworkGraph, after: NetworkGraph) -> PruneReport:
    rows = []
    requires_finetune = False
    for layer in before.weighted_layers():
        kept = after.layer(layer.name).channels
        rows.append(
            LayerCount(
                layer_id=layer.name,
                kept=kept,
                total=layer.channels,
                params_before=count_layer_params(before, layer.name),
                params_after=count_layer_params(after, layer.name),
            )
        )
        if kept < layer.channels:
            for consumer, _ in consumer_paths(before, layer.name):
                spec = before.layer(consumer)
                if spec.kind == "conv" and spec.padding == "same" and spec.kernel != (1, 1):
                    requires_finetune = True
    return PruneReport(
        layers=rows,
        params_before=count_params(before),
        params_after=count_params(after),
        flops_before=count_flops(before),
        flops_after=count_flops(after),
        requires_finetune=requires_finetune,
    )
