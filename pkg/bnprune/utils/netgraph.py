"""
Network graph - channel-to-channel computation graph, penalties and accounting
"""
from fractions import Fraction
from types import MappingProxyType
from typing import Any, Dict, List, Literal, Mapping, NamedTuple, Optional, Sequence, Tuple
import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from bnprune.exceptions import GraphError, ShapeError
from bnprune.utils import ops
from bnprune.utils.autodiff import BatchNormParams, Tensor

logger = logging.getLogger(__name__)

LayerKind = Literal["input", "conv", "dense", "pool", "relu", "add_join", "output"]
WEIGHTED = ("conv", "dense")
PASS_THROUGH = ("relu", "pool", "add_join")
PRESETS = ("convnet_table1", "resnet20", "mnist_small")

BN_FIELDS = ("gamma", "beta", "moving_mean", "moving_var")


class LayerSpec(BaseModel):
    """One node of the graph

    ``channels`` is the output channel count; ``kernel`` is (k_h, k_w).
    A dense layer's kernel is its full input receptive field.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    kind: LayerKind
    inputs: Tuple[str, ...] = ()
    channels: int = Field(0, ge=0)
    kernel: Tuple[int, int] = (1, 1)
    stride: int = Field(1, ge=1)
    padding: Literal["valid", "same"] = "valid"
    has_batchnorm: bool = False
    prunable: bool = False
    pool_mode: Literal["max", "avg"] = "max"
    bn_epsilon: float = Field(1e-3, gt=0)
    bn_momentum: float = Field(0.99, gt=0, lt=1)


def param_key(layer: str, field: str) -> str:
    return f"{layer}/{field}"


def _successor_map(layers: Sequence[LayerSpec]) -> Dict[str, List[str]]:
    succ: Dict[str, List[str]] = {layer.name: [] for layer in layers}
    for layer in layers:
        for src in layer.inputs:
            if src in succ:
                succ[src].append(layer.name)
    return succ


def _walk(by_name: Mapping[str, LayerSpec], succ: Mapping[str, List[str]], name: str):
    """Yield (consumer, relu_on_path, crossed_join) for weighted layers reading ``name``"""
    seen = set()
    stack = [(s, False, False) for s in reversed(succ[name])]
    while stack:
        current, relu_seen, join_seen = stack.pop()
        key = (current, relu_seen, join_seen)
        if key in seen:
            continue
        seen.add(key)
        layer = by_name[current]
        if layer.kind in WEIGHTED:
            yield current, relu_seen, join_seen
        elif layer.kind in PASS_THROUGH:
            nxt_relu = relu_seen or layer.kind == "relu"
            nxt_join = join_seen or layer.kind == "add_join"
            stack.extend((s, nxt_relu, nxt_join) for s in reversed(succ[current]))


def _reaches_join(by_name: Mapping[str, LayerSpec], succ: Mapping[str, List[str]], name: str) -> bool:
    stack = list(succ[name])
    while stack:
        layer = by_name[stack.pop()]
        if layer.kind == "add_join":
            return True
        if layer.kind in ("relu", "pool"):
            stack.extend(succ[layer.name])
    return False


def _prunable_shape(
    by_name: Mapping[str, LayerSpec], succ: Mapping[str, List[str]], layer: LayerSpec, classifier: str
) -> bool:
    """Non-classifier conv/dense with consumers and no path into a residual sum"""
    if layer.kind not in WEIGHTED or layer.name == classifier:
        return False
    walked = list(_walk(by_name, succ, layer.name))
    return bool(walked) and not _reaches_join(by_name, succ, layer.name)


class NetworkGraph:
    """Immutable network: ordered layers plus their parameter arrays"""

    def __init__(
        self,
        layers: Sequence[LayerSpec],
        input_dims: Tuple[int, int],
        params: Mapping[str, np.ndarray],
        dtype: str = "float64",
    ):
        if dtype not in ("float32", "float64"):
            raise GraphError(f"dtype must be float32 or float64, got '{dtype}'")
        self.layers: Tuple[LayerSpec, ...] = tuple(layers)
        self.input_dims = (int(input_dims[0]), int(input_dims[1]))
        self.dtype = dtype

        frozen = {}
        for key, value in params.items():
            array = np.array(value, dtype=dtype, copy=True)
            array.setflags(write=False)
            frozen[key] = array
        self.params: Mapping[str, np.ndarray] = MappingProxyType(frozen)

        self._by_name: Dict[str, LayerSpec] = {}
        for layer in self.layers:
            if layer.name in self._by_name:
                raise GraphError(f"Duplicate layer name '{layer.name}'")
            self._by_name[layer.name] = layer
        self._succ = _successor_map(self.layers)
        self.feature_dims: Dict[str, Tuple[int, int, int]] = {}
        self.validate()

    # ------------------------------------------------------------------ access

    def layer(self, name: str) -> LayerSpec:
        try:
            return self._by_name[name]
        except KeyError:
            raise GraphError(f"Unknown layer '{name}'")

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def successors(self, name: str) -> List[str]:
        self.layer(name)
        return list(self._succ[name])

    def weighted_layers(self) -> List[LayerSpec]:
        return [layer for layer in self.layers if layer.kind in WEIGHTED]

    def prunable_layers(self) -> List[str]:
        return [layer.name for layer in self.layers if layer.prunable]

    def classifier(self) -> LayerSpec:
        return self.weighted_layers()[-1]

    def input_channels(self, name: str) -> int:
        """Channels the layer's kernel operates over"""
        layer = self.layer(name)
        if not layer.inputs:
            raise GraphError(f"Layer '{name}' has no input")
        return self.feature_dims[layer.inputs[0]][2]

    def batchnorm_params(self, name: str, tensors: Optional[Mapping[str, Tensor]] = None) -> BatchNormParams:
        layer = self.layer(name)
        if not layer.has_batchnorm:
            raise GraphError(f"Layer '{name}' is not batch-normalized")

        def pick(field: str):
            key = param_key(name, field)
            if tensors is not None and key in tensors:
                return tensors[key]
            return self.params[key]

        moving_mean, moving_var = pick("moving_mean"), pick("moving_var")
        return BatchNormParams(
            pick("gamma"),
            pick("beta"),
            moving_mean.data if isinstance(moving_mean, Tensor) else moving_mean,
            moving_var.data if isinstance(moving_var, Tensor) else moving_var,
            layer.bn_epsilon,
            layer.bn_momentum,
        )

    def prunable_if_normalized(self, name: str) -> bool:
        """Whether a batch-normalized version of this layer could be pruned"""
        layer = self.layer(name)
        return _prunable_shape(self._by_name, self._succ, layer, self.weighted_layers()[-1].name)

    def trainable_keys(self) -> List[str]:
        keys = []
        for layer in self.weighted_layers():
            keys.append(param_key(layer.name, "kernel"))
            if layer.has_batchnorm:
                keys += [param_key(layer.name, "gamma"), param_key(layer.name, "beta")]
            else:
                keys.append(param_key(layer.name, "bias"))
        return keys

    # ------------------------------------------------------------ derivation

    def replace(
        self,
        layers: Optional[Sequence[LayerSpec]] = None,
        params: Optional[Mapping[str, np.ndarray]] = None,
    ) -> "NetworkGraph":
        return NetworkGraph(
            self.layers if layers is None else layers,
            self.input_dims,
            self.params if params is None else params,
            self.dtype,
        )

    def with_params(self, updates: Mapping[str, np.ndarray]) -> "NetworkGraph":
        merged = dict(self.params)
        for key, value in updates.items():
            if key not in merged:
                raise GraphError(f"Unknown parameter '{key}'")
            merged[key] = value
        return self.replace(params=merged)

    def describe(self) -> Dict[str, Any]:
        return {
            "input_dims": list(self.input_dims),
            "dtype": self.dtype,
            "layers": [layer.model_dump(mode="json") for layer in self.layers],
        }

    @classmethod
    def from_description(cls, description: Mapping[str, Any], params: Mapping[str, np.ndarray]) -> "NetworkGraph":
        try:
            layers = [LayerSpec.model_validate(item) for item in description["layers"]]
            return cls(layers, tuple(description["input_dims"]), params, description.get("dtype", "float64"))
        except (KeyError, TypeError, ValueError) as e:
            raise GraphError(f"Invalid graph description: {e}")

    # ------------------------------------------------------------ validation

    def _expect_param(self, key: str, shape: Tuple[int, ...]) -> None:
        if key not in self.params:
            raise GraphError(f"Missing parameter '{key}'")
        if self.params[key].shape != shape:
            raise GraphError(f"Parameter '{key}' has shape {self.params[key].shape}, expected {shape}")

    def validate(self) -> None:
        """Check ordering, reachability, dims arithmetic, parameters and prunability"""
        if not self.layers or self.layers[0].kind != "input":
            raise GraphError("The first layer must be the input layer")
        dims = self.feature_dims
        position = {layer.name: i for i, layer in enumerate(self.layers)}
        expected_params = set()

        for i, layer in enumerate(self.layers):
            for src in layer.inputs:
                if src not in position or position[src] >= i:
                    raise GraphError(f"Layer '{layer.name}' reads '{src}' which is not an earlier layer")

            if layer.kind == "input":
                if i != 0 or layer.inputs:
                    raise GraphError("Only the first layer may be an input layer")
                dims[layer.name] = (*self.input_dims, layer.channels)
                continue

            n_inputs = 2 if layer.kind == "add_join" else 1
            if len(layer.inputs) != n_inputs:
                raise GraphError(f"Layer '{layer.name}' ({layer.kind}) needs {n_inputs} input(s), has {len(layer.inputs)}")
            h, w, c = dims[layer.inputs[0]]

            try:
                if layer.kind == "conv":
                    kh, kw = layer.kernel
                    dims[layer.name] = (
                        ops.output_size(h, kh, layer.stride, layer.padding),
                        ops.output_size(w, kw, layer.stride, layer.padding),
                        layer.channels,
                    )
                elif layer.kind == "dense":
                    if layer.kernel != (h, w):
                        raise GraphError(
                            f"Dense layer '{layer.name}' kernel {layer.kernel} must cover its input map {(h, w)}"
                        )
                    dims[layer.name] = (1, 1, layer.channels)
                elif layer.kind == "pool":
                    k = layer.kernel[0]
                    dims[layer.name] = (
                        ops.output_size(h, k, layer.stride, layer.padding),
                        ops.output_size(w, k, layer.stride, layer.padding),
                        c,
                    )
                elif layer.kind == "add_join":
                    h2, w2, c2 = dims[layer.inputs[1]]
                    if (-(-h // layer.stride), -(-w // layer.stride)) != (h2, w2) or c > c2:
                        raise GraphError(
                            f"add_join '{layer.name}' cannot align {(h, w, c)} with {(h2, w2, c2)} at stride {layer.stride}"
                        )
                    dims[layer.name] = (h2, w2, c2)
                elif layer.kind == "output":
                    if (h, w) != (1, 1):
                        raise GraphError(f"Output layer '{layer.name}' needs a 1x1 map, got {(h, w)}")
                    dims[layer.name] = (1, 1, c)
                else:
                    dims[layer.name] = (h, w, c)
            except ShapeError as e:
                raise GraphError(f"Layer '{layer.name}': {e}")

            if layer.kind in WEIGHTED:
                if layer.channels < 1:
                    raise GraphError(f"Layer '{layer.name}' has no output channels")
                kh, kw = layer.kernel
                kernel_key = param_key(layer.name, "kernel")
                self._expect_param(kernel_key, (kh, kw, c, layer.channels))
                expected_params.add(kernel_key)
                fields = BN_FIELDS if layer.has_batchnorm else ("bias",)
                for field in fields:
                    key = param_key(layer.name, field)
                    self._expect_param(key, (layer.channels,))
                    expected_params.add(key)

        extra = set(self.params) - expected_params
        if extra:
            raise GraphError(f"Parameters without a layer: {sorted(extra)}")

        weighted = self.weighted_layers()
        if not weighted:
            raise GraphError("Graph has no conv/dense layer")
        if weighted[-1].has_batchnorm:
            raise GraphError(f"The classifier '{weighted[-1].name}' must not be batch-normalized")

        for name in self.prunable_layers():
            layer = self.layer(name)
            if layer.kind not in WEIGHTED or not layer.has_batchnorm:
                raise GraphError(f"Prunable layer '{name}' must be a batch-normalized conv/dense layer")
            walked = list(_walk(self._by_name, self._succ, name))
            if not walked:
                raise GraphError(f"Prunable layer '{name}' has no consumers")
            if any(join for _, _, join in walked) or _reaches_join(self._by_name, self._succ, name):
                raise GraphError(f"Prunable layer '{name}' feeds a residual sum")


# ---------------------------------------------------------------- analysis


def consumers(graph: NetworkGraph, name: str) -> List[str]:
    """Conv/dense layers reading layer ``name``'s channels, in layer order"""
    graph.layer(name)
    found = {consumer for consumer, _, _ in _walk(graph._by_name, graph._succ, name)}
    return [layer.name for layer in graph.layers if layer.name in found]


def consumer_paths(graph: NetworkGraph, name: str) -> List[Tuple[str, bool]]:
    """(consumer, whether a ReLU sits between producer and consumer)"""
    paths = {}
    for consumer, relu_seen, _ in _walk(graph._by_name, graph._succ, name):
        if paths.setdefault(consumer, relu_seen) != relu_seen:
            raise GraphError(f"Layer '{name}' reaches '{consumer}' both with and without a ReLU")
    return [(layer.name, paths[layer.name]) for layer in graph.layers if layer.name in paths]


def penalty_numerator(graph: NetworkGraph, name: str) -> int:
    """Kernel fan-in, plus kernel area x channels of every consumer, plus the output map area"""
    layer = graph.layer(name)
    if layer.kind not in WEIGHTED:
        raise GraphError(f"Layer '{name}' is not a conv/dense layer")
    downstream = consumers(graph, name)
    if not downstream:
        raise GraphError(f"Layer '{name}' has no consumers; pruning it would sever the graph")
    kh, kw = layer.kernel
    total = kh * kw * graph.input_channels(name)
    for consumer in downstream:
        spec = graph.layer(consumer)
        total += spec.kernel[0] * spec.kernel[1] * spec.channels
    fh, fw, _ = graph.feature_dims[name]
    return total + fh * fw


def penalty_lambda(graph: NetworkGraph, name: str, exact: bool = False):
    """Per-channel memory cost of the layer relative to the input image, the ISTA penalty weight"""
    ih, iw = graph.input_dims
    value = Fraction(penalty_numerator(graph, name), ih * iw)
    return value if exact else float(value)


def count_layer_params(graph: NetworkGraph, name: str) -> int:
    """kernel + bias (no BN) or kernel + (gamma, beta, mean, var) (BN)"""
    layer = graph.layer(name)
    if layer.kind not in WEIGHTED:
        return 0
    kh, kw = layer.kernel
    total = kh * kw * graph.input_channels(name) * layer.channels
    return total + (4 if layer.has_batchnorm else 1) * layer.channels


def count_params(graph: NetworkGraph) -> int:
    return sum(count_layer_params(graph, layer.name) for layer in graph.weighted_layers())


def count_layer_flops(graph: NetworkGraph, name: str) -> int:
    """2 flops per multiply-accumulate of the layer's forward pass"""
    layer = graph.layer(name)
    if layer.kind not in WEIGHTED:
        return 0
    oh, ow, cout = graph.feature_dims[name]
    kh, kw = layer.kernel
    return 2 * oh * ow * kh * kw * graph.input_channels(name) * cout


def count_flops(graph: NetworkGraph) -> int:
    return sum(count_layer_flops(graph, layer.name) for layer in graph.weighted_layers())


# ---------------------------------------------------------------- execution


class ForwardResult(NamedTuple):
    logits: Tensor
    moving_stats: Dict[str, Tuple[np.ndarray, np.ndarray]]
    activations: Dict[str, np.ndarray]


def forward(
    graph: NetworkGraph,
    images: Any,
    mode: str = "inference",
    tensors: Optional[Mapping[str, Tensor]] = None,
    record_activations: bool = False,
) -> ForwardResult:
    """Run the graph; in training mode also return updated BN moving statistics"""
    if tensors is None:
        tensors = {key: Tensor(value) for key, value in graph.params.items()}
    images = np.asarray(images, dtype=graph.dtype)
    expected = graph.feature_dims[graph.layers[0].name]
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ShapeError(f"Graph expects images of shape (N, {expected[0]}, {expected[1]}, {expected[2]}), got {images.shape}")

    values: Dict[str, Tensor] = {}
    stats: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
    logits: Optional[Tensor] = None
    n = images.shape[0]

    for layer in graph.layers:
        kind = layer.kind
        if kind == "input":
            out = Tensor(images)
        else:
            x = values[layer.inputs[0]]
            if kind == "conv":
                out = ops.conv2d(x, tensors[param_key(layer.name, "kernel")], layer.stride, layer.padding)
                if not layer.has_batchnorm:
                    out = ops.bias_add(out, tensors[param_key(layer.name, "bias")])
            elif kind == "dense":
                flat = ops.reshape(x, (n, -1))
                weight = ops.reshape(tensors[param_key(layer.name, "kernel")], (-1, layer.channels))
                bias = None if layer.has_batchnorm else tensors[param_key(layer.name, "bias")]
                out = ops.reshape(ops.dense(flat, weight, bias), (n, 1, 1, layer.channels))
            elif kind == "relu":
                out = ops.relu(x)
            elif kind == "pool":
                pool = ops.maxpool if layer.pool_mode == "max" else ops.avgpool
                out = pool(x, layer.kernel[0], layer.stride, layer.padding)
            elif kind == "add_join":
                residual = values[layer.inputs[1]]
                if x.shape != residual.shape:
                    x = ops.shortcut(x, layer.stride, residual.shape[3])
                out = ops.add(x, residual)
            else:
                out = ops.reshape(x, (n, x.shape[3]))
                logits = out

            if kind in WEIGHTED and layer.has_batchnorm:
                normed = ops.batchnorm(out, graph.batchnorm_params(layer.name, tensors), mode)
                out = normed.output
                if mode == "training":
                    stats[layer.name] = (normed.params.moving_mean, normed.params.moving_var)
        values[layer.name] = out

    if logits is None:
        raise GraphError("Graph has no output layer")
    activations = {name: t.data for name, t in values.items()} if record_activations else {}
    return ForwardResult(logits, stats, activations)


def moving_stat_updates(stats: Mapping[str, Tuple[np.ndarray, np.ndarray]]) -> Dict[str, np.ndarray]:
    updates = {}
    for name, (mean, var) in stats.items():
        updates[param_key(name, "moving_mean")] = mean
        updates[param_key(name, "moving_var")] = var
    return updates


def predict(graph: NetworkGraph, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    """Inference-mode logits, batched"""
    chunks = [
        forward(graph, images[start:start + batch_size]).logits.data
        for start in range(0, images.shape[0], batch_size)
    ]
    return np.concatenate(chunks, axis=0)


def accuracy(graph: NetworkGraph, images: np.ndarray, labels: np.ndarray, batch_size: int = 500) -> float:
    """Top-1 accuracy"""
    logits = predict(graph, images, batch_size)
    return float(np.mean(logits.argmax(axis=1) == np.asarray(labels)))


# ---------------------------------------------------------------- building


class GraphBuilder:
    """Assembles a graph layer by layer, tracking feature-map dims"""

    def __init__(self, input_dims: Tuple[int, int], channels: int, name: str = "input"):
        self.input_dims = tuple(input_dims)
        self._layers: List[Dict[str, Any]] = [dict(name=name, kind="input", channels=channels)]
        self._dims: Dict[str, Tuple[int, int, int]] = {name: (*self.input_dims, channels)}

    @property
    def last(self) -> str:
        return self._layers[-1]["name"]

    def dims(self, name: Optional[str] = None) -> Tuple[int, int, int]:
        return self._dims[name or self.last]

    def _add(self, spec: Dict[str, Any], dims: Tuple[int, int, int]) -> "GraphBuilder":
        if spec["name"] in self._dims:
            raise GraphError(f"Duplicate layer name '{spec['name']}'")
        self._layers.append(spec)
        self._dims[spec["name"]] = dims
        return self

    def conv(
        self,
        name: str,
        channels: int,
        kernel: int,
        stride: int = 1,
        padding: str = "valid",
        batchnorm: bool = True,
        inputs: Optional[str] = None,
        prunable: Optional[bool] = None,
    ) -> "GraphBuilder":
        src = inputs or self.last
        h, w, _ = self._dims[src]
        dims = (
            ops.output_size(h, kernel, stride, padding),
            ops.output_size(w, kernel, stride, padding),
            channels,
        )
        spec = dict(name=name, kind="conv", inputs=(src,), channels=channels, kernel=(kernel, kernel),
                    stride=stride, padding=padding, has_batchnorm=batchnorm, prunable=prunable)
        return self._add(spec, dims)

    def dense(
        self,
        name: str,
        units: int,
        batchnorm: bool = True,
        inputs: Optional[str] = None,
        prunable: Optional[bool] = None,
    ) -> "GraphBuilder":
        src = inputs or self.last
        h, w, _ = self._dims[src]
        spec = dict(name=name, kind="dense", inputs=(src,), channels=units, kernel=(h, w),
                    has_batchnorm=batchnorm, prunable=prunable)
        return self._add(spec, (1, 1, units))

    def relu(self, name: str, inputs: Optional[str] = None) -> "GraphBuilder":
        src = inputs or self.last
        return self._add(dict(name=name, kind="relu", inputs=(src,)), self._dims[src])

    def pool(
        self,
        name: str,
        kernel: int,
        stride: int,
        padding: str = "valid",
        mode: str = "max",
        inputs: Optional[str] = None,
    ) -> "GraphBuilder":
        src = inputs or self.last
        h, w, c = self._dims[src]
        dims = (ops.output_size(h, kernel, stride, padding), ops.output_size(w, kernel, stride, padding), c)
        spec = dict(name=name, kind="pool", inputs=(src,), kernel=(kernel, kernel), stride=stride,
                    padding=padding, pool_mode=mode)
        return self._add(spec, dims)

    def add(self, name: str, shortcut: str, residual: str) -> "GraphBuilder":
        h, _, _ = self._dims[shortcut]
        rh, rw, rc = self._dims[residual]
        stride = max(1, -(-h // rh))
        spec = dict(name=name, kind="add_join", inputs=(shortcut, residual), channels=rc, stride=stride)
        return self._add(spec, (rh, rw, rc))

    def output(self, name: str = "output", inputs: Optional[str] = None) -> "GraphBuilder":
        src = inputs or self.last
        _, _, c = self._dims[src]
        return self._add(dict(name=name, kind="output", inputs=(src,), channels=c), (1, 1, c))

    def build(self, seed: int = 0, dtype: str = "float64") -> NetworkGraph:
        """Derive prunability and initialise parameters (He-normal kernels)"""
        draft = [LayerSpec(**{k: v for k, v in spec.items() if k != "prunable"}) for spec in self._layers]
        by_name = {layer.name: layer for layer in draft}
        succ = _successor_map(draft)
        weighted = [layer.name for layer in draft if layer.kind in WEIGHTED]
        if not weighted:
            raise GraphError("Graph has no conv/dense layer")

        layers = []
        for spec, layer in zip(self._layers, draft):
            prunable = spec.get("prunable")
            if prunable is None:
                prunable = layer.has_batchnorm and _prunable_shape(by_name, succ, layer, weighted[-1])
            layers.append(layer.model_copy(update={"prunable": prunable}))

        rng = np.random.default_rng(seed)
        params: Dict[str, np.ndarray] = {}
        for layer in layers:
            if layer.kind not in WEIGHTED:
                continue
            cin = self._dims[layer.inputs[0]][2]
            kh, kw = layer.kernel
            fan_in = kh * kw * cin
            params[param_key(layer.name, "kernel")] = rng.standard_normal((kh, kw, cin, layer.channels)) * np.sqrt(
                2.0 / fan_in
            )
            c = layer.channels
            if layer.has_batchnorm:
                params[param_key(layer.name, "gamma")] = np.ones(c)
                params[param_key(layer.name, "beta")] = np.zeros(c)
                params[param_key(layer.name, "moving_mean")] = np.zeros(c)
                params[param_key(layer.name, "moving_var")] = np.ones(c)
            else:
                params[param_key(layer.name, "bias")] = np.zeros(c)

        return NetworkGraph(layers, self.input_dims, params, dtype)


def _convnet_table1(builder: GraphBuilder, num_classes: int) -> GraphBuilder:
    (builder
     .conv("conv1", 96, 5, padding="same").relu("relu1").pool("pool1", 3, 2, "same")
     .conv("conv2", 192, 5, padding="same").relu("relu2").pool("pool2", 3, 2, "same")
     .conv("conv3", 192, 3, padding="same").relu("relu3").pool("pool3", 3, 2, "same")
     .dense("fc", 384).relu("relu_fc")
     .dense("logits", num_classes, batchnorm=False)
     .output())
    return builder


def _resnet20(builder: GraphBuilder, num_classes: int) -> GraphBuilder:
    builder.conv("stem", 16, 3, padding="same").relu("stem_relu")
    block_in = builder.last
    for group, width in enumerate((16, 32, 64), start=1):
        for block in range(1, 4):
            prefix = f"g{group}b{block}"
            stride = 2 if group > 1 and block == 1 else 1
            (builder
             .conv(f"{prefix}_conv1", width, 3, stride=stride, padding="same", inputs=block_in)
             .relu(f"{prefix}_relu1")
             .conv(f"{prefix}_conv2", width, 3, padding="same")
             .add(f"{prefix}_add", shortcut=block_in, residual=f"{prefix}_conv2")
             .relu(f"{prefix}_out"))
            block_in = builder.last
    builder.pool("pool", 2, 2, "valid", mode="avg").dense("logits", num_classes, batchnorm=False).output()
    return builder


def _mnist_small(builder: GraphBuilder, num_classes: int) -> GraphBuilder:
    (builder
     .conv("conv1", 16, 5).relu("relu1").pool("pool1", 2, 2)
     .conv("conv2", 32, 5).relu("relu2").pool("pool2", 2, 2)
     .dense("logits", num_classes, batchnorm=False)
     .output())
    return builder


def build_preset(name: str, seed: int = 0, dtype: str = "float32", num_classes: int = 10) -> NetworkGraph:
    """3-conv CIFAR ConvNet, ResNet-20, or the small MNIST net"""
    if name == "convnet_table1":
        builder = _convnet_table1(GraphBuilder((32, 32), 3), num_classes)
    elif name == "resnet20":
        builder = _resnet20(GraphBuilder((32, 32), 3), num_classes)
    elif name == "mnist_small":
        builder = _mnist_small(GraphBuilder((28, 28), 1), num_classes)
    else:
        raise GraphError(f"Unknown preset '{name}', choose from {PRESETS}")
    graph = builder.build(seed=seed, dtype=dtype)
    logger.info(f"Built preset {name}: {count_params(graph)} params, {count_flops(graph)} flops")
    return graph
