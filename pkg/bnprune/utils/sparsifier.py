"""
Sparsifier - SGD training where batch-norm scales of prunable layers take ISTA steps
"""
from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, NamedTuple, Optional
import math
import logging

import numpy as np

from bnprune.config import AugmentConfig, IstaConfig, settings
from bnprune.exceptions import ConfigError, DivergenceError, NonFiniteGradientError, ShapeError
from bnprune.utils import ops
from bnprune.utils.autodiff import Tape, Tensor
from bnprune.utils.datasets import Dataset, stream_batches
from bnprune.utils.monitor import TrainMonitor
from bnprune.utils.netgraph import NetworkGraph, consumers, forward, moving_stat_updates, param_key, penalty_lambda

logger = logging.getLogger(__name__)

ALPHA_CHOICES = (0.001, 0.01, 0.1, 1.0)


def prox(x: Any, eta: float) -> np.ndarray:
    """Soft threshold: max(|x| - eta, 0) * sign(x), exact +0.0 inside the band"""
    if eta < 0:
        raise ValueError(f"prox threshold must be >= 0, got {eta}")
    x = np.asarray(x)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    shrunk = x - np.sign(x) * eta
    return np.where(np.abs(x) <= eta, 0.0, shrunk).astype(x.dtype, copy=False)[()]


def ista_step(gamma: np.ndarray, grad: np.ndarray, mu: float, lambda_l: float, rho: float) -> np.ndarray:
    """gamma_{t+1} = prox(gamma_t - mu * grad, mu * rho * lambda_l)"""
    gamma = np.asarray(gamma)
    grad = np.asarray(grad)
    if gamma.shape != grad.shape:
        raise ShapeError(f"ista_step: gamma {gamma.shape} and gradient {grad.shape} differ")
    if mu <= 0:
        raise ValueError(f"Learning rate must be > 0, got {mu}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError("ista_step: gradient holds non-finite values")
    return prox(gamma - mu * grad, mu * rho * lambda_l)


def plain_sgd_step(param: np.ndarray, grad: np.ndarray, mu: float) -> np.ndarray:
    return param - mu * grad


def rescale_gamma_w(graph: NetworkGraph, alpha: float) -> NetworkGraph:
    """Scale gamma and beta of prunable layers by alpha and their consumers' kernels by 1/alpha"""
    if not alpha > 0:
        raise ConfigError(f"Rescaling factor alpha must be > 0, got {alpha}")
    if alpha == 1:
        return graph
    updates: Dict[str, np.ndarray] = {}
    for name in graph.prunable_layers():
        for field_name in ("gamma", "beta"):
            key = param_key(name, field_name)
            updates[key] = graph.params[key] * alpha
        for consumer in consumers(graph, name):
            key = param_key(consumer, "kernel")
            updates[key] = updates.get(key, graph.params[key]) / alpha
    return graph.with_params(updates)


@dataclass
class GammaState:
    """Batch-norm scales of the prunable layers with their penalty weights"""

    gammas: Dict[str, np.ndarray]
    lambdas: Dict[str, float]

    @classmethod
    def from_graph(cls, graph: NetworkGraph, lambdas: Optional[Mapping[str, float]] = None) -> "GammaState":
        names = graph.prunable_layers()
        if lambdas is None:
            lambdas = {name: penalty_lambda(graph, name) for name in names}
        return cls({name: graph.params[param_key(name, "gamma")] for name in names}, dict(lambdas))

    def penalties(self, mu: float, rho: float) -> Dict[str, float]:
        """Per-layer threshold mu * rho * lambda"""
        return {name: mu * rho * lam for name, lam in self.lambdas.items()}

    def zero_mask(self) -> Dict[str, np.ndarray]:
        return {name: gamma == 0 for name, gamma in self.gammas.items()}

    def sparsity(self) -> float:
        total = sum(g.size for g in self.gammas.values())
        if total == 0:
            return 0.0
        return sum(int(np.count_nonzero(g == 0)) for g in self.gammas.values()) / total

    def lasso(self, rho: float) -> float:
        return float(rho * sum(self.lambdas[n] * np.abs(g).sum(dtype=np.float64) for n, g in self.gammas.items()))


class ParameterAverager:
    """Exponential moving average of parameters with a warm-up on the decay"""

    def __init__(self, params: Mapping[str, np.ndarray], decay: float, keys: List[str]):
        self.decay = decay
        self.shadow = {key: np.array(params[key], copy=True) for key in keys}

    def update(self, params: Mapping[str, np.ndarray], step: int) -> None:
        decay = min(self.decay, (1.0 + step) / (10.0 + step))
        for key, value in self.shadow.items():
            self.shadow[key] = decay * value + (1.0 - decay) * params[key]


class TrainResult(NamedTuple):
    graph: NetworkGraph
    monitor: TrainMonitor
    ema: Dict[str, np.ndarray]
    steps: int
    converged: bool


def _snapshot(graph: NetworkGraph, params: Mapping[str, np.ndarray]) -> NetworkGraph:
    return graph.replace(params=params)


def train(
    graph: NetworkGraph,
    dataset: Dataset,
    config: IstaConfig,
    seed: int = 0,
    augment_config: Optional[AugmentConfig] = None,
    monitor: Optional[TrainMonitor] = None,
) -> TrainResult:
    """SGD on every trainable parameter; gammas of prunable layers take ISTA steps instead

    With ``use_ista=False`` the gammas take plain SGD steps too, which gives the
    reference trajectory. Stops when loss, sparsity and lasso all plateau or at
    ``max_steps``.
    """
    rng = np.random.default_rng(seed)
    prunable = graph.prunable_layers() if config.use_ista else []
    if config.sparsifies and not prunable:
        logger.warning("ISTA requested but the graph has no prunable layers")
    lambdas = {name: penalty_lambda(graph, name) for name in graph.prunable_layers()}
    ista_keys = {param_key(name, "gamma"): name for name in prunable}

    trainable = graph.trainable_keys()
    decayed = {key for key in trainable if key.endswith("/kernel")}
    params: Dict[str, np.ndarray] = {key: np.array(value, copy=True) for key, value in graph.params.items()}
    velocity: Dict[str, np.ndarray] = {}

    averager = None
    if config.ema_decay is not None:
        # Prunable gammas stay out of the average so exact zeros survive
        frozen = {param_key(name, "gamma") for name in lambdas}
        averaged = [key for key in trainable if key not in frozen]
        averager = ParameterAverager(params, config.ema_decay, averaged)

    steps_per_epoch = config.steps_per_epoch or max(1, math.ceil(len(dataset) / config.batch_size))
    monitor = monitor or TrainMonitor(config.plateau_window, config.plateau_tolerance)
    if augment_config is not None and not augment_config.active:
        augment_config = None
    batches = stream_batches(dataset, config.batch_size, rng, augment_config, dataset.stats)
    first_epoch = (monitor.last.epoch + 1) if monitor.last else 0

    logger.info(
        f"Training {len(trainable)} tensors, {len(prunable)} ISTA layers, "
        f"{steps_per_epoch} steps/epoch, max {config.max_steps} steps"
    )

    chance = math.log(max(2, graph.classifier().channels))
    bound: Optional[float] = None
    step, epoch, converged = 0, first_epoch, False
    rejected = 0
    last_good = dict(params)
    while step < config.max_steps:
        losses: List[float] = []
        for _ in range(steps_per_epoch):
            if step >= config.max_steps:
                break
            images, labels = next(batches)
            tensors = {key: Tensor(value, requires_grad=key in trainable) for key, value in params.items()}
            with Tape() as tape:
                result = forward(graph, images, "training", tensors)
                loss = ops.softmax_cross_entropy(result.logits, labels)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise DivergenceError(
                    f"Loss became non-finite at step {step}",
                    last_good=_snapshot(graph, last_good),
                    history=monitor,
                )
            if bound is None:
                bound = config.divergence_factor * max(chance, loss_value)
            elif loss_value > bound:
                raise DivergenceError(
                    f"Loss {loss_value:.4g} exceeded the divergence bound {bound:.4g} at step {step}",
                    last_good=_snapshot(graph, last_good),
                    history=monitor,
                )

            grads = tape.backward(loss)
            grad_of = {key: grads.get(tensors[key]) for key in trainable}
            if not all(g is None or np.all(np.isfinite(g)) for g in grad_of.values()):
                logger.warning(f"Rejected step {step}: non-finite gradient")
                rejected += 1
                step += 1
                if rejected >= steps_per_epoch:
                    raise DivergenceError(
                        f"Gradients stayed non-finite for {rejected} consecutive steps",
                        last_good=_snapshot(graph, last_good),
                        history=monitor,
                    )
                continue

            rejected = 0
            last_good = dict(params)
            mu = config.lr_at(step)
            rho = config.rho_at(step)
            for key in trainable:
                grad = grad_of[key]
                if grad is None:
                    grad = np.zeros_like(params[key])
                if key in ista_keys:
                    params[key] = ista_step(params[key], grad, mu, lambdas[ista_keys[key]], rho)
                    continue
                if key in decayed and config.weight_decay:
                    grad = grad + config.weight_decay * params[key]
                if config.momentum:
                    velocity[key] = config.momentum * velocity.get(key, 0.0) + grad
                    grad = velocity[key]
                params[key] = plain_sgd_step(params[key], grad, mu)
            params.update(moving_stat_updates(result.moving_stats))
            if averager is not None:
                averager.update(params, step)

            losses.append(loss_value)
            if settings.LOG_EVERY_STEPS and step % settings.LOG_EVERY_STEPS == 0:
                logger.debug(f"step {step}: loss={loss_value:.4f} lr={mu:.6g} rho={rho:.6g}")
            step += 1

        if not losses:
            continue
        state = GammaState({n: params[param_key(n, "gamma")] for n in lambdas}, lambdas)
        rho_now = config.rho_at(step - 1)
        monitor.record(
            epoch,
            float(np.mean(losses)),
            state.sparsity(),
            state.lasso(rho_now),
            config.lr_at(step - 1),
        )
        epoch += 1
        if config.stop_on_plateau and step >= config.warmup_steps and monitor.plateaued():
            converged = True
            logger.info(f"Plateau reached after {step} steps")
            break

    ema = dict(averager.shadow) if averager is not None else {}
    return TrainResult(_snapshot(graph, params), monitor, ema, step, converged)


def averaged_graph(graph: NetworkGraph, ema: Mapping[str, np.ndarray]) -> NetworkGraph:
    """Graph with EMA values substituted where they exist and still fit"""
    updates = {key: value for key, value in ema.items() if key in graph.params and graph.params[key].shape == value.shape}
    return graph.with_params(updates) if updates else graph


def suggest_alpha(graph: NetworkGraph, mu: float, rho: float, pretrained: Optional[bool] = None) -> float:
    """Pick alpha so rescaled gammas sit near 100 * mu * lambda * rho, snapped to a decade"""
    names = graph.prunable_layers()
    gammas = {name: graph.params[param_key(name, "gamma")] for name in names}
    fresh = all(np.all(g == 1) for g in gammas.values())
    if pretrained is False or (pretrained is None and fresh) or rho <= 0:
        return 1.0

    candidates = []
    for name, gamma in gammas.items():
        magnitude = float(np.mean(np.abs(gamma)))
        if magnitude == 0:
            logger.info(f"Layer {name} has all-zero gamma; excluded from alpha suggestion")
            continue
        candidates.append(100.0 * mu * penalty_lambda(graph, name) * rho / magnitude)
    if not candidates:
        return 1.0

    target = float(np.exp(np.mean(np.log(candidates))))
    return min(ALPHA_CHOICES, key=lambda choice: abs(math.log10(choice) - math.log10(target)))
