"""
Pipeline commands - train, prune, finetune, eval and inspect over checkpoints
"""
from typing import Any, Dict, List, Optional, Tuple
from pathlib import Path
import csv
import logging

import numpy as np

from bnprune.config import RunConfig, settings
from bnprune.exceptions import ConfigError, DivergenceError
from bnprune.utils.checkpoint import CheckpointAux, read_checkpoint, write_checkpoint
from bnprune.utils.datasets import Dataset, prepare_splits
from bnprune.utils.monitor import TrainMonitor, diagnose
from bnprune.utils.netgraph import (
    NetworkGraph,
    accuracy,
    build_preset,
    count_flops,
    count_params,
    param_key,
    penalty_lambda,
)
from bnprune.utils.pruner import detect_constant_channels, report, rewrite
from bnprune.utils.sparsifier import averaged_graph, rescale_gamma_w, suggest_alpha, train
from bnprune.utils.validator import check_transition, next_stage

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ("stage", "accuracy", "params", "flops", "samples")


def _load(checkpoint: Optional[Path], command: str) -> Tuple[NetworkGraph, CheckpointAux]:
    if checkpoint is None:
        raise ConfigError(f"'{command}' needs --checkpoint")
    graph, aux = read_checkpoint(checkpoint)
    check_transition(command, aux.stage)
    logger.info(f"Loaded {aux.stage} checkpoint {checkpoint}")
    return graph, aux


def _check_fit(graph: NetworkGraph, dataset: Dataset) -> None:
    expected = graph.feature_dims[graph.layers[0].name]
    if dataset.image_shape != expected:
        raise ConfigError(f"Dataset images are {dataset.image_shape} but the model expects {expected}")
    classes = graph.classifier().channels
    if dataset.num_classes > classes:
        raise ConfigError(f"Dataset has {dataset.num_classes} classes but the model predicts {classes}")


def _write_history(path: Path, monitor: TrainMonitor) -> Path:
    monitor.to_csv(path)
    logger.info(f"History written: {path}")
    return path


def _train_stage(
    command: str,
    graph: NetworkGraph,
    aux: CheckpointAux,
    config: RunConfig,
    out_dir: Path,
    train_set: Optional[Dataset] = None,
) -> Dict[str, Any]:
    """Shared body of train and finetune"""
    if train_set is None:
        train_set, _ = prepare_splits(config.dataset, graph.dtype)
    _check_fit(graph, train_set)

    ista = config.ista if command == "train" else config.finetune.to_ista()
    alpha = aux.rescale_alpha
    if command == "train" and ista.sparsifies and ista.alpha != 1:
        graph = rescale_gamma_w(graph, ista.alpha)
        alpha *= ista.alpha
        logger.info(f"Rescaled gammas by alpha={ista.alpha} (cumulative {alpha})")

    stage = next_stage(command, ista.sparsifies)
    checkpoint_path = out_dir / settings.CHECKPOINT_FILENAME
    dumped = config.model_dump(mode="json")

    try:
        result = train(graph, train_set, ista, seed=config.seed, augment_config=config.dataset.augment)
    except DivergenceError as e:
        if e.last_good is not None:
            rows = e.history.to_rows() if isinstance(e.history, TrainMonitor) else []
            write_checkpoint(checkpoint_path, e.last_good, CheckpointAux(aux.stage, config.seed, dumped, rows, alpha))
            logger.error(f"Training diverged; last good parameters saved to {checkpoint_path}")
        raise

    findings = diagnose(result.monitor, num_classes=graph.classifier().channels)
    history = result.monitor.to_rows()
    write_checkpoint(
        checkpoint_path,
        result.graph,
        CheckpointAux(stage, config.seed, dumped, history, alpha, result.ema),
    )
    _write_history(out_dir / settings.HISTORY_FILENAME, result.monitor)

    last = result.monitor.last
    return {
        "stage": stage,
        "steps": result.steps,
        "converged": result.converged,
        "sparsity": last.sparsity_fraction if last else 0.0,
        "loss": last.loss if last else None,
        "rescale_alpha": alpha,
        "warnings": [str(f) for f in findings],
        "checkpoint": str(checkpoint_path),
    }


def cmd_train(config: RunConfig, checkpoint: Optional[Path], out_dir: Path) -> Dict[str, Any]:
    """Penalties, alpha rescaling, SGD with ISTA on gammas"""
    out_dir = Path(out_dir)
    source = checkpoint or (Path(config.model.graph) if config.model.graph else None)
    if source is not None:
        graph, aux = read_checkpoint(source)
        check_transition("train", aux.stage)
        aux = aux._replace(ema={})
        train_set = None
    else:
        check_transition("train", None)
        if config.model.preset is None:
            raise ConfigError("Set model.preset or model.graph")
        train_set, _ = prepare_splits(config.dataset, config.model.dtype)
        graph = build_preset(
            config.model.preset,
            seed=config.seed,
            dtype=config.model.dtype,
            num_classes=max(train_set.num_classes, 2),
        )
        aux = CheckpointAux(stage="baseline", seed=config.seed)
    logger.info(f"Train: {count_params(graph)} params, prunable layers {graph.prunable_layers()}")
    return _train_stage("train", graph, aux, config, out_dir, train_set)


def cmd_prune(config: RunConfig, checkpoint: Optional[Path], out_dir: Path) -> Dict[str, Any]:
    """Drop zero-gamma channels, absorb constants, undo the alpha rescaling"""
    out_dir = Path(out_dir)
    graph, aux = _load(checkpoint, "prune")

    mask = detect_constant_channels(graph)
    if mask.is_empty:
        logger.warning("No gamma is exactly zero; the pruned model equals the input model")
    pruned = rewrite(graph, mask)
    if aux.rescale_alpha != 1:
        pruned = rescale_gamma_w(pruned, 1.0 / aux.rescale_alpha)
        logger.info(f"Back-rescaled by 1/alpha = {1.0 / aux.rescale_alpha}")

    summary = report(graph, pruned)
    logger.info("Prune report:\n" + summary.render_text())
    if summary.requires_finetune:
        logger.warning("Same-padding consumers were absorbed approximately; run finetune")

    checkpoint_path = write_checkpoint(
        out_dir / settings.CHECKPOINT_FILENAME,
        pruned,
        CheckpointAux("pruned", aux.seed, config.model_dump(mode="json"), aux.history, 1.0),
    )
    report_path = summary.to_csv(out_dir / settings.REPORT_FILENAME)
    return {
        "stage": "pruned",
        "sparsity": mask.sparsity(),
        "params_before": summary.params_before,
        "params_after": summary.params_after,
        "ratio": summary.ratio,
        "requires_finetune": summary.requires_finetune,
        "checkpoint": str(checkpoint_path),
        "report": str(report_path),
    }


def cmd_finetune(config: RunConfig, checkpoint: Optional[Path], out_dir: Path) -> Dict[str, Any]:
    """Plain SGD on the pruned network"""
    graph, aux = _load(checkpoint, "finetune")
    return _train_stage("finetune", graph, aux._replace(ema={}), config, Path(out_dir))


def cmd_eval(config: RunConfig, checkpoint: Optional[Path], out_dir: Path) -> Dict[str, Any]:
    """Top-1 accuracy, params and flops on the eval split"""
    out_dir = Path(out_dir)
    graph, aux = _load(checkpoint, "eval")
    _, eval_set = prepare_splits(config.dataset, graph.dtype)
    _check_fit(graph, eval_set)

    model = graph
    if config.eval.use_ema and aux.ema:
        model = averaged_graph(graph, aux.ema)
        logger.info("Evaluating averaged parameters")
    batch_size = config.eval.batch_size or settings.EVAL_BATCH_SIZE
    top1 = accuracy(model, eval_set.images, eval_set.labels, batch_size)

    metrics = {
        "stage": aux.stage,
        "accuracy": top1,
        "params": count_params(graph),
        "flops": count_flops(graph),
        "samples": len(eval_set),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / settings.METRICS_FILENAME
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(METRICS_COLUMNS)
        writer.writerow([aux.stage, repr(top1), metrics["params"], metrics["flops"], metrics["samples"]])
    logger.info(f"Eval: accuracy={top1:.4f} params={metrics['params']} flops={metrics['flops']}")
    return {**metrics, "metrics": str(path)}


def _histogram(values: np.ndarray, bins: int = 10, width: int = 40) -> List[str]:
    magnitudes = np.abs(values.astype(np.float64))
    top = magnitudes.max() if magnitudes.size and magnitudes.max() > 0 else 1.0
    counts, edges = np.histogram(magnitudes, bins=bins, range=(0.0, top))
    peak = max(int(counts.max()), 1)
    return [
        f"  [{lo:9.4g}, {hi:9.4g}) {int(n):6d} {'#' * int(round(width * n / peak))}"
        for lo, hi, n in zip(edges[:-1], edges[1:], counts)
    ]


def render_inspection(graph: NetworkGraph, aux: CheckpointAux, mu: float, rho: float) -> str:
    lines = [
        f"stage: {aux.stage}",
        f"rescale_alpha: {aux.rescale_alpha}",
        f"params: {count_params(graph)}",
        f"flops: {count_flops(graph)}",
        "",
        f"{'layer':<16} {'channels':>8} {'zeros':>6} {'mean|gamma|':>12} {'lambda':>12}",
    ]
    names = graph.prunable_layers()
    for name in names:
        gamma = graph.params[param_key(name, "gamma")]
        lines.append(
            f"{name:<16} {gamma.size:>8} {int(np.count_nonzero(gamma == 0)):>6} "
            f"{float(np.mean(np.abs(gamma))):>12.6g} {penalty_lambda(graph, name):>12.6g}"
        )
    for name in names:
        lines.append("")
        lines.append(f"|gamma| histogram for {name}:")
        lines.extend(_histogram(graph.params[param_key(name, "gamma")]))
    lines.append("")
    lines.append(f"suggested alpha (mu={mu}, rho={rho}): {suggest_alpha(graph, mu, rho)}")
    return "\n".join(lines) + "\n"


def cmd_inspect(config: RunConfig, checkpoint: Optional[Path], out_dir: Path) -> Dict[str, Any]:
    """Per-layer gamma statistics, lambda table and a suggested alpha"""
    out_dir = Path(out_dir)
    graph, aux = _load(checkpoint, "inspect")
    text = render_inspection(graph, aux, config.ista.mu0, config.ista.rho)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / settings.INSPECT_FILENAME
    path.write_text(text)
    logger.info(f"Inspection written: {path}")
    return {"stage": aux.stage, "report": str(path), "text": text}


COMMANDS = {
    "train": cmd_train,
    "prune": cmd_prune,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
}
