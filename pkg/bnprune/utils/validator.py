"""
Checkpoint validation - blob checksums and pipeline stage transitions
"""
from typing import Optional
import hashlib
import hmac
import logging

from bnprune.exceptions import CheckpointError, ConfigError

logger = logging.getLogger(__name__)

STAGES = ("baseline", "sparsified", "pruned", "finetuned")

# Stages each command accepts as input
ACCEPTED_INPUT = {
    "train": (None, "baseline", "sparsified", "pruned", "finetuned"),
    "prune": ("baseline", "sparsified", "pruned", "finetuned"),
    "finetune": ("pruned", "finetuned", "baseline", "sparsified"),
    "eval": STAGES,
    "inspect": STAGES,
}


def digest(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def validate_checksum(blob: bytes, expected: str) -> bool:
    """Constant-time comparison of the blob's SHA-256 with the recorded one"""
    try:
        return hmac.compare_digest(digest(blob), expected)
    except TypeError:
        return False


def require_checksum(blob: bytes, expected: Optional[str], source: str = "checkpoint") -> None:
    if not expected or not validate_checksum(blob, expected):
        raise CheckpointError(f"{source}: checksum mismatch, header or parameter blobs are corrupted")


def validate_stage(stage: str) -> str:
    if stage not in STAGES:
        raise CheckpointError(f"Unknown checkpoint stage '{stage}', expected one of {STAGES}")
    return stage


def check_transition(command: str, stage: Optional[str]) -> None:
    """Reject impossible stage chains; warn on legal but suspicious ones"""
    if stage is not None:
        validate_stage(stage)
    if stage not in ACCEPTED_INPUT[command]:
        raise ConfigError(f"'{command}' needs a checkpoint, got {'none' if stage is None else stage}")
    if command == "prune" and stage == "baseline":
        logger.warning("Pruning a baseline checkpoint: no ISTA training yet, the mask is likely empty")
    if command == "finetune" and stage in ("baseline", "sparsified"):
        logger.warning(f"Fine-tuning a {stage} checkpoint that was never pruned")


def next_stage(command: str, sparsifies: bool = False) -> str:
    if command == "train":
        return "sparsified" if sparsifies else "baseline"
    if command == "prune":
        return "pruned"
    if command == "finetune":
        return "finetuned"
    raise ConfigError(f"'{command}' does not produce a checkpoint")
