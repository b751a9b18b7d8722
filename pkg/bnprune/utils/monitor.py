"""
Train monitor - per-epoch loss, gamma sparsity and lasso term, plus tuning diagnostics
"""
from typing import Any, Dict, Iterable, List, NamedTuple, Optional
from pathlib import Path
import csv
import math
import logging

import numpy as np

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "loss", "sparsity_fraction", "lasso_term", "lr")

DECREASE_ALPHA = "decrease alpha"
DECREASE_RHO = "decrease rho"
DECREASE_MU_OR_RHO = "decrease mu or rho"
# Cross-entropy above this multiple of ln(classes) counts as exploding
EXPLODE_FACTOR = 10.0


class EpochRecord(NamedTuple):
    epoch: int
    loss: float
    sparsity_fraction: float
    lasso_term: float
    lr: float


class Diagnosis(NamedTuple):
    advice: str
    detail: str

    def __str__(self) -> str:
        return f"{self.detail}; {self.advice}"


class TrainMonitor:
    """Collects one record per epoch and decides when training has plateaued"""

    def __init__(self, window: int = 5, tolerance: float = 1e-3, records: Optional[Iterable[EpochRecord]] = None):
        if window < 2:
            raise ValueError(f"Plateau window must be >= 2, got {window}")
        self.window = window
        self.tolerance = tolerance
        self.records: List[EpochRecord] = list(records or [])

    def __len__(self) -> int:
        return len(self.records)

    def record(self, epoch: int, loss: float, sparsity_fraction: float, lasso_term: float, lr: float) -> EpochRecord:
        if not 0.0 <= sparsity_fraction <= 1.0:
            raise ValueError(f"Sparsity fraction must lie in [0, 1], got {sparsity_fraction}")
        if lasso_term < 0:
            raise ValueError(f"Lasso term must be >= 0, got {lasso_term}")
        entry = EpochRecord(int(epoch), float(loss), float(sparsity_fraction), float(lasso_term), float(lr))
        self.records.append(entry)
        logger.info(
            f"epoch {entry.epoch}: loss={entry.loss:.4f} sparsity={entry.sparsity_fraction:.4f} "
            f"lasso={entry.lasso_term:.4f} lr={entry.lr:.6g}"
        )
        return entry

    def _settled(self, values: np.ndarray) -> bool:
        spread = float(values.max() - values.min())
        if spread == 0.0:
            return True
        scale = float(np.abs(values).max())
        return spread / scale < self.tolerance

    def plateaued(self) -> bool:
        """All three quantities vary by less than the tolerance (relative) over the window"""
        if len(self.records) < self.window:
            return False
        recent = self.records[-self.window:]
        for column in ("loss", "sparsity_fraction", "lasso_term"):
            values = np.array([getattr(r, column) for r in recent], dtype=np.float64)
            if not np.all(np.isfinite(values)) or not self._settled(values):
                return False
        return True

    @property
    def last(self) -> Optional[EpochRecord]:
        return self.records[-1] if self.records else None

    def to_rows(self) -> List[Dict[str, Any]]:
        return [r._asdict() for r in self.records]

    @classmethod
    def from_rows(cls, rows: Iterable[Dict[str, Any]], window: int = 5, tolerance: float = 1e-3) -> "TrainMonitor":
        records = [EpochRecord(**{k: row[k] for k in HISTORY_COLUMNS}) for row in rows]
        return cls(window, tolerance, records)

    def to_csv(self, path: Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(HISTORY_COLUMNS)
            for r in self.records:
                writer.writerow([r.epoch, repr(r.loss), repr(r.sparsity_fraction), repr(r.lasso_term), repr(r.lr)])
        return path


def _records(history: Any) -> List[EpochRecord]:
    if isinstance(history, TrainMonitor):
        return list(history.records)
    return [r if isinstance(r, EpochRecord) else EpochRecord(**r) for r in history]


def diagnose(history: Any, num_classes: int = 10, early_epochs: int = 3) -> List[Diagnosis]:
    """Flag the three failed-tuning patterns in a monitor history

    - lasso falls at a steady rate while sparsity stays near zero: decrease alpha
    - sparsity jumps to (almost) 100% within the first epochs: decrease rho
    - cross-entropy is non-finite, stuck at chance level or exploding: decrease mu or rho
    """
    records = _records(history)
    if len(records) < 2:
        return []

    losses = np.array([r.loss for r in records], dtype=np.float64)
    sparsity = np.array([r.sparsity_fraction for r in records], dtype=np.float64)
    lasso = np.array([r.lasso_term for r in records], dtype=np.float64)
    findings: List[Diagnosis] = []

    if len(records) >= 3 and np.all(sparsity <= 0.01):
        drops = -np.diff(lasso)
        if np.all(drops > 0) and (drops.max() - drops.min()) <= 0.25 * drops.mean():
            findings.append(Diagnosis(DECREASE_ALPHA, "Lasso term decreases linearly while gamma sparsity stays near zero"))

    if np.any(sparsity[:early_epochs] >= 0.99):
        findings.append(Diagnosis(DECREASE_RHO, "Gamma sparsity reached 100% within the first epochs"))

    chance = math.log(num_classes)
    if not np.all(np.isfinite(losses)):
        findings.append(Diagnosis(DECREASE_MU_OR_RHO, "Cross-entropy became non-finite"))
    elif np.any(losses > EXPLODE_FACTOR * chance) or losses[-1] > 2.0 * losses.min():
        findings.append(Diagnosis(DECREASE_MU_OR_RHO, "Cross-entropy is exploding"))
    elif np.all(np.abs(losses - chance) <= 0.05 * chance):
        findings.append(Diagnosis(DECREASE_MU_OR_RHO, f"Cross-entropy stays at chance level ln({num_classes})"))

    for finding in findings:
        logger.warning(str(finding))
    return findings
