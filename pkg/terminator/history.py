import hashlib
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from .exporter import read_csv, write_csv

METRIC_FIELDS = ["epoch", "train_loss", "ce", "ls", "test_acc", "wall_s"]
DETERMINISTIC_FIELDS = ["epoch", "train_loss", "ce", "ls", "test_acc"]


class MetricHistory:
    """Per-epoch training metrics with CSV persistence."""

    def __init__(self, rows: Optional[List[Dict[str, Any]]] = None):
        self.rows: List[Dict[str, Any]] = list(rows or [])

    def __len__(self) -> int:
        return len(self.rows)

    def add(self, epoch: int, train_loss: float, ce: float, ls: float, test_acc: float, wall_s: float) -> Dict[str, Any]:
        row = {
            "epoch": int(epoch),
            "train_loss": float(train_loss),
            "ce": float(ce),
            "ls": float(ls),
            "test_acc": float(test_acc),
            "wall_s": float(wall_s),
        }
        self.rows.append(row)
        return row

    def last(self) -> Optional[Dict[str, Any]]:
        return self.rows[-1] if self.rows else None

    def column(self, name: str) -> List[float]:
        return [row[name] for row in self.rows]

    def decreasing_epochs(self) -> int:
        """Number of epochs whose train loss is below the previous epoch's."""
        losses = self.column("train_loss")
        return sum(1 for prev, cur in zip(losses, losses[1:]) if cur < prev)

    def digest(self) -> str:
        """SHA-1 over the seed-determined columns (wall time excluded)."""
        lines = ["|".join(repr(row[f]) for f in DETERMINISTIC_FIELDS) for row in self.rows]
        return hashlib.sha1("\n".join(lines).encode("utf-8")).hexdigest()

    def save_csv(self, path: Union[str, Path]) -> str:
        out = write_csv(path, METRIC_FIELDS, ({k: repr(v) if isinstance(v, float) else v for k, v in row.items()} for row in self.rows))
        logging.debug("Metric history written to %s", out)
        return out

    @classmethod
    def load_csv(cls, path: Union[str, Path]) -> "MetricHistory":
        rows = []
        for raw in read_csv(path):
            rows.append({k: int(v) if k == "epoch" else float(v) for k, v in raw.items()})
        return cls(rows)
