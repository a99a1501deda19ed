"""
Per-epoch training history
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from .formats import write_frame

logger = logging.getLogger(__name__)

HISTORY_FILE = "history.csv"
HISTORY_COLUMNS = [
    "epoch",
    "train_loss",
    "train_mse",
    "train_focal",
    "train_kl",
    "train_tc",
    "val_loss",
    "val_mse",
    "val_focal",
    "val_kl",
    "val_tc",
    "beta",
    "lambda",
]


class TrainingHistory:
    """Collects one row per epoch and exports them as a DataFrame"""

    def __init__(self, columns: Optional[List[str]] = None):
        self.columns: List[str] = columns or list(HISTORY_COLUMNS)
        self._rows: List[Dict[str, Any]] = []

    def __len__(self) -> int:
        return len(self._rows)

    def record(self, **values: Any) -> None:
        unknown = set(values) - set(self.columns)
        if unknown:
            raise KeyError(f"unknown history columns: {sorted(unknown)}")
        self._rows.append({name: values.get(name, np.nan) for name in self.columns})

    def to_pandas(self) -> pd.DataFrame:
        return pd.DataFrame(self._rows, columns=self.columns)

    def best_epoch(self, column: str = "val_loss") -> int:
        frame = self.to_pandas()
        if frame.empty:
            raise ValueError("history is empty")
        return int(frame.loc[frame[column].idxmin(), "epoch"])

    def save(self, path: Path) -> None:
        write_frame(self.to_pandas(), path)
        logger.info(f"Saved {len(self)} epochs of history to {path}")

    @classmethod
    def load(cls, path: Path) -> "TrainingHistory":
        frame = pd.read_csv(path)
        history = cls(list(frame.columns))
        for row in frame.to_dict(orient="records"):
            history.record(**row)
        return history
