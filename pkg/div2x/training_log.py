import csv
import logging
from abc import ABC, abstractmethod
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import List, Optional, Union


@dataclass
class LossRecord:
    """Loss components of one optimizer step"""
    epoch: int
    step: int
    loss_detect: float
    loss_da: float = 0.0
    loss_f: float = 0.0
    loss_p: float = 0.0
    total: float = 0.0

    @property
    def distill(self) -> float:
        return self.loss_da + self.loss_f + self.loss_p


LOG_COLUMNS = tuple(f.name for f in fields(LossRecord))


class TrainingLogHandler(ABC):
    """Abstract base class for training log handling"""
    @abstractmethod
    def handle_step(self, record: LossRecord) -> None:
        pass

    def close(self) -> None:
        pass


class DefaultTrainingLog(TrainingLogHandler):
    """Keeps every step in memory"""

    def __init__(self):
        self.history: List[LossRecord] = []

    def handle_step(self, record: LossRecord) -> None:
        self.history.append(record)
        logging.debug(
            f"Step {record.step} (epoch {record.epoch}) - detect: {record.loss_detect:.5f}, "
            f"da: {record.loss_da:.5f}, f: {record.loss_f:.5f}, p: {record.loss_p:.5f}, total: {record.total:.5f}")

    def epoch_mean(self, epoch: int, attribute: str = "total") -> Optional[float]:
        values = [getattr(r, attribute) for r in self.history if r.epoch == epoch]
        if not values:
            return None
        return sum(values) / len(values)


class CsvTrainingLog(DefaultTrainingLog):
    """In-memory history plus a CSV file written row by row"""

    def __init__(self, path: Union[str, Path]):
        super().__init__()
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, "w", newline="")
        self._writer = csv.writer(self._file, lineterminator="\n")
        self._writer.writerow(LOG_COLUMNS)

    def handle_step(self, record: LossRecord) -> None:
        super().handle_step(record)
        self._writer.writerow([repr(v) if isinstance(v, float) else v for v in astuple(record)])

    def close(self) -> None:
        if not self._file.closed:
            self._file.close()
            logging.info(f"Training log written to {self.path}")
