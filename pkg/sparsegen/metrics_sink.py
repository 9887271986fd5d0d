"""
Per-epoch training metrics as CSV.

One row per epoch: epoch, mse, mean_z_norm2, wall_ms, and for cooperative
training mean_f_data, mean_f_synth.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

BASE_COLUMNS = ["epoch", "mse", "mean_z_norm2", "wall_ms"]
COOP_COLUMNS = BASE_COLUMNS + ["mean_f_data", "mean_f_synth"]


@dataclass
class EpochMetrics:
    """One epoch's summary."""

    epoch: int
    mse: float
    mean_z_norm2: float
    wall_ms: float
    mean_f_data: Optional[float] = None
    mean_f_synth: Optional[float] = None

    @property
    def cooperative(self) -> bool:
        return self.mean_f_data is not None

    def to_dict(self) -> Dict[str, Any]:
        row = {
            "epoch": self.epoch,
            "mse": repr(float(self.mse)),
            "mean_z_norm2": repr(float(self.mean_z_norm2)),
            "wall_ms": f"{self.wall_ms:.1f}",
        }
        if self.cooperative:
            row["mean_f_data"] = repr(float(self.mean_f_data))
            row["mean_f_synth"] = repr(float(self.mean_f_synth))
        return row

    def same_trajectory(self, other: "EpochMetrics") -> bool:
        """Equality ignoring wall-clock time."""
        return (
            self.epoch == other.epoch
            and self.mse == other.mse
            and self.mean_z_norm2 == other.mean_z_norm2
            and self.mean_f_data == other.mean_f_data
            and self.mean_f_synth == other.mean_f_synth
        )


class MetricsSink:
    """
    CSV writer for training metrics.

    The header is written when the sink is created unless `append` is set and
    the file already exists (resumed runs keep their earlier rows).
    """

    def __init__(
        self,
        output_path: Union[str, Path],
        cooperative: bool = False,
        append: bool = False,
    ):
        self.output_path = Path(output_path)
        self.columns = COOP_COLUMNS if cooperative else BASE_COLUMNS
        self.logger = logging.getLogger(__name__)

        self.output_path.parent.mkdir(parents=True, exist_ok=True)
        if not (append and self.output_path.exists()):
            self._initialize_csv()

    def _initialize_csv(self):
        with open(self.output_path, "w", newline="", encoding="utf-8") as f:
            csv.writer(f).writerow(self.columns)
        self.logger.info(f"Initialized metrics file at {self.output_path}")

    def append_row(self, row: EpochMetrics):
        try:
            with open(self.output_path, "a", newline="", encoding="utf-8") as f:
                writer = csv.DictWriter(f, fieldnames=self.columns)
                writer.writerow(row.to_dict())
        except OSError as e:
            self.logger.error(
                f"Failed to append metrics row to {self.output_path}: {e}"
            )

    def read_rows(self) -> List[EpochMetrics]:
        with open(self.output_path, "r", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))

        def opt(value: Optional[str]) -> Optional[float]:
            return float(value) if value not in (None, "") else None

        return [
            EpochMetrics(
                epoch=int(r["epoch"]),
                mse=float(r["mse"]),
                mean_z_norm2=float(r["mean_z_norm2"]),
                wall_ms=float(r["wall_ms"]),
                mean_f_data=opt(r.get("mean_f_data")),
                mean_f_synth=opt(r.get("mean_f_synth")),
            )
            for r in rows
        ]
