"""Persisted records: training reports, benchmark rows and run manifests."""
from typing import Any, Dict, List, Optional
import math

from pydantic import BaseModel, Field, field_validator


class EpochMetrics(BaseModel):
    epoch: int
    train_loss: float
    val_loss: float
    recon_err: float
    recon_median: float
    recall1: float

    @field_validator("train_loss", "val_loss", "recon_err", "recon_median", "recall1")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("metric must be finite")
        return value

    def to_line(self) -> str:
        return (
            f"{self.epoch}\t{self.train_loss:.9g}\t{self.val_loss:.9g}\t"
            f"{self.recon_err:.9g}\t{self.recall1:.9g}"
        )


class ValidationMetrics(BaseModel):
    loss: float
    recon_mean: float
    recon_median: float
    recall1: float = Field(ge=0, le=1)


class TrainReport(BaseModel):
    """``initial`` is measured before the first update; ``epochs`` has one entry per epoch.

    ``best_epoch`` names the epoch whose parameters were kept, when best-epoch selection is on.
    """

    config: Dict[str, Any]
    initial: EpochMetrics
    epochs: List[EpochMetrics] = Field(default_factory=list)
    best_epoch: Optional[int] = None
    wall_time_s: float = 0.0
    checkpoint_hashes: Dict[str, str] = Field(default_factory=dict)

    def to_text(self) -> str:
        lines = ["# epoch\ttrain_loss\tval_loss\trecon_err\trecall1"]
        lines.append(self.initial.to_line())
        lines.extend(entry.to_line() for entry in self.epochs)
        if self.best_epoch is not None:
            lines.append(f"# best_epoch\t{self.best_epoch}")
        return "\n".join(lines) + "\n"


class BenchResult(BaseModel):
    method: str
    bytes_per_vector: float = Field(gt=0)
    recon_mean: float
    recon_median: float
    recall_at_1: float = Field(ge=0, le=1)
    recall_at_5: float = Field(ge=0, le=1)
    ranking_preservation: float = Field(ge=0, le=1)
    params: Dict[str, Any] = Field(default_factory=dict)

    def to_row(self) -> str:
        return (
            f"{self.method}\t{self.bytes_per_vector:.6g}\t{self.recon_mean:.9g}\t"
            f"{self.recall_at_1:.9g}\t{self.recall_at_5:.9g}\t{self.ranking_preservation:.9g}"
        )


class RunManifest(BaseModel):
    command: str
    config: Dict[str, Any]
    input_hashes: Dict[str, str]
    outputs: List[str]
    seed: int
    version: str
    wall_time_s: Optional[float] = None
