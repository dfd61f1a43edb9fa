"""Per-round metrics and the evaluation helpers the harness reports with."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .data import LabeledDataset
from .errors import InputError
from .nn import ModelArch, ParameterVector, forward


@dataclass(frozen=True)
class MetricsRecord:
    round: int
    test_accuracy: float
    mean_train_loss: float
    mean_ce_term: float
    mean_kd_final_term: float
    mean_kd_aux_term: float
    attacked: bool
    wall_time_ms: float = 0.0

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_row(self) -> list:
        return [getattr(self, name) for name in self.columns()]

    def to_dict(self) -> dict:
        return asdict(self)


def predict(arch: ModelArch, params: ParameterVector, features: np.ndarray,
            chunk: int = 2048) -> np.ndarray:
    out = []
    for start in range(0, features.shape[0], chunk):
        out.append(forward(arch, params, features[start:start + chunk]).logits.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(arch: ModelArch, params: ParameterVector, test_set: LabeledDataset) -> float:
    """Top-1 accuracy; ties in the logits go to the lowest class index."""
    if len(test_set) == 0:
        raise InputError("cannot evaluate on an empty test set")
    correct = int((predict(arch, params, test_set.features) == test_set.labels).sum())
    return correct / len(test_set)


def accuracy_drop(benign: float, attacked: float) -> float:
    """benign - attacked; negative values mean the attack helped and are kept as-is."""
    for value in (benign, attacked):
        if not 0.0 <= value <= 1.0:
            raise InputError(f"accuracy {value} outside [0, 1]")
    return benign - attacked
