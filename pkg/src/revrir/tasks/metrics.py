"""Top-1 accuracy, confusion matrices and the room-to-type collapse."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..catalog import ROOM_TYPES, Catalog
from ..errors import LookupFailure, ValidationError

TYPE_NAMES = [t.value for t in ROOM_TYPES]


def top1_accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValidationError(f"{predictions.shape[0]} predictions for {labels.shape[0]} labels")
    if predictions.size == 0:
        raise ValidationError("cannot score an empty prediction set")
    return float(np.mean(predictions == labels))


@dataclass(eq=False)
class ConfusionMatrix:
    """Row-normalised confusion; rows without support stay zero and are flagged."""

    counts: np.ndarray
    names: list[str]

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def empty_rows(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.support == 0)]

    @property
    def matrix(self) -> np.ndarray:
        support = self.support[:, None]
        return np.divide(self.counts, support, out=np.zeros(self.counts.shape), where=support > 0)

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.counts.sum())

    def to_csv(self, digits: int = 4) -> str:
        lines = ["true/pred," + ",".join(self.names)]
        for name, row in zip(self.names, self.matrix):
            lines.append(name + "," + ",".join(f"{v:.{digits}f}" for v in row))
        return "\n".join(lines) + "\n"

    def to_markdown(self, digits: int = 3) -> str:
        lines = ["| GT / Prediction | " + " | ".join(self.names) + " |"]
        lines.append("|---" * (len(self.names) + 1) + "|")
        for name, row in zip(self.names, self.matrix):
            lines.append(f"| **{name}** | " + " | ".join(f"{v:.{digits}f}" for v in row) + " |")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"names": self.names, "counts": self.counts.astype(int).tolist(), "matrix": self.matrix.tolist()}


def confusion(predictions, labels, n_classes: int, names: list[str] | None = None) -> ConfusionMatrix:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise ValidationError("predictions and labels differ in length")
    for what, ids in (("prediction", predictions), ("label", labels)):
        if ids.size and (ids.min() < 0 or ids.max() >= n_classes):
            raise ValidationError(f"{what} id outside [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes))
    np.add.at(counts, (labels, predictions), 1.0)
    return ConfusionMatrix(counts, names or [str(i) for i in range(n_classes)])


def collapse_to_types(predictions, catalog: Catalog) -> np.ndarray:
    """Map room class ids to room-type indices (Small=0, Large=1, Hall=2)."""
    lookup = np.array([ROOM_TYPES.index(r.room_type) for r in catalog.rooms])
    predictions = np.asarray(predictions, dtype=np.int64)
    if predictions.size and (predictions.min() < 0 or predictions.max() >= len(lookup)):
        raise LookupFailure(f"room id outside [0, {len(lookup)})")
    return lookup[predictions]


def scoreboard(predictions, labels, catalog: Catalog) -> dict:
    """Room-level and type-level accuracy with both confusion matrices."""
    rooms = confusion(predictions, labels, len(catalog), catalog.names)
    tp, tl = collapse_to_types(predictions, catalog), collapse_to_types(labels, catalog)
    types = confusion(tp, tl, len(ROOM_TYPES), TYPE_NAMES)
    return {
        "top1": top1_accuracy(predictions, labels),
        "type_top1": top1_accuracy(tp, tl),
        "confusion": rooms.to_dict(),
        "type_confusion": types.to_dict(),
    }
