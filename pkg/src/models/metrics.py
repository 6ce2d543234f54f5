"""
Confusion counts and the classification metrics derived from them.

Positive class is "defective" throughout. Ratios whose denominator is
zero are undefined and reported as None, never as 0 or 1.
"""

from dataclasses import dataclass
from typing import Dict, Iterable, Optional

from core.errors import InvalidArgumentError


@dataclass(frozen=True)
class ConfusionCounts:
    """Binary confusion matrix with defective as the positive class."""
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise InvalidArgumentError(f"confusion counts must be >= 0, got {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: 'ConfusionCounts') -> 'ConfusionCounts':
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @classmethod
    def from_predictions(cls, predicted: Iterable[bool], actual: Iterable[bool]) -> 'ConfusionCounts':
        tp = fp = fn = tn = 0
        for p, a in zip(predicted, actual):
            if p and a:
                tp += 1
            elif p:
                fp += 1
            elif a:
                fn += 1
            else:
                tn += 1
        return cls(tp, fp, fn, tn)

    def to_dict(self) -> Dict[str, int]:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den > 0 else None


def classification_metrics(c: ConfusionCounts) -> Dict[str, Optional[float]]:
    """Accuracy, precision, recall and F1; undefined values are None."""
    if c.total < 1:
        raise InvalidArgumentError("classification metrics need at least one sample")
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    f1 = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)
    return {
        "accuracy": (c.tp + c.tn) / c.total,
        "precision": precision,
        "recall": recall,
        "f1": f1,
    }
