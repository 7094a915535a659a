from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from pharmvig.persistence import model_envelope, open_envelope


@dataclass(frozen=True)
class MostCommonClassifier:
    label: str
    counts: dict[str, int] = field(default_factory=dict)

    def predict(self, x: Any = None) -> str:
        return self.label

    def predict_many(self, xs: Sequence[Any]) -> list[str]:
        return [self.label] * len(xs)

    def to_dict(self) -> dict:
        return model_envelope("majority", {"label": self.label, "counts": dict(sorted(self.counts.items()))})

    @classmethod
    def from_dict(cls, data: dict) -> "MostCommonClassifier":
        data = open_envelope(data, "majority")
        return cls(label=data["label"], counts=dict(data["counts"]))


def most_common_class_fit(labels: Iterable[str]) -> MostCommonClassifier:
    """Constant classifier predicting the modal label; ties go to the smallest label name."""
    counts = Counter(labels)
    if not counts:
        raise ValueError("cannot fit a most-common-class model on no labels")
    label = min(counts, key=lambda name: (-counts[name], name))
    return MostCommonClassifier(label=label, counts=dict(counts))
