"""Classification metrics: confusion matrix, accuracy, balanced accuracy, F1.

Balanced accuracy is the mean of per-class recalls computed over the
label alphabet, so it is robust to class imbalance; binary tasks report
F1 of the positive class and multi-class tasks report macro F1.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ContractError


@dataclass
class MetricReport:
    alphabet: List[int]
    confusion: np.ndarray  # rows true class, columns predicted class
    accuracy: float
    balanced_accuracy: float
    f1: float
    f1_kind: str  # "binary" or "macro"
    precision: Dict[int, float] = field(default_factory=dict)
    recall: Dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "alphabet": list(self.alphabet),
            "confusion": self.confusion.tolist(),
            "accuracy": self.accuracy,
            "balanced_accuracy": self.balanced_accuracy,
            "f1": self.f1,
            "f1_kind": self.f1_kind,
            "precision": {str(k): v for k, v in self.precision.items()},
            "recall": {str(k): v for k, v in self.recall.items()},
        }


def confusion_matrix(preds: Sequence[int], labels: Sequence[int], alphabet: Sequence[int]) -> np.ndarray:
    index = {c: i for i, c in enumerate(alphabet)}
    mat = np.zeros((len(alphabet), len(alphabet)), dtype=np.int64)
    for p, y in zip(preds, labels):
        if y not in index:
            raise ContractError(f"label {y} outside alphabet {list(alphabet)}")
        if p not in index:
            raise ContractError(f"prediction {p} outside alphabet {list(alphabet)}")
        mat[index[y], index[p]] += 1
    return mat


def _prf(confusion: np.ndarray, i: int) -> tuple:
    tp = confusion[i, i]
    fp = confusion[:, i].sum() - tp
    fn = confusion[i, :].sum() - tp
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0
    return float(precision), float(recall), float(f1)


def compute_metrics(
    preds: Sequence[int],
    labels: Sequence[int],
    alphabet: Optional[Sequence[int]] = None,
    positive_class: Optional[int] = None,
) -> MetricReport:
    """Confusion-derived metrics; 2-class alphabets get binary F1, others macro.

    Classes with zero support contribute recall 0 (with a warning) so the
    balanced accuracy stays an honest mean over the full alphabet.
    """
    preds = list(preds)
    labels = list(labels)
    if len(preds) != len(labels):
        raise ContractError(f"{len(preds)} predictions vs {len(labels)} labels")
    if alphabet is None:
        alphabet = sorted(set(labels) | set(preds))
    alphabet = list(alphabet)
    confusion = confusion_matrix(preds, labels, alphabet)

    total = confusion.sum()
    accuracy = float(np.trace(confusion) / total) if total else 0.0
    recalls = []
    precision: Dict[int, float] = {}
    recall: Dict[int, float] = {}
    f1s = []
    for i, cls in enumerate(alphabet):
        p, r, f = _prf(confusion, i)
        if confusion[i, :].sum() == 0:
            warnings.warn(f"class {cls} has zero support; recall counted as 0")
        precision[cls], recall[cls] = p, r
        recalls.append(r)
        f1s.append(f)
    balanced = float(np.mean(recalls)) if recalls else 0.0

    if len(alphabet) == 2:
        pos = positive_class if positive_class is not None else alphabet[-1]
        if pos not in alphabet:
            raise ContractError(f"positive class {pos} not in alphabet {alphabet}")
        f1 = f1s[alphabet.index(pos)]
        kind = "binary"
    else:
        f1 = float(np.mean(f1s))
        kind = "macro"

    return MetricReport(
        alphabet=alphabet,
        confusion=confusion,
        accuracy=accuracy,
        balanced_accuracy=balanced,
        f1=f1,
        f1_kind=kind,
        precision=precision,
        recall=recall,
    )
