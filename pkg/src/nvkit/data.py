"""Datasets, label manifests, stratified splits, and samplers.

Label manifest: CSV with header ``path,task,label``; one row per (image,
task) pair, so images may carry labels for some tasks and not others.
Split manifest: CSV ``path,split`` with split in {train, val, test}.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError
from .rng import derive_rng

SPLITS = ("train", "val", "test")


@dataclass
class LabeledDataset:
    """Records of image paths with per-task integer labels (absences allowed)."""

    records: List[dict] = field(default_factory=list)  # {"path": str, "labels": {task: int}}
    alphabets: Dict[str, List[int]] = field(default_factory=dict)

    def add(self, path: str, labels: Dict[str, int]) -> None:
        for task, label in labels.items():
            alphabet = self.alphabets.setdefault(task, [])
            if label not in alphabet:
                alphabet.append(label)
                alphabet.sort()
        self.records.append({"path": str(path), "labels": dict(labels)})

    def validate(self) -> None:
        for rec in self.records:
            for task, label in rec["labels"].items():
                if label not in self.alphabets.get(task, []):
                    raise ContractError(
                        f"label {label} for task {task!r} not in alphabet "
                        f"{self.alphabets.get(task)} ({rec['path']})"
                    )

    def task_labels(self, task: str) -> List[Tuple[int, int]]:
        """(record index, label) pairs for records that carry the task."""
        return [(i, rec["labels"][task]) for i, rec in enumerate(self.records) if task in rec["labels"]]

    def paths(self) -> List[str]:
        return [rec["path"] for rec in self.records]


def read_label_manifest(path) -> LabeledDataset:
    by_path: Dict[str, Dict[str, int]] = {}
    order: List[str] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["path", "task", "label"]:
            raise ContractError(f"label manifest {path} must have header path,task,label")
        for row in reader:
            p = row["path"]
            if p not in by_path:
                by_path[p] = {}
                order.append(p)
            by_path[p][row["task"]] = int(row["label"])
    ds = LabeledDataset()
    for p in order:
        ds.add(p, by_path[p])
    return ds


def write_label_manifest(path, dataset: LabeledDataset) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "task", "label"])
        for rec in dataset.records:
            for task in sorted(rec["labels"]):
                writer.writerow([rec["path"], task, rec["labels"][task]])


@dataclass
class SplitManifest:
    """Per-record split assignment, aligned with the dataset's record order."""

    assignment: Dict[str, str]  # path -> split
    ratios: Tuple[float, float, float]
    seed: int

    def indices(self, dataset: LabeledDataset, split: str) -> List[int]:
        return [i for i, rec in enumerate(dataset.records) if self.assignment.get(rec["path"]) == split]


def read_split_manifest(path, ratios=(0.0, 0.0, 0.0), seed: int = 0) -> SplitManifest:
    assignment: Dict[str, str] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            if row["split"] not in SPLITS:
                raise ContractError(f"unknown split {row['split']!r} in {path}")
            assignment[row["path"]] = row["split"]
    return SplitManifest(assignment=assignment, ratios=tuple(ratios), seed=seed)


def write_split_manifest(path, manifest: SplitManifest) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "split"])
        for p, split in manifest.assignment.items():
            writer.writerow([p, split])


def largest_remainder(total: int, ratios: Sequence[float]) -> List[int]:
    """Apportion `total` into integer parts proportional to `ratios`.

    Floors first, then hands the leftover units to the largest fractional
    remainders; ties go to the earlier part, so results are deterministic.
    """
    exact = [total * r for r in ratios]
    floors = [int(np.floor(e)) for e in exact]
    leftover = total - sum(floors)
    remainders = sorted(
        range(len(ratios)), key=lambda i: (-(exact[i] - floors[i]), i)
    )
    for i in remainders[:leftover]:
        floors[i] += 1
    return floors


def stratified_split(
    dataset: LabeledDataset,
    task: str,
    ratios: Tuple[float, float, float],
    seed: int,
) -> SplitManifest:
    """Shuffle within each class and apportion by largest remainder.

    Every record carrying the task lands in exactly one of train/val/test;
    per-class counts hit the ratio targets within one record.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ContractError(f"split ratios {ratios} must sum to 1")
    pairs = dataset.task_labels(task)
    if len(pairs) != len(dataset.records):
        missing = len(dataset.records) - len(pairs)
        raise ContractError(f"{missing} records lack a {task!r} label; split needs full coverage")
    by_class: Dict[int, List[int]] = {}
    for idx, label in pairs:
        by_class.setdefault(label, []).append(idx)
    for label in dataset.alphabets.get(task, []):
        by_class.setdefault(label, [])

    assignment: Dict[str, str] = {}
    for label in sorted(by_class):
        members = by_class[label]
        if not members:
            warnings.warn(f"class {label} of task {task!r} is empty; contributes nothing")
            continue
        rng = derive_rng(seed, "split", task, str(label))
        order = rng.permutation(len(members))
        counts = largest_remainder(len(members), ratios)
        cursor = 0
        for split_name, count in zip(SPLITS, counts):
            for k in order[cursor : cursor + count]:
                assignment[dataset.records[members[k]]["path"]] = split_name
            cursor += count
    return SplitManifest(assignment=assignment, ratios=tuple(ratios), seed=seed)


def split_counts(dataset: LabeledDataset, manifest: SplitManifest, task: str) -> Dict[int, Tuple[int, int, int]]:
    """Per-class (train, val, test) counts under a split manifest."""
    out: Dict[int, List[int]] = {}
    for idx, label in dataset.task_labels(task):
        split = manifest.assignment.get(dataset.records[idx]["path"])
        if split is None:
            continue
        row = out.setdefault(label, [0, 0, 0])
        row[SPLITS.index(split)] += 1
    return {label: tuple(v) for label, v in out.items()}


# -- samplers -------------------------------------------------------------------


def balanced_batches(
    indices: Sequence[int],
    labels: Sequence[int],
    batch_size: int,
    rng: np.random.Generator,
    n_batches: Optional[int] = None,
) -> Iterator[List[int]]:
    """Batches drawn class-uniformly with replacement (oversamples minorities).

    Each draw picks a class uniformly, then a member of that class
    uniformly, so expected per-class frequency is 1/|classes| regardless
    of class sizes.
    """
    if len(indices) != len(labels):
        raise ContractError(f"indices ({len(indices)}) and labels ({len(labels)}) differ in length")
    by_class: Dict[int, List[int]] = {}
    for idx, label in zip(indices, labels):
        by_class.setdefault(label, []).append(idx)
    classes = sorted(by_class)
    if not classes:
        raise ContractError("balanced_batches needs at least one labeled sample")
    if n_batches is None:
        n_batches = max(1, len(indices) // batch_size)
    for _ in range(n_batches):
        picked_classes = rng.integers(0, len(classes), size=batch_size)
        batch = []
        for c in picked_classes:
            members = by_class[classes[c]]
            batch.append(members[int(rng.integers(0, len(members)))])
        yield batch


def repeated_augmentation_iterator(
    indices: Sequence[int], repeats: int, rng: np.random.Generator
) -> Iterator[int]:
    """Shuffled pass where each index is emitted `repeats` times in a row.

    The caller derives fresh augmentation randomness per emission, so the
    repeats become different views of the same image.
    """
    if repeats < 1:
        raise ContractError(f"repeats must be >= 1, got {repeats}")
    order = rng.permutation(len(indices))
    for k in order:
        for _ in range(repeats):
            yield indices[int(k)]
