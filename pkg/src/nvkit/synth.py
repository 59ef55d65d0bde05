"""Deterministic synthetic corpora.

Real street-view data is not shippable, so training and evaluation are
exercised on generated sets: a brightness-separable two-class task, wide
frames with a bright object planted anywhere (for crop-voting tests),
textured unlabeled images for self-distillation smoke runs, and label
tables that mirror realistic class imbalance. Every image is a pure
function of (seed, index).
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import LabeledDataset
from .errors import ContractError
from .imageio import write_image
from .rng import derive_rng

# class counts per task for split checks; sidewalk splits 70:15:15, the rest 75:10:15
TASK_TABLE: Dict[str, Dict[int, int]] = {
    "streetlight": {0: 15792, 1: 2144},
    "nsh": {0: 5528, 1: 7241, 9: 757},
    "green30": {0: 4162, 1: 9344},
    "sidewalk": {0: 13773, 1: 4139},
}

TASK_RATIOS: Dict[str, Tuple[float, float, float]] = {
    "streetlight": (0.75, 0.10, 0.15),
    "nsh": (0.75, 0.10, 0.15),
    "green30": (0.75, 0.10, 0.15),
    "sidewalk": (0.70, 0.15, 0.15),
}


def class_counts_dataset(task: str, counts: Dict[int, int]) -> LabeledDataset:
    """Dataset of placeholder records with exactly `counts[label]` per class."""
    ds = LabeledDataset()
    idx = 0
    for label in sorted(counts):
        for _ in range(counts[label]):
            ds.add(f"synthetic/{task}/{label}/{idx:06d}.png", {task: label})
            idx += 1
    return ds


def task_table_dataset(task: str) -> LabeledDataset:
    if task not in TASK_TABLE:
        raise ContractError(f"unknown task {task!r}; choose from {sorted(TASK_TABLE)}")
    return class_counts_dataset(task, TASK_TABLE[task])


# -- image generators ---------------------------------------------------------


def separable_image(label: int, seed: int, index: int, size: Tuple[int, int] = (32, 32)) -> np.ndarray:
    """Dark (label 0) or bright (label 1) noisy image with a corner marker."""
    rng = derive_rng(seed, "separable", index)
    h, w = size
    base = 0.15 if label == 0 else 0.85
    img = np.clip(base + rng.normal(0.0, 0.05, size=(h, w, 3)), 0.0, 1.0).astype(np.float32)
    # redundant structural cue: opposite-intensity corner block
    block = slice(0, max(2, h // 8))
    img[block, block] = 1.0 - base
    return img


def separable_dataset(
    n_per_class: int, seed: int = 0, size: Tuple[int, int] = (32, 32)
) -> Tuple[np.ndarray, np.ndarray]:
    """Images and labels, class-interleaved so any prefix stays balanced."""
    images, labels = [], []
    for i in range(n_per_class):
        for label in (0, 1):
            images.append(separable_image(label, seed, 2 * i + label, size))
            labels.append(label)
    return np.stack(images), np.asarray(labels, dtype=np.int64)


def textured_image(seed: int, index: int, size: Tuple[int, int] = (32, 32)) -> np.ndarray:
    """Unlabeled image with a gradient, random rectangles, and noise."""
    rng = derive_rng(seed, "textured", index)
    h, w = size
    gy, gx = rng.uniform(-0.5, 0.5, size=2)
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    img = 0.5 + gy * (yy - 0.5) + gx * (xx - 0.5)
    img = np.repeat(img[:, :, None], 3, axis=2).astype(np.float32)
    for _ in range(int(rng.integers(1, 4))):
        rh, rw = int(rng.integers(h // 8, h // 2)), int(rng.integers(w // 8, w // 2))
        top, left = int(rng.integers(0, h - rh + 1)), int(rng.integers(0, w - rw + 1))
        img[top : top + rh, left : left + rw] += rng.uniform(-0.4, 0.4, size=3).astype(np.float32)
    img += rng.normal(0.0, 0.03, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def textured_dataset(n: int, seed: int = 0, size: Tuple[int, int] = (32, 32)) -> np.ndarray:
    return np.stack([textured_image(seed, i, size) for i in range(n)])


def noise_image(seed: int, index: int, size: Tuple[int, int] = (64, 64)) -> np.ndarray:
    rng = derive_rng(seed, "noise", index)
    return np.clip(rng.normal(0.5, 0.15, size=(*size, 3)), 0.0, 1.0).astype(np.float32)


def noise_dataset(n: int, seed: int = 0, size: Tuple[int, int] = (64, 64)) -> np.ndarray:
    return np.stack([noise_image(seed, i, size) for i in range(n)])


def planted_image(
    label: int,
    seed: int,
    index: int,
    size: Tuple[int, int] = (440, 640),
    object_size: int = 48,
) -> Tuple[np.ndarray, Optional[Tuple[int, int]]]:
    """Wide dark frame; positives get a bright square anywhere in the frame.

    Returns (image, (top, left) of the object or None). Both classes get
    dim gray distractor rectangles so brightness alone is not the answer.
    """
    rng = derive_rng(seed, "planted", index)
    h, w = size
    img = np.clip(rng.normal(0.18, 0.04, size=(h, w, 3)), 0.0, 1.0).astype(np.float32)
    for _ in range(2):
        rh, rw = int(rng.integers(20, 60)), int(rng.integers(20, 60))
        top, left = int(rng.integers(0, h - rh + 1)), int(rng.integers(0, w - rw + 1))
        img[top : top + rh, left : left + rw] = rng.uniform(0.35, 0.5)
    pos = None
    if label == 1:
        top = int(rng.integers(0, h - object_size + 1))
        left = int(rng.integers(0, w - object_size + 1))
        img[top : top + object_size, left : left + object_size] = rng.uniform(0.9, 1.0)
        pos = (top, left)
    return img, pos


def planted_dataset(
    n_per_class: int,
    seed: int = 0,
    size: Tuple[int, int] = (440, 640),
    object_size: int = 48,
) -> Tuple[np.ndarray, np.ndarray, List[Optional[Tuple[int, int]]]]:
    images, labels, positions = [], [], []
    for i in range(n_per_class):
        for label in (0, 1):
            img, pos = planted_image(label, seed, 2 * i + label, size, object_size)
            images.append(img)
            labels.append(label)
            positions.append(pos)
    return np.stack(images), np.asarray(labels, dtype=np.int64), positions


def object_in_window(
    pos: Optional[Tuple[int, int]], object_size: int, top: int, left: int, h: int, w: int
) -> bool:
    """True when the object's center falls inside the window."""
    if pos is None:
        return False
    cy, cx = pos[0] + object_size / 2, pos[1] + object_size / 2
    return top <= cy < top + h and left <= cx < left + w


# -- on-disk corpora ------------------------------------------------------------


def write_corpus(out_dir, kind: str, n: int, seed: int = 0) -> dict:
    """Materialize a labeled corpus: images/*.png plus labels.csv and meta.json."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rows: List[Tuple[str, str, int]] = []
    meta: dict = {"kind": kind, "n": n, "seed": seed}
    if kind == "separable":
        images, labels = separable_dataset(max(1, n // 2), seed=seed)
        task = "brightness"
    elif kind == "planted":
        images, labels, positions = planted_dataset(max(1, n // 2), seed=seed)
        task = "object"
        meta["object_size"] = 48
        meta["positions"] = [list(p) if p is not None else None for p in positions]
    elif kind == "textured":
        images = textured_dataset(n, seed=seed)
        labels = np.zeros(len(images), dtype=np.int64)
        task = "none"
    else:
        raise ContractError(f"unknown corpus kind {kind!r}")
    for i, img in enumerate(images):
        rel = f"images/{i:05d}.png"
        write_image(out_dir / rel, img)
        rows.append((rel, task, int(labels[i])))
    with open(out_dir / "labels.csv", "w", newline="") as fh:
        fh.write("path,task,label\n")
        for rel, task_name, label in rows:
            fh.write(f"{rel},{task_name},{label}\n")
    meta["count"] = len(rows)
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2))
    return meta
