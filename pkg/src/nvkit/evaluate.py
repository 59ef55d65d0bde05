"""Downstream evaluation: linear probes, fine-tuning, voting inference.

A probe trains only a linear head on frozen backbone features (the
backbone is hashed before and after to prove it). Fine-tuning trains
everything for a fixed number of epochs and keeps the parameters of the
best validation balanced accuracy. Wide images can be classified by
four-crop voting: the positive probability is the max over the four
corner-anchored crops.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .augment import bilinear_resize, four_overlapping_crops, normalize
from .data import balanced_batches
from .errors import ContractError
from .metrics import MetricReport, compute_metrics
from .optim import AdamW, clip_global_norm
from .rng import derive_rng, truncated_normal
from .tensor import Tensor, no_grad


@dataclass
class ProbeConfig:
    mode: str = "linear_probe"  # or "finetune"
    epochs: int = 30
    lr: float = 1e-4
    batch_size: int = 32
    balanced_sampling: bool = False
    voting: str = "single_crop"  # or "four_crop"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("linear_probe", "finetune"):
            raise ContractError(f"unknown mode {self.mode!r}")
        if self.voting not in ("single_crop", "four_crop"):
            raise ContractError(f"unknown voting {self.voting!r}")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax logits."""
    b, k = logits.shape
    onehot = np.zeros((b, k), dtype=np.float32)
    onehot[np.arange(b), labels] = 1.0
    logp = T.log_softmax(logits, axis=-1)
    return T.mul(T.sum(T.mul(logp, Tensor(onehot))), -1.0 / b)


def masked_multilabel_loss(
    logits_per_task: Mapping[str, Tensor], labels_per_task: Mapping[str, np.ndarray]
) -> Tensor:
    """Mean cross-entropy over present labels only; absent labels are -1.

    Tasks or samples with no label contribute neither loss nor gradient,
    so partially annotated batches train cleanly.
    """
    terms: List[Tensor] = []
    n_present = 0
    for task in sorted(logits_per_task):
        logits = logits_per_task[task]
        labels = np.asarray(labels_per_task.get(task, -np.ones(logits.shape[0])), dtype=np.int64)
        mask = labels >= 0
        count = int(mask.sum())
        if count == 0:
            continue
        b, k = logits.shape
        onehot = np.zeros((b, k), dtype=np.float32)
        onehot[mask, labels[mask]] = 1.0  # absent rows stay all-zero: no loss, no grad
        logp = T.log_softmax(logits, axis=-1)
        terms.append(T.mul(T.sum(T.mul(logp, Tensor(onehot))), -1.0))
        n_present += count
    if not terms:
        return Tensor(np.float32(0.0))
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.mul(total, 1.0 / n_present)


def backbone_hash(model) -> str:
    """SHA-256 over the serialized backbone parameters (head excluded)."""
    h = hashlib.sha256()
    for name in model.backbone_param_names():
        h.update(name.encode())
        h.update(model.params[name].data.tobytes())
    return h.hexdigest()


def extract_features(model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Frozen-backbone features, [N, D]."""
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            feats = model.features(images[start : start + batch_size])
            out.append(feats.data.copy())
    return np.concatenate(out, axis=0)


class LinearHead:
    def __init__(self, in_dim: int, n_classes: int, seed: int = 0):
        rng = derive_rng(seed, "init", "head.w")
        self.params: Dict[str, Tensor] = {
            "head.w": Tensor(truncated_normal(rng, (in_dim, n_classes)), requires_grad=True),
            "head.b": Tensor(np.zeros(n_classes, dtype=np.float32), requires_grad=True),
        }

    def logits(self, feats) -> Tensor:
        x = feats if isinstance(feats, Tensor) else Tensor(feats)
        return T.add(T.matmul(x, self.params["head.w"]), self.params["head.b"])

    def predict(self, feats: np.ndarray) -> np.ndarray:
        with no_grad():
            return np.argmax(self.logits(feats).data, axis=-1)


def train_linear_head(
    features: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    epochs: int = 30,
    lr: float = 0.1,
    batch_size: int = 64,
    seed: int = 0,
) -> LinearHead:
    head = LinearHead(features.shape[1], n_classes, seed=seed)
    opt = AdamW(head.params, lr=lr, weight_decay=0.0)
    rng = derive_rng(seed, "head-train")
    n = len(features)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss = cross_entropy(head.logits(features[idx]), labels[idx])
            opt.zero_grad()
            T.backward(loss)
            opt.step()
    return head


@dataclass
class ImageTask:
    """In-memory supervised split: images in [0,1], integer labels."""

    train_images: np.ndarray
    train_labels: np.ndarray
    val_images: np.ndarray
    val_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    alphabet: List[int]


def _predict_batched(model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    preds = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            logits = model.logits(images[start : start + batch_size])
            preds.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(preds)


def linear_probe(model, task: ImageTask, config: ProbeConfig) -> Tuple[LinearHead, MetricReport]:
    """Train a linear head on frozen features; backbone bytes must not move."""
    before = backbone_hash(model)
    label_index = {c: i for i, c in enumerate(task.alphabet)}
    train_y = np.asarray([label_index[y] for y in task.train_labels])
    feats_train = extract_features(model, task.train_images)
    feats_test = extract_features(model, task.test_images)
    head = train_linear_head(
        feats_train, train_y, len(task.alphabet),
        epochs=config.epochs, lr=max(config.lr, 1e-3), batch_size=config.batch_size,
        seed=config.seed,
    )
    after = backbone_hash(model)
    if before != after:
        raise ContractError("backbone parameters changed during linear probe")
    preds = [task.alphabet[i] for i in head.predict(feats_test)]
    report = compute_metrics(preds, list(task.test_labels), alphabet=task.alphabet)
    return head, report


def finetune(model, task: ImageTask, config: ProbeConfig) -> Tuple[Dict[str, Tensor], MetricReport]:
    """Train backbone plus head; keep the best-val-balanced-accuracy weights."""
    if model.n_classes is None:
        model.attach_head(len(task.alphabet), seed=config.seed)
    label_index = {c: i for i, c in enumerate(task.alphabet)}
    train_y = np.asarray([label_index[y] for y in task.train_labels])
    opt = AdamW(model.params, lr=config.lr, weight_decay=0.0)
    rng = derive_rng(config.seed, "finetune")
    n = len(task.train_images)
    steps_per_epoch = max(1, n // config.batch_size)
    total_steps = max(1, config.epochs * steps_per_epoch)

    def batches_for_epoch():
        if config.balanced_sampling:
            yield from balanced_batches(
                list(range(n)), list(train_y), config.batch_size, rng, n_batches=steps_per_epoch
            )
        else:
            order = rng.permutation(n)
            for start in range(0, n, config.batch_size):
                yield order[start : start + config.batch_size]

    best = {"bacc": -1.0, "params": None}
    step = 0
    for _ in range(config.epochs):
        for idx in batches_for_epoch():
            idx = np.asarray(idx)
            # cosine decay of the configured lr over the whole run
            opt.lr = config.lr * 0.5 * (1.0 + np.cos(np.pi * step / total_steps))
            loss = cross_entropy(model.logits(task.train_images[idx]), train_y[idx])
            opt.zero_grad()
            T.backward(loss)
            clip_global_norm(model.params, 3.0)
            opt.step()
            step += 1
        val_preds = [task.alphabet[i] for i in _predict_batched(model, task.val_images)]
        val_report = compute_metrics(val_preds, list(task.val_labels), alphabet=task.alphabet)
        if val_report.balanced_accuracy > best["bacc"]:
            best["bacc"] = val_report.balanced_accuracy
            best["params"] = {k: v.data.copy() for k, v in model.params.items()}
    if best["params"] is not None:
        for k, v in best["params"].items():
            model.params[k].data = v
    test_preds = [task.alphabet[i] for i in _predict_batched(model, task.test_images)]
    report = compute_metrics(test_preds, list(task.test_labels), alphabet=task.alphabet)
    return model.params, report


# -- voting inference -----------------------------------------------------------


def _prep_for_model(crop: np.ndarray, model, mean: float = 0.5, std: float = 0.5) -> np.ndarray:
    h, w = model.config.image_size
    return normalize(bilinear_resize(np.asarray(crop, dtype=np.float32), h, w), mean, std)


def positive_probability(model, image: np.ndarray, positive_index: int = 1) -> float:
    with no_grad():
        logits = model.logits(_prep_for_model(image, model))
        probs = T.softmax(T.reshape(logits, (1, -1)), axis=-1).data[0]
    return float(probs[positive_index])


def four_crop_vote(
    image: np.ndarray, model, positive_index: int = 1, threshold: float = 0.5
) -> Tuple[int, float]:
    """Max positive probability over the four overlapping crops.

    Returns (predicted class index, positive probability); positive iff
    the max probability reaches the threshold. Binary heads only.
    """
    if model.n_classes != 2:
        raise ContractError(f"four-crop voting needs a binary head, got {model.n_classes} classes")
    crops = four_overlapping_crops(image)
    prob = max(positive_probability(model, crop, positive_index) for crop in crops)
    pred = positive_index if prob >= threshold else 1 - positive_index
    return pred, prob


def center_crop_predict(
    image: np.ndarray, model, positive_index: int = 1, threshold: float = 0.5,
    crop_w: int = 372, crop_h: int = 256,
) -> Tuple[int, float]:
    """Single centered crop baseline with the same preprocessing."""
    img = np.asarray(image)
    h, w = img.shape[:2]
    top, left = (h - crop_h) // 2, (w - crop_w) // 2
    crop = img[top : top + crop_h, left : left + crop_w]
    prob = positive_probability(model, crop, positive_index)
    pred = positive_index if prob >= threshold else 1 - positive_index
    return pred, prob
