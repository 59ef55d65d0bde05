"""Command-line entry point.

Subcommands: pretrain, finetune, probe, evaluate, visualize, split,
synth-data. Every run writes `run_manifest.json` into its output
directory recording the command, the config hash, the seed, and SHA-256
checksums of all written artifacts. Exit codes: 0 success, 1 contract or
configuration error, 2 numerical abort.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .augment import bilinear_resize, normalize
from .config import config_hash, data_dir_from_file, dino_config_from_file
from .data import LabeledDataset, read_label_manifest, stratified_split, write_split_manifest
from .dino import DinoTrainer
from .errors import ConfigError, ContractError, NumericalError, NvkitError
from .evaluate import (
    ImageTask,
    ProbeConfig,
    center_crop_predict,
    finetune,
    four_crop_vote,
    linear_probe,
)
from .imageio import read_image, to_float
from .metrics import compute_metrics
from .models import load_model, save_model
from .synth import TASK_RATIOS, TASK_TABLE, task_table_dataset, textured_dataset, write_corpus
from .viz import attention_for_image, mean_attention, render_overlay, threshold_top_q


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, command: str, args: dict, seed: int,
                    cfg_hash: Optional[str], artifacts: Sequence[Path]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "args": {k: str(v) for k, v in sorted(args.items())},
        "config_hash": cfg_hash,
        "seed": seed,
        "artifacts": {str(p.relative_to(out_dir)): _sha256(p) for p in artifacts if p.exists()},
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _parse_ratios(raw: str) -> Tuple[float, float, float]:
    parts = [float(p) for p in raw.split(",")]
    if len(parts) != 3:
        raise ConfigError(f"--ratios needs three comma-separated values, got {raw!r}")
    total = sum(parts)
    if abs(total - 100.0) < 1e-9:
        parts = [p / 100.0 for p in parts]
    elif abs(total - 1.0) > 1e-9:
        raise ConfigError(f"--ratios must sum to 1 or 100, got {total}")
    return tuple(parts)  # type: ignore[return-value]


def _load_corpus(data_dir: Path) -> Tuple[LabeledDataset, List[np.ndarray]]:
    manifest = data_dir / "labels.csv"
    if not manifest.exists():
        raise ConfigError(f"no labels.csv under {data_dir}")
    dataset = read_label_manifest(manifest)
    images = [to_float(read_image(data_dir / rec["path"])) for rec in dataset.records]
    return dataset, images


def _prep_images(images: Sequence[np.ndarray], size: Tuple[int, int]) -> np.ndarray:
    h, w = size
    return np.stack([normalize(bilinear_resize(img, h, w)) for img in images])


def _image_task(dataset: LabeledDataset, images: Sequence[np.ndarray], task: str,
                ratios: Tuple[float, float, float], seed: int, size: Tuple[int, int]) -> ImageTask:
    manifest = stratified_split(dataset, task, ratios, seed)
    split_idx = {s: manifest.indices(dataset, s) for s in ("train", "val", "test")}
    labels = {i: rec["labels"][task] for i, rec in enumerate(dataset.records)}

    def build(split: str) -> Tuple[np.ndarray, np.ndarray]:
        idx = split_idx[split]
        return (
            _prep_images([images[i] for i in idx], size),
            np.asarray([labels[i] for i in idx], dtype=np.int64),
        )

    tr, trl = build("train")
    va, val = build("val")
    te, tel = build("test")
    return ImageTask(tr, trl, va, val, te, tel, alphabet=list(dataset.alphabets[task]))


# -- subcommand handlers -----------------------------------------------------------


def cmd_synth_data(args) -> int:
    out_dir = Path(args.out)
    meta = write_corpus(out_dir, args.kind, args.n, seed=args.seed)
    artifacts = [out_dir / "labels.csv", out_dir / "meta.json"]
    _write_manifest(out_dir, "synth-data", vars(args), args.seed, None, artifacts)
    print(f"wrote {meta['count']} {args.kind} images to {out_dir}")
    return 0


def cmd_split(args) -> int:
    if args.manifest:
        dataset = read_label_manifest(args.manifest)
        ratios = _parse_ratios(args.ratios) if args.ratios else TASK_RATIOS.get(args.task, (0.7, 0.15, 0.15))
    else:
        if args.task not in TASK_TABLE:
            raise ConfigError(f"--task must be one of {sorted(TASK_TABLE)} when no --manifest is given")
        dataset = task_table_dataset(args.task)
        ratios = _parse_ratios(args.ratios) if args.ratios else TASK_RATIOS[args.task]
    manifest = stratified_split(dataset, args.task, ratios, args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_csv = out_dir / "split.csv"
    write_split_manifest(out_csv, manifest)
    from .data import split_counts

    counts = split_counts(dataset, manifest, args.task)
    for label in sorted(counts):
        tr, va, te = counts[label]
        print(f"class {label}: train {tr} / val {va} / test {te}")
    _write_manifest(out_dir, "split", vars(args), args.seed, None, [out_csv])
    return 0


def cmd_pretrain(args) -> int:
    cfg = dino_config_from_file(args.config, seed_override=args.seed)
    if args.epochs is not None:
        cfg.epochs = args.epochs
    data_dir = args.data or data_dir_from_file(args.config)
    if data_dir:
        _, images = _load_corpus(Path(data_dir))
    else:
        images = list(textured_dataset(64, seed=cfg.seed, size=cfg.image_size))
    out_dir = Path(args.out)
    trainer = DinoTrainer(cfg, images, out_dir=out_dir)
    if args.resume:
        trainer.load_checkpoint(args.resume)
    stats = trainer.train()
    if stats:
        print(f"final epoch mean loss {stats[-1].mean_loss:.4f}, nan batches {stats[-1].nan_count}")
    artifacts = sorted(out_dir.glob("*.nvk")) + [out_dir / "train_log.csv"]
    _write_manifest(out_dir, "pretrain", vars(args), cfg.seed, config_hash(args.config), artifacts)
    return 0


def _results_json(task: str, mode: str, report, seed: int, ckpt: str) -> dict:
    return {
        "task": task,
        "mode": mode,
        "acc": report.accuracy,
        "bacc": report.balanced_accuracy,
        "f1": report.f1,
        "confusion": report.confusion.tolist(),
        "seed": seed,
        "ckpt": str(ckpt),
    }


def cmd_probe(args) -> int:
    model = load_model(args.ckpt)
    dataset, images = _load_corpus(Path(args.data))
    ratios = _parse_ratios(args.ratios) if args.ratios else (0.7, 0.15, 0.15)
    task = _image_task(dataset, images, args.task, ratios, args.seed, model.config.image_size)
    config = ProbeConfig(mode="linear_probe", epochs=args.epochs, lr=args.lr,
                         batch_size=args.batch_size, seed=args.seed)
    _, report = linear_probe(model, task, config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = out_dir / "results.json"
    results.write_text(json.dumps(_results_json(args.task, "linear_probe", report, args.seed, args.ckpt), indent=2))
    print(f"probe {args.task}: acc {report.accuracy:.4f} bacc {report.balanced_accuracy:.4f} f1 {report.f1:.4f}")
    _write_manifest(out_dir, "probe", vars(args), args.seed, None, [results])
    return 0


def cmd_finetune(args) -> int:
    model = load_model(args.ckpt)
    dataset, images = _load_corpus(Path(args.data))
    ratios = _parse_ratios(args.ratios) if args.ratios else (0.7, 0.15, 0.15)
    task = _image_task(dataset, images, args.task, ratios, args.seed, model.config.image_size)
    config = ProbeConfig(mode="finetune", epochs=args.epochs, lr=args.lr,
                         batch_size=args.batch_size, balanced_sampling=args.balanced,
                         seed=args.seed)
    _, report = finetune(model, task, config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_out = out_dir / "finetuned.nvk"
    save_model(ckpt_out, model)
    results = out_dir / "results.json"
    results.write_text(json.dumps(_results_json(args.task, "finetune", report, args.seed, args.ckpt), indent=2))
    print(f"finetune {args.task}: acc {report.accuracy:.4f} bacc {report.balanced_accuracy:.4f} f1 {report.f1:.4f}")
    _write_manifest(out_dir, "finetune", vars(args), args.seed, None, [results, ckpt_out])
    return 0


def cmd_evaluate(args) -> int:
    model = load_model(args.ckpt)
    if model.n_classes is None:
        raise ContractError("checkpoint has no classification head; finetune first")
    dataset, images = _load_corpus(Path(args.data))
    pairs = dataset.task_labels(args.task)
    alphabet = dataset.alphabets[args.task]

    def predict(idx: int) -> int:
        img = images[idx]
        if args.voting == "four_crop":
            pred, _ = four_crop_vote(img, model)
            return pred
        h, w = img.shape[:2]
        if h >= 256 and w >= 372:
            pred, _ = center_crop_predict(img, model)
            return pred
        return _whole_image_predict(model, img)  # frame smaller than the crop window

    indices = [i for i, _ in pairs]
    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            preds = list(pool.map(predict, indices))
    else:
        preds = [predict(i) for i in indices]
    labels = [label for _, label in pairs]
    pred_labels = [alphabet[p] for p in preds]
    report = compute_metrics(pred_labels, labels, alphabet=alphabet)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = out_dir / "results.json"
    results.write_text(json.dumps(_results_json(args.task, args.voting, report, args.seed, args.ckpt), indent=2))
    print(f"evaluate {args.task} ({args.voting}): acc {report.accuracy:.4f} "
          f"bacc {report.balanced_accuracy:.4f} f1 {report.f1:.4f}")
    _write_manifest(out_dir, "evaluate", vars(args), args.seed, None, [results])
    return 0


def _whole_image_predict(model, img: np.ndarray) -> int:
    from .tensor import no_grad

    h, w = model.config.image_size
    batch = np.stack([normalize(bilinear_resize(img, h, w))])
    with no_grad():
        logits = model.logits(batch)
    return int(np.argmax(logits.data[0]))


def cmd_visualize(args) -> int:
    model = load_model(args.ckpt)
    img = to_float(read_image(args.image))
    h, w = model.config.image_size
    prepped = normalize(bilinear_resize(img, h, w))
    maps = attention_for_image(model, prepped)
    per_head = maps[args.layer]
    mean_map = mean_attention(per_head)
    mask = threshold_top_q(mean_map, args.q)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    out_png = out_dir / f"{stem}_overlay.png"
    display = bilinear_resize(img, h, w)
    render_overlay(
        display, mask, out_png, grid=model.config.grid,
        per_head_masks=[threshold_top_q(m, args.q) for m in per_head],
    )
    heads_png = out_dir / f"{stem}_overlay_heads.png"
    print(f"wrote {out_png}")
    _write_manifest(out_dir, "visualize", vars(args), 0, None, [out_png, heads_png])
    return 0


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nvkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic corpus")
    p.add_argument("--kind", choices=["separable", "planted", "textured"], required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("split", help="stratified train/val/test split")
    p.add_argument("--task", required=True)
    p.add_argument("--ratios", default=None, help="e.g. 75,10,15")
    p.add_argument("--manifest", default=None, help="labels.csv; omit to use the builtin task tables")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("pretrain", help="self-distillation post-training")
    p.add_argument("--config", required=True)
    p.add_argument("--data", default=None, help="corpus dir with labels.csv")
    p.add_argument("--epochs", type=int, default=None, help="override config epochs")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    for name, handler in (("probe", cmd_probe), ("finetune", cmd_finetune)):
        p = sub.add_parser(name, help=f"{name} a checkpoint on a labeled corpus")
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--task", required=True)
        p.add_argument("--ratios", default=None)
        p.add_argument("--epochs", type=int, default=30)
        p.add_argument("--lr", type=float, default=1e-4)
        p.add_argument("--batch-size", type=int, default=32)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--workers", type=int, default=1)
        if name == "finetune":
            p.add_argument("--balanced", action="store_true")
        p.add_argument("--out", required=True)
        p.set_defaults(func=handler)

    p = sub.add_parser("evaluate", help="run inference and report metrics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--voting", choices=["single_crop", "four_crop"], default="single_crop")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("visualize", help="attention overlay for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--layer", type=int, default=-1)
    p.add_argument("--q", type=float, default=0.2)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_visualize)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 2
    except (NvkitError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
