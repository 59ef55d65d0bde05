"""Plain-text key=value config files (INI sections) for training runs.

Sections: [model] architecture and dimensions, [head] projection head,
[train] optimization and schedule fields (named after the standard
hyperparameter table: lr, min_lr, warmup_epochs, weight_decay,
teacher_temp, batch_size, ...), [data] corpus location.
"""

from __future__ import annotations

import configparser
import hashlib
from pathlib import Path
from typing import Optional, Tuple

from .dino import DinoConfig
from .errors import ConfigError


def _get(section, key: str, cast, default):
    if section is None or key not in section:
        return default
    raw = section[key]
    try:
        if cast is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value {raw!r} for key {key}: {exc}") from None


def _pair(raw: str) -> Tuple[float, float]:
    parts = [p.strip() for p in raw.split(",")]
    if len(parts) != 2:
        raise ConfigError(f"expected two comma-separated numbers, got {raw!r}")
    return float(parts[0]), float(parts[1])


def read_config(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    found = parser.read(path)
    if not found:
        raise ConfigError(f"config file not found: {path}")
    return parser


def config_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def dino_config_from_file(path, seed_override: Optional[int] = None) -> DinoConfig:
    parser = read_config(path)
    model = parser["model"] if parser.has_section("model") else None
    head = parser["head"] if parser.has_section("head") else None
    train = parser["train"] if parser.has_section("train") else None

    size = _get(model, "image_size", int, 224)
    cfg = DinoConfig(
        arch=_get(model, "arch", str, "vit"),
        image_size=(size, size),
        patch_size=_get(model, "patch_size", int, 16),
        channels=_get(model, "channels", int, 3),
        embed_dim=_get(model, "embed_dim", int, 384),
        depth=_get(model, "depth", int, 12),
        heads=_get(model, "heads", int, 6),
        mlp_ratio=_get(model, "mlp_ratio", float, 4.0),
        n_state=_get(model, "n_state", int, 16),
        expand=_get(model, "expand", int, 2),
        out_dim=_get(head, "out_dim", int, 1024),
        head_hidden=_get(head, "hidden", int, 512),
        head_bottleneck=_get(head, "bottleneck", int, 256),
        epochs=_get(train, "epochs", int, 100),
        batch_size=_get(train, "batch_size", int, 64),
        lr=_get(train, "lr", float, 5e-4),
        min_lr=_get(train, "min_lr", float, 1e-6),
        warmup_epochs=_get(train, "warmup_epochs", int, 10),
        weight_decay=_get(train, "weight_decay", float, 0.04),
        weight_decay_end=_get(train, "weight_decay_end", float, 0.4),
        teacher_temp=_get(train, "teacher_temp", float, 0.04),
        warmup_teacher_temp=_get(train, "warmup_teacher_temp", float, 0.04),
        warmup_teacher_temp_epochs=_get(train, "warmup_teacher_temp_epochs", int, 0),
        student_temp=_get(train, "student_temp", float, 0.1),
        momentum_teacher=_get(train, "momentum_teacher", float, 0.996),
        center_rate=_get(train, "center_rate", float, 0.9),
        centering=_get(train, "centering", bool, True),
        clip_grad=_get(train, "clip_grad", float, 3.0),
        nan_abort_threshold=_get(train, "nan_abort_threshold", int, 10),
        n_local_crops=_get(train, "n_local_crops", int, 8),
        global_crop_scale=_get(train, "global_crop_scale", _pair, (0.4, 1.0)),
        local_crop_scale=_get(train, "local_crop_scale", _pair, (0.05, 0.4)),
        global_size=_get(train, "global_size", int, size),
        local_size=_get(train, "local_size", int, max(1, size * 96 // 224)),
        seed=_get(train, "seed", int, 0),
        save_every_epochs=_get(train, "save_every_epochs", int, 0),
    )
    if seed_override is not None:
        cfg.seed = seed_override
    return cfg


def data_dir_from_file(path) -> Optional[str]:
    parser = read_config(path)
    if parser.has_section("data") and "corpus" in parser["data"]:
        return parser["data"]["corpus"]
    return None
