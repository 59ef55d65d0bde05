"""Checkpoint-backed model construction.

Checkpoints are self-describing: alongside the parameters they carry
``meta.arch`` (0 = transformer, 1 = selective-SSM) and ``meta.config``
(the architecture's numeric config vector), so a model can be rebuilt
from a file path alone.
"""

from __future__ import annotations

from typing import Dict, Union

import numpy as np

from .checkpoint import load, save
from .errors import CheckpointError
from .vim import Vim, VimConfig
from .vit import VisionTransformer, ViTConfig

ARCH_CODES = {"vit": 0.0, "vim": 1.0}

Model = Union[VisionTransformer, Vim]


def meta_tensors(model: Model) -> Dict[str, np.ndarray]:
    return {
        "meta.arch": np.asarray([ARCH_CODES[model.arch]], dtype=np.float32),
        "meta.config": model.config_vector(),
    }


def save_model(path, model: Model) -> None:
    tensors = {name: p.data for name, p in model.params.items()}
    tensors.update(meta_tensors(model))
    save(str(path), tensors)


def model_from_tensors(tensors: Dict[str, np.ndarray], prefix: str = "") -> Model:
    """Rebuild a model from checkpoint tensors; `prefix` selects e.g. "ema."."""
    if "meta.arch" not in tensors:
        raise CheckpointError("checkpoint has no meta.arch tensor; cannot infer architecture")
    code = float(tensors["meta.arch"][0])
    if code == ARCH_CODES["vit"]:
        cfg = VisionTransformer.config_from_vector(tensors["meta.config"])
        model: Model = VisionTransformer(cfg)
    elif code == ARCH_CODES["vim"]:
        cfg = Vim.config_from_vector(tensors["meta.config"])
        model = Vim(cfg)
    else:
        raise CheckpointError(f"unknown architecture code {code}")
    head_key = f"{prefix}{model.arch}.head.w"
    if head_key in tensors:
        model.attach_head(tensors[head_key].shape[1])
    for name, p in model.params.items():
        key = prefix + name
        if key not in tensors:
            raise CheckpointError(f"checkpoint missing tensor {key}")
        if tensors[key].shape != p.shape:
            raise CheckpointError(
                f"tensor {key} has shape {tensors[key].shape}, expected {p.shape}"
            )
        p.data = tensors[key].astype(np.float32).copy()
    return model


def load_model(path, prefix: str = "") -> Model:
    return model_from_tensors(load(str(path)), prefix=prefix)
