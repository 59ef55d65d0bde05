"""Vision Transformer backbone.

Patch tokenization, learned positional embeddings, pre-norm blocks of
multi-head self-attention and a GELU MLP, class token at the front of the
sequence, parameter-free final normalization. The forward pass also
returns every layer's attention tensor so overlays can be rendered
without re-running the model.

Linear layers carry no biases; each layer norm packs its scale and offset
as rows 0 and 1 of a single [2, D] tensor so every parameter serializes
under one checkpoint name.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .rng import derive_rng, truncated_normal
from .tensor import Tensor


@dataclass
class ViTConfig:
    image_size: Tuple[int, int] = (224, 224)  # (H, W)
    patch_size: int = 16
    channels: int = 3
    embed_dim: int = 384
    depth: int = 12
    heads: int = 6
    mlp_ratio: float = 4.0
    cls_position: str = "front"

    def __post_init__(self):
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.cls_position != "front":
            raise ConfigError(f"unsupported cls_position {self.cls_position!r}")

    @property
    def grid(self) -> Tuple[int, int]:
        h, w = self.image_size
        return h // self.patch_size, w // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.embed_dim))


def extract_patches(images: np.ndarray, patch: int) -> np.ndarray:
    """[B,H,W,C] (or [H,W,C]) -> [B,J,P*P*C] row-major patch rows.

    Patches are ordered by grid row then grid column; within a patch,
    values are flattened (row, column, channel) fastest-last.
    """
    arr = np.asarray(images, dtype=np.float32)
    squeeze = arr.ndim == 3
    if squeeze:
        arr = arr[None]
    b, h, w, c = arr.shape
    if h % patch or w % patch:
        raise DimensionError(f"image {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    tiled = arr.reshape(b, gh, patch, gw, patch, c).transpose(0, 1, 3, 2, 4, 5)
    flat = np.ascontiguousarray(tiled).reshape(b, gh * gw, patch * patch * c)
    return flat[0] if squeeze else flat


class VisionTransformer:
    """ViT backbone; parameters live in `self.params` keyed by checkpoint name."""

    arch = "vit"

    def __init__(self, config: ViTConfig, seed: int = 0, n_classes: Optional[int] = None):
        self.config = config
        self.params: Dict[str, Tensor] = {}
        d = config.embed_dim
        pdim = config.patch_size * config.patch_size * config.channels

        def init(name: str, shape, std: float = 0.02) -> None:
            rng = derive_rng(seed, "init", name)
            self.params[name] = Tensor(truncated_normal(rng, shape, std), requires_grad=True)

        init("vit.patch_proj", (pdim, d))
        init("vit.pos", (config.num_patches + 1, d))
        init("vit.cls", (d,))
        for i in range(config.depth):
            init(f"vit.layer{i}.wqkv", (d, 3 * d))
            init(f"vit.layer{i}.wmsa", (d, d))
            init(f"vit.layer{i}.mlp1", (d, config.mlp_hidden))
            init(f"vit.layer{i}.mlp2", (config.mlp_hidden, d))
            for norm in ("norm1", "norm2"):
                packed = np.zeros((2, d), dtype=np.float32)
                packed[0] = 1.0  # row 0 scale, row 1 offset
                self.params[f"vit.layer{i}.{norm}"] = Tensor(packed, requires_grad=True)
        if n_classes is not None:
            self.attach_head(n_classes, seed=seed)

    # -- heads ---------------------------------------------------------------

    @property
    def n_classes(self) -> Optional[int]:
        head = self.params.get("vit.head.w")
        return None if head is None else head.shape[1]

    def attach_head(self, n_classes: int, seed: int = 0) -> None:
        rng = derive_rng(seed, "init", "vit.head.w")
        self.params["vit.head.w"] = Tensor(
            truncated_normal(rng, (self.config.embed_dim, n_classes)), requires_grad=True
        )
        self.params["vit.head.b"] = Tensor(np.zeros(n_classes, dtype=np.float32), requires_grad=True)

    def backbone_param_names(self) -> List[str]:
        return [n for n in sorted(self.params) if not n.startswith("vit.head")]

    # -- forward -------------------------------------------------------------

    def patch_embed(self, images) -> Tensor:
        """[B,H,W,C] or [H,W,C] pixels -> [B,J+1,D] tokens (cls first, positions added)."""
        cfg = self.config
        arr = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float32)
        squeeze = arr.ndim == 3
        if squeeze:
            arr = arr[None]
        if arr.shape[1:] != (*cfg.image_size, cfg.channels):
            raise ConfigError(
                f"expected images of shape {(*cfg.image_size, cfg.channels)}, got {arr.shape[1:]}"
            )
        b = arr.shape[0]
        patches = Tensor(extract_patches(arr, cfg.patch_size))
        tokens = T.matmul(patches, self.params["vit.patch_proj"])  # [B,J,D]
        cls = T.reshape(self.params["vit.cls"], (1, 1, cfg.embed_dim))
        cls_rows = T.add(cls, Tensor(np.zeros((b, 1, cfg.embed_dim), dtype=np.float32)))
        out = T.concatenate([cls_rows, tokens], axis=1)
        out = T.add(out, self.params["vit.pos"])
        return out[0] if squeeze else out

    def attention(self, x: Tensor, layer: int) -> Tuple[Tensor, Tensor]:
        """Multi-head self-attention on [B,N,D]; returns (output, attn [B,n_h,N,N])."""
        cfg = self.config
        b, n, d = x.shape
        nh, dh = cfg.heads, cfg.head_dim
        qkv = T.matmul(x, self.params[f"vit.layer{layer}.wqkv"])  # [B,N,3D]

        def split_heads(lo: int) -> Tensor:
            part = qkv[:, :, lo : lo + d]
            return T.transpose(T.reshape(part, (b, n, nh, dh)), (0, 2, 1, 3))

        q, k, v = split_heads(0), split_heads(d), split_heads(2 * d)
        scores = T.mul(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
        attn = T.softmax(scores, axis=-1)  # [B,nh,N,N]
        mixed = T.matmul(attn, v)  # [B,nh,N,dh]
        merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (b, n, d))
        return T.matmul(merged, self.params[f"vit.layer{layer}.wmsa"]), attn

    def _mlp(self, x: Tensor, layer: int) -> Tensor:
        hidden = T.gelu(T.matmul(x, self.params[f"vit.layer{layer}.mlp1"]))
        return T.matmul(hidden, self.params[f"vit.layer{layer}.mlp2"])

    def _norm(self, x: Tensor, name: str) -> Tensor:
        packed = self.params[name]
        return T.layer_norm(x, scale=packed[0], offset=packed[1])

    def forward(self, images) -> Tuple[Tensor, List[Tensor]]:
        """Returns (cls representation [B,D] or [D], attention per layer)."""
        single = (images.data if isinstance(images, Tensor) else np.asarray(images)).ndim == 3
        x = self.patch_embed(images)
        if single:
            x = T.reshape(x, (1, *x.shape))
        attn_maps: List[Tensor] = []
        for i in range(self.config.depth):
            a, attn = self.attention(self._norm(x, f"vit.layer{i}.norm1"), i)
            attn_maps.append(attn[0] if single else attn)
            x = T.add(x, a)
            x = T.add(x, self._mlp(self._norm(x, f"vit.layer{i}.norm2"), i))
        x = T.layer_norm(x)
        cls_repr = x[:, 0, :]
        return (cls_repr[0], attn_maps) if single else (cls_repr, attn_maps)

    def features(self, images) -> Tensor:
        return self.forward(images)[0]

    def logits(self, images) -> Tensor:
        if "vit.head.w" not in self.params:
            raise ConfigError("model has no classification head attached")
        feats = self.features(images)
        single = feats.ndim == 1
        if single:
            feats = T.reshape(feats, (1, feats.shape[0]))
        out = T.add(T.matmul(feats, self.params["vit.head.w"]), self.params["vit.head.b"])
        return out[0] if single else out

    # -- serialization --------------------------------------------------------

    def config_vector(self) -> np.ndarray:
        cfg = self.config
        return np.asarray(
            [cfg.image_size[0], cfg.image_size[1], cfg.patch_size, cfg.channels,
             cfg.embed_dim, cfg.depth, cfg.heads, cfg.mlp_ratio],
            dtype=np.float32,
        )

    @classmethod
    def config_from_vector(cls, vec: np.ndarray) -> ViTConfig:
        vals = [float(v) for v in vec]
        return ViTConfig(
            image_size=(int(vals[0]), int(vals[1])),
            patch_size=int(vals[2]),
            channels=int(vals[3]),
            embed_dim=int(vals[4]),
            depth=int(vals[5]),
            heads=int(vals[6]),
            mlp_ratio=vals[7],
        )


def vit_forward(image, model: VisionTransformer) -> Tuple[Tensor, List[Tensor]]:
    """Single-image forward: (cls_repr [D], attention maps [n_h,N,N] per layer)."""
    return model.forward(image)
