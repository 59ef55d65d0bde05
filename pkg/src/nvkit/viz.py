"""Class-token attention extraction and overlay rendering.

Only the transformer backbone exposes attention matrices; asking for
maps from the selective-SSM backbone raises explicitly. Maps are the
class-token query row per head, with the class-token column dropped and
the rest renormalized to sum 1.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, UnsupportedArchitectureError
from .imageio import to_float, to_uint8, write_image
from .tensor import Tensor, no_grad


def cls_attention(attn_maps: Sequence, layer: int) -> np.ndarray:
    """Per-head class-token attention over patches, [n_h, J], rows summing to 1."""
    if not -len(attn_maps) <= layer < len(attn_maps):
        raise ContractError(f"layer {layer} out of range for {len(attn_maps)} recorded layers")
    attn = attn_maps[layer]
    arr = attn.data if isinstance(attn, Tensor) else np.asarray(attn)
    if arr.ndim != 3:
        raise ContractError(f"expected [n_h, N, N] attention, got shape {arr.shape}")
    rows = arr[:, 0, 1:]  # class query attends to patches; drop the cls column
    return rows / rows.sum(axis=-1, keepdims=True)


def attention_for_image(model, image) -> List[np.ndarray]:
    """All layers' cls-attention maps for one image; transformer only."""
    if getattr(model, "arch", None) != "vit":
        raise UnsupportedArchitectureError(
            "attention maps require the transformer backbone; the selective-SSM "
            "backbone has no attention matrix"
        )
    with no_grad():
        _, attn = model.forward(image)
    return [cls_attention(attn, i) for i in range(len(attn))]


def mean_attention(per_head: np.ndarray) -> np.ndarray:
    return per_head.mean(axis=0)


def threshold_top_q(scores: np.ndarray, q: float = 0.2) -> np.ndarray:
    """Boolean mask keeping the ceil(q*J) highest scores, ties to lower index."""
    if not 0.0 < q <= 1.0:
        raise ContractError(f"q must be in (0, 1], got {q}")
    scores = np.asarray(scores).ravel()
    keep = int(math.ceil(q * scores.size))
    order = np.argsort(-scores, kind="stable")  # stable: equal scores keep index order
    mask = np.zeros(scores.size, dtype=bool)
    mask[order[:keep]] = True
    return mask


def render_overlay(
    image: np.ndarray,
    mask: np.ndarray,
    out_path,
    grid: Optional[Tuple[int, int]] = None,
    color: Tuple[float, float, float] = (1.0, 0.1, 0.1),
    alpha: float = 0.45,
    per_head_masks: Optional[Sequence[np.ndarray]] = None,
) -> None:
    """Write the image with kept patches tinted; empty mask copies the input.

    When per-head masks are given, a horizontal strip of per-head overlays
    is written next to the main file as `<stem>_heads<suffix>`.
    """
    img = to_float(np.asarray(image))
    mask = np.asarray(mask)
    if mask.ndim == 1:
        if grid is None:
            side = int(round(math.sqrt(mask.size)))
            if side * side != mask.size:
                raise ContractError("flat mask needs an explicit patch grid")
            grid = (side, side)
        mask = mask.reshape(grid)
    gh, gw = mask.shape
    h, w = img.shape[:2]
    if h % gh or w % gw:
        raise ContractError(f"mask grid {mask.shape} does not tile image {h}x{w}")
    out = _tint(img, mask, color, alpha)
    write_image(out_path, out)
    if per_head_masks is not None:
        panels = [_tint(img, np.asarray(m).reshape(gh, gw), color, alpha) for m in per_head_masks]
        strip = np.concatenate(panels, axis=1)
        out_path = Path(out_path)
        write_image(out_path.with_name(f"{out_path.stem}_heads{out_path.suffix}"), strip)


def _tint(img: np.ndarray, mask: np.ndarray, color, alpha: float) -> np.ndarray:
    h, w = img.shape[:2]
    gh, gw = mask.shape
    pixel_mask = np.kron(mask, np.ones((h // gh, w // gw), dtype=bool))
    out = img.copy()
    tint = (1.0 - alpha) * img[pixel_mask] + alpha * np.asarray(color, dtype=np.float32)
    out[pixel_mask] = tint
    return to_uint8(out)
