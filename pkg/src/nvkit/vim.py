"""Bidirectional selective state-space backbone.

Tokens come from the same patch embedding as the transformer, but the
class token sits at floor(J/2) and each block mixes the sequence with a
selective scan run in both directions. The state matrix A is diagonal
per channel, stored as `a_log` with A = -exp(a_log) so the continuous
dynamics always decay; Δ, B and C are projections of the current input,
and the recurrence uses the zero-order-hold discretization

    Ā = exp(ΔA),   B̄ = (ΔA)^(-1) (exp(ΔA) - 1) · ΔB

with the (exp(x)-1)/x factor evaluated by series below |x| = 1e-4.

The scan itself is a single fused autodiff node: the forward pass is an
O(L) loop caching hidden states, and the backward pass replays the loop
in reverse, so graph size stays constant in L.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, NumericalError
from .rng import derive_rng, truncated_normal
from .tensor import Tensor


@dataclass
class VimConfig:
    image_size: Tuple[int, int] = (224, 224)
    patch_size: int = 16
    channels: int = 3
    embed_dim: int = 384
    depth: int = 12
    n_state: int = 16
    expand: int = 2
    use_short_conv: bool = False  # reference blocks add a depthwise conv; off by default
    cls_position: str = "middle"

    def __post_init__(self):
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )
        if self.cls_position != "middle":
            raise ConfigError(f"unsupported cls_position {self.cls_position!r}")
        if self.use_short_conv:
            raise ConfigError("short depthwise convolution is declared but not implemented")

    @property
    def grid(self) -> Tuple[int, int]:
        h, w = self.image_size
        return h // self.patch_size, w // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def d_inner(self) -> int:
        return self.expand * self.embed_dim

    @property
    def cls_index(self) -> int:
        return self.num_patches // 2


@dataclass
class ScanParams:
    """One direction's scan parameters.

    dproj packs the Δ projection as [D_inner+1, D_inner]: rows 0..D-1 are
    the weight, the last row is the bias added before softplus.
    """

    a_log: Tensor  # [D_inner, N]
    dproj: Tensor  # [D_inner+1, D_inner]
    bproj: Tensor  # [D_inner, N]
    cproj: Tensor  # [D_inner, N]


def zoh_discretize(a: Tensor, b: Tensor, delta: Tensor) -> Tuple[Tensor, Tensor]:
    """Discretize diagonal continuous dynamics by zero-order hold.

    a: [D,N] per-channel diagonal entries; delta: [...,D] positive step
    sizes; b: [...,N] input matrix rows. Returns (Ā, B̄), each [...,D,N]:
    Ā = exp(Δa) and B̄ = phi1(Δa)·Δ·b where phi1(x) = (e^x - 1)/x.
    """
    if np.any(delta.data <= 0):
        raise ContractError("zoh_discretize requires strictly positive step sizes")
    delta_col = T.reshape(delta, (*delta.shape, 1))  # [...,D,1]
    da = T.mul(delta_col, a)  # [...,D,N]
    abar = T.exp(da)
    b_row = T.reshape(b, (*b.shape[:-1], 1, b.shape[-1]))  # [...,1,N]
    bbar = T.mul(T.mul(T.phi1(da), delta_col), b_row)
    return abar, bbar


def _scan_core(abar: Tensor, bu: Tensor, c: Tensor) -> Tensor:
    """Fused recurrence h_t = Ā_t h_{t-1} + (B̄u)_t, y_t = C_t·h_t.

    abar, bu: [B,L,D,N]; c: [B,L,N]; returns y [B,L,D]. Hidden states are
    cached on the forward pass; the backward pass walks them in reverse
    and fills all three input gradients in one sweep.
    """
    a_np, x_np, c_np = abar.data, bu.data, c.data
    bsz, length, d, n = a_np.shape
    hs = np.zeros((bsz, length + 1, d, n), dtype=np.float32)
    y = np.empty((bsz, length, d), dtype=np.float32)
    for t in range(length):
        hs[:, t + 1] = a_np[:, t] * hs[:, t] + x_np[:, t]
        y[:, t] = np.einsum("bdn,bn->bd", hs[:, t + 1], c_np[:, t])

    cache: dict = {}

    def run_backward(g: np.ndarray) -> None:
        ga = np.empty_like(a_np)
        gx = np.empty_like(x_np)
        gc = np.empty_like(c_np)
        gh = np.zeros((bsz, d, n), dtype=np.float32)
        for t in range(length - 1, -1, -1):
            gh += g[:, t, :, None] * c_np[:, t, None, :]
            gc[:, t] = np.einsum("bd,bdn->bn", g[:, t], hs[:, t + 1])
            ga[:, t] = gh * hs[:, t]
            gx[:, t] = gh
            gh = gh * a_np[:, t]
        cache["ga"], cache["gx"], cache["gc"] = ga, gx, gc

    def grad(which: str):
        def fn(g):
            if which not in cache:
                run_backward(g)
            return cache[which]

        return fn

    return T.make_node(y, (abar, bu, c), (grad("ga"), grad("gx"), grad("gc")))


def selective_scan(u: Tensor, params: ScanParams) -> Tensor:
    """Input-dependent SSM over u [L,D_inner] or [B,L,D_inner]; same-shape output.

    Δ = softplus(u·W_Δ + bias), B = u·W_B, C = u·W_C, then the discrete
    recurrence y_t = C_t (Ā_t h_{t-1} + B̄_t u_t) with h_{-1} = 0.
    """
    u = u if isinstance(u, Tensor) else Tensor(u)
    single = u.ndim == 2
    if single:
        u = T.reshape(u, (1, *u.shape))
    d_inner = params.a_log.shape[0]
    if u.shape[-1] != d_inner:
        raise ContractError(f"scan input width {u.shape[-1]} != D_inner {d_inner}")

    delta = T.softplus(T.add(T.matmul(u, params.dproj[:d_inner]), params.dproj[d_inner]))
    b_in = T.matmul(u, params.bproj)  # [B,L,N]
    c_in = T.matmul(u, params.cproj)  # [B,L,N]
    a = T.mul(T.exp(params.a_log), -1.0)  # strictly negative diagonal
    abar, bbar = zoh_discretize(a, b_in, delta)
    bu = T.mul(bbar, T.reshape(u, (*u.shape, 1)))
    y = _scan_core(abar, bu, c_in)
    return y[0] if single else y


class Vim:
    """Bidirectional selective-SSM backbone; params keyed by checkpoint name."""

    arch = "vim"

    def __init__(self, config: VimConfig, seed: int = 0, n_classes: Optional[int] = None):
        self.config = config
        self.params: Dict[str, Tensor] = {}
        d, di, n = config.embed_dim, config.d_inner, config.n_state
        pdim = config.patch_size * config.patch_size * config.channels

        def init(name: str, shape, std: float = 0.02) -> None:
            rng = derive_rng(seed, "init", name)
            self.params[name] = Tensor(truncated_normal(rng, shape, std), requires_grad=True)

        init("vim.patch_proj", (pdim, d))
        init("vim.pos", (config.num_patches + 1, d))
        init("vim.cls", (d,))
        for i in range(config.depth):
            init(f"vim.layer{i}.in", (d, 2 * di))
            init(f"vim.layer{i}.out", (di, d))
            packed = np.zeros((2, d), dtype=np.float32)
            packed[0] = 1.0
            self.params[f"vim.layer{i}.norm"] = Tensor(packed, requires_grad=True)
            for direction in ("fwd", "bwd"):
                # decaying states 1..N per channel; Δ bias set so softplus lands in [1e-3, 1e-1]
                a0 = np.tile(np.log(np.arange(1, n + 1, dtype=np.float32)), (di, 1))
                self.params[f"vim.layer{i}.a_log.{direction}"] = Tensor(a0, requires_grad=True)
                rng = derive_rng(seed, "init", f"vim.layer{i}.dproj.{direction}")
                dproj = np.zeros((di + 1, di), dtype=np.float32)
                dproj[:di] = truncated_normal(rng, (di, di))
                dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=di)).astype(np.float32)
                dproj[di] = np.log(np.expm1(dt))
                self.params[f"vim.layer{i}.dproj.{direction}"] = Tensor(dproj, requires_grad=True)
                init(f"vim.layer{i}.bproj.{direction}", (di, n))
                init(f"vim.layer{i}.cproj.{direction}", (di, n))
        if n_classes is not None:
            self.attach_head(n_classes, seed=seed)

    # -- heads ----------------------------------------------------------------

    @property
    def n_classes(self) -> Optional[int]:
        head = self.params.get("vim.head.w")
        return None if head is None else head.shape[1]

    def attach_head(self, n_classes: int, seed: int = 0) -> None:
        rng = derive_rng(seed, "init", "vim.head.w")
        self.params["vim.head.w"] = Tensor(
            truncated_normal(rng, (self.config.embed_dim, n_classes)), requires_grad=True
        )
        self.params["vim.head.b"] = Tensor(np.zeros(n_classes, dtype=np.float32), requires_grad=True)

    def backbone_param_names(self) -> List[str]:
        return [n for n in sorted(self.params) if not n.startswith("vim.head")]

    def scan_params(self, layer: int, direction: str) -> ScanParams:
        p = self.params
        return ScanParams(
            a_log=p[f"vim.layer{layer}.a_log.{direction}"],
            dproj=p[f"vim.layer{layer}.dproj.{direction}"],
            bproj=p[f"vim.layer{layer}.bproj.{direction}"],
            cproj=p[f"vim.layer{layer}.cproj.{direction}"],
        )

    # -- forward ---------------------------------------------------------------

    def patch_embed(self, images) -> Tensor:
        """Tokens with the class row inserted at floor(J/2), positions added."""
        from .vit import extract_patches  # same tokenization, different backbone

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
        tokens = T.matmul(patches, self.params["vim.patch_proj"])  # [B,J,D]
        cls = T.reshape(self.params["vim.cls"], (1, 1, cfg.embed_dim))
        cls_rows = T.add(cls, Tensor(np.zeros((b, 1, cfg.embed_dim), dtype=np.float32)))
        mid = cfg.cls_index
        out = T.concatenate([tokens[:, :mid], cls_rows, tokens[:, mid:]], axis=1)
        out = T.add(out, self.params["vim.pos"])
        return out[0] if squeeze else out

    def block(self, x: Tensor, layer: int) -> Tensor:
        """norm -> split signal/gate -> two-direction scan -> gate -> project -> residual."""
        cfg = self.config
        di = cfg.d_inner
        packed = self.params[f"vim.layer{layer}.norm"]
        xn = T.layer_norm(x, scale=packed[0], offset=packed[1])
        z = T.matmul(xn, self.params[f"vim.layer{layer}.in"])  # [B,L,2*di]
        signal, gate = z[:, :, :di], z[:, :, di:]
        fwd = selective_scan(signal, self.scan_params(layer, "fwd"))
        rev = T.flip(signal, axis=1)
        bwd = T.flip(selective_scan(rev, self.scan_params(layer, "bwd")), axis=1)
        mixed = T.mul(T.add(fwd, bwd), T.silu(gate))
        return T.add(x, T.matmul(mixed, self.params[f"vim.layer{layer}.out"]))

    def forward(self, images) -> Tensor:
        """Class-token representation, [B,D] for batches or [D] for one image."""
        single = (images.data if isinstance(images, Tensor) else np.asarray(images)).ndim == 3
        x = self.patch_embed(images)
        if single:
            x = T.reshape(x, (1, *x.shape))
        for i in range(self.config.depth):
            x = self.block(x, i)
            bad = ~np.isfinite(x.data)
            if bad.any():
                batch_idx = int(np.argwhere(bad.any(axis=tuple(range(1, x.ndim))))[0][0])
                raise NumericalError(
                    f"non-finite activations after vim layer {i} (batch index {batch_idx})"
                )
        cls_repr = x[:, self.config.cls_index, :]
        return cls_repr[0] if single else cls_repr

    def features(self, images) -> Tensor:
        return self.forward(images)

    def logits(self, images) -> Tensor:
        if "vim.head.w" not in self.params:
            raise ConfigError("model has no classification head attached")
        feats = self.features(images)
        single = feats.ndim == 1
        if single:
            feats = T.reshape(feats, (1, feats.shape[0]))
        out = T.add(T.matmul(feats, self.params["vim.head.w"]), self.params["vim.head.b"])
        return out[0] if single else out

    # -- serialization -----------------------------------------------------------

    def config_vector(self) -> np.ndarray:
        cfg = self.config
        return np.asarray(
            [cfg.image_size[0], cfg.image_size[1], cfg.patch_size, cfg.channels,
             cfg.embed_dim, cfg.depth, cfg.n_state, cfg.expand],
            dtype=np.float32,
        )

    @classmethod
    def config_from_vector(cls, vec: np.ndarray) -> VimConfig:
        vals = [float(v) for v in vec]
        return VimConfig(
            image_size=(int(vals[0]), int(vals[1])),
            patch_size=int(vals[2]),
            channels=int(vals[3]),
            embed_dim=int(vals[4]),
            depth=int(vals[5]),
            n_state=int(vals[6]),
            expand=int(vals[7]),
        )


def bidirectional_block(x: Tensor, model: Vim, layer: int = 0) -> Tensor:
    """Single-sequence [L,D] block application (batched internally)."""
    out = model.block(T.reshape(x, (1, *x.shape)), layer)
    return out[0]


def vim_forward(image, model: Vim) -> Tensor:
    return model.forward(image)
