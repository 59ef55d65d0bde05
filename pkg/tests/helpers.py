"""Shared test utilities: finite-difference gradient checks and tiny model factories.

The finite-difference helpers evaluate the loss under no_grad so probing
never grows the recorded graph. Default-initialized backbones produce
gradients too small for float32 central differences (the loss itself is
O(1), so fd noise is ~eps/h = 6e-5), so the factories rescale weights
until gradients sit comfortably above that floor; the analytic values
are unchanged in kind, only in magnitude.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterable, Optional

import numpy as np

from nvkit import tensor as T
from nvkit.tensor import Tensor, no_grad


def rel_err(a: float, b: float, floor: float = 1e-2) -> float:
    """Relative error with an absolute floor for near-zero gradients.

    Gradients below the floor are held to |a - b| <= floor * rtol, the
    resolution limit of float32 central differences on an O(1) loss;
    larger gradients face the plain relative criterion.
    """
    return abs(a - b) / max(abs(a), abs(b), floor)


def fd_gradient(loss_fn: Callable[[], Tensor], param: Tensor, index, h: float = 1e-3) -> float:
    orig = float(param.data[index])
    with no_grad():
        param.data[index] = orig + h
        plus = float(loss_fn().data)
        param.data[index] = orig - h
        minus = float(loss_fn().data)
    param.data[index] = orig
    return (plus - minus) / (2.0 * h)


def check_param_grads(
    loss_fn: Callable[[], Tensor],
    params: Dict[str, Tensor],
    n_top: int = 3,
    n_rand: int = 2,
    h: float = 1e-3,
    rtol: float = 1e-2,
    floor: float = 1e-2,
    seed: int = 0,
) -> int:
    """Backprop once, then fd-check the largest-|g| and some random entries per tensor.

    Returns the number of elements checked; raises AssertionError listing
    every element whose relative error exceeds rtol.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    T.backward(loss)
    rng = np.random.default_rng(seed)
    failures = []
    checked = 0
    for name in sorted(params):
        p = params[name]
        g = p.grad
        assert g is not None, f"no gradient reached {name}"
        order = np.argsort(-np.abs(g).ravel(), kind="stable")
        picks = [int(k) for k in order[:n_top]]
        if p.data.size > n_top:
            picks += [int(k) for k in rng.integers(0, p.data.size, size=n_rand)]
        for k in dict.fromkeys(picks):
            idx = np.unravel_index(k, p.shape)
            numeric = fd_gradient(loss_fn, p, idx, h)
            err = rel_err(float(g[idx]), numeric, floor)
            checked += 1
            if err > rtol:
                failures.append(
                    f"{name}{list(idx)}: analytic {float(g[idx]):.6g} fd {numeric:.6g} rel {err:.3g}"
                )
    assert not failures, "gradient mismatches:\n" + "\n".join(failures)
    return checked


def fd_check_tensor(
    f: Callable[[Tensor], Tensor],
    x: np.ndarray,
    h: float = 1e-3,
    rtol: float = 1e-2,
    floor: float = 1e-2,
) -> None:
    """Check every element of df/dx for a scalar-valued f built from tensor ops."""
    leaf = Tensor(np.asarray(x, dtype=np.float32), requires_grad=True)
    loss = f(leaf)
    T.backward(loss)
    g = leaf.grad
    assert g is not None
    for k in range(leaf.data.size):
        idx = np.unravel_index(k, leaf.shape)
        numeric = fd_gradient(lambda: f(leaf), leaf, idx, h)
        err = rel_err(float(g[idx]), numeric, floor)
        assert err <= rtol, f"index {idx}: analytic {float(g[idx]):.6g} fd {numeric:.6g} rel {err:.3g}"


# -- model factories -----------------------------------------------------------


def tiny_vit(depth: int = 2, d: int = 32, heads: int = 4, image: int = 16, patch: int = 8,
             seed: int = 0, mlp_ratio: float = 2.0):
    from nvkit.vit import ViTConfig, VisionTransformer

    cfg = ViTConfig(image_size=(image, image), patch_size=patch, channels=3,
                    embed_dim=d, depth=depth, heads=heads, mlp_ratio=mlp_ratio)
    return VisionTransformer(cfg, seed=seed)


def tiny_vim(depth: int = 2, d: int = 32, n_state: int = 8, expand: int = 2,
             image: int = 16, patch: int = 8, seed: int = 0):
    from nvkit.vim import Vim, VimConfig

    cfg = VimConfig(image_size=(image, image), patch_size=patch, channels=3,
                    embed_dim=d, depth=depth, n_state=n_state, expand=expand)
    return Vim(cfg, seed=seed)


def boost_params(model, factor: float = 8.0, seed: int = 0) -> None:
    """Rescale weights so fd checking is meaningful in float32.

    Norm packs and a_log stay as initialized; the step-size projection
    bias row is re-drawn so softplus lands in [0.2, 0.8] instead of the
    conservative [1e-3, 1e-1] training regime.
    """
    rng = np.random.default_rng(seed)
    for name, p in model.params.items():
        if ".norm" in name or "a_log" in name:
            continue
        if "dproj" in name:
            di = p.shape[1]
            p.data[:di] = p.data[:di] * np.float32(factor)
            p.data[di] = np.log(np.expm1(rng.uniform(0.2, 0.8, size=di))).astype(np.float32)
        else:
            p.data = (p.data * np.float32(factor)).astype(np.float32)


def weighted_cls_loss(model, image: np.ndarray, w: np.ndarray) -> Callable[[], Tensor]:
    """Scalar loss sum(w * cls_repr) as a reusable closure."""
    w_t = Tensor(np.asarray(w, dtype=np.float32))

    def loss_fn() -> Tensor:
        feats = model.features(image)
        return T.sum(T.mul(feats, w_t))

    return loss_fn
