"""Self-distillation trainer: student/teacher multi-view matching.

The student sees every view of an image; the teacher (an exponential
moving average of the student) sees only the two global views. Both map
views to K-way distributions by temperature-scaled softmax; the loss is
the cross-entropy of the student distribution against every teacher
distribution from a different view. Teacher logits are centered by a
running mean before sharpening, which blocks collapse to a constant
output.

Everything a step touches (parameter order, EMA arithmetic, RNG streams,
log formatting) is deterministic, so one (config, seed) pair yields
bitwise-identical checkpoints and logs on every run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .augment import MultiCropSpec, ViewSet, bilinear_resize, make_views
from .errors import CheckpointError, ConfigError, ContractError, NumericalError
from .optim import AdamW, clip_global_norm
from .rng import derive_rng, truncated_normal
from .tensor import Tensor, no_grad

LOG_COLUMNS = ("step", "loss", "lr", "wd", "teacher_temp", "momentum", "teacher_entropy")


@dataclass
class DinoConfig:
    """Hyperparameters for one post-training run; names mirror the config file."""

    arch: str = "vit"
    image_size: Tuple[int, int] = (224, 224)
    patch_size: int = 16
    channels: int = 3
    embed_dim: int = 384
    depth: int = 12
    heads: int = 6  # vit only
    mlp_ratio: float = 4.0  # vit only
    n_state: int = 16  # vim only
    expand: int = 2  # vim only

    out_dim: int = 1024  # K; 65,536 at full scale, desk default 1024
    head_hidden: int = 512
    head_bottleneck: int = 256

    epochs: int = 100
    batch_size: int = 64
    lr: float = 5e-4
    min_lr: float = 1e-6
    warmup_epochs: int = 10
    weight_decay: float = 0.04
    weight_decay_end: float = 0.4
    teacher_temp: float = 0.04
    warmup_teacher_temp: float = 0.04
    warmup_teacher_temp_epochs: int = 0
    student_temp: float = 0.1
    momentum_teacher: float = 0.996
    center_rate: float = 0.9
    centering: bool = True
    clip_grad: float = 3.0
    nan_abort_threshold: int = 10
    n_local_crops: int = 8
    global_crop_scale: Tuple[float, float] = (0.4, 1.0)
    local_crop_scale: Tuple[float, float] = (0.05, 0.4)
    global_size: int = 224
    local_size: int = 96
    seed: int = 0
    save_every_epochs: int = 0  # 0: only the final checkpoint

    def __post_init__(self):
        if self.arch not in ("vit", "vim"):
            raise ConfigError(f"unknown arch {self.arch!r}")
        if self.teacher_temp <= 0 or self.student_temp <= 0:
            raise ConfigError("temperatures must be positive")

    def build_model(self, seed: Optional[int] = None):
        from .vim import Vim, VimConfig
        from .vit import VisionTransformer, ViTConfig

        seed = self.seed if seed is None else seed
        if self.arch == "vit":
            cfg = ViTConfig(
                image_size=self.image_size, patch_size=self.patch_size, channels=self.channels,
                embed_dim=self.embed_dim, depth=self.depth, heads=self.heads,
                mlp_ratio=self.mlp_ratio,
            )
            return VisionTransformer(cfg, seed=seed)
        cfg = VimConfig(
            image_size=self.image_size, patch_size=self.patch_size, channels=self.channels,
            embed_dim=self.embed_dim, depth=self.depth, n_state=self.n_state, expand=self.expand,
        )
        return Vim(cfg, seed=seed)

    def crop_spec(self) -> MultiCropSpec:
        from .augment import AugmentSpec

        return MultiCropSpec(
            global_spec=AugmentSpec(out_size=(self.global_size, self.global_size),
                                    scale=self.global_crop_scale),
            local_spec=AugmentSpec(out_size=(self.local_size, self.local_size),
                                   scale=self.local_crop_scale),
            n_local=self.n_local_crops,
        )


class DinoHead:
    """3-layer GELU MLP to a bottleneck, then weight-normalized projection to K.

    The bottleneck output is L2-normalized and multiplied by unit-norm
    projection columns, so logits are cosine similarities to K prototypes.
    """

    def __init__(self, in_dim: int, cfg: DinoConfig, seed: int, prefix: str = "head"):
        self.prefix = prefix
        h, b, k = cfg.head_hidden, cfg.head_bottleneck, cfg.out_dim
        self.params: Dict[str, Tensor] = {}

        def init(name: str, shape, zero: bool = False) -> None:
            full = f"{prefix}.{name}"
            if zero:
                self.params[full] = Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)
            else:
                rng = derive_rng(seed, "init", full)
                self.params[full] = Tensor(truncated_normal(rng, shape), requires_grad=True)

        init("l1.w", (in_dim, h))
        init("l1.b", (h,), zero=True)
        init("l2.w", (h, h))
        init("l2.b", (h,), zero=True)
        init("l3.w", (h, b))
        init("l3.b", (b,), zero=True)
        init("proj", (b, k))

    def forward(self, x: Tensor) -> Tensor:
        p, pre = self.params, self.prefix
        x = T.gelu(T.add(T.matmul(x, p[f"{pre}.l1.w"]), p[f"{pre}.l1.b"]))
        x = T.gelu(T.add(T.matmul(x, p[f"{pre}.l2.w"]), p[f"{pre}.l2.b"]))
        x = T.add(T.matmul(x, p[f"{pre}.l3.w"]), p[f"{pre}.l3.b"])
        inv_norm = T.pow_scalar(T.add(T.sum(T.mul(x, x), axis=-1, keepdims=True), 1e-6), -0.5)
        x = T.mul(x, inv_norm)
        proj = p[f"{pre}.proj"]
        col_inv = T.pow_scalar(T.add(T.sum(T.mul(proj, proj), axis=0, keepdims=True), 1e-12), -0.5)
        return T.matmul(x, T.mul(proj, col_inv))


def sharpen(logits, tau: float) -> Tensor:
    """Temperature-scaled softmax: P_i = exp(g_i/tau) / sum_k exp(g_k/tau)."""
    if tau <= 0:
        raise ContractError(f"sharpen needs tau > 0, got {tau}")
    x = logits if isinstance(logits, Tensor) else Tensor(logits)
    return T.softmax(T.mul(x, 1.0 / tau), axis=-1)


def cross_view_loss(
    student_logits: Sequence[Tensor],
    teacher_logits: Sequence[np.ndarray],
    center: np.ndarray,
    student_temp: float,
    teacher_temp: float,
) -> Tensor:
    """Mean over (teacher global, student view) pairs of H(P_t, P_s).

    View i of the student is skipped against teacher view i (same crop).
    Teacher logits are centered then sharpened outside the graph, so no
    gradient ever reaches the teacher.
    """
    if len(teacher_logits) < 2:
        raise ContractError(f"need 2 teacher globals, got {len(teacher_logits)}")
    if teacher_temp <= 0 or student_temp <= 0:
        raise ContractError("temperatures must be positive")
    total: Optional[Tensor] = None
    n_pairs = 0
    for t_idx, t_logits in enumerate(teacher_logits):
        shifted = (np.asarray(t_logits, dtype=np.float32) - center) / teacher_temp
        shifted -= shifted.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        p_t = e / e.sum(axis=-1, keepdims=True)  # [B,K], constant w.r.t. the graph
        for s_idx, s_logits in enumerate(student_logits):
            if s_idx == t_idx:
                continue
            logp_s = T.log_softmax(T.mul(s_logits, 1.0 / student_temp), axis=-1)
            h = T.mul(T.sum(T.mul(Tensor(p_t), logp_s)), -1.0 / s_logits.shape[0])
            total = h if total is None else T.add(total, h)
            n_pairs += 1
    return T.mul(total, 1.0 / n_pairs)


class DinoState:
    """Student/teacher models and heads, the running center, and the step count."""

    def __init__(self, cfg: DinoConfig):
        self.cfg = cfg
        self.student = cfg.build_model()
        self.teacher = cfg.build_model()
        self.student_head = DinoHead(cfg.embed_dim, cfg, cfg.seed, prefix="head")
        self.teacher_head = DinoHead(cfg.embed_dim, cfg, cfg.seed, prefix="head")
        # teacher starts as an exact copy of the student
        for name, p in self.teacher.params.items():
            p.data = self.student.params[name].data.copy()
        for name, p in self.teacher_head.params.items():
            p.data = self.student_head.params[name].data.copy()
        self.center = np.zeros(cfg.out_dim, dtype=np.float32)
        self.step = 0

    # -- parameter plumbing ---------------------------------------------------

    def student_params(self) -> Dict[str, Tensor]:
        return {**self.student.params, **self.student_head.params}

    def teacher_params(self) -> Dict[str, Tensor]:
        return {**self.teacher.params, **self.teacher_head.params}

    def ema_update(self, momentum: float) -> None:
        """teacher <- m*teacher + (1-m)*student, float32, sorted name order."""
        student, teacher = self.student_params(), self.teacher_params()
        if sorted(student) != sorted(teacher):
            raise CheckpointError("student/teacher parameter names diverged")
        m = np.float32(momentum)
        one_minus = np.float32(1.0) - m
        for name in sorted(student):
            s, t = student[name], teacher[name]
            if s.shape != t.shape:
                raise CheckpointError(
                    f"student/teacher shape mismatch for {name}: {s.shape} vs {t.shape}"
                )
            t.data = m * t.data + one_minus * s.data

    def center_update(self, teacher_logit_batches: Sequence[np.ndarray], rate: float) -> None:
        """center <- rate*center + (1-rate)*mean(teacher logits over the batch)."""
        stacked = np.concatenate([np.asarray(b, dtype=np.float32) for b in teacher_logit_batches])
        if stacked.size == 0:
            raise ContractError("center update needs a nonempty batch")
        batch_mean = stacked.mean(axis=0)
        self.center = np.float32(rate) * self.center + np.float32(1.0 - rate) * batch_mean

    def student_forward(self, views: np.ndarray) -> Tensor:
        return self.student_head.forward(self.student.features(views))

    def teacher_forward(self, views: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.teacher_head.forward(self.teacher.features(views)).data


def dino_loss(views: ViewSet, state: DinoState) -> Tensor:
    """Single-image distillation loss: runs both networks on one ViewSet."""
    if len(views.global_views) != 2:
        raise ContractError(f"a ViewSet needs exactly 2 global views, got {len(views.global_views)}")
    cfg = state.cfg
    size = views.global_views[0].shape[0]
    all_views = [_match_resolution(v, size) for v in views.all_views()]
    student_logits = [state.student_forward(v[None]) for v in all_views]
    teacher_logits = [state.teacher_forward(v[None]) for v in all_views[:2]]
    return cross_view_loss(
        student_logits, teacher_logits, state.center, cfg.student_temp, cfg.teacher_temp
    )


def _match_resolution(view: np.ndarray, size: int) -> np.ndarray:
    if view.shape[0] == size and view.shape[1] == size:
        return view
    return bilinear_resize(view, size, size)


def schedule(step: int, cfg: DinoConfig, steps_per_epoch: int) -> Tuple[float, float, float, float]:
    """(lr, wd, teacher_temp, momentum) at a global step.

    lr warms up linearly to the base value then decays by cosine to
    min_lr; weight decay rises by cosine from its start to its end value;
    teacher temperature warms up linearly per epoch then holds; EMA
    momentum follows a cosine from its base to 1.
    """
    total = cfg.epochs * steps_per_epoch
    if step < 0 or step > total:
        raise ContractError(f"step {step} outside [0, {total}]")
    warmup = cfg.warmup_epochs * steps_per_epoch
    if warmup > 0 and step < warmup:
        lr = cfg.lr * step / warmup
    elif total == warmup:
        lr = cfg.lr
    else:
        progress = (step - warmup) / (total - warmup)
        lr = cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))
    wd = cfg.weight_decay_end + 0.5 * (cfg.weight_decay - cfg.weight_decay_end) * (
        1.0 + math.cos(math.pi * step / max(total, 1))
    )
    epoch = step // steps_per_epoch if steps_per_epoch else 0
    if cfg.warmup_teacher_temp_epochs > 0 and epoch < cfg.warmup_teacher_temp_epochs:
        frac = epoch / cfg.warmup_teacher_temp_epochs
        tau_t = cfg.warmup_teacher_temp + (cfg.teacher_temp - cfg.warmup_teacher_temp) * frac
    else:
        tau_t = cfg.teacher_temp
    m = 1.0 - (1.0 - cfg.momentum_teacher) * 0.5 * (1.0 + math.cos(math.pi * step / max(total, 1)))
    return lr, wd, tau_t, m


@dataclass
class EpochStats:
    mean_loss: float
    nan_count: int
    grad_norm_mean: float
    grad_norm_max: float


class DinoTrainer:
    """Full training loop over an in-memory image corpus."""

    def __init__(self, cfg: DinoConfig, images: Sequence[np.ndarray], out_dir=None):
        if len(images) == 0:
            raise ContractError("training corpus is empty")
        self.cfg = cfg
        self.images = images
        self.state = DinoState(cfg)
        self.opt = AdamW(
            self.state.student_params(), lr=cfg.lr,
            betas=(0.9, 0.999), eps=1e-8, weight_decay=cfg.weight_decay,
            decay_filter=lambda name: not (name.endswith(".b") or ".norm" in name or name.endswith(".cls")),
        )
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.log_rows: List[str] = []
        self.consecutive_nan = 0
        self.spec = cfg.crop_spec()
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    @property
    def steps_per_epoch(self) -> int:
        return max(1, len(self.images) // self.cfg.batch_size)

    @property
    def total_steps(self) -> int:
        return self.cfg.epochs * self.steps_per_epoch

    # -- one optimization step -------------------------------------------------

    def _batch_views(self, indices: Sequence[int], step: int) -> List[np.ndarray]:
        """Per-view stacked batches, globals first; locals resized to global res."""
        size = self.cfg.global_size
        per_view: List[List[np.ndarray]] = [[] for _ in range(2 + self.cfg.n_local_crops)]
        for slot, idx in enumerate(indices):
            rng = derive_rng(self.cfg.seed, "aug", step, slot, int(idx))
            vs = make_views(np.asarray(self.images[idx], dtype=np.float32), self.spec, rng)
            for v_idx, view in enumerate(vs.all_views()):
                per_view[v_idx].append(_match_resolution(view, size))
        return [np.stack(v) for v in per_view]

    def train_step(self, indices: Sequence[int]) -> Optional[float]:
        """Returns the loss, or None when the batch was skipped for non-finite values."""
        cfg = self.cfg
        lr, wd, tau_t, m = schedule(self.state.step, cfg, self.steps_per_epoch)
        views = self._batch_views(indices, self.state.step)
        try:
            teacher_logits = [self.state.teacher_forward(v) for v in views[:2]]
            student_logits = [self.state.student_forward(v) for v in views]
            center = self.state.center if cfg.centering else np.zeros_like(self.state.center)
            loss = cross_view_loss(student_logits, teacher_logits, center,
                                   cfg.student_temp, tau_t)
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                raise NumericalError("non-finite distillation loss")
            self.opt.zero_grad()
            T.backward(loss)
        except NumericalError:
            self.consecutive_nan += 1
            if self.consecutive_nan >= cfg.nan_abort_threshold:
                raise NumericalError(
                    f"aborting: {self.consecutive_nan} consecutive non-finite batches"
                )
            self._log(self.state.step, float("nan"), lr, wd, tau_t, m, float("nan"))
            self.state.step += 1
            return None
        self.consecutive_nan = 0
        self.opt.lr, self.opt.weight_decay = lr, wd
        self.last_grad_norm = clip_global_norm(self.state.student_params(), cfg.clip_grad)
        self.opt.step()
        self.state.ema_update(m)
        self.state.center_update(teacher_logits, cfg.center_rate)
        entropy = teacher_entropy(teacher_logits, self.state.center if cfg.centering else None, tau_t)
        self._log(self.state.step, loss_val, lr, wd, tau_t, m, entropy)
        self.state.step += 1
        return loss_val

    def _log(self, step, loss, lr, wd, tau_t, m, entropy) -> None:
        self.log_rows.append(
            f"{step},{loss:.6f},{lr:.8f},{wd:.6f},{tau_t:.6f},{m:.8f},{entropy:.6f}"
        )

    # -- epochs and runs ----------------------------------------------------------

    def train_epoch(self, epoch: int) -> EpochStats:
        rng = derive_rng(self.cfg.seed, "order", epoch)
        order = rng.permutation(len(self.images))
        losses: List[float] = []
        nans = 0
        norms: List[float] = []
        for b in range(self.steps_per_epoch):
            idx = order[b * self.cfg.batch_size : (b + 1) * self.cfg.batch_size]
            if len(idx) == 0:
                idx = order[:1]
            loss = self.train_step(idx)
            if loss is None:
                nans += 1
            else:
                losses.append(loss)
                norms.append(self.last_grad_norm)
        return EpochStats(
            mean_loss=float(np.mean(losses)) if losses else float("nan"),
            nan_count=nans,
            grad_norm_mean=float(np.mean(norms)) if norms else float("nan"),
            grad_norm_max=float(np.max(norms)) if norms else float("nan"),
        )

    def train(self) -> List[EpochStats]:
        stats = []
        for epoch in range(self.cfg.epochs):
            stats.append(self.train_epoch(epoch))
            if (
                self.out_dir is not None
                and self.cfg.save_every_epochs
                and (epoch + 1) % self.cfg.save_every_epochs == 0
            ):
                self.save_checkpoint(self.out_dir / f"ckpt_epoch{epoch + 1}.nvk")
        if self.out_dir is not None:
            self.save_checkpoint(self.out_dir / "ckpt_final.nvk")
            self.write_log(self.out_dir / "train_log.csv")
        return stats

    # -- persistence -----------------------------------------------------------------

    def checkpoint_tensors(self) -> Dict[str, np.ndarray]:
        from .models import meta_tensors

        out: Dict[str, np.ndarray] = {}
        for name, p in self.state.student_params().items():
            out[name] = p.data
        for name, p in self.state.teacher_params().items():
            out[f"ema.{name}"] = p.data
        out["dino.center"] = self.state.center
        out["dino.step"] = np.asarray(float(self.state.step), dtype=np.float32)
        out.update(self.opt.state_tensors())
        out.update(meta_tensors(self.state.student))
        return out

    def save_checkpoint(self, path) -> None:
        from .checkpoint import save

        save(str(path), self.checkpoint_tensors())

    def load_checkpoint(self, path) -> None:
        from .checkpoint import load

        tensors = load(str(path))
        for name, p in self.state.student_params().items():
            if name not in tensors:
                raise CheckpointError(f"checkpoint missing student tensor {name}")
            p.data = tensors[name].copy()
        for name, p in self.state.teacher_params().items():
            if f"ema.{name}" not in tensors:
                raise CheckpointError(f"checkpoint missing teacher tensor ema.{name}")
            p.data = tensors[f"ema.{name}"].copy()
        self.state.center = tensors["dino.center"].copy()
        self.state.step = int(tensors["dino.step"])
        self.opt.load_state_tensors(tensors)

    def write_log(self, path) -> None:
        Path(path).write_text(",".join(LOG_COLUMNS) + "\n" + "\n".join(self.log_rows) + "\n")


def teacher_entropy(
    teacher_logit_batches: Sequence[np.ndarray], center: Optional[np.ndarray], tau_t: float
) -> float:
    """Entropy of the batch-mean sharpened teacher distribution.

    High entropy means the teacher spreads its prototypes across the
    batch; a collapse to one constant output drives this toward 0.
    """
    stacked = np.concatenate([np.asarray(b, dtype=np.float32) for b in teacher_logit_batches])
    if center is not None:
        stacked = stacked - center
    shifted = stacked / tau_t
    shifted -= shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)
    mean_p = probs.mean(axis=0)
    mean_p = np.clip(mean_p, 1e-12, 1.0)
    return float(-(mean_p * np.log(mean_p)).sum())
