"""Self-distillation pre-training (student/teacher, multi-crop, centering).

The student sees two global crops and several half-size local crops of
each tile; the teacher sees only the global crops. The teacher's
softmax targets are sharpened with a low temperature and stabilized by
subtracting a running center of its logits; the student matches them
under a softer temperature. Teacher weights trail the student through
an exponential moving average, never through gradients.

Centering is the collapse control: with it disabled, the teacher
quickly concentrates all probability on one prototype and the entropy
of its mean output drops toward zero. `collapse_entropy` measures this.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import Tensor
from .errors import ConfigError, ShapeError
from .optim import make_optimizer
from .vit import ViTConfig, VisionTransformer


@dataclass(frozen=True)
class DinoConfig:
    out_dim: int = 256            # number of prototypes K
    hidden_dim: int = 256
    bottleneck_dim: int = 64
    student_temp: float = 0.03
    teacher_temp_start: float = 0.01
    teacher_temp_end: float = 0.001
    teacher_temp_warm_epochs: float = 5.0
    center_momentum: float = 0.99
    teacher_momentum: float = 0.996
    centering: bool = True
    n_global: int = 2
    n_local: int = 4
    global_scale: tuple[float, float] = (0.5, 1.0)
    local_scale: tuple[float, float] = (0.2, 0.5)
    jitter: float = 0.2           # additive brightness jitter on normalized crops
    lr: float = 1e-6
    optimizer: str = "adam"
    batch_size: int = 8
    epochs: int = 1
    max_steps: Optional[int] = None
    seed: int = 0

    def validate(self) -> "DinoConfig":
        if self.out_dim < 2:
            raise ConfigError("out_dim must be >= 2")
        if self.n_global < 1 or self.n_local < 0:
            raise ConfigError("need at least one global crop")
        if not (0.0 <= self.center_momentum < 1.0):
            raise ConfigError("center_momentum must be in [0, 1)")
        if not (0.0 <= self.teacher_momentum <= 1.0):
            raise ConfigError("teacher_momentum must be in [0, 1]")
        for t in (self.student_temp, self.teacher_temp_start, self.teacher_temp_end):
            if t <= 0:
                raise ConfigError("temperatures must be positive")
        return self


# ---------------------------------------------------------------------------
# model

def l2_normalize(x: Tensor, eps: float = 1e-6) -> Tensor:
    sq = ag.reduce_sum(x * x, axis=-1, keepdims=True)
    return x * ag.power(sq + eps, -0.5)


class DinoHead(nn.Module):
    """3-layer MLP to a bottleneck, L2 normalization, then a linear map onto
    the prototype logits."""

    def __init__(self, in_dim: int, cfg: DinoConfig, rng: np.random.Generator):
        super().__init__()
        h, b = cfg.hidden_dim, cfg.bottleneck_dim
        self.fc1 = nn.Linear(in_dim, h, rng)
        self.fc2 = nn.Linear(h, h, rng)
        self.fc3 = nn.Linear(h, b, rng)
        self.prototypes = nn.Linear(b, cfg.out_dim, rng, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        x = ag.gelu(self.fc1(x))
        x = ag.gelu(self.fc2(x))
        x = self.fc3(x)
        return self.prototypes(l2_normalize(x))


class DinoModel(nn.Module):
    def __init__(self, vit_cfg: ViTConfig, dino_cfg: DinoConfig,
                 rng: np.random.Generator):
        super().__init__()
        self.backbone = VisionTransformer(vit_cfg, rng)
        self.head = DinoHead(vit_cfg.embed_dim, dino_cfg, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.backbone(x).cls)


def build_student_teacher(vit_cfg: ViTConfig, dino_cfg: DinoConfig,
                          seed: int = 0) -> tuple[DinoModel, DinoModel]:
    student = DinoModel(vit_cfg, dino_cfg, np.random.default_rng(seed))
    teacher = DinoModel(vit_cfg, dino_cfg, np.random.default_rng(seed))
    teacher.load_state_dict(student.state_dict())
    teacher.requires_grad_(False)
    teacher.eval()
    return student, teacher


# ---------------------------------------------------------------------------
# crops

@dataclass
class CropSet:
    globals: list[np.ndarray]
    locals: list[np.ndarray]

    def all_crops(self) -> list[np.ndarray]:
        return self.globals + self.locals


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize [C, H, W] with bilinear sampling (align_corners=False)."""
    c, h, w = arr.shape

    def grid(n_in, n_out):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        i0 = np.floor(src).astype(np.intp)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, (src - i0).astype(arr.dtype)

    hi0, hi1, hf = grid(h, out_h)
    wi0, wi1, wf = grid(w, out_w)
    rows = arr[:, hi0, :] * (1 - hf)[None, :, None] + arr[:, hi1, :] * hf[None, :, None]
    return rows[:, :, wi0] * (1 - wf)[None, None, :] + rows[:, :, wi1] * wf[None, None, :]


def random_crop(channels: np.ndarray, target: int, scale: tuple[float, float],
                rng: np.random.Generator, jitter: float) -> np.ndarray:
    """Random-area crop resized to `target`, with random flips and a small
    additive brightness shift. Scale is an area fraction of the source tile;
    the side length is its square root."""
    c, h, w = channels.shape
    area = rng.uniform(scale[0], scale[1])
    side = int(round(math.sqrt(area) * min(h, w)))
    side = max(4, min(side, min(h, w)))
    top = rng.integers(0, h - side + 1)
    left = rng.integers(0, w - side + 1)
    crop = channels[:, top:top + side, left:left + side]
    if side != target:
        crop = bilinear_resize(crop, target, target)
    else:
        crop = crop.copy()
    if rng.random() < 0.5:
        crop = crop[:, :, ::-1]
    if rng.random() < 0.5:
        crop = crop[:, ::-1, :]
    if jitter > 0:
        crop = crop + rng.normal(0.0, jitter)
    return np.ascontiguousarray(crop, dtype=np.float32)


def multi_crop(channels: np.ndarray, global_size: int, local_size: int,
               cfg: DinoConfig, rng: np.random.Generator) -> CropSet:
    if channels.shape[1] < global_size or channels.shape[2] < global_size:
        raise ShapeError(f"tile {channels.shape[1:]} smaller than global crop "
                         f"{global_size}")
    globs = [random_crop(channels, global_size, cfg.global_scale, rng, cfg.jitter)
             for _ in range(cfg.n_global)]
    locs = [random_crop(channels, local_size, cfg.local_scale, rng, cfg.jitter)
            for _ in range(cfg.n_local)]
    return CropSet(globals=globs, locals=locs)


# ---------------------------------------------------------------------------
# loss pieces

def teacher_temperature(epoch: float, cfg: DinoConfig) -> float:
    """Linear anneal from the start to the end temperature over the
    warm-up epochs, then flat."""
    frac = min(max(epoch, 0.0) / cfg.teacher_temp_warm_epochs, 1.0)
    return cfg.teacher_temp_start + frac * (cfg.teacher_temp_end - cfg.teacher_temp_start)


def teacher_probs(teacher_logits: Sequence[np.ndarray], center: np.ndarray,
                  tau_t: float) -> np.ndarray:
    """Centered, sharpened teacher targets, [G, B, K]. Computed in float64:
    at temperatures of 1e-3 the scaled logits span thousands."""
    stacked = np.stack([np.asarray(t, dtype=np.float64) for t in teacher_logits])
    z = (stacked - center.astype(np.float64)) / tau_t
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def dino_loss(student_logits: Sequence[Tensor], probs: np.ndarray,
              tau_s: float) -> Tensor:
    """Mean cross-entropy over ordered (teacher global g, student view v)
    pairs with v != g. Globals come first in `student_logits` and line up
    with the teacher's global crops."""
    n_global, batch, k = probs.shape
    n_views = len(student_logits)
    if n_views <= n_global:
        raise ShapeError(f"need more student views ({n_views}) than teacher "
                         f"globals ({n_global})")
    for v, s in enumerate(student_logits):
        if s.shape != (batch, k):
            raise ShapeError(f"student view {v} has shape {s.shape}, "
                             f"expected {(batch, k)}")
    pairs = n_global * (n_views - 1)
    total_weight = probs.sum(axis=0)  # sum over teacher globals, [B, K]
    loss = None
    for v, s in enumerate(student_logits):
        # every teacher global pairs with view v except the matching global
        w = total_weight - probs[v] if v < n_global else total_weight
        logp = ag.log_softmax(s * (1.0 / tau_s), axis=-1)
        term = -ag.reduce_sum(logp * Tensor(w, dtype=logp.dtype))
        loss = term if loss is None else loss + term
    return loss * (1.0 / (pairs * batch))


def update_center(center: np.ndarray, teacher_logits: Sequence[np.ndarray],
                  momentum: float) -> np.ndarray:
    """center' = m * center + (1 - m) * batch mean of the teacher logits."""
    stacked = np.concatenate([np.asarray(t) for t in teacher_logits], axis=0)
    batch_mean = stacked.mean(axis=0)
    return (momentum * center + (1.0 - momentum) * batch_mean).astype(center.dtype)


def collapse_entropy(probs: np.ndarray) -> float:
    """Entropy (nats) of the mean teacher distribution; ln K when perfectly
    spread, near zero when every view lands on one prototype."""
    k = probs.shape[-1]
    mean = probs.reshape(-1, k).mean(axis=0)
    mean = np.clip(mean, 1e-12, None)
    return float(-(mean * np.log(mean)).sum())


def ema_update(teacher: nn.Module, student: nn.Module, momentum: float):
    """teacher <- momentum * teacher + (1 - momentum) * student, elementwise,
    outside the tape."""
    student_params = dict(student.named_parameters())
    for name, tp in teacher.named_parameters():
        sp = student_params[name]
        tp.data *= momentum
        tp.data += (1.0 - momentum) * sp.data


# ---------------------------------------------------------------------------
# training loop

@dataclass
class DinoState:
    center: np.ndarray
    step: int = 0

    @classmethod
    def fresh(cls, out_dim: int) -> "DinoState":
        return cls(center=np.zeros(out_dim, dtype=np.float32), step=0)


@dataclass
class StepStats:
    loss: float
    entropy: float
    tau_t: float


@dataclass
class PretrainResult:
    student: DinoModel
    teacher: DinoModel
    state: DinoState
    history: list[dict] = field(default_factory=list)        # per logged step
    epoch_history: list[dict] = field(default_factory=list)  # per epoch means
    norm_mean: Optional[np.ndarray] = None
    norm_std: Optional[np.ndarray] = None


def collapse_detected(epoch_history: Sequence[dict], floor: float,
                      consecutive: int = 3) -> bool:
    """True when the per-epoch mean entropy sat below `floor` for
    `consecutive` epochs in a row. A floor <= 0 disables detection."""
    if floor <= 0:
        return False
    run = 0
    for row in epoch_history:
        run = run + 1 if row["entropy"] < floor else 0
        if run >= consecutive:
            return True
    return False


def pretrain_step(student: DinoModel, teacher: DinoModel, optimizer,
                  batch: Sequence[np.ndarray], state: DinoState,
                  cfg: DinoConfig, tau_t: float,
                  rng: np.random.Generator) -> StepStats:
    vit_cfg = student.backbone.cfg
    gsize, lsize = vit_cfg.image_size, vit_cfg.image_size // 2
    crop_sets = [multi_crop(ch, gsize, lsize, cfg, rng) for ch in batch]

    views = []
    for slot in range(cfg.n_global):
        views.append(np.stack([cs.globals[slot] for cs in crop_sets]))
    for slot in range(cfg.n_local):
        views.append(np.stack([cs.locals[slot] for cs in crop_sets]))

    with ag.no_grad():
        t_logits = [teacher(Tensor(views[g])).data.copy()
                    for g in range(cfg.n_global)]
    probs = teacher_probs(t_logits, state.center, tau_t)

    with ag.Tape() as tape:
        s_logits = [student(Tensor(v)) for v in views]
        loss = dino_loss(s_logits, probs, cfg.student_temp)
    loss_val = loss.item()
    ag.backward(loss, tape)
    optimizer.step()
    ema_update(teacher, student, cfg.teacher_momentum)
    if cfg.centering:
        state.center = update_center(state.center, t_logits, cfg.center_momentum)
    state.step += 1
    return StepStats(loss=loss_val, entropy=collapse_entropy(probs), tau_t=tau_t)


def pretrain(tiles_channels: Sequence[np.ndarray], vit_cfg: ViTConfig,
             cfg: DinoConfig, log_every: int = 10,
             progress: Optional[callable] = None) -> PretrainResult:
    """Run the full pre-training loop on normalized tile stacks.

    `tiles_channels` are [C, H, W] arrays, already normalized. Batches are
    reshuffled each epoch from a per-epoch seed, so a rerun with the same
    config reproduces the trajectory bit for bit.
    """
    cfg.validate()
    if not tiles_channels:
        raise ConfigError("pretrain needs at least one tile")
    student, teacher = build_student_teacher(vit_cfg, cfg, seed=cfg.seed)
    optimizer = make_optimizer(cfg.optimizer, student, lr=cfg.lr)
    state = DinoState.fresh(cfg.out_dim)
    n = len(tiles_channels)
    steps_per_epoch = max(1, (n + cfg.batch_size - 1) // cfg.batch_size)
    history = []
    epoch_history = []
    done = False
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 1000 + epoch]).permutation(n)
        crop_rng = np.random.default_rng([cfg.seed, 2000 + epoch])
        loss_sum = entropy_sum = 0.0
        epoch_steps = 0
        tau_t = teacher_temperature(state.step / steps_per_epoch, cfg)
        for start in range(0, n, cfg.batch_size):
            batch = [tiles_channels[i] for i in order[start:start + cfg.batch_size]]
            tau_t = teacher_temperature(state.step / steps_per_epoch, cfg)
            stats = pretrain_step(student, teacher, optimizer, batch, state,
                                  cfg, tau_t, crop_rng)
            loss_sum += stats.loss
            entropy_sum += stats.entropy
            epoch_steps += 1
            if state.step % log_every == 0 or state.step == 1:
                history.append({"step": state.step, "epoch": epoch,
                                "loss": stats.loss, "entropy": stats.entropy,
                                "teacher_temp": stats.tau_t})
                if progress is not None:
                    progress(history[-1])
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                done = True
                break
        if epoch_steps:
            epoch_history.append({"epoch": epoch,
                                  "loss": loss_sum / epoch_steps,
                                  "entropy": entropy_sum / epoch_steps,
                                  "teacher_temp": tau_t})
        if done:
            break
    return PretrainResult(student=student, teacher=teacher, state=state,
                          history=history, epoch_history=epoch_history)
