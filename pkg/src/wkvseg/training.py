"""Losses, prompt sampling, optimisers and the two training sessions.

Session one aligns a student backbone's stride-16 features with a frozen
teacher (feature MSE). Session two trains the whole segmentation model on
box prompts with weighted cross-entropy plus Dice.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .backbone import Backbone, backbone_forward
from .core import Module, Parameter, Tape, Tensor, ops, save_checkpoint
from .errors import ConfigurationError, DimensionError, NonFiniteError
from .head import Prompt, SegmentationModel
from .metrics import boundary_iou, iou
from .scenes import SyntheticScene

LOG_COLUMNS = ("step", "total_loss", "ce_loss", "dice_loss", "wall_ms")
DICE_EPS = 1.0


@dataclass
class TrainConfig:
    lambda_ce: float = 5.0
    lambda_dice: float = 5.0
    max_instances: int = 20
    lr: float = 1e-2
    steps: int = 500
    seed: int = 0
    optimizer: str = "sgd"  # "sgd" (momentum) or "adam"
    momentum: float = 0.9
    jitter: float = 0.05  # box jitter as a fraction of box size; 0 disables
    checkpoint_every: int = 0  # 0 disables periodic checkpoints

    def __post_init__(self):
        if self.lambda_ce <= 0 or self.lambda_dice <= 0:
            raise ConfigurationError("loss weights must be strictly positive")
        if self.max_instances < 1:
            raise ConfigurationError("max_instances must be >= 1")
        if self.lr < 0 or self.steps < 0:
            raise ConfigurationError("lr and steps must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 <= self.jitter < 0.5:
            raise ConfigurationError("jitter must lie in [0, 0.5)")


# ------------------------------------------------------------------ losses


def distill_loss(student_x, teacher_x) -> Tensor:
    """Mean squared difference over every element."""
    student_x = ops.lift(student_x)
    teacher_x = ops.lift(teacher_x, student_x)
    if student_x.shape != teacher_x.shape:
        raise DimensionError(f"student {student_x.shape} vs teacher {teacher_x.shape}")
    return ops.mean(ops.square(ops.sub(student_x, teacher_x)))


@dataclass
class LossTerms:
    total: Tensor
    ce: Tensor  # already multiplied by lambda_ce
    dice: Tensor  # already multiplied by lambda_dice


def seg_loss_terms(logits, gt_mask, cfg: TrainConfig | None = None) -> LossTerms:
    cfg = cfg or TrainConfig()
    logits = ops.lift(logits)
    g = np.asarray(gt_mask, dtype=logits.dtype)
    if g.shape != logits.shape:
        raise DimensionError(f"logits {logits.shape} vs mask {g.shape}")
    # BCE on sigmoid(x) written stably as softplus(x) - x*g
    ce = ops.mean(ops.sub(ops.softplus(logits), ops.mul(logits, g)))
    p = ops.sigmoid(logits)
    inter = ops.sum(ops.mul(p, g))
    num = ops.add(ops.mul(inter, 2.0), DICE_EPS)
    den = ops.add(ops.sum(p), float(g.sum()) + DICE_EPS)
    dice = ops.sub(1.0, ops.div(num, den))
    ce_w = ops.mul(ce, cfg.lambda_ce)
    dice_w = ops.mul(dice, cfg.lambda_dice)
    return LossTerms(ops.add(ce_w, dice_w), ce_w, dice_w)


def seg_loss(logits, gt_mask, cfg: TrainConfig | None = None) -> Tensor:
    return seg_loss_terms(logits, gt_mask, cfg).total


# ------------------------------------------------------------------ prompts


def jitter_box(box, size: tuple[int, int], frac: float, rng) -> tuple[float, ...]:
    """Shift each normalised coordinate by up to ``frac`` of the box extent."""
    x0, y0, x1, y1 = box
    if frac <= 0:
        return tuple(box)
    bw, bh = x1 - x0, y1 - y0
    dx = rng.uniform(-frac, frac, size=2) * bw
    dy = rng.uniform(-frac, frac, size=2) * bh
    nx0, nx1 = np.clip([x0 + dx[0], x1 + dx[1]], 0.0, 1.0)
    ny0, ny1 = np.clip([y0 + dy[0], y1 + dy[1]], 0.0, 1.0)
    return (float(min(nx0, nx1)), float(min(ny0, ny1)), float(max(nx0, nx1)), float(max(ny0, ny1)))


def sample_prompts(scene: SyntheticScene, max_n: int, rng: np.random.Generator,
                   jitter: float = 0.05) -> list[tuple[Prompt, np.ndarray]]:
    """Uniformly pick up to ``max_n`` distinct instances as box prompts."""
    if max_n < 1:
        raise ConfigurationError("max_n must be >= 1")
    n = len(scene.masks)
    picks = rng.choice(n, size=min(max_n, n), replace=False)
    out = []
    for i in picks:
        box = jitter_box(scene.normalized_box(int(i)), scene.size, jitter, rng)
        out.append((Prompt.from_box(*box), scene.masks[int(i)]))
    return out


def exact_prompts(scene: SyntheticScene) -> list[tuple[Prompt, np.ndarray]]:
    return [(Prompt.from_box(*scene.normalized_box(i)), m) for i, m in enumerate(scene.masks)]


# ------------------------------------------------------------------ optimisers


class SGD:
    """Gradient descent with heavy-ball momentum."""

    def __init__(self, params: Sequence[Parameter], lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, vel in zip(self.params, self.velocity):
            vel *= self.momentum
            vel += p.grad
            p.data = p.data - self.lr * vel

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class Adam:
    def __init__(self, params: Sequence[Parameter], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            step = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - step).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.lr, cfg.momentum)
    return Adam(params, cfg.lr)


# ------------------------------------------------------------------ session two


@dataclass
class StepResult:
    step: int
    total_loss: float
    ce_loss: float
    dice_loss: float
    wall_ms: float


def _check_finite(value: float, step: int, what: str) -> None:
    if not math.isfinite(value):
        raise NonFiniteError(f"{what} became {value} at step {step}; aborting")


def batch_loss(model: SegmentationModel, image, prompts, cfg: TrainConfig) -> LossTerms:
    """Seg loss summed over prompts, then averaged."""
    outs = model.predict(image, [p for p, _ in prompts])
    terms = [seg_loss_terms(o.logits[0], gt, cfg) for o, (_, gt) in zip(outs, prompts)]
    scale = 1.0 / len(terms)

    def avg(parts):
        acc = parts[0]
        for t in parts[1:]:
            acc = ops.add(acc, t)
        return ops.mul(acc, scale)

    return LossTerms(avg([t.total for t in terms]), avg([t.ce for t in terms]),
                     avg([t.dice for t in terms]))


def train_step(model: SegmentationModel, batch, cfg: TrainConfig, optimizer, step: int = 0) -> StepResult:
    """One forward/backward/update over ``batch = (image, [(prompt, mask), ...])``."""
    t0 = time.perf_counter()
    image, prompts = batch
    optimizer.zero_grad()
    try:
        with Tape() as tape:
            terms = batch_loss(model, image, prompts, cfg)
    except NonFiniteError as exc:
        raise NonFiniteError(f"non-finite forward at step {step}: {exc}") from exc
    total = terms.total.item()
    _check_finite(total, step, "loss")
    tape.backward(terms.total)
    for p in optimizer.params:
        if not np.isfinite(p.grad).all():
            raise NonFiniteError(f"non-finite gradient in {p.name or 'parameter'} at step {step}")
    optimizer.step()
    return StepResult(step, total, terms.ce.item(), terms.dice.item(),
                      (time.perf_counter() - t0) * 1e3)


def _save_model(path: Path, model: Module, meta: dict) -> None:
    save_checkpoint(path, model.state_dict(), meta)


def fit(model: SegmentationModel, scenes: Sequence[SyntheticScene], cfg: TrainConfig,
        log_path=None, ckpt_dir=None, on_step: Callable[[StepResult], None] | None = None
        ) -> list[StepResult]:
    """Train for ``cfg.steps`` steps cycling through ``scenes``."""
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(model.parameters(), cfg)
    ckpt_dir = Path(ckpt_dir) if ckpt_dir is not None else None
    meta = {"model": model.meta(), "train": asdict(cfg)}
    log_file = open(log_path, "w", newline="") if log_path is not None else None
    writer = csv.writer(log_file) if log_file else None
    if writer:
        writer.writerow(LOG_COLUMNS)
    history = []
    try:
        for step in range(cfg.steps):
            scene = scenes[step % len(scenes)]
            prompts = sample_prompts(scene, cfg.max_instances, rng, cfg.jitter)
            res = train_step(model, (scene.image, prompts), cfg, opt, step)
            history.append(res)
            if writer:
                writer.writerow([res.step, f"{res.total_loss:.8g}", f"{res.ce_loss:.8g}",
                                 f"{res.dice_loss:.8g}", f"{res.wall_ms:.3f}"])
            if on_step:
                on_step(res)
            if ckpt_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                _save_model(ckpt_dir / f"step_{step + 1:05d}.wsck", model, {**meta, "step": step + 1})
    finally:
        if log_file:
            log_file.close()
    return history


def evaluate(model: SegmentationModel, scenes: Sequence[SyntheticScene]) -> dict:
    """mIoU and boundary mIoU of thresholded logits for exact-box prompts."""
    ious, bious = [], []
    for scene in scenes:
        prompts = exact_prompts(scene)
        outs = model.predict(scene.image, [p for p, _ in prompts])
        for o, (_, gt) in zip(outs, prompts):
            pred = o.logits.data[0] > 0
            ious.append(iou(pred, gt))
            bious.append(boundary_iou(pred, gt))
    return {"miou": float(np.mean(ious)), "boundary_miou": float(np.mean(bious))}


# ------------------------------------------------------------------ session one


class FeatureAdapter(Module):
    """Frozen random linear map from teacher width to student width."""

    def __init__(self, rng, c_in: int, c_out: int):
        self.weight = (rng.standard_normal((c_in, c_out)) / math.sqrt(c_in)).astype(np.float32)

    def forward(self, x) -> np.ndarray:
        return np.asarray(x) @ self.weight.astype(np.asarray(x).dtype)


def distill_session(student: Backbone, teacher: Backbone, scenes: Sequence[SyntheticScene],
                    cfg: TrainConfig, adapter: FeatureAdapter | None = None,
                    on_step: Callable[[int, float], None] | None = None) -> list[float]:
    """Fit the student's stride-16 features to the frozen teacher's."""
    targets = []
    for scene in scenes:
        x = backbone_forward(teacher, scene.image).x.data
        if adapter is not None:
            x = adapter(x)
        targets.append(np.asarray(x, dtype=student.parameters()[0].dtype))
    c_s, c_t = student.cfg.channels[2], targets[0].shape[-1]
    if c_s != c_t:
        raise DimensionError(f"teacher width {c_t} != student width {c_s}; pass an adapter")

    opt = make_optimizer(student.parameters(), cfg)
    curve = []
    for step in range(cfg.steps):
        i = step % len(scenes)
        opt.zero_grad()
        with Tape() as tape:
            loss = distill_loss(backbone_forward(student, scenes[i].image).x, targets[i])
        value = loss.item()
        _check_finite(value, step, "distillation loss")
        tape.backward(loss)
        opt.step()
        curve.append(value)
        if on_step:
            on_step(step, value)
    return curve


def distill_eval(student: Backbone, teacher: Backbone, scenes, adapter=None) -> float:
    """Mean feature MSE over ``scenes`` without updating anything."""
    vals = []
    for scene in scenes:
        t = backbone_forward(teacher, scene.image).x.data
        if adapter is not None:
            t = adapter(t)
        vals.append(distill_loss(backbone_forward(student, scene.image).x, t).item())
    return float(np.mean(vals))
