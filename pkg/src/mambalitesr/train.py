"""Losses, Adam, the milestone schedule, and the teacher / distillation loops."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import ops
from .checkpoint import (load_checkpoint, load_weights, parameter_hash, read_blob, read_config,
                         save_checkpoint, write_blob)
from .data import PairedDataset
from .errors import CheckpointError, ConfigurationError, MambaLiteError, NumericalError, UsageError
from .infer import TileGrid, super_resolve
from .metrics import mean_psnr
from .model import ModelConfig, SrModel, build_model
from .reporting import write_csv
from .tensor import Tensor, Tape, backward, no_grad

logger = logging.getLogger(__name__)

LOG_HEADER = ("iteration", "loss", "lr", "val_psnr")
TRAINER_STATE = "trainer_state.json"
MOMENTS = "moments.bin"
MILESTONE_FRACTIONS = (0.5, 0.75, 0.9)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    total_iterations: int = 2500
    base_lr: float = 2e-4
    lr_milestones: Optional[tuple[int, ...]] = None
    alpha: float = 0.8
    seed: int = 0
    val_every: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patch_size: int = 64
    patches_per_image: int = 8
    augment: bool = True
    val_images: int = 3
    checkpoint_every: int = 0
    cache_teacher: bool = False
    strict: bool = False
    dtype: str = "f32"

    def __post_init__(self):
        if self.lr_milestones is not None:
            object.__setattr__(self, "lr_milestones", tuple(int(m) for m in self.lr_milestones))
        if self.batch_size < 1 or self.total_iterations < 1 or self.patch_size < 1:
            raise ConfigurationError("batch_size, total_iterations and patch_size must be positive")
        if self.val_every < 1:
            raise ConfigurationError(f"val_every must be positive, got {self.val_every}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1], got {self.alpha}")
        ms = self.milestones()
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(m <= 0 or m >= self.total_iterations for m in ms):
            raise ConfigurationError(f"milestones {list(ms)} must be strictly increasing and inside "
                                     f"(0, {self.total_iterations})")

    def milestones(self) -> tuple[int, ...]:
        """Explicit milestones, or 50/75/90% of the run when unset."""
        if self.lr_milestones is not None:
            return self.lr_milestones
        raw = [int(self.total_iterations * f) for f in MILESTONE_FRACTIONS]
        return tuple(sorted({m for m in raw if 0 < m < self.total_iterations}))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_milestones"] = list(self.milestones())
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {', '.join(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Base rate halved once for every milestone at or below ``iteration``."""
    passed = sum(1 for m in cfg.milestones() if m <= iteration)
    return cfg.base_lr * 0.5 ** passed


# -- losses ------------------------------------------------------------------

def l1_loss(pred: Tensor, target) -> Tensor:
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target, dtype=pred.dtype))
    return ops.l1(pred, target)


@dataclass
class DistillLoss:
    alpha: float
    l_kd: Tensor
    l_gt: Tensor
    total: Tensor


def kd_loss(y_s: Tensor, y_t, y_gt, alpha: float) -> DistillLoss:
    """alpha * L1(student, teacher) + (1 - alpha) * L1(student, ground truth).

    Teacher output and ground truth are detached; only ``y_s`` receives gradient.
    """
    if not 0.0 <= float(alpha) <= 1.0:
        raise UsageError(f"alpha must lie in [0, 1], got {alpha}")
    y_t = Tensor(y_t.data if isinstance(y_t, Tensor) else np.asarray(y_t, dtype=y_s.dtype))
    y_gt = Tensor(y_gt.data if isinstance(y_gt, Tensor) else np.asarray(y_gt, dtype=y_s.dtype))
    l_kd = ops.l1(y_s, y_t)
    l_gt = ops.l1(y_s, y_gt)
    total = l_kd * float(alpha) + l_gt * (1.0 - float(alpha))
    return DistillLoss(float(alpha), l_kd, l_gt, total)


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# -- training loop -----------------------------------------------------------

@dataclass
class ValidationSet:
    names: list[str]
    lr: list[np.ndarray]
    hr: list[np.ndarray]

    @classmethod
    def from_dataset(cls, data: PairedDataset, limit: Optional[int] = None) -> "ValidationSet":
        pairs = data.pairs[:limit] if limit else data.pairs
        return cls([p.name for p in pairs], [p.lr for p in pairs], [p.hr for p in pairs])

    def __len__(self) -> int:
        return len(self.names)


def validate(model: SrModel, val: ValidationSet, tile: int = 64) -> float:
    if len(val) == 0:
        return math.nan
    grid = TileGrid(tile=tile)
    outs = [super_resolve(model, lr, grid) for lr in val.lr]
    return mean_psnr(zip(outs, val.hr), crop=model.config.scale)


@dataclass
class TrainResult:
    model: SrModel
    log: list[tuple[int, float, float, float]]
    losses: list[float]
    final_loss: float
    checkpoint: Optional[Path] = None
    checkpoints: list[Path] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_psnr(self) -> float:
        return self.log[-1][3] if self.log else math.nan


LossFn = Callable[[Tensor, np.ndarray, np.ndarray], Tensor]


def write_log(path, rows) -> Path:
    return write_csv(path, LOG_HEADER, rows)


def _run_loop(model: SrModel, cfg: TrainConfig, data: PairedDataset, loss_fn: LossFn,
              val: ValidationSet, out_dir: Optional[Path], role: str,
              resume: Optional[Path] = None, state_extra: Optional[dict] = None) -> TrainResult:
    params = model.parameters()
    adam = AdamState.zeros_like(params)
    rng = np.random.default_rng(cfg.seed)
    log: list[tuple[int, float, float, float]] = []
    losses: list[float] = []
    start = 0
    if resume is not None:
        start, log, losses = _restore(resume, model, adam, rng)

    milestones = set(cfg.milestones())
    checkpoints: list[Path] = []

    def batch():
        return data.sample_batch(cfg.batch_size, rng, patch=cfg.patch_size, per_image=cfg.patches_per_image,
                                 augmentation=cfg.augment, strict=cfg.strict)[:2]

    def save(iteration: int, name: str) -> Optional[Path]:
        if out_dir is None:
            return None
        path = Path(out_dir) / "checkpoints" / name
        _save_state(path, model, adam, rng, iteration, cfg, log, losses, role, state_extra)
        checkpoints.append(path)
        return path

    def lr_value(i: int) -> float:
        return lr_at(min(i, cfg.total_iterations - 1), cfg)

    for i in range(start, cfg.total_iterations):
        lr_batch, hr_batch = batch()
        val_psnr = validate(model, val, cfg.patch_size) if i % cfg.val_every == 0 else None
        with Tape() as tape:
            loss = loss_fn(model(Tensor(lr_batch, dtype=cfg.dtype)), lr_batch, hr_batch)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"{role} training produced a non-finite loss ({value}) at iteration {i}")
            backward(loss, tape)
        losses.append(value)
        if val_psnr is not None:
            log.append((i, value, lr_value(i), val_psnr))
        adam_step(params, [p.grad for p in params], adam, lr_at(i, cfg), cfg.beta1, cfg.beta2, cfg.eps)
        done = i + 1
        if done in milestones or (cfg.checkpoint_every and done % cfg.checkpoint_every == 0):
            save(done, f"iter_{done:06d}")

    # loss and validation at the final weights, on the next batch of the stream
    lr_batch, hr_batch = batch()
    with no_grad():
        final = loss_fn(model(Tensor(lr_batch, dtype=cfg.dtype)), lr_batch, hr_batch).item()
    if not math.isfinite(final):
        raise NumericalError(f"{role} final evaluation produced a non-finite loss ({final})")
    n = cfg.total_iterations
    if n % cfg.val_every == 0:
        log.append((n, final, lr_value(n), validate(model, val, cfg.patch_size)))
    final_ckpt = None
    if out_dir is not None:
        final_ckpt = Path(out_dir) / "final"
        _save_state(final_ckpt, model, adam, rng, n, cfg, log, losses, role, state_extra)
        write_log(Path(out_dir) / "metrics.csv", log)
    return TrainResult(model=model, log=log, losses=losses, final_loss=final, checkpoint=final_ckpt,
                       checkpoints=checkpoints)


def _save_state(path: Path, model: SrModel, adam: AdamState, rng: np.random.Generator, iteration: int,
                cfg: TrainConfig, log, losses, role: str, extra: Optional[dict]) -> None:
    state = {
        "role": role,
        "iteration": iteration,
        "seed": cfg.seed,
        "adam_step": adam.step,
        "moments": MOMENTS,
        "rng_state": rng.bit_generator.state,
        "train_config": cfg.to_dict(),
        "log": [list(row) for row in log],
        "losses": losses,
    }
    if extra:
        state.update(extra)
    save_checkpoint(model, path, {TRAINER_STATE: state})
    write_blob(path / MOMENTS, adam.m + adam.v)


def _restore(path: Path, model: SrModel, adam: AdamState, rng: np.random.Generator):
    path = Path(path)
    try:
        state = json.loads((path / TRAINER_STATE).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"{path} has no {TRAINER_STATE}; it cannot be resumed") from None
    load_weights(model, path)
    shapes = [m.shape for m in adam.m] * 2
    blobs = read_blob(path / state["moments"], shapes)
    for dst, src in zip(adam.m + adam.v, blobs):
        dst[...] = src.astype(dst.dtype)
    adam.step = int(state["adam_step"])
    rng.bit_generator.state = state["rng_state"]
    log = [(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in state["log"]]
    return int(state["iteration"]), log, [float(x) for x in state["losses"]]


def _validation(data: PairedDataset, val: Optional[Union[ValidationSet, PairedDataset]],
                cfg: TrainConfig) -> ValidationSet:
    if isinstance(val, ValidationSet):
        return val
    if isinstance(val, PairedDataset):
        return ValidationSet.from_dataset(val, cfg.val_images)
    return ValidationSet.from_dataset(data, cfg.val_images)


def train_teacher(model_cfg: ModelConfig, train_cfg: TrainConfig, data: PairedDataset,
                  out_dir=None, val=None, resume=None) -> TrainResult:
    """Train ``model_cfg`` from scratch on L1 against the HR patches."""
    if len(data) == 0:
        raise UsageError("training dataset is empty")
    model = build_model(model_cfg, train_cfg.seed, dtype=train_cfg.dtype)

    def loss_fn(y, lr_batch, hr_batch):
        return l1_loss(y, hr_batch)

    return _run_loop(model, train_cfg, data, loss_fn, _validation(data, val, train_cfg),
                     Path(out_dir) if out_dir else None, "teacher", resume)


def distill_student(teacher: Union[SrModel, str, Path], student_cfg: ModelConfig, train_cfg: TrainConfig,
                    data: PairedDataset, out_dir=None, val=None, resume=None,
                    teacher_cfg: Optional[ModelConfig] = None) -> TrainResult:
    """Train ``student_cfg`` on the weighted teacher / ground-truth L1 loss.

    The teacher is frozen; its parameter hash is checked before and after.
    """
    if len(data) == 0:
        raise UsageError("training dataset is empty")
    if not isinstance(teacher, SrModel):
        teacher = load_checkpoint(teacher, teacher_cfg, dtype=train_cfg.dtype)
    if teacher.config.scale != student_cfg.scale:
        raise ConfigurationError(f"teacher scale {teacher.config.scale} != student scale {student_cfg.scale}")
    flags = [p.requires_grad for p in teacher.parameters()]
    teacher.set_requires_grad(False)
    before = parameter_hash(teacher)
    cache: dict[bytes, np.ndarray] = {}

    def teacher_output(lr_batch: np.ndarray) -> np.ndarray:
        if train_cfg.cache_teacher:
            key = lr_batch.tobytes()
            if key not in cache:
                with no_grad():
                    cache[key] = teacher(Tensor(lr_batch, dtype=train_cfg.dtype)).data
            return cache[key]
        with no_grad():
            return teacher(Tensor(lr_batch, dtype=train_cfg.dtype)).data

    def loss_fn(y, lr_batch, hr_batch):
        return kd_loss(y, teacher_output(lr_batch), hr_batch, train_cfg.alpha).total

    student = build_model(student_cfg, train_cfg.seed, dtype=train_cfg.dtype)
    try:
        result = _run_loop(student, train_cfg, data, loss_fn, _validation(data, val, train_cfg),
                           Path(out_dir) if out_dir else None, "student", resume,
                           {"alpha": train_cfg.alpha, "teacher_hash": before})
    finally:
        for p, flag in zip(teacher.parameters(), flags):
            p.requires_grad = flag
    if parameter_hash(teacher) != before:
        raise MambaLiteError("teacher weights changed during distillation")
    return result


def resume_config(checkpoint) -> tuple[ModelConfig, TrainConfig]:
    """Model and training configs stored alongside a trainer checkpoint."""
    path = Path(checkpoint)
    state = json.loads((path / TRAINER_STATE).read_text())
    return read_config(path), TrainConfig.from_dict(state["train_config"])
