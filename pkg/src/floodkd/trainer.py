"""Momentum SGD with polynomial decay, supervised training, the two-stage
teacher/student distillation and the learning-rate/weight-decay grid search."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import AugmentConfig, Sample, _endless_shuffle, augment, balanced_batches
from .errors import ConfigError, ContractError, DegenerateInputError, DivergenceError
from .evaluation import evaluate_samples, pooled_iou
from .labeling import weight_map
from .losses import distill_kd, tversky_focal, weighted_ce
from .model import SegNet, SegNetConfig, backward, forward, init, predict_probs
from .raster import ClassMask
from .seeding import derive_seed

log = logging.getLogger(__name__)

LR_GRID = (0.3, 0.1, 0.003, 0.001)
WD_GRID = (1e-3, 1e-4, 1e-5, 1e-6)
LOSSES = ("weighted_ce", "tversky_focal")
BANDS_CHANNELS = {"S1": 2, "S1+S2": 6}


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.05
    weight_decay: float = 1e-4
    momentum: float = 0.9
    total_steps: int = 300
    lr_power: float = 0.9
    batch: int = 8
    loss: str = "weighted_ce"
    seed: int = 0
    eval_every: int = 50
    w_inner: float = 10.0
    w_outer: float = 5.0
    edge_iterations: int = 1
    tversky_alpha: float = 0.7
    tversky_beta: float = 0.3
    tversky_gamma: float = 0.75
    base_width: int = 8
    skip_strides: tuple[int, ...] = (4, 2)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self) -> "TrainConfig":
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if self.total_steps < 0:
            raise ConfigError(f"total_steps must be >= 0, got {self.total_steps}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("weight_decay must be >= 0 and momentum in [0, 1)")
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        self.augment.validate()
        return self

    def model_config(self, in_channels: int, seed_tag: str = "init") -> SegNetConfig:
        seed = derive_seed(self.seed, seed_tag) & 0xFFFFFFFF
        return SegNetConfig(in_channels, self.base_width, self.skip_strides, seed)


@dataclass
class OptimState:
    buffers: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, net: SegNet) -> "OptimState":
        return cls({k: np.zeros_like(v) for k, v in net.params.items()})


@dataclass(frozen=True)
class EvalRecord:
    step: int
    train_loss: float
    val_iou: float


@dataclass
class RunHistory:
    evals: list[EvalRecord] = field(default_factory=list)
    best_step: int | None = None
    best_val_iou: float | None = None
    last: SegNet | None = field(default=None, repr=False, compare=False)

    def record(self, rec: EvalRecord) -> bool:
        self.evals.append(rec)
        if self.best_val_iou is None or rec.val_iou > self.best_val_iou:
            self.best_val_iou, self.best_step = rec.val_iou, rec.step
            return True
        return False


def poly_lr(lr0: float, step: int, total: int, power: float = 0.9) -> float:
    """lr0 * (1 - step/total)^power."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if total == 0:
        return lr0
    return lr0 * (1.0 - step / total) ** power


def sgd_momentum_step(net: SegNet, grads: dict[str, np.ndarray], state: OptimState, lr: float,
                      wd: float, momentum: float = 0.9) -> None:
    """buffer <- momentum*buffer + (grad + wd*param); param <- param - lr*buffer."""
    for name, p in net.params.items():
        buf = state.buffers[name]
        buf *= momentum
        buf += grads[name] + wd * p
        p -= lr * buf
    state.step += 1
    net.touch()


def _check_finite(value: float, step: int) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite training loss {value} at step {step}")


def _validate(net: SegNet, val: Sequence[Sample], bands: str) -> float:
    counts, _ = evaluate_samples(net, val, bands)
    try:
        return pooled_iou(counts)
    except DegenerateInputError:
        return 0.0


def _supervised_loss(cfg: TrainConfig, logits: np.ndarray, label: ClassMask):
    if cfg.loss == "tversky_focal":
        return tversky_focal(logits, label, cfg.tversky_alpha, cfg.tversky_beta, cfg.tversky_gamma)
    w = weight_map(label, cfg.w_inner, cfg.w_outer, cfg.edge_iterations)
    return weighted_ce(logits, label, w)


def _run_loop(net: SegNet, cfg: TrainConfig, batches, make_batch, loss_fn, val, val_bands,
              tag: str, frozen: SegNet | None = None) -> tuple[SegNet, RunHistory]:
    history = RunHistory()
    state = OptimState.zeros_like(net)
    best = net.copy()
    window: list[float] = []
    for step in range(cfg.total_steps):
        x, targets = make_batch(next(batches), step)
        logits, trace = forward(net, x, train_mode=True)
        grad = np.zeros_like(logits)
        values = []
        for i, target in enumerate(targets):
            try:
                out = loss_fn(logits[i], target)
            except DegenerateInputError:
                continue
            values.append(out.value)
            grad[i] = out.grad_logits
        loss = float(np.mean(values)) if values else 0.0
        _check_finite(loss, step)
        if values:
            grad /= len(values)
            grads = backward(net, trace, grad)
            lr = poly_lr(cfg.lr0, step, cfg.total_steps, cfg.lr_power)
            sgd_momentum_step(net, grads, state, lr, cfg.weight_decay, cfg.momentum)
            if not net.all_finite():
                raise DivergenceError(f"non-finite parameters after step {step}")
        window.append(loss)
        done = step + 1
        if done % cfg.eval_every == 0 or done == cfg.total_steps:
            iou = _validate(net, val, val_bands) if val else float("nan")
            rec = EvalRecord(done, float(np.mean(window)), iou)
            window = []
            if history.record(rec) or not val:
                best = net.copy()
            log.info("%s step %d loss %.4f val_iou %.4f", tag, done, rec.train_loss, iou)
    history.last = net
    if not val and history.evals:
        history.best_step = history.evals[-1].step
    return best, history


def train_supervised(config: TrainConfig, train: Sequence[Sample], val: Sequence[Sample],
                     in_bands: str = "S1", model_config: SegNetConfig | None = None
                     ) -> tuple[SegNet, RunHistory]:
    """Augmented minibatch SGD on labelled samples; returns the best-validation checkpoint."""
    cfg = config.validate()
    if in_bands not in BANDS_CHANNELS:
        raise ConfigError(f"unknown input bands {in_bands!r}")
    mcfg = model_config or cfg.model_config(BANDS_CHANNELS[in_bands])
    if mcfg.in_channels != BANDS_CHANNELS[in_bands]:
        raise ConfigError(f"{in_bands} input needs in_channels={BANDS_CHANNELS[in_bands]}, "
                          f"got {mcfg.in_channels}")
    net = init(mcfg)
    if cfg.total_steps == 0:
        return net, RunHistory(last=net)
    if not train:
        raise ConfigError("training set is empty")
    if any(s.label is None for s in train):
        raise ConfigError("supervised training needs labels on every sample")
    order = _endless_shuffle(list(range(len(train))),
                             np.random.default_rng(derive_seed(cfg.seed, "train", "order")))

    def batches():
        while True:
            yield [next(order) for _ in range(cfg.batch)]

    def make_batch(idx, step):
        xs, labels = [], []
        for j, i in enumerate(idx):
            s = train[i]
            (x,), m = augment([s.inputs(in_bands)], s.label.codes, cfg.augment,
                              derive_seed(cfg.seed, "train", "aug", step, j))
            xs.append(x)
            labels.append(ClassMask(m, s.label.resolution_m))
        return np.stack(xs), labels

    return _run_loop(net, cfg, batches(), make_batch,
                     lambda z, lab: _supervised_loss(cfg, z, lab), val, in_bands, "supervised")


def train_teacher(config: TrainConfig, hand_labeled: Sequence[Sample], val: Sequence[Sample],
                  model_config: SegNetConfig | None = None) -> tuple[SegNet, RunHistory]:
    """Stage 1: supervised training on stacked SAR + optical input."""
    if model_config is not None and model_config.in_channels != 6:
        raise ConfigError(f"teacher needs in_channels=6, got {model_config.in_channels}")
    return train_supervised(config, hand_labeled, val, "S1+S2", model_config)


def teacher_targets(teacher: SegNet, samples: Sequence[Sample]) -> list[np.ndarray]:
    """Teacher class probabilities on the un-augmented stacked inputs."""
    if not samples:
        return []
    probs = predict_probs(teacher, np.stack([s.inputs("S1+S2") for s in samples]))
    return list(probs.astype(np.float32))


def distill_student(teacher: SegNet, config: TrainConfig, source_a: Sequence[Sample],
                    source_b: Sequence[Sample], val: Sequence[Sample],
                    aug: AugmentConfig | None = None,
                    student_config: SegNetConfig | None = None) -> tuple[SegNet, RunHistory]:
    """Stage 2: fit a SAR-only student to the frozen teacher's soft outputs.

    Each batch draws half its images from each source. Teacher probabilities
    come from the un-augmented stacked input; the student's crop and flip
    geometry is applied to both its SAR input and those probabilities, while
    jitter only touches the SAR input. Labels are never read except on the
    validation split used for checkpoint selection.
    """
    cfg = config.validate()
    aug = cfg.augment if aug is None else aug.validate()
    if teacher.config.in_channels != 6:
        raise ConfigError(f"teacher must take 6 input channels, has {teacher.config.in_channels}")
    scfg = student_config or cfg.model_config(2, "student-init")
    if scfg.in_channels != 2:
        raise ConfigError(f"student must take 2 input channels, has {scfg.in_channels}")
    if cfg.total_steps == 0:
        net = init(scfg)
        return net, RunHistory(last=net)
    if cfg.batch % 2:
        raise ConfigError(f"distillation batch must be even, got {cfg.batch}")
    before = teacher.checksum()
    pool = list(source_a) + list(source_b)
    shapes = {s.s1.shape[:2] for s in pool}
    if len(shapes) != 1:
        raise ConfigError(f"all distillation samples must share one size, got {sorted(shapes)}")
    targets = teacher_targets(teacher, pool)
    ia = list(range(len(source_a)))
    ib = list(range(len(source_a), len(pool)))
    batches = balanced_batches(ia, ib, cfg.batch, derive_seed(cfg.seed, "distill", "batches"))
    net = init(scfg)

    def make_batch(idx, step):
        xs, tgts = [], []
        for j, i in enumerate(idx):
            s = pool[i]
            (x, pt), valid = augment([s.s1, targets[i]], s.valid, aug,
                                     derive_seed(cfg.seed, "distill", "aug", step, j),
                                     photometric=[True, False])
            xs.append(x)
            tgts.append((pt / pt.sum(axis=-1, keepdims=True), valid))
        return np.stack(xs), tgts

    best, history = _run_loop(net, cfg, batches, make_batch,
                              lambda z, t: distill_kd(t[0], z, t[1]), val, "S1", "distill")
    if teacher.checksum() != before:
        raise ContractError("teacher parameters changed during distillation")
    return best, history


@dataclass
class GridResult:
    best_config: TrainConfig
    best_history: RunHistory
    best_net: SegNet
    trials: list[tuple[float, float, float]]


def grid_search(lr_grid: Sequence[float], wd_grid: Sequence[float], config: TrainConfig,
                train: Sequence[Sample], val: Sequence[Sample], in_bands: str = "S1") -> GridResult:
    """Train every (lr, wd) pair; keep the best validation IoU (ties: lower lr, then lower wd)."""
    if not lr_grid or not wd_grid:
        raise ConfigError("grid search needs non-empty lr and wd grids")
    best = None
    trials = []
    for lr in sorted(lr_grid):
        for wd in sorted(wd_grid):
            cfg = replace(config, lr0=lr, weight_decay=wd)
            net, hist = train_supervised(cfg, train, val, in_bands)
            score = hist.best_val_iou if hist.best_val_iou is not None else -math.inf
            trials.append((lr, wd, score))
            if best is None or score > best[0]:
                best = (score, cfg, hist, net)
    return GridResult(best[1], best[2], best[3], trials)


def write_history(path: str | Path, history: RunHistory) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "train_loss", "val_iou"])
        for r in history.evals:
            w.writerow([r.step, repr(r.train_loss), repr(r.val_iou)])
