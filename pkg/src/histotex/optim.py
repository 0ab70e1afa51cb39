"""Optimization: AdamW, the one-cycle policy, discriminative per-group rates,
the learning-rate range test, and the staged fine-tuning loop.

The cycle starts at a tenth of the peak rate, climbs linearly while momentum
falls 0.95 -> 0.85, then cosine-anneals the rate to zero while momentum
mirrors back up. Momentum scheduling drives AdamW's beta1. Groups share the
cycle's phase; each scales the amplitude so its own peak is its assigned
rate.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .network import TextureNet
from .rng import RngStream
from .tensor import Tensor, backward, softmax_cross_entropy

ADAMW_BETA1 = 0.9
ADAMW_BETA2 = 0.99
ADAMW_EPS = 1e-8
DEFAULT_WEIGHT_DECAY = 0.01
DEFAULT_WARMUP_FRAC = 0.3
MOM_HIGH = 0.95
MOM_LOW = 0.85

# group-1..4 peak rates as fractions of the group-4 rate; at a 0.01 peak
# these give (0.0001, 0.003, 0.006, 0.01)
GROUP_LR_FRACTIONS = (0.01, 0.3, 0.6, 1.0)

TRAIN_LOG_COLUMNS = ("epoch", "step", "lr_g1", "lr_g2", "lr_g3", "lr_g4",
                     "momentum", "train_loss", "val_loss", "val_error_rate",
                     "wall_ms")


class OptimizerError(RuntimeError):
    pass


class NonFiniteLossError(RuntimeError):
    """Training loss left the reals; the best checkpoint so far is kept."""


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class ParamGroup:
    """Parameters updated together: one layer group, one base rate."""

    index: int
    params: dict[str, Tensor]
    base_lr: float
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(group: ParamGroup, grads: dict[str, np.ndarray], lr: float,
               beta1: float = ADAMW_BETA1, beta2: float = ADAMW_BETA2,
               eps: float = ADAMW_EPS,
               weight_decay: Optional[float] = None) -> None:
    """One decoupled-weight-decay Adam update over a parameter group.

    theta <- theta - lr * mhat / (sqrt(vhat) + eps) - lr * wd * theta
    """
    wd = group.weight_decay if weight_decay is None else weight_decay
    group.step_count += 1
    t = group.step_count
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in group.params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for parameter {name!r}")
        m = group.m.get(name)
        if m is None:
            m = group.m[name] = np.zeros_like(p.data)
            group.v[name] = np.zeros_like(p.data)
        v = group.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if wd:
            p.data -= (lr * wd) * p.data
        p.data -= lr * update


def adam_step(group: ParamGroup, grads: dict[str, np.ndarray], lr: float,
              beta1: float = ADAMW_BETA1, beta2: float = ADAMW_BETA2,
              eps: float = ADAMW_EPS) -> None:
    """Plain Adam: identical to AdamW with the decay term disabled."""
    adamw_step(group, grads, lr, beta1, beta2, eps, weight_decay=0.0)


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OneCycleSchedule:
    total_steps: int
    lr_max: float
    warmup_frac: float = DEFAULT_WARMUP_FRAC
    mom_high: float = MOM_HIGH
    mom_low: float = MOM_LOW

    def __post_init__(self):
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError(f"warmup_frac must be in (0,1), got {self.warmup_frac}")
        if self.total_steps < 1 or self.lr_max <= 0:
            raise ValueError("total_steps must be >= 1 and lr_max > 0")

    @property
    def lr_start(self) -> float:
        return self.lr_max / 10.0

    def at(self, t: float) -> tuple[float, float]:
        return one_cycle_at(self, t)


def one_cycle_at(sched: OneCycleSchedule, t: float) -> tuple[float, float]:
    """(learning rate, momentum) at step t of the cycle, 0 <= t <= T."""
    T = sched.total_steps
    if not 0 <= t <= T:
        raise ValueError(f"step {t} outside schedule range [0, {T}]")
    peak = sched.warmup_frac * T
    if t < peak:
        u = t / peak
        lr = sched.lr_start + (sched.lr_max - sched.lr_start) * u
        mom = sched.mom_high + (sched.mom_low - sched.mom_high) * u
    else:
        s = (t - peak) / ((1.0 - sched.warmup_frac) * T)
        half_cos = 0.5 * (1.0 + math.cos(math.pi * s))
        lr = sched.lr_max * half_cos
        mom = sched.mom_high - (sched.mom_high - sched.mom_low) * half_cos
    return lr, mom


def discriminative_lrs(lr_max: float,
                       explicit: Optional[Sequence[float]] = None) -> tuple[float, ...]:
    """Per-group peak rates, group 1 first; group 4 always runs at lr_max."""
    if lr_max <= 0:
        raise ValueError(f"lr_max must be positive, got {lr_max}")
    if explicit is None:
        return tuple(lr_max * f for f in GROUP_LR_FRACTIONS)
    rates = tuple(float(v) for v in explicit)
    if len(rates) != 4:
        raise ValueError(f"need 4 group rates, got {len(rates)}")
    if any(b < a for a, b in zip(rates, rates[1:])):
        raise ValueError(f"group rates must not decrease towards the head: {rates}")
    return rates


# ---------------------------------------------------------------------------
# learning-rate range test
# ---------------------------------------------------------------------------

@dataclass
class LrRangeResult:
    lrs: np.ndarray
    losses: np.ndarray
    smoothed: np.ndarray
    suggested_lr: float
    diverged_at: Optional[int]
    lr_lo_too_high: bool


def lr_range_sweep(step_fn: Callable[[object, float], float],
                   batches: Iterable, lr_lo: float, lr_hi: float,
                   iters: int = 100, smooth_beta: float = 0.98,
                   divergence_factor: float = 4.0) -> LrRangeResult:
    """Sweep exponentially increasing rates, one training step per rate.

    ``step_fn(batch, lr)`` performs the step on throwaway state and returns
    the loss. The smoothed curve is a bias-corrected EMA; the sweep stops
    early once it exceeds ``divergence_factor`` times its best value.
    Suggested peak rate: the rate at the smoothed minimum, divided by 10.
    """
    if iters < 2:
        raise ValueError(f"iters must be >= 2, got {iters}")
    if not 0 < lr_lo < lr_hi:
        raise ValueError(f"need 0 < lr_lo < lr_hi, got {lr_lo}, {lr_hi}")

    ratio = lr_hi / lr_lo
    lrs, losses, smoothed = [], [], []
    ema = 0.0
    best = math.inf
    diverged_at: Optional[int] = None
    it = iter(batches)
    for i in range(iters):
        try:
            batch = next(it)
        except StopIteration:
            it = iter(batches)  # re-iterable inputs wrap around
            try:
                batch = next(it)
            except StopIteration:
                raise ValueError("batch source exhausted before the sweep "
                                 "finished; pass a re-iterable or generator "
                                 "of at least one batch") from None
        lr = lr_lo * ratio ** (i / (iters - 1))
        loss = float(step_fn(batch, lr))
        lrs.append(lr)
        losses.append(loss)
        if not math.isfinite(loss):
            diverged_at = i
            smoothed.append(math.inf)
            break
        ema = smooth_beta * ema + (1.0 - smooth_beta) * loss
        sm = ema / (1.0 - smooth_beta ** (i + 1))
        smoothed.append(sm)
        best = min(best, sm)
        if sm > divergence_factor * best:
            diverged_at = i
            break

    smoothed_arr = np.asarray(smoothed)
    finite = np.isfinite(smoothed_arr)
    lr_lo_too_high = diverged_at == 0 or not finite.any()
    if finite.any():
        idx = int(np.where(finite, smoothed_arr, np.inf).argmin())
        suggested = lrs[idx] / 10.0
    else:
        suggested = lr_lo
    return LrRangeResult(
        lrs=np.asarray(lrs), losses=np.asarray(losses), smoothed=smoothed_arr,
        suggested_lr=suggested, diverged_at=diverged_at,
        lr_lo_too_high=lr_lo_too_high)


def lr_range_test(model: TextureNet, batches: Iterable, lr_lo: float = 1e-7,
                  lr_hi: float = 10.0, iters: int = 100,
                  smooth_beta: float = 0.98, divergence_factor: float = 4.0,
                  betas: tuple[float, float] = (ADAMW_BETA1, ADAMW_BETA2),
                  weight_decay: float = DEFAULT_WEIGHT_DECAY,
                  rng: Optional[RngStream] = None) -> LrRangeResult:
    """Mock-train a throwaway copy of the model over a rate sweep.

    The real model is never mutated. Every trainable parameter joins a
    single group stepped by AdamW at the swept rate.
    """
    rng = rng or RngStream(0)
    probe = model.copy()
    group = ParamGroup(index=0, params={n: p for n, p in probe.named_parameters().items()
                                        if p.requires_grad},
                       base_lr=lr_lo, weight_decay=weight_decay)
    counter = {"step": 0}

    def step_fn(batch, lr: float) -> float:
        x, y = batch
        step = counter["step"]
        counter["step"] += 1
        probe.zero_grad()
        # high rates are expected to overflow; the sweep treats that as
        # divergence rather than an error
        with np.errstate(over="ignore", invalid="ignore"):
            res = probe.forward(Tensor(x), mode="train",
                                rng=rng.generator("lrfind.dropout", 0, step))
            loss, _ = softmax_cross_entropy(res.logits, y)
            lv = float(loss.data)
            if not math.isfinite(lv):
                return lv
            backward(loss)
            grads = {n: p.grad for n, p in group.params.items()}
            if all(np.all(np.isfinite(g)) for g in grads.values()):
                adamw_step(group, grads, lr, betas[0], betas[1])
        return lv

    return lr_range_sweep(step_fn, batches, lr_lo, lr_hi, iters,
                          smooth_beta, divergence_factor)


# ---------------------------------------------------------------------------
# staged training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainStage:
    """One fine-tuning stage: which groups learn, for how long, at what peak."""

    groups: frozenset[int]
    epochs: int
    lr_max: float
    group_lrs: Optional[tuple[float, float, float, float]] = None
    schedule: str = "one_cycle"  # or "constant"
    warmup_frac: float = DEFAULT_WARMUP_FRAC

    def resolved_lrs(self) -> tuple[float, ...]:
        if self.group_lrs is not None:
            return discriminative_lrs(self.lr_max, self.group_lrs)
        if self.groups == {1, 2, 3, 4}:
            return discriminative_lrs(self.lr_max)
        # partial unfreeze: every learning group runs at the peak rate
        return (self.lr_max,) * 4


def default_stages(lr_max: float, head_epochs: int = 2, full_epochs: int = 12,
                   warmup_frac: float = DEFAULT_WARMUP_FRAC) -> list[TrainStage]:
    """Head-only warm-up for two epochs, then the whole network with
    discriminative rates."""
    return [
        TrainStage(groups=frozenset({4}), epochs=head_epochs, lr_max=lr_max,
                   warmup_frac=warmup_frac),
        TrainStage(groups=frozenset({1, 2, 3, 4}), epochs=full_epochs,
                   lr_max=lr_max, warmup_frac=warmup_frac),
    ]


@dataclass
class TrainResult:
    rows: list[dict]
    best_val_loss: float
    best_epoch: int
    global_step: int
    aborted: bool = False


def _evaluate_loss(model: TextureNet, batches: Iterable) -> tuple[float, float]:
    """(mean loss, error rate) of an evaluation stream."""
    total_loss = 0.0
    total_err = 0
    n = 0
    for x, y in batches:
        res = model.forward(Tensor(x), mode="eval")
        loss, probs = softmax_cross_entropy(res.logits, y)
        b = len(y)
        total_loss += float(loss.data) * b
        total_err += int((probs.argmax(axis=1) != np.asarray(y)).sum())
        n += b
    if n == 0:
        raise ValueError("evaluation stream is empty")
    return total_loss / n, total_err / n


def write_train_log(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRAIN_LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def train(model: TextureNet, data, stages: Sequence[TrainStage],
          rng: RngStream,
          betas: tuple[float, float] = (ADAMW_BETA1, ADAMW_BETA2),
          eps: float = ADAMW_EPS,
          weight_decay: float = DEFAULT_WEIGHT_DECAY,
          class_names: Sequence[str] = (),
          checkpoint_dir: Optional[str | Path] = None,
          log_path: Optional[str | Path] = None,
          start_epoch: int = 0,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Run the staged fine-tuning protocol.

    ``data`` must provide ``train_batches(epoch)``, ``val_batches()`` and
    ``batches_per_epoch``. Logs one row per epoch; saves a checkpoint at the
    best validation loss and at the end when ``checkpoint_dir`` is given.
    ``start_epoch`` skips already-completed epochs so an interrupted run can
    resume from checkpoint metadata (optimizer moments start fresh).
    """
    rows: list[dict] = []
    best_val = math.inf
    best_epoch = -1
    global_epoch = 0
    global_step = 0
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    def save(name: str, epoch: int) -> None:
        if ckpt_dir is not None:
            save_checkpoint(model, ckpt_dir / name, class_names=class_names,
                            epoch=epoch, schedule_step=global_step)

    for stage in stages:
        if stage.epochs == 0:
            continue
        model.set_trainable(stage.groups)
        group_params = model.parameter_groups()
        base_lrs = stage.resolved_lrs()
        groups = [ParamGroup(index=g,
                             params={n: p for n, p in group_params[g].items()
                                     if p.requires_grad},
                             base_lr=base_lrs[g - 1],
                             weight_decay=weight_decay)
                  for g in sorted(stage.groups)]
        steps_per_epoch = data.batches_per_epoch
        total = stage.epochs * steps_per_epoch
        sched = OneCycleSchedule(total_steps=total, lr_max=stage.lr_max,
                                 warmup_frac=stage.warmup_frac)

        for stage_epoch in range(stage.epochs):
            t0 = time.perf_counter()
            epoch_loss = 0.0
            epoch_n = 0
            last_lrs = [0.0] * 4
            last_mom = betas[0]
            skip = global_epoch < start_epoch
            if not skip:
                for step_in_epoch, (x, y) in enumerate(data.train_batches(global_epoch)):
                    t = stage_epoch * steps_per_epoch + step_in_epoch
                    if stage.schedule == "one_cycle":
                        lr_t, mom_t = one_cycle_at(sched, min(t, total))
                        lr_frac = lr_t / stage.lr_max
                    else:
                        mom_t = betas[0]
                        lr_frac = 1.0
                    model.zero_grad()
                    res = model.forward(
                        Tensor(x), mode="train",
                        rng=rng.generator("dropout", global_epoch, step_in_epoch))
                    loss, _ = softmax_cross_entropy(res.logits, y)
                    lv = float(loss.data)
                    if not math.isfinite(lv):
                        if rows and log_path is not None:
                            write_train_log(rows, log_path)
                        raise NonFiniteLossError(
                            f"training loss became {lv} at epoch {global_epoch} "
                            f"step {step_in_epoch}; best checkpoint retained")
                    backward(loss)
                    for group in groups:
                        grads = {n: p.grad if p.grad is not None
                                 else np.zeros_like(p.data)
                                 for n, p in group.params.items()}
                        adamw_step(group, grads, group.base_lr * lr_frac,
                                   beta1=mom_t, beta2=betas[1], eps=eps)
                    epoch_loss += lv * len(y)
                    epoch_n += len(y)
                    global_step += 1
                    for group in groups:
                        last_lrs[group.index - 1] = group.base_lr * lr_frac
                    last_mom = mom_t

                val_loss, val_err = _evaluate_loss(model, data.val_batches())
                row = {
                    "epoch": global_epoch,
                    "step": global_step,
                    "lr_g1": f"{last_lrs[0]:.9g}",
                    "lr_g2": f"{last_lrs[1]:.9g}",
                    "lr_g3": f"{last_lrs[2]:.9g}",
                    "lr_g4": f"{last_lrs[3]:.9g}",
                    "momentum": f"{last_mom:.9g}",
                    "train_loss": f"{epoch_loss / max(epoch_n, 1):.9g}",
                    "val_loss": f"{val_loss:.9g}",
                    "val_error_rate": f"{val_err:.9g}",
                    "wall_ms": f"{(time.perf_counter() - t0) * 1e3:.1f}",
                }
                rows.append(row)
                if on_epoch is not None:
                    on_epoch(row)
                if val_loss < best_val:
                    best_val = val_loss
                    best_epoch = global_epoch
                    save("best.htxc", global_epoch)
            else:
                global_step += steps_per_epoch
            global_epoch += 1

    save("final.htxc", global_epoch - 1)
    if log_path is not None:
        write_train_log(rows, log_path)
    return TrainResult(rows=rows, best_val_loss=best_val, best_epoch=best_epoch,
                       global_step=global_step)
