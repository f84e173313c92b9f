"""Toy-scale training: AdamW, warmup + cosine schedule, divergence detection."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .blocks import (
    ConfigError,
    Fixed,
    LayerScale,
    ResidualStrategy,
    strategy_to_str,
    uses_prenorm,
)
from .cait import CaitConfig, CaitModel, build_model, forward
from .data import Dataset, iter_batches
from .tensor import NonFiniteError, Tape, Tensor

log = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
LR_FLOOR = 1e-6  # fraction of base_lr reached at the end of the cosine


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    base_lr: float = 1e-3
    warmup_epochs: float = 1.0
    weight_decay: float = 0.05
    schedule: str = "cosine"
    seed: int = 0
    strategy: Optional[ResidualStrategy] = None  # None: LayerScale with the model's epsilon
    label_smoothing: float = 0.0
    max_steps: Optional[int] = None
    probe_size: int = 16
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be > 0")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError("label_smoothing must lie in [0, 1)")

    def to_items(self) -> list[tuple[str, str]]:
        out = []
        for k, v in self.__dict__.items():
            if k == "strategy":
                v = "default" if v is None else strategy_to_str(v)
            out.append((k, repr(v) if isinstance(v, float) else str(v)))
        return out


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamWState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float, weight_decay: float,
               no_decay=()) -> None:
    """One in-place AdamW update of ``params`` (name -> Tensor).

    Missing or None gradients count as zero. Decay is decoupled and scaled by
    ``lr``; names in ``no_decay`` are not decayed. A non-finite gradient raises
    ``NonFiniteError`` before any parameter is touched.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name!r}; step aborted")
    state.t += 1
    c1 = 1.0 - BETA1 ** state.t
    c2 = 1.0 - BETA2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        upd = (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        if weight_decay and name not in no_decay:
            upd = upd + weight_decay * p.data
        p.data = p.data - lr * upd


def lr_at(step: float, total_steps: float, warmup_steps: float, base_lr: float,
          schedule: str = "cosine") -> float:
    """Linear warmup from 0, then cosine decay to ``LR_FLOOR * base_lr``."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if schedule == "constant" or total_steps <= warmup_steps:
        return base_lr
    progress = min(max((step - warmup_steps) / (total_steps - warmup_steps), 0.0), 1.0)
    floor = LR_FLOOR * base_lr
    return floor + (base_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def no_decay_names(model: CaitModel) -> set:
    """Biases, norm affines, branch weights and embeddings are not decayed."""
    return {n for n, t in model.params.items() if t.ndim < 2 or n in ("pos_embed", "cls_token")}


# ---------------------------------------------------------------- training loop


@dataclass
class RunReport:
    model: CaitModel
    train_config: TrainConfig
    step_losses: list
    epoch_losses: list
    epoch_accuracies: list
    lrs: list
    final_loss: float
    final_accuracy: float
    diverged: bool
    diverged_at: Optional[int]
    branch_ratios: object  # analysis.BranchRatioSeries
    rng_state: dict
    reason: str = ""

    @property
    def steps(self) -> int:
        return len(self.step_losses)

    def to_csv(self) -> str:
        """Per-epoch curve: ``epoch,loss,accuracy,lr,diverged``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "accuracy", "lr", "diverged"])
        for e, (loss, acc) in enumerate(zip(self.epoch_losses, self.epoch_accuracies), start=1):
            w.writerow([e, repr(float(loss)), repr(float(acc)), repr(float(self.lrs[e - 1])), int(self.diverged)])
        return buf.getvalue()


def _loss_and_grads(model: CaitModel, x: np.ndarray, y: np.ndarray, smoothing: float,
                    training: bool, rng) -> tuple:
    with Tape() as tape:
        logits, _ = forward(model, Tensor(x), training=training, rng=rng)
        loss = T.cross_entropy(logits, y, smoothing)
        tape.backward(loss)
    acc = float(np.mean(np.argmax(logits.data, axis=1) == y))
    return loss.item(), acc


def evaluate(model: CaitModel, dataset: Dataset, batch_size: int = 64) -> tuple[float, float]:
    """Mean cross-entropy and accuracy over ``dataset`` in evaluation mode."""
    patches = dataset.patches(model.config.patch_size)
    total, correct = 0.0, 0
    for s in range(0, len(dataset), batch_size):
        logits, _ = forward(model, Tensor(patches[s:s + batch_size]))
        y = dataset.labels[s:s + batch_size]
        total += T.cross_entropy(logits, y).item() * len(y)
        correct += int(np.sum(np.argmax(logits.data, axis=1) == y))
    return total / len(dataset), correct / len(dataset)


def _check_dataset(config: CaitConfig, dataset: Dataset) -> None:
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    if dataset.channels != config.in_chans or dataset.image_size != config.image_size:
        raise ConfigError(
            f"dataset images are {dataset.channels}x{dataset.image_size}px, model expects "
            f"{config.in_chans}x{config.image_size}px")
    if dataset.num_classes > config.num_classes:
        raise ConfigError(f"dataset has {dataset.num_classes} classes, model head has {config.num_classes}")


def train_run(model_config: CaitConfig, train_config: TrainConfig, dataset: Dataset,
              model: Optional[CaitModel] = None) -> RunReport:
    """Train a fresh model (or ``model``) and report curves and diagnostics.

    All randomness derives from ``train_config.seed`` through independent
    streams for initialization, batch order and stochastic depth, so two calls
    with equal arguments produce bit-identical results.
    """
    from .analysis import BranchRatioSeries, branch_ratios

    _check_dataset(model_config, dataset)
    tc = train_config
    init_ss, data_ss, drop_ss = np.random.SeedSequence(tc.seed).spawn(3)
    if model is None:
        model = build_model(model_config, tc.strategy, seed=np.random.default_rng(init_ss))
    data_rng = np.random.default_rng(data_ss)
    drop_rng = np.random.default_rng(drop_ss)

    patches = dataset.patches(model_config.patch_size)
    labels = dataset.labels
    probe = patches[: min(tc.probe_size, len(dataset))]
    per_epoch = math.ceil(len(dataset) / tc.batch_size)
    total = per_epoch * tc.epochs
    if tc.max_steps is not None:
        total = min(total, tc.max_steps)
    # original (non-prenorm) variants are trained without warmup by definition
    warmup = tc.warmup_epochs * per_epoch if uses_prenorm(model.strategy) else 0.0
    params = model.trainable()
    no_decay = no_decay_names(model)
    opt = AdamWState()
    series = BranchRatioSeries()

    step_losses, epoch_losses, epoch_accs, lrs = [], [], [], []
    diverged, diverged_at, reason = False, None, ""
    ref = None  # epoch-1 mean loss
    step = 0
    for epoch in range(1, tc.epochs + 1):
        if step >= total:
            break
        e_loss, e_acc, e_n = 0.0, 0.0, 0
        lr = 0.0
        for idx in iter_batches(len(dataset), tc.batch_size, data_rng):
            if step >= total:
                break
            lr = lr_at(step + 1, total, warmup, tc.base_lr, tc.schedule)
            model.zero_grad()
            try:
                # overflow surfaces as NonFiniteError from the tensor ops; no need for warnings too
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, acc = _loss_and_grads(model, patches[idx], labels[idx], tc.label_smoothing, True,
                                                drop_rng)
                    adamw_step(params, {n: p.grad for n, p in params.items()}, opt, lr, tc.weight_decay, no_decay)
            except NonFiniteError as exc:
                diverged, diverged_at, reason = True, step, str(exc)
                step_losses.append(math.nan)
                break
            step += 1
            step_losses.append(loss)
            e_loss += loss * len(idx)
            e_acc += acc * len(idx)
            e_n += len(idx)
            if ref is not None and loss > tc.divergence_factor * ref:
                diverged, diverged_at = True, step - 1
                reason = f"loss {loss:.4g} exceeds {tc.divergence_factor:g}x the epoch-1 mean {ref:.4g}"
                break
        if e_n:
            epoch_losses.append(e_loss / e_n)
            epoch_accs.append(e_acc / e_n)
            lrs.append(lr)
        if ref is None and e_n:
            ref = e_loss / e_n
        if diverged:
            log.info("diverged at step %d: %s", diverged_at, reason)
            break
        series.add(epoch, branch_ratios(model, probe))
        log.info("epoch %d loss %.5f acc %.4f lr %.3g", epoch, epoch_losses[-1], epoch_accs[-1], lr)
    model.zero_grad()

    if diverged:
        final_loss, final_acc = math.inf, 0.0
    else:
        final_loss, final_acc = evaluate(model, dataset)
    return RunReport(
        model=model,
        train_config=tc,
        step_losses=step_losses,
        epoch_losses=epoch_losses,
        epoch_accuracies=epoch_accs,
        lrs=lrs,
        final_loss=final_loss,
        final_accuracy=final_acc,
        diverged=diverged,
        diverged_at=diverged_at,
        branch_ratios=series,
        rng_state=drop_rng.bit_generator.state,
        reason=reason,
    )


def retrain_fixed(checkpoint, train_config: TrainConfig, dataset: Dataset) -> RunReport:
    """Retrain from scratch with LayerScale diagonals loaded and frozen.

    ``checkpoint`` is a path or a trained ``CaitModel``. Every other parameter
    is freshly initialized from ``train_config.seed``.
    """
    from .checkpoint import load_checkpoint, scale_weights

    if isinstance(checkpoint, CaitModel):
        source = checkpoint
    else:
        source, _, _ = load_checkpoint(checkpoint)
    weights = scale_weights(source)
    strategy = LayerScale(Fixed(weights))
    tc = TrainConfig(**{**train_config.__dict__, "strategy": strategy})
    return train_run(source.config, tc, dataset)


__all__ = [
    "AdamWState",
    "RunReport",
    "TrainConfig",
    "adamw_step",
    "evaluate",
    "lr_at",
    "no_decay_names",
    "retrain_fixed",
    "train_run",
]
