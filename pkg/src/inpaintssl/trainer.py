"""Losses, Adam, learning-rate schedule, early stopping and the training regimes."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import corruption, unet
from .tensorcore import NumericError, ShapeError, Tape, Tensor, _emit
from .unet import UNet

log = logging.getLogger(__name__)

DICE_EPS = 1e-7

FINETUNE_IMMEDIATELY = "finetune_immediately"
FREEZE_THEN_FINETUNE = "freeze_then_finetune"
POLICIES = (FINETUNE_IMMEDIATELY, FREEZE_THEN_FINETUNE)


class DomainError(ValueError):
    pass


# --------------------------------------------------------------------------
# losses


def _as_array(y) -> np.ndarray:
    return y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)


def l2_loss(tape: Optional[Tape], X: Tensor, Y) -> Tensor:
    """Squared error summed over pixels, averaged over batch and channels."""
    y = _as_array(Y)
    if X.shape != y.shape or X.data.ndim != 4:
        raise ShapeError(f"l2_loss: shapes {X.shape} and {y.shape} must match and be N x H x W x C")
    n, _, _, c = X.shape
    d = X.data - y
    value = np.array((d * d).sum() / (n * c))
    return _emit(tape, value, (X,), lambda g: (g * 2.0 * d / (n * c),), "l2_loss")


def dice_loss(tape: Optional[Tape], X: Tensor, Y, eps: float = DICE_EPS) -> Tensor:
    """Batch-aggregate soft Dice loss: per-class Dice over the whole batch, then class mean."""
    y = _as_array(Y)
    if X.shape != y.shape or X.data.ndim != 4:
        raise ShapeError(f"dice_loss: shapes {X.shape} and {y.shape} must match and be N x H x W x C")
    if not eps > 0:
        raise DomainError("dice epsilon must be positive")
    x = X.data
    if x.min() < 0.0 or x.max() > 1.0:
        raise DomainError("dice_loss expects probabilities in [0, 1]")
    if not np.isin(y, (0.0, 1.0)).all():
        raise DomainError("dice_loss expects binary targets")
    c = x.shape[-1]
    inter = (x * y).sum(axis=(0, 1, 2))
    total = (x + y).sum(axis=(0, 1, 2))
    num = 2.0 * inter + eps
    den = total + eps
    value = np.array(np.mean(1.0 - num / den))

    def backward(g):
        dx = (-2.0 * y / den + num / (den * den)) / c
        return (g * dx,)

    return _emit(tape, value, (X,), backward, "dice_loss")


# --------------------------------------------------------------------------
# optimizer, schedule, early stopping


@dataclass(frozen=True)
class AdamConfig:
    lr0: float = 1e-3
    beta1: float = 0.99
    beta2: float = 0.995
    eps: float = 1e-8


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, cfg: AdamConfig, lr: float,
              frozen=frozenset()) -> dict:
    """One bias-corrected Adam update; returns a new params dict.

    Frozen names are passed through untouched and their moment estimates
    are not advanced.
    """
    state.t += 1
    t = state.t
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if name in frozen or g is None:
            out[name] = p
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, param {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        upd = p.data - lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        out[name] = Tensor(upd, name)
    return out


@dataclass(frozen=True)
class LRSchedule:
    lr0: float = 1e-3
    decay: float = 0.9
    period: int = 2

    def lr(self, epoch: int) -> float:
        return self.lr0 * self.decay ** (epoch // self.period)


@dataclass(frozen=True)
class EarlyStopRule:
    min_delta: float
    patience: int


INPAINT_STOP = EarlyStopRule(50.0, 4)
SEGMENT_STOP = EarlyStopRule(1e-3, 10)


class EarlyStopping:
    """Counts epochs without an improvement of at least ``min_delta`` over the best loss."""

    def __init__(self, rule: EarlyStopRule):
        self.rule = rule
        self.best = np.inf
        self.best_epoch = -1
        self.wait = 0
        self.epoch = -1

    def update(self, loss: float) -> bool:
        self.epoch += 1
        if self.best - loss >= self.rule.min_delta or self.best_epoch < 0:
            self.best = loss
            self.best_epoch = self.epoch
            self.wait = 0
        else:
            self.wait += 1
        return self.wait >= self.rule.patience


# --------------------------------------------------------------------------
# training


@dataclass
class Inpaint:
    bank: corruption.MaskBank


@dataclass
class Segment:
    eps: float = DICE_EPS


@dataclass
class TrainData:
    inputs: np.ndarray
    targets: Optional[np.ndarray] = None     # None for inpainting
    val_inputs: Optional[np.ndarray] = None
    val_targets: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.inputs) == 0:
            raise ValueError("training data is empty")


@dataclass
class History:
    rows: list = field(default_factory=list)   # dicts: epoch, train_loss, val_loss, lr
    best_epoch: int = -1
    stopped_early: bool = False

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr", "phase"])
        for r in self.rows:
            w.writerow([r["epoch"], repr(r["train_loss"]), repr(r["val_loss"]), repr(r["lr"]), r.get("phase", 1)])
        return buf.getvalue()

    def extend(self, other: "History", phase: int) -> None:
        for r in other.rows:
            self.rows.append(dict(r, phase=phase))
        self.best_epoch = other.best_epoch
        self.stopped_early = other.stopped_early


def default_batch_size(n: int) -> int:
    return 9 if n >= 9 else 4


def corrupt_batch(bank: corruption.MaskBank, images: np.ndarray, first_draw: int) -> np.ndarray:
    return np.stack([corruption.apply(corruption.draw(bank, first_draw + i), img)
                     for i, img in enumerate(images)])


def _loss(tape, regime, out, target):
    if isinstance(regime, Inpaint):
        return l2_loss(tape, out, target)
    return dice_loss(tape, out, target, regime.eps)


def evaluate_loss(model: UNet, regime, inputs: np.ndarray, targets: np.ndarray,
                  batch_size: int = 8) -> float:
    """Mean of per-batch losses over a fixed set (no tape)."""
    vals, weights = [], []
    for s in range(0, len(inputs), batch_size):
        out = unet.run(model, inputs[s:s + batch_size])
        vals.append(_loss(None, regime, out, targets[s:s + batch_size]).item())
        weights.append(len(inputs[s:s + batch_size]))
    return float(np.average(vals, weights=weights))


def _validation_set(regime, data: TrainData):
    if data.val_inputs is None or len(data.val_inputs) == 0:
        return None
    if isinstance(regime, Inpaint):
        # fixed corruption per validation image so the monitored loss is not mask noise
        n_train_draws = 1 << 40
        return corrupt_batch(regime.bank, data.val_inputs, n_train_draws), data.val_inputs
    return data.val_inputs, data.val_targets


def train(model: UNet, data: TrainData, regime, adam: AdamConfig = AdamConfig(),
          schedule: Optional[LRSchedule] = None, stop_rule: Optional[EarlyStopRule] = None,
          seed: int = 0, batch_size: Optional[int] = None, max_epochs: int = 200,
          restore_best: bool = True, min_epoch_samples: int = 0) -> tuple:
    """Train until early stopping (or ``max_epochs``); returns ``(model, history)``.

    Inpainting draws one bank mask per image per iteration from a running draw
    counter and regresses the uncorrupted image with the L2 loss; segmentation
    minimizes the batch-aggregate Dice loss.  The monitored loss is the
    validation loss when validation data is given, else the training loss.
    ``min_epoch_samples`` cycles small training sets (fresh shuffle per pass)
    so that an epoch holds at least that many samples.
    """
    schedule = schedule or LRSchedule(adam.lr0)
    if stop_rule is None:
        stop_rule = INPAINT_STOP if isinstance(regime, Inpaint) else SEGMENT_STOP
    inputs = np.asarray(data.inputs, dtype=np.float64)
    targets = inputs if isinstance(regime, Inpaint) else np.asarray(data.targets, dtype=np.float64)
    if targets is None or len(targets) != len(inputs):
        raise ShapeError("inputs and targets must have the same length")
    n = len(inputs)
    bs = min(batch_size or default_batch_size(n), n)
    passes = max(1, -(-min_epoch_samples // n))
    val = _validation_set(regime, data)
    frozen = model.frozen_names()
    state = AdamState()
    stopper = EarlyStopping(stop_rule)
    history = History()
    params = dict(model.params)
    best_params = params
    draws = 0
    for epoch in range(max_epochs):
        lr = schedule.lr(epoch)
        rng = np.random.default_rng([seed, epoch])
        order = np.concatenate([rng.permutation(n) for _ in range(passes)])
        losses = []
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            x = inputs[idx]
            y = targets[idx]
            if isinstance(regime, Inpaint):
                x = corrupt_batch(regime.bank, x, draws)
                draws += len(idx)
            tape = Tape()
            current = model.with_params(params)
            try:
                out = unet.run(current, x, tape)
                loss = _loss(tape, regime, out, y)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch at {start}: {exc}") from exc
            grads = tape.backward(loss)
            named = {k: grads[t] for k, t in params.items() if t in grads}
            params = adam_step(params, named, state, adam, lr, frozen)
            losses.append(loss.item())
        train_loss = float(np.mean(losses))
        current = model.with_params(params)
        if val is not None:
            val_loss = evaluate_loss(current, regime, *val)
        else:
            val_loss = train_loss
        if not np.isfinite(val_loss):
            raise NumericError(f"epoch {epoch}: non-finite validation loss")
        history.rows.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr})
        log.debug("epoch %d lr %.3g train %.5g val %.5g", epoch, lr, train_loss, val_loss)
        stop = stopper.update(val_loss)
        if stopper.best_epoch == epoch:
            best_params = params
        if stop:
            history.stopped_early = True
            break
    history.best_epoch = stopper.best_epoch
    final = best_params if restore_best else params
    return model.with_params(final), history


# --------------------------------------------------------------------------
# transfer learning


@dataclass(frozen=True)
class TransferStrategy:
    scope: str = unet.ENCODER_ONLY
    policy: str = FINETUNE_IMMEDIATELY
    lr_first: float = 1e-3
    lr_second: Optional[float] = None

    def __post_init__(self):
        if self.scope not in unet.SCOPES:
            raise ValueError(f"unknown transfer scope {self.scope!r}")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown fine-tuning policy {self.policy!r}")

    @property
    def label(self) -> str:
        """Acronym used in the transfer grid: F/FF + E/B + F (one run) or S (two runs)."""
        a = "F" if self.policy == FINETUNE_IMMEDIATELY else "FF"
        b = "E" if self.scope == unet.ENCODER_ONLY else "B"
        return a + b + ("S" if self.lr_second is not None else "F")


def segmentation_model(pretrained: UNet, n_classes: int, seed: int) -> UNet:
    cfg = replace(pretrained.config, out_channels=n_classes, head="segment", seed=seed)
    return unet.build(cfg)


def first_run(pretrained: UNet, strategy: TransferStrategy, data: TrainData, seed: int,
              n_classes: int = 4, stop_rule: EarlyStopRule = SEGMENT_STOP, **train_kw) -> tuple:
    """Fresh segmentation U-Net, transfer the scoped groups, train once at ``lr_first``.

    Under freeze-then-finetune the transferred groups stay frozen for this run.
    """
    model = segmentation_model(pretrained, n_classes, seed)
    model = unet.transfer(pretrained, model, strategy.scope)
    if strategy.policy == FREEZE_THEN_FINETUNE:
        model = unet.set_frozen(model, strategy.scope, True)
    adam = AdamConfig(lr0=strategy.lr_first)
    model, hist = train(model, data, Segment(), adam, LRSchedule(strategy.lr_first),
                        stop_rule, seed=seed, **train_kw)
    return model, hist


def second_run(model: UNet, lr: float, data: TrainData, seed: int,
               stop_rule: EarlyStopRule = SEGMENT_STOP, **train_kw) -> tuple:
    """Unfreeze everything and train again to convergence from ``model``'s weights."""
    model = unet.set_frozen(model, unet.GROUPS, False)
    return train(model, data, Segment(), AdamConfig(lr0=lr), LRSchedule(lr),
                 stop_rule, seed=seed, **train_kw)


def finetune(pretrained: UNet, strategy: TransferStrategy, data: TrainData, seed: int,
             n_classes: int = 4, **train_kw) -> tuple:
    """Transfer pretrained weights and fine-tune per ``strategy``.

    Freeze-then-finetune always has two phases (the second at ``lr_second``,
    defaulting to ``lr_first``); fine-tune-immediately adds a second full run
    only when ``lr_second`` is set.
    """
    model, hist = first_run(pretrained, strategy, data, seed, n_classes, **train_kw)
    history = History()
    history.extend(hist, phase=1)
    lr2 = strategy.lr_second
    if lr2 is None and strategy.policy == FREEZE_THEN_FINETUNE:
        lr2 = strategy.lr_first
    if lr2 is not None:
        model, hist2 = second_run(model, lr2, data, seed, **train_kw)
        history.extend(hist2, phase=2)
    return model, history


def supervised(config: unet.UNetConfig, data: TrainData, seed: int, lr: float = 1e-3,
               stop_rule: EarlyStopRule = SEGMENT_STOP, **train_kw) -> tuple:
    """Fully supervised baseline from He initialization."""
    model = unet.build(replace(config, head="segment", seed=seed))
    return train(model, data, Segment(), AdamConfig(lr0=lr), LRSchedule(lr), stop_rule,
                 seed=seed, **train_kw)


def pretrain(config: unet.UNetConfig, images: np.ndarray, bank: corruption.MaskBank, seed: int,
             val_images: Optional[np.ndarray] = None, lr: float = 1e-3,
             stop_rule: EarlyStopRule = INPAINT_STOP, **train_kw) -> tuple:
    """Inpainting pretraining; the post layer reproduces the input channels."""
    cfg = replace(config, in_channels=images.shape[-1], out_channels=images.shape[-1],
                  head="inpaint", seed=seed)
    model = unet.build(cfg)
    data = TrainData(images, None, val_images, None)
    return train(model, data, Inpaint(bank), AdamConfig(lr0=lr), LRSchedule(lr), stop_rule,
                 seed=seed, **train_kw)
