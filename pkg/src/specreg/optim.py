"""Nesterov-momentum SGD, the step learning-rate schedule and the training loop.

All randomness inside a run comes from generators keyed on ``(seed, epoch,
purpose)``, so a run resumed at an epoch boundary replays exactly the same
minibatches, augmentations and power-iteration redraws.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import analyze, nn
from .analyze import MetricsRecord
from .data import Dataset, augment
from .nn import GradientBundle, Network
from .regularize import RegularizerConfig, SpectralStates, init_spectral_states, objective_grad

log = logging.getLogger(__name__)

# purpose keys for per-epoch streams
_SHUFFLE, _REGULARIZER, _AUGMENT = 0, 1, 2
_SPECTRAL_INIT = 0x5EC


class NonFiniteError(FloatingPointError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, step: int, last_good_epoch: int):
        super().__init__(
            f"training diverged: non-finite values in epoch {epoch + 1}, step {step}; "
            f"last good state is after {last_good_epoch} completed epochs"
        )
        self.epoch, self.step, self.last_good_epoch = epoch, step, last_good_epoch


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 10
    base_lr: float = 0.01
    momentum: float = 0.9
    regularizer: RegularizerConfig = field(default_factory=RegularizerConfig)
    seed: int = 0
    eval_every: int = 1
    chunk_size: int = 0  # > 0: evaluate each minibatch in chunks of this many samples (multiple of nn.ACCUM_GRAIN)
    augment_flip: bool = False
    crop_pad: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1 and epochs >= 0")
        if not self.base_lr > 0:
            raise ValueError(f"base_lr must be > 0, got {self.base_lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.chunk_size < 0 or self.crop_pad < 0:
            raise ValueError("chunk_size and crop_pad must be >= 0")
        if self.chunk_size % nn.ACCUM_GRAIN:
            raise ValueError(f"chunk_size must be a multiple of {nn.ACCUM_GRAIN}, got {self.chunk_size}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass
class OptState:
    velocity: dict[str, np.ndarray]
    step_count: int = 0
    epoch: int = 0

    @classmethod
    def zeros_like(cls, net: Network) -> "OptState":
        return cls({k: np.zeros_like(p) for k, p in net.params.items()})


def lr_at(config: TrainConfig, epoch: int) -> float:
    """``base_lr`` until half of training, /10 until three quarters, /100 after.

    Boundaries are ``epochs // 2`` and ``3 * epochs // 4``.  A boundary that
    falls on epoch 0 is ignored, so a one-epoch run trains at ``base_lr``.
    """
    E = config.epochs
    if not 0 <= epoch < E:
        raise ValueError(f"epoch {epoch} outside [0, {E})")
    half, three_q = E // 2, (3 * E) // 4
    lr = config.base_lr
    if half > 0 and epoch >= half:
        lr = config.base_lr / 10
    if three_q > 0 and epoch >= three_q:
        lr = config.base_lr / 100
    return lr


def nesterov_step(net: Network, grads: GradientBundle, state: OptState, lr: float, momentum: float):
    """``v <- mu v - lr g``; ``theta <- theta + mu v - lr g``.

    This is Nesterov momentum written in terms of the lookahead point, so the
    gradient is the one evaluated at the stored parameters.
    """
    for name, g in grads.param_grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteError(f"gradient of {name} has {bad} non-finite entries at step {state.step_count}")
    for name, g in grads.param_grads.items():
        v = momentum * state.velocity[name] - lr * g
        state.velocity[name] = v
        net.params[name] = net.params[name] + momentum * v - lr * g
    state.step_count += 1
    return net, state


def epoch_stream(seed: int, epoch: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, purpose])


def spectral_init_stream(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, _SPECTRAL_INIT])


def evaluate_record(net: Network, train: Dataset, test: Dataset, epoch: int, penalty: float) -> MetricsRecord:
    train_loss, train_acc = nn.evaluate(net, train.inputs, train.labels)
    test_loss, test_acc = nn.evaluate(net, test.inputs, test.labels)
    return MetricsRecord(
        epoch=epoch,
        train_loss=train_loss,
        test_loss=test_loss,
        train_acc=train_acc,
        test_acc=test_acc,
        grad_norm_train=analyze.input_grad_norm(net, train.inputs, train.labels),
        grad_norm_test=analyze.input_grad_norm(net, test.inputs, test.labels),
        penalty=penalty,
        per_layer_sigma=analyze.layer_sigmas(net),
    )


@dataclass
class TrainState:
    """Everything needed to continue a run from an epoch boundary."""

    net: Network
    opt: OptState
    spectral: SpectralStates
    metrics: list[MetricsRecord] = field(default_factory=list)


def start_state(net: Network, config: TrainConfig) -> TrainState:
    return TrainState(
        net=net,
        opt=OptState.zeros_like(net),
        spectral=init_spectral_states(net, spectral_init_stream(config.seed)),
    )


def run_training(
    net: Network,
    train: Dataset,
    test: Dataset,
    config: TrainConfig,
    resume: TrainState | None = None,
    on_epoch_end: Callable[[TrainState], None] | None = None,
):
    """Train for ``config.epochs`` epochs; returns ``(net, metrics, spectral_states)``.

    Each epoch visits every training sample once (the last short minibatch is
    kept).  A record is appended every ``eval_every`` epochs and after the
    final epoch.  ``resume`` continues a state saved at an epoch boundary.
    """
    state = resume if resume is not None else start_state(net, config)
    net = state.net
    K, B = len(train), config.batch_size
    if B > K:
        raise ValueError(f"batch_size {B} exceeds the {K} training samples")
    spatial = train.inputs.ndim >= 3
    do_augment = spatial and (config.augment_flip or config.crop_pad > 0)
    reg = config.regularizer

    for epoch in range(state.opt.epoch, config.epochs):
        lr = lr_at(config, epoch)
        perm = epoch_stream(config.seed, epoch, _SHUFFLE).permutation(K)
        reg_rng = epoch_stream(config.seed, epoch, _REGULARIZER)
        aug_rng = epoch_stream(config.seed, epoch, _AUGMENT)
        penalties = []
        for step, start in enumerate(range(0, K, B)):
            idx = perm[start : start + B]
            xb, yb = train.inputs[idx], train.labels[idx]
            if do_augment:
                xb = augment(xb, config.augment_flip, config.crop_pad, aug_rng)
            bundle, state.spectral, pen = objective_grad(net, xb, yb, reg, state.spectral, reg_rng, config.chunk_size)
            if not np.isfinite(bundle.loss):
                raise TrainingDiverged(epoch, step, state.opt.epoch)
            try:
                nesterov_step(net, bundle, state.opt, lr, config.momentum)
            except NonFiniteError as exc:
                raise TrainingDiverged(epoch, step, state.opt.epoch) from exc
            penalties.append(pen)
        state.opt.epoch = epoch + 1
        done = epoch + 1
        if done % config.eval_every == 0 or done == config.epochs:
            rec = evaluate_record(net, train, test, done, float(np.mean(penalties)))
            state.metrics.append(rec)
            log.info(
                "epoch %d lr %.3g train %.4f/%.4f test %.4f/%.4f",
                done, lr, rec.train_loss, rec.train_acc, rec.test_loss, rec.test_acc,
            )
        if on_epoch_end is not None:
            on_epoch_end(state)
    return net, state.metrics, state.spectral
