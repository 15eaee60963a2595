"""Minibatch SGD loops: adversarial training, robust mode connectivity (curve
training) and self-robust endpoint generation."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .attack import UNIT_BOX, AttackSpec, DomainBox, craft
from .curve import CurveParams, control_grad, curve_point, init_curve
from .data import Dataset
from .errors import UsageError
from .model import ModelParams, loss_and_param_grad
from .numcore import RngStream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise UsageError(f"learning rate must be positive, got {self.lr}")
        if self.epochs < 0:
            raise UsageError(f"epochs must be nonnegative, got {self.epochs}")
        if self.batch_size < 1:
            raise UsageError(f"batch size must be positive, got {self.batch_size}")


class EpochRecord(NamedTuple):
    epoch: int
    train_loss: float
    wall_seconds: float


BatchHook = Callable[[int, np.ndarray, np.ndarray, np.ndarray], None]


def _batches(data: Dataset, cfg: TrainConfig, epoch: int):
    if cfg.batch_size > data.n:
        raise UsageError(f"batch size {cfg.batch_size} exceeds dataset size {data.n}")
    stream = RngStream.derived(cfg.seed, epoch)
    order = stream.permutation(data.n) if cfg.shuffle else np.arange(data.n)
    # the remainder joins the last full batch; a tiny trailing batch destabilizes SGD
    n_batches = data.n // cfg.batch_size
    for k in range(n_batches):
        stop = data.n if k == n_batches - 1 else (k + 1) * cfg.batch_size
        idx = order[k * cfg.batch_size:stop]
        yield stream, data.x[idx], data.y[idx]


def _check_arch(params: ModelParams, data: Dataset):
    if params.arch.input_dim != data.d or params.arch.num_classes < data.classes:
        raise UsageError(
            f"architecture {params.arch.dims()} does not fit data with d={data.d}, classes={data.classes}"
        )


def adversarial_train(init: ModelParams, data: Dataset, cfg: TrainConfig,
                      specs: Sequence[AttackSpec] = (), box: DomainBox = UNIT_BOX,
                      history: list | None = None, on_batch: BatchHook | None = None) -> ModelParams:
    """SGD on adversarial batches: clean for no specs, PGD for one, MSD for several.

    Per-epoch ``EpochRecord`` entries are appended to ``history`` when given.
    """
    _check_arch(init, data)
    specs = list(specs)
    params = init
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        losses = []
        for _, xb, yb in _batches(data, cfg, epoch):
            xa = craft(params, xb, yb, specs, box)
            if on_batch is not None:
                on_batch(epoch, xb, xa, yb)
            loss, g = loss_and_param_grad(params, xa, yb)
            losses.append(loss)
            params = params.replace(params.flat - cfg.lr * g)
        rec = EpochRecord(epoch, float(np.mean(losses)), time.perf_counter() - started)
        log.debug("at epoch %d loss %.6f (%.2fs)", *rec)
        if history is not None:
            history.append(rec)
    return params


def rmc_train(a: ModelParams, b: ModelParams, data: Dataset, cfg: TrainConfig,
              specs: Sequence[AttackSpec] = (), box: DomainBox = UNIT_BOX,
              history: list | None = None, on_batch: BatchHook | None = None) -> CurveParams:
    """Train the Bezier control point between fixed endpoints ``a`` and ``b``.

    One t ~ U(0, 1) per batch; the batch is attacked at phi(t) (none / PGD / MSD
    by the number of specs) and only the control point moves. With no specs
    this is plain mode-connectivity training.
    """
    if a.arch != b.arch:
        raise UsageError("rmc endpoints have different architectures")
    _check_arch(a, data)
    specs = list(specs)
    curve = init_curve(a, b)
    control = curve.theta_control.flat
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        losses = []
        for stream, xb, yb in _batches(data, cfg, epoch):
            t = stream.uniform()
            phi = curve_point(curve, t)
            xa = craft(phi, xb, yb, specs, box)
            if on_batch is not None:
                on_batch(epoch, xb, xa, yb)
            loss, g = loss_and_param_grad(phi, xa, yb)
            losses.append(loss)
            control = control - cfg.lr * control_grad(g, t, control.size)
            curve = curve.with_control(control)
        rec = EpochRecord(epoch, float(np.mean(losses)), time.perf_counter() - started)
        log.debug("rmc epoch %d loss %.6f (%.2fs)", *rec)
        if history is not None:
            history.append(rec)
    return curve


def srmc_endpoints(base: ModelParams, data: Dataset, cfg_few: TrainConfig, spec_new: AttackSpec,
                   box: DomainBox = UNIT_BOX, history: list | None = None) -> tuple[ModelParams, ModelParams]:
    """``(base, base fine-tuned for cfg_few.epochs under spec_new)``."""
    child = adversarial_train(base, data, cfg_few, [spec_new], box, history)
    return base, child
