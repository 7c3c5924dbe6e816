"""LAMB, the step-decay schedule and the training loop."""
from __future__ import annotations

import bisect
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, DivergenceError, NonFiniteError
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

METRICS_FIELDS = ["step", "epoch", "lr", "loss", "accuracy"]


@dataclass
class LambState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.0

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "LambState":
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params], **hyper)


def lamb_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: LambState,
              lr: float, trust_ratio: bool = True, names: Sequence[str] | None = None) -> None:
    """One LAMB update, in place.

    Each table gets its own trust ratio ||theta|| / ||r||, falling back to 1
    when either norm is zero. ``trust_ratio=False`` pins it to 1, which is
    exactly Adam (with decoupled weight decay).
    """
    if lr < 0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}")
    if len(grads) != len(params) or len(state.m) != len(params):
        raise DimensionError("params, grads and optimizer state disagree in length")
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            name = names[i] if names else (params[i].name or f"param {i}")
            bad = int((~np.isfinite(g)).sum())
            raise NonFiniteError(f"non-finite gradient in {name}: {bad} of {g.size} entries, step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise DimensionError(f"gradient {g.shape} vs parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        r = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            r = r + state.weight_decay * p.data
        ratio = 1.0
        if trust_ratio:
            w_norm = float(np.linalg.norm(p.data))
            r_norm = float(np.linalg.norm(r))
            if w_norm > 0 and r_norm > 0:
                ratio = w_norm / r_norm
        p.data -= (lr * ratio * r).astype(p.dtype)


class Lamb:
    def __init__(self, params: Sequence[Tensor], beta1=0.9, beta2=0.999, eps=1e-6,
                 weight_decay=0.0, trust_ratio: bool = True, names: Sequence[str] | None = None):
        self.params = list(params)
        self.names = list(names) if names is not None else None
        self.state = LambState.for_params(self.params, beta1=beta1, beta2=beta2, eps=eps,
                                          weight_decay=weight_decay)
        self.trust_ratio = trust_ratio

    def step(self, lr: float) -> None:
        lamb_step(self.params, [p.grad for p in self.params], self.state, lr,
                  self.trust_ratio, self.names)

    def zero_grad(self) -> None:
        T.zero_grads(self.params)


@dataclass
class Schedule:
    """Piecewise-constant learning rate: ``base_lr * decay_factor**k`` after
    ``k`` decay boundaries (given in epochs) have been reached."""

    base_lr: float = 0.004
    decay_epochs: list = field(default_factory=list)
    decay_factor: float = 0.1
    epoch_length: int = 1

    def __post_init__(self):
        self.decay_epochs = sorted(int(e) for e in self.decay_epochs)
        if self.epoch_length < 1:
            raise ConfigError("epoch_length must be >= 1 step")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError("decay_factor must be in (0, 1]")
        if self.base_lr < 0:
            raise ConfigError("base_lr must be non-negative")


def lr_at(schedule: Schedule, step: int) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    epoch = step // schedule.epoch_length
    passed = bisect.bisect_right(schedule.decay_epochs, epoch)
    return schedule.base_lr * schedule.decay_factor ** passed


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield order[start:start + batch_size]
        if n < batch_size:
            yield order


def take(x, idx):
    """Index examples out of one array or a list of per-modality arrays."""
    if isinstance(x, (list, tuple)):
        return [a[idx] for a in x]
    return x[idx]


def evaluate(model, x, y, batch_size: int = 256, loss_mode: str = "softmax") -> dict:
    n = len(y)
    correct, total_loss = 0.0, 0.0
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        logits, _ = model.forward(take(x, idx))
        if loss_mode == "softmax":
            correct += float((logits.data.argmax(-1) == y[idx]).sum())
        else:
            correct += float(((logits.data > 0) == (y[idx] > 0.5)).all(axis=-1).sum())
        total_loss += _loss_value(logits, y[idx], loss_mode) * len(idx)
    return {"accuracy": correct / n, "loss": total_loss / n}


def _loss_value(logits, target, mode) -> float:
    from .model import loss
    return loss(logits, target, mode).item()


def train(model, dataset, schedule: Schedule, steps: int, batch_size: int, seed: int = 0,
          optimizer: Lamb | None = None, metrics_path: str | Path | None = None,
          checkpoint_dir: str | Path | None = None, checkpoint_every: int = 0,
          video_dropout_p: float = 0.0, drop_modality: str = "video",
          permanent_drop: bool = False) -> list[dict]:
    """Run ``steps`` LAMB steps on random mini-batches of ``dataset``.

    ``dataset`` provides ``x_train``, ``y_train`` and, for multimodal data,
    ``modalities``. Returns one metrics dict per step; the same rows go to
    ``metrics_path`` as CSV when given. Raises :class:`DivergenceError` on a
    non-finite loss, leaving earlier checkpoints in place.
    """
    from .model import loss as model_loss
    from .model import save_checkpoint, video_dropout

    rng = np.random.default_rng(seed)
    names = [n for n, _ in model.named_parameters()]
    if optimizer is None:
        optimizer = Lamb(model.parameters(), names=names)
    loss_mode = getattr(model.config, "loss", "softmax")
    log_rows: list[dict] = []
    fh = writer = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="", encoding="utf-8")
        writer = csv.DictWriter(fh, fieldnames=METRICS_FIELDS, lineterminator="\n")
        writer.writeheader()
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    modalities = getattr(dataset, "modalities", None)
    n = len(dataset.y_train)
    batches = _batches(n, min(batch_size, n), rng) if steps > 0 else iter(())
    try:
        for step in range(steps):
            idx = next(batches)
            xb, yb = take(dataset.x_train, idx), dataset.y_train[idx]
            if modalities and (video_dropout_p > 0 or permanent_drop):
                xb, _ = video_dropout(xb, modalities, 1.0 if permanent_drop else video_dropout_p,
                                      rng, video=drop_modality)
            lr = lr_at(schedule, step)
            optimizer.zero_grad()
            try:
                with np.errstate(over="ignore", invalid="ignore"), Tape() as tape:
                    logits, _ = model.forward(xb)
                    value = model_loss(logits, yb, loss_mode)
                T.backward(value, tape)
                optimizer.step(lr)
            except NonFiniteError as exc:
                raise DivergenceError(f"step {step}: {exc}") from exc
            loss_value = value.item()
            if not math.isfinite(loss_value):
                raise DivergenceError(f"step {step}: loss is {loss_value}")
            if loss_mode == "softmax":
                acc = float((logits.data.argmax(-1) == yb).mean())
            else:
                acc = float(((logits.data > 0) == (yb > 0.5)).all(axis=-1).mean())
            row = {"step": step, "epoch": step // schedule.epoch_length, "lr": lr,
                   "loss": loss_value, "accuracy": acc}
            log_rows.append(row)
            if writer is not None:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
            if checkpoint_dir is not None and checkpoint_every and (step + 1) % checkpoint_every == 0:
                save_checkpoint(Path(checkpoint_dir) / f"checkpoint-{step + 1:06d}.npz", model, step + 1)
            if step % 100 == 0:
                log.info("step %d lr %.3g loss %.4f acc %.3f", step, lr, loss_value, acc)
    finally:
        if fh is not None:
            fh.close()
    return log_rows
