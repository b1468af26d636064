"""Joint momentum-SGD training of network weights and the noise bank."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import BatchPlan, Dataset, batches
from .models import Model, argmax_lowest, predict
from .noise import NoiseBank, compose, noise_update
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    eta: float = 0.01
    eta_noise: float = 0.0
    eta_adv: float | None = None
    eta_noise_adv: float | None = None
    momentum: float = 0.5
    weight_decay: float = 0.0
    epochs: int = 1
    batch_size: int = 64
    decay: float = 1.0
    decay_step: int = 0
    seed: int = 0

    def __post_init__(self):
        rates = {"eta": self.eta, "eta_noise": self.eta_noise}
        rates.update({k: v for k, v in (("eta_adv", self.eta_adv), ("eta_noise_adv", self.eta_noise_adv)) if v is not None})
        for name, value in rates.items():
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be a finite rate >= 0, got {value}")
        if self.eta_noise > self.eta:
            raise ValueError(f"eta_noise ({self.eta_noise}) must not exceed eta ({self.eta})")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0 or self.epochs < 0 or self.batch_size < 1 or self.decay_step < 0:
            raise ValueError("weight_decay, epochs, decay_step must be >= 0 and batch_size >= 1")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")

    def factor(self, epoch: int) -> float:
        if self.decay_step <= 0:
            return 1.0
        return self.decay ** (epoch // self.decay_step)

    def rates(self, epoch: int) -> dict[str, float]:
        """All four learning rates at ``epoch``, decayed together."""
        f = self.factor(epoch)
        adv = self.eta if self.eta_adv is None else self.eta_adv
        noise_adv = self.eta_noise if self.eta_noise_adv is None else self.eta_noise_adv
        return {"eta": self.eta * f, "eta_noise": self.eta_noise * f, "eta_adv": adv * f, "eta_noise_adv": noise_adv * f}

    def plan(self) -> BatchPlan:
        return BatchPlan(self.batch_size, self.seed)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    model: Model
    bank: NoiseBank | None = None
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0

    def snapshot(self) -> "TrainState":
        return TrainState(
            self.model.copy(),
            None if self.bank is None else self.bank.copy(),
            {k: v.copy() for k, v in self.velocity.items()},
            self.epoch,
        )


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    accuracy: float
    eta: float
    eta_noise: float
    noise_min: float | None = None
    noise_max: float | None = None


def sgd_step(state: TrainState, grads: dict[str, np.ndarray], lr: float, momentum: float, weight_decay: float) -> None:
    """Momentum SGD: ``v = mu*v + (g + wd*w); w -= lr*v``. A zero rate skips the step entirely."""
    if lr == 0:
        return
    new_w, new_v = {}, {}
    for name, p in state.model.params.items():
        g = grads[name]
        if weight_decay:
            g = g + weight_decay * p.data
        v = state.velocity.get(name)
        v = g if v is None else momentum * v + g
        new_v[name], new_w[name] = v, p.data - lr * v
        if not np.isfinite(new_w[name]).all():
            raise NonFiniteError(f"update of {name} is non-finite")
    # commit only once every parameter has a finite update
    for name, p in state.model.params.items():
        state.velocity[name] = new_v[name]
        p.data = new_w[name]


def forward_loss(model: Model, x: Tensor, y, bank: NoiseBank | None, templates: Tensor | None):
    xin = x if bank is None else compose(x, templates, bank.mode)
    logits = model(xin)
    return T.softmax_cross_entropy(logits, y), logits


def train_step(state: TrainState, x: np.ndarray, y: np.ndarray, lr: float, lr_noise: float, config: TrainConfig) -> tuple[float, int]:
    """One forward/backward pass and update on a single batch; returns (loss, correct)."""
    model, bank = state.model, state.bank
    params = model.parameters()
    templates = None
    if bank is not None:
        templates = Tensor(bank.templates, requires_grad=lr_noise != 0)
    with T.Tape() as tape:
        loss, logits = forward_loss(model, Tensor(x), y, bank, templates)
    wrt = params + ([templates] if templates is not None and templates.requires_grad else [])
    tape.backward(loss, wrt=wrt)
    sgd_step(state, {name: p.grad for name, p in model.params.items()}, lr, config.momentum, config.weight_decay)
    if templates is not None and templates.requires_grad:
        noise_update(bank, templates.grad, lr_noise)
    return loss.item(), int((argmax_lowest(logits.data) == y).sum())


def _metrics(state: TrainState, loss_sum: float, correct: int, seen: int, rates: dict) -> EpochMetrics:
    bank = state.bank
    return EpochMetrics(
        epoch=state.epoch,
        loss=loss_sum / max(seen, 1),
        accuracy=correct / max(seen, 1),
        eta=rates["eta"],
        eta_noise=rates["eta_noise"],
        noise_min=None if bank is None else float(bank.templates.min()),
        noise_max=None if bank is None else float(bank.templates.max()),
    )


def train_epoch(state: TrainState, dataset: Dataset, config: TrainConfig) -> EpochMetrics:
    """One pass of noise-prior learning (plain SGD when ``state.bank`` is None).

    Mutates ``state``; on a non-finite loss the state is left as it was after
    the last successful batch and :class:`TrainingDiverged` is raised.
    """
    if state.bank is not None and state.bank.k != config.batch_size:
        raise ValueError(f"noise bank has {state.bank.k} templates but batch size is {config.batch_size}")
    rates = config.rates(state.epoch)
    loss_sum, correct, seen = 0.0, 0, 0
    for x, y, b in batches(dataset, config.plan(), state.epoch):
        try:
            loss, hits = train_step(state, x, y, rates["eta"], rates["eta_noise"], config)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"epoch {state.epoch} batch {b}: {exc}") from exc
        loss_sum += loss * len(y)
        correct += hits
        seen += len(y)
    state.epoch += 1
    m = _metrics(state, loss_sum, correct, seen, rates)
    if state.bank is not None:
        log.info("epoch %d loss %.4f acc %.4f noise range [%.4f, %.4f]", m.epoch, m.loss, m.accuracy, m.noise_min, m.noise_max)
    else:
        log.info("epoch %d loss %.4f acc %.4f", m.epoch, m.loss, m.accuracy)
    return m


def infer_with_noise(model: Model, bank: NoiseBank | None, x, batch_size: int = 500) -> np.ndarray:
    return predict(model, x, noise=bank, batch_size=batch_size)


def accuracy(model: Model, bank: NoiseBank | None, dataset: Dataset, batch_size: int = 500) -> float:
    return float((infer_with_noise(model, bank, dataset.images, batch_size) == dataset.labels).mean())
