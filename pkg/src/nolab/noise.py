"""Learnable input-noise templates, one per within-batch slot."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import NonFiniteError, ShapeError, Tensor

MODES = ("multiplicative", "additive")
# negative: zero out positive gradient components; all: plain step;
# template-gate: step a whole template only when its summed gradient is <= 0
GRAD_FILTERS = ("negative", "all", "template-gate")

INIT_LOW, INIT_HIGH = 0.8, 1.0


@dataclass
class NoiseBank:
    templates: np.ndarray  # (k, *sample_shape)
    mode: str = "multiplicative"
    grad_filter: str = "negative"

    def __post_init__(self):
        self.templates = np.asarray(self.templates, dtype=np.float64)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.grad_filter not in GRAD_FILTERS:
            raise ValueError(f"grad_filter must be one of {GRAD_FILTERS}, got {self.grad_filter!r}")
        if self.templates.ndim < 2:
            raise ShapeError(f"templates must be (k, *sample_shape), got {self.templates.shape}")

    @property
    def k(self) -> int:
        return self.templates.shape[0]

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.templates.shape[1:])

    def mean_template(self) -> np.ndarray:
        return self.templates.mean(axis=0)

    def copy(self) -> "NoiseBank":
        return NoiseBank(self.templates.copy(), self.mode, self.grad_filter)

    def _check_sample(self, x: np.ndarray) -> None:
        if tuple(x.shape[1:]) != self.sample_shape:
            raise ShapeError(f"noise template shape {self.sample_shape} does not match input samples {tuple(x.shape[1:])}")

    def compose_mean(self, x) -> np.ndarray:
        """Combine every sample with the mean template (inference-time composition)."""
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        self._check_sample(x)
        m = self.mean_template()
        return x * m if self.mode == "multiplicative" else x + m

    def mean_tensor(self, batch: int) -> Tensor:
        return Tensor(np.broadcast_to(self.mean_template(), (batch, *self.sample_shape)))


def init_noise(sample_shape, k: int, seed: int, mode: str = "multiplicative", grad_filter: str = "negative") -> NoiseBank:
    """k templates drawn uniformly from [0.8, 1]."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    return NoiseBank(rng.uniform(INIT_LOW, INIT_HIGH, size=(k, *sample_shape)), mode, grad_filter)


def compose(x: Tensor, templates: Tensor, mode: str) -> Tensor:
    """Pair sample i of ``x`` with template i: ``x * N`` or ``x + N``."""
    b, k = x.shape[0], templates.shape[0]
    if b > k:
        raise ShapeError(f"batch of {b} exceeds the {k} noise templates")
    if x.shape[1:] != templates.shape[1:]:
        raise ShapeError(f"noise template shape {templates.shape[1:]} does not match input samples {x.shape[1:]}")
    t = templates if b == k else T.take_rows(templates, b)
    return T.mul(x, t) if mode == "multiplicative" else T.add(x, t)


def apply_noise(bank: NoiseBank, x) -> np.ndarray:
    return compose(T.as_tensor(x), Tensor(bank.templates), bank.mode).data


def filtered_step(grads: np.ndarray, grad_filter: str) -> np.ndarray:
    if grad_filter == "all":
        return grads
    if grad_filter == "negative":
        return np.minimum(grads, 0.0)
    gate = grads.reshape(grads.shape[0], -1).sum(axis=1) <= 0
    return grads * gate.reshape((-1,) + (1,) * (grads.ndim - 1))


def noise_update(bank: NoiseBank, grads, lr: float) -> NoiseBank:
    """In-place ``N <- N - lr * filter(grad)``; templates are not clipped."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != bank.templates.shape:
        raise ShapeError(f"noise gradient {grads.shape} does not match templates {bank.templates.shape}")
    if not np.isfinite(grads).all():
        raise NonFiniteError("noise gradient has non-finite entries")
    if lr != 0:
        bank.templates = bank.templates - lr * filtered_step(grads, bank.grad_filter)
    return bank
