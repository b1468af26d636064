"""l-infinity sign-gradient attacks: FGSM, R-FGSM, I-FGSM and PGD.

Every attack takes the model whose gradient it follows. A white-box attack on
a noise-trained model passes that model and its bank (the input is composed
with the mean template before differentiating); a black-box attack passes a
separate source model and evaluates the result on the target.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset
from .models import Model
from .noise import NoiseBank, compose
from .tensor import NonFiniteError, Tensor
from .train import accuracy

FAMILIES = ("fgsm", "rfgsm", "ifgsm", "pgd")


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def input_gradient(model: Model, x, y, noise: NoiseBank | None = None, per_slot: bool = False) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the raw input ``x``.

    With a bank the input is composed with the mean template, or with the
    per-slot templates when ``per_slot`` is set (the training-time composition).
    """
    xt = Tensor(x, requires_grad=True)
    with T.Tape() as tape:
        if noise is None:
            xin = xt
        elif per_slot:
            xin = compose(xt, Tensor(noise.templates), noise.mode)
        else:
            m = noise.mean_tensor(xt.shape[0])
            xin = T.mul(xt, m) if noise.mode == "multiplicative" else T.add(xt, m)
        loss = T.softmax_cross_entropy(model(xin), y)
    tape.backward(loss, wrt=[xt])
    if not np.isfinite(xt.grad).all():
        raise NonFiniteError("input gradient is non-finite")
    return loss.item(), xt.grad


def _check_input(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ValueError("attack inputs must lie in [0, 1]")
    return x


def project(x_adv: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    """Nearest point of the eps-ball around ``x`` intersected with [0, 1]."""
    return np.clip(np.clip(x_adv, x - eps, x + eps), 0.0, 1.0)


def fgsm(model: Model, x, y, eps: float, noise: NoiseBank | None = None) -> np.ndarray:
    x = _check_input(x)
    _, g = input_gradient(model, x, y, noise)
    return np.clip(x + eps * np.sign(g), 0.0, 1.0)


def rfgsm(
    model: Model,
    x,
    y,
    eps: float,
    alpha: float | None = None,
    seed=0,
    noise: NoiseBank | None = None,
    variant: str = "paper",
) -> np.ndarray:
    """Random sign step of size ``alpha`` then a gradient sign step.

    ``variant="paper"`` takes the second step at size ``eps`` (total offset up
    to eps + alpha before clamping); ``"eps-minus-alpha"`` uses ``eps - alpha``
    so the result stays inside the eps-ball.
    """
    x = _check_input(x)
    alpha = eps / 2 if alpha is None else alpha
    if alpha > eps:
        raise ValueError("rfgsm needs alpha <= eps")
    step = {"paper": eps, "eps-minus-alpha": eps - alpha}[variant]
    x1 = x + alpha * np.sign(_rng(seed).standard_normal(x.shape))
    _, g = input_gradient(model, x1, y, noise)
    return np.clip(x1 + step * np.sign(g), 0.0, 1.0)


def ifgsm(model: Model, x, y, eps: float, steps: int = 2, beta: float | None = None, noise: NoiseBank | None = None) -> np.ndarray:
    """``steps`` FGSM steps of size ``beta`` (default eps/steps), each projected to the eps-ball."""
    x = _check_input(x)
    if steps < 1:
        raise ValueError("ifgsm needs steps >= 1")
    beta = eps / steps if beta is None else beta
    if beta * steps < eps * (1 - 1e-12):
        raise ValueError("ifgsm needs beta >= eps / steps")
    xt = x
    for _ in range(steps):
        _, g = input_gradient(model, xt, y, noise)
        xt = project(xt + beta * np.sign(g), x, eps)
    return xt


def pgd(
    model: Model,
    x,
    y,
    eps: float,
    alpha: float = 0.01,
    steps: int = 40,
    seed=0,
    random_start: bool = True,
    noise: NoiseBank | None = None,
    per_slot: bool = False,
    trace: list | None = None,
) -> np.ndarray:
    """Projected sign-gradient ascent from a uniform random start in the eps-ball.

    ``steps=0`` performs no search and returns ``x`` unchanged. When ``trace``
    is a list, every iterate is appended to it.
    """
    x = _check_input(x)
    if steps < 0 or alpha <= 0:
        raise ValueError("pgd needs steps >= 0 and alpha > 0")
    if steps == 0:
        return x.copy()
    xt = project(x + _rng(seed).uniform(-eps, eps, size=x.shape), x, eps) if random_start else x
    if trace is not None:
        trace.append(xt)
    for _ in range(steps):
        _, g = input_gradient(model, xt, y, noise, per_slot)
        xt = project(xt + alpha * np.sign(g), x, eps)
        if trace is not None:
            trace.append(xt)
    return xt


@dataclass(frozen=True)
class AttackSpec:
    family: str
    eps: float
    alpha: float | None = None
    steps: int = 1
    seed: int = 0
    random_start: bool = True
    variant: str = "paper"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}; expected one of {FAMILIES}")
        if not 0 <= self.eps <= 1:
            raise ValueError("eps must lie in [0, 1]")
        if self.family == "ifgsm" and self.steps < 1:
            raise ValueError("ifgsm needs steps >= 1")
        if self.family == "pgd" and self.steps < 0:
            raise ValueError("pgd needs steps >= 0")
        if self.family == "pgd" and (self.alpha is None or self.alpha <= 0):
            raise ValueError("pgd needs alpha > 0")

    @property
    def step_size(self) -> float:
        if self.alpha is not None:
            return self.alpha
        if self.family == "rfgsm":
            return self.eps / 2
        if self.family == "ifgsm":
            return self.eps / self.steps
        return self.eps

    @property
    def bound(self) -> float:
        """Declared l-infinity bound of ``x_adv - x``."""
        if self.family == "rfgsm" and self.variant == "paper":
            return self.eps + self.step_size
        return self.eps

    def label(self) -> str:
        if self.family in ("pgd", "ifgsm"):
            return f"{self.family}-{self.steps}"
        return self.family

    def run(self, model: Model, x, y, noise: NoiseBank | None = None, seed=None) -> np.ndarray:
        seed = self.seed if seed is None else seed
        if self.family == "fgsm":
            return fgsm(model, x, y, self.eps, noise)
        if self.family == "rfgsm":
            return rfgsm(model, x, y, self.eps, self.step_size, seed, noise, self.variant)
        if self.family == "ifgsm":
            return ifgsm(model, x, y, self.eps, self.steps, self.step_size, noise)
        return pgd(model, x, y, self.eps, self.step_size, self.steps, seed, self.random_start, noise)


@dataclass
class ThreatModel:
    """Where the attacker's gradient comes from."""

    kind: str = "white-box"  # white-box | black-box
    source: Model | None = None
    source_noise: NoiseBank | None = None

    def gradient_model(self, target: Model, target_noise: NoiseBank | None) -> tuple[Model, NoiseBank | None]:
        if self.kind == "white-box":
            return target, target_noise
        if self.kind == "black-box":
            if self.source is None:
                raise ValueError("a black-box threat model needs a source model")
            return self.source, self.source_noise
        raise ValueError(f"unknown threat model {self.kind!r}")


def craft(spec: AttackSpec, model: Model, data: Dataset, noise: NoiseBank | None = None, batch_size: int = 500) -> np.ndarray:
    """Attack ``data`` in chunks; chunk ``i`` draws randomness from (spec.seed, i)."""
    out = []
    for i, start in enumerate(range(0, len(data), batch_size)):
        sl = slice(start, start + batch_size)
        seed = np.random.SeedSequence([spec.seed, i])
        out.append(spec.run(model, data.images[sl], data.labels[sl], noise, seed=np.random.default_rng(seed)))
    return np.concatenate(out, axis=0)


def attack_accuracy(
    spec: AttackSpec,
    target: Model,
    target_noise: NoiseBank | None,
    data: Dataset,
    threat: ThreatModel | None = None,
    batch_size: int = 500,
) -> float:
    threat = threat or ThreatModel()
    gm, gn = threat.gradient_model(target, target_noise)
    adv = craft(spec, gm, data, gn, batch_size)
    return accuracy(target, target_noise, Dataset(adv, data.labels, data.classes), batch_size)


@dataclass
class MinBBResult:
    accuracy: float
    per_attack: dict[str, float] = field(default_factory=dict)


def min_bb_specs(eps: float, seed: int = 0) -> list[AttackSpec]:
    return [
        AttackSpec("fgsm", eps, seed=seed),
        AttackSpec("ifgsm", eps, steps=2, seed=seed),
        AttackSpec("rfgsm", eps, seed=seed),
    ]


def min_bb_accuracy(
    target: Model,
    target_noise: NoiseBank | None,
    source: Model,
    data: Dataset,
    eps: float,
    seed: int = 0,
    batch_size: int = 500,
) -> MinBBResult:
    """Worst target accuracy over black-box FGSM, two-step I-FGSM and R-FGSM from ``source``."""
    threat = ThreatModel("black-box", source)
    per = {s.label(): attack_accuracy(s, target, target_noise, data, threat, batch_size) for s in min_bb_specs(eps, seed)}
    return MinBBResult(min(per.values()), per)
