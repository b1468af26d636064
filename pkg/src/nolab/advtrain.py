"""Ensemble (fixed-source FGSM) and PGD adversarial training with dual learning rates.

Each batch takes a clean step at ``(eta, eta_noise)`` and an adversarial step
at ``(eta_adv, eta_noise_adv)``; the noise bank, when present, composes with
both batches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attacks import AttackSpec, fgsm, pgd
from .data import Dataset, index_batches
from .models import Model
from .tensor import NonFiniteError
from .train import EpochMetrics, TrainConfig, TrainingDiverged, TrainState, _metrics, train_step

PROTOCOLS = ("ensadv", "pgdadv")


@dataclass
class AdvTrainConfig:
    protocol: str
    attack: AttackSpec
    adv_first: bool = False
    # ensadv only: "epoch" regenerates source adversaries every epoch, "run" crafts them once
    regenerate: str = "epoch"

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}; expected one of {PROTOCOLS}")
        want = "fgsm" if self.protocol == "ensadv" else "pgd"
        if self.attack.family != want:
            raise ValueError(f"{self.protocol} uses {want} adversaries, got {self.attack.family}")
        if self.regenerate not in ("epoch", "run"):
            raise ValueError("regenerate must be 'epoch' or 'run'")


def check_dual_rates(config: TrainConfig, with_noise: bool) -> None:
    r = config.rates(0)
    if r["eta_adv"] > r["eta"]:
        raise ValueError("eta_adv must not exceed eta")
    if with_noise and r["eta_noise_adv"] > r["eta_noise"]:
        raise ValueError("eta_noise_adv must not exceed eta_noise")


def _adv_epoch(state: TrainState, dataset: Dataset, config: TrainConfig, adv: AdvTrainConfig, make_adv) -> EpochMetrics:
    if state.bank is not None and state.bank.k != config.batch_size:
        raise ValueError(f"noise bank has {state.bank.k} templates but batch size is {config.batch_size}")
    rates = config.rates(state.epoch)
    loss_sum, correct, seen = 0.0, 0, 0
    for b, idx in enumerate(index_batches(len(dataset), config.plan(), state.epoch)):
        x, y = dataset.images[idx], dataset.labels[idx]
        try:
            for kind in (("adv", "clean") if adv.adv_first else ("clean", "adv")):
                if kind == "clean":
                    loss, hits = train_step(state, x, y, rates["eta"], rates["eta_noise"], config)
                    loss_sum += loss * len(y)
                    correct += hits
                    seen += len(y)
                else:
                    xa = make_adv(x, y, b, idx)
                    train_step(state, xa, y, rates["eta_adv"], rates["eta_noise_adv"], config)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"epoch {state.epoch} batch {b}: {exc}") from exc
    state.epoch += 1
    return _metrics(state, loss_sum, correct, seen, rates)


class AdversaryCache:
    """Source adversaries crafted once per dataset, for ``regenerate="run"``."""

    def __init__(self):
        self.images: dict[int, np.ndarray] = {}

    def get(self, source: Model, dataset: Dataset, eps: float, batch_size: int = 500) -> np.ndarray:
        key = id(dataset)
        if key not in self.images:
            chunks = [
                fgsm(source, dataset.images[i : i + batch_size], dataset.labels[i : i + batch_size], eps)
                for i in range(0, len(dataset), batch_size)
            ]
            self.images[key] = np.concatenate(chunks, axis=0)
        return self.images[key]


def ensadv_epoch(
    state: TrainState,
    source: Model | None,
    dataset: Dataset,
    config: TrainConfig,
    adv: AdvTrainConfig,
    cache: AdversaryCache | None = None,
) -> EpochMetrics:
    """Clean step plus a step on FGSM adversaries crafted from the fixed ``source``."""
    if source is None:
        raise ValueError("ensemble adversarial training needs a source model")
    if adv.protocol != "ensadv":
        raise ValueError("ensadv_epoch needs an ensadv config")
    check_dual_rates(config, state.bank is not None)
    eps = adv.attack.eps

    if adv.regenerate == "run" and cache is None:
        raise ValueError("regenerate='run' needs an AdversaryCache shared across epochs")

    def make_adv(x, y, b, idx):
        if adv.regenerate == "run":
            return cache.get(source, dataset, eps)[idx]
        return fgsm(source, x, y, eps)

    return _adv_epoch(state, dataset, config, adv, make_adv)


def pgdadv_epoch(state: TrainState, dataset: Dataset, config: TrainConfig, adv: AdvTrainConfig) -> EpochMetrics:
    """Clean step plus a step on white-box PGD adversaries of the current target.

    Adversaries are crafted through the per-slot noise templates, the same
    composition the training step differentiates.
    """
    if adv.protocol != "pgdadv":
        raise ValueError("pgdadv_epoch needs a pgdadv config")
    check_dual_rates(config, state.bank is not None)
    spec = adv.attack
    epoch = state.epoch

    def make_adv(x, y, b, idx):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, epoch, b]))
        return pgd(state.model, x, y, spec.eps, spec.step_size, spec.steps, rng, spec.random_start, state.bank, per_slot=state.bank is not None)

    return _adv_epoch(state, dataset, config, adv, make_adv)
