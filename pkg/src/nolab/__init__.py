"""Noise-prior learning, adversarial attacks and robustness diagnostics on a small numpy autodiff core."""

from .tensor import NonFiniteError, ShapeError, Tape, Tensor
from .models import Model, build_model, predict
from .data import Dataset, load_mnist, synth_dataset
from .noise import NoiseBank, init_noise, noise_update
from .train import TrainConfig, TrainState, train_epoch
from .attacks import AttackSpec, fgsm, ifgsm, pgd, rfgsm

__version__ = "0.1.0"
