"""Principal-component diagnostics, adversarial subspace counting and loss surfaces."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .attacks import input_gradient
from .data import Dataset
from .models import Model, argmax_lowest, forward_with_taps
from .noise import NoiseBank
from .tensor import ShapeError


@dataclass
class PcaModel:
    mean: np.ndarray  # (d,)
    components: np.ndarray  # (d, r) right singular vectors as columns
    singular_values: np.ndarray  # (r,) non-increasing

    @property
    def n_components(self) -> int:
        return self.singular_values.shape[0]

    @property
    def rank(self) -> int:
        """Number of realizable (non-zero) principal components."""
        return int(np.count_nonzero(self.singular_values))

    @property
    def last_index(self) -> int:
        return self.n_components - 1


def fit_pca(features) -> PcaModel:
    """Centre the rows of ``features`` and take a thin SVD.

    Each principal direction's sign is fixed so its largest-magnitude entry is
    positive. Singular values below the numerical-rank tolerance become 0.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise ShapeError(f"need an (n, d) feature matrix with n >= 2, got {f.shape}")
    mean = f.mean(axis=0)
    centred = f - mean
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    v = vt.T
    if s.size:
        tol = s[0] * max(f.shape) * np.finfo(np.float64).eps
        s = np.where(s > tol, s, 0.0)
    pivot = np.abs(v).argmax(axis=0)
    v = v * np.where(v[pivot, np.arange(v.shape[1])] < 0, -1.0, 1.0)
    return PcaModel(mean, v, s)


def project(pca: PcaModel, features) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != pca.mean.shape[0]:
        raise ShapeError(f"feature width {f.shape[-1] if f.ndim else None} does not match PCA width {pca.mean.shape[0]}")
    return (f - pca.mean) @ pca.components


def reconstruct(pca: PcaModel, projected) -> np.ndarray:
    return np.asarray(projected) @ pca.components.T + pca.mean


def _check_ks(ks: Sequence[int] | None, last: int) -> np.ndarray:
    ks = np.arange(last + 1) if ks is None else np.asarray(list(ks), dtype=np.int64)
    if ks.size and (ks.min() < 0 or ks.max() > last):
        raise ValueError(f"PC indices must lie in [0, {last}]")
    return ks


def variance_curve(pca: PcaModel, ks: Sequence[int] | None = None) -> np.ndarray:
    """Cumulative percentage of squared singular values through PC index k (inclusive)."""
    s2 = pca.singular_values**2
    cum = np.cumsum(s2)
    if cum.size == 0 or cum[-1] == 0:
        raise ValueError("all singular values are zero; there is no variance to apportion")
    ks = _check_ks(ks, pca.last_index)
    return 100.0 * (cum[ks] / cum[-1])


def cosine_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise ``1 - cos``; 0 when both rows are zero, 1 when exactly one is."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    both = (na > 0) & (nb > 0)
    out = np.where((na == 0) & (nb == 0), 0.0, 1.0)
    dots = np.einsum("ij,ij->i", a[both], b[both])
    out[both] = 1.0 - dots / (na[both] * nb[both])
    return out


def cosine_distance_curve(pca: PcaModel, clean, adv, ks: Sequence[int] | None = None) -> np.ndarray:
    """Mean clean-vs-adversarial cosine distance over PCs 0..k, for each k."""
    pc_clean = project(pca, clean)
    pc_adv = project(pca, adv)
    if pc_clean.shape != pc_adv.shape:
        raise ShapeError(f"clean {pc_clean.shape} and adversarial {pc_adv.shape} features are not row-aligned")
    ks = _check_ks(ks, pca.last_index)
    return np.array([cosine_distances(pc_clean[:, : k + 1], pc_adv[:, : k + 1]).mean() for k in ks])


def tap_features(model: Model, x, tap: str, noise: NoiseBank | None = None, batch_size: int = 500) -> np.ndarray:
    """Flattened activations of layer ``tap`` for each sample (noise-composed when a bank is given)."""
    x = np.asarray(x, dtype=np.float64)
    if noise is not None:
        x = noise.compose_mean(x)
    rows = [forward_with_taps(model, x[i : i + batch_size], [tap])[1][tap].data for i in range(0, len(x), batch_size)]
    return np.concatenate(rows, axis=0)


# ---------------------------------------------------------------- GAAS


def sylvester_hadamard(order: int) -> np.ndarray:
    """Sylvester-construction Hadamard matrix; ``order`` must be a power of two."""
    if order < 1 or order & (order - 1):
        raise ValueError(f"Sylvester Hadamard order must be a power of two, got {order}")
    h = np.ones((1, 1))
    while h.shape[0] < order:
        h = np.block([[h, h], [h, -h]])
    return h


def expand_rows(h: np.ndarray, dim: int) -> np.ndarray:
    """Repeat each entry over a contiguous block of ceil(dim/k) components, truncated to ``dim``."""
    k = h.shape[1]
    if k > dim:
        raise ValueError(f"Hadamard order {k} exceeds input dimension {dim}")
    block = -(-dim // k)
    return np.repeat(h, block, axis=1)[:, :dim]


def gaas_directions(grad: np.ndarray, order: int, eps: float) -> np.ndarray:
    """``order`` perturbations eps * expanded_row * sign(grad), each shaped like ``grad``."""
    flat = np.sign(np.asarray(grad, dtype=np.float64).reshape(-1))
    rows = expand_rows(sylvester_hadamard(order), flat.size)
    return (eps * rows * flat).reshape((order, *np.shape(grad)))


def gaas_success(
    model: Model,
    data: Dataset,
    eps: float,
    orders: Sequence[int] = (4, 8, 16, 32, 64, 128),
    noise: NoiseBank | None = None,
    against: str = "label",
    gradient_model: Model | None = None,
    gradient_noise: NoiseBank | None = None,
) -> dict[int, float]:
    """Fraction of points for which all ``k`` Hadamard-aligned perturbations misclassify.

    Misclassification is judged against the true label (``against="label"``)
    or the model's clean prediction (``"prediction"``). Gradients come from
    ``gradient_model`` when given (black-box directions), else from ``model``.
    """
    dim = int(np.prod(data.sample_shape))
    for k in orders:
        if k > dim:
            raise ValueError(f"Hadamard order {k} exceeds input dimension {dim}")
        sylvester_hadamard(k)
    gm, gn = (gradient_model, gradient_noise) if gradient_model is not None else (model, noise)
    if against == "prediction":
        from .train import infer_with_noise

        ref = infer_with_noise(model, noise, data.images)
    elif against == "label":
        ref = data.labels
    else:
        raise ValueError("against must be 'label' or 'prediction'")
    hits = {k: 0 for k in orders}
    for i in range(len(data)):
        x = data.images[i : i + 1]
        _, g = input_gradient(gm, x, data.labels[i : i + 1], gn)
        for k in orders:
            r = gaas_directions(g[0], k, eps)
            xs = np.clip(x + r, 0.0, 1.0)
            if noise is not None:
                xs = noise.compose_mean(xs)
            pred = argmax_lowest(model(xs).data)
            hits[k] += bool(np.all(pred != ref[i]))
    return {k: hits[k] / len(data) for k in orders}


# ---------------------------------------------------------------- loss surface


def _loss(model: Model, x: np.ndarray, y, noise: NoiseBank | None) -> float:
    if noise is not None:
        x = noise.compose_mean(x)
    return T.softmax_cross_entropy(model(x), y).item()


def loss_surface_grid(
    target: Model,
    source: Model,
    x,
    y,
    eps1: Sequence[float],
    eps2: Sequence[float],
    target_noise: NoiseBank | None = None,
    source_noise: NoiseBank | None = None,
    clamp: bool = False,
) -> np.ndarray:
    """``grid[i, j] = L_target(x + eps1[i]*g_bb + eps2[j]*g_wb)``.

    ``g_bb``/``g_wb`` are the signed input gradients of source and target at
    ``x``, computed once. The offset is summed before it is added to ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    _, gs = input_gradient(source, x, y, source_noise)
    _, gt = input_gradient(target, x, y, target_noise)
    g_bb, g_wb = np.sign(gs), np.sign(gt)
    grid = np.empty((len(eps1), len(eps2)))
    for i, e1 in enumerate(eps1):
        for j, e2 in enumerate(eps2):
            xp = x + (e1 * g_bb + e2 * g_wb)
            if clamp:
                xp = np.clip(xp, 0.0, 1.0)
            grid[i, j] = _loss(target, xp, y, target_noise)
    return grid


def grid_axis(lo: float, hi: float, resolution: int) -> np.ndarray:
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    return np.linspace(lo, hi, resolution)


@dataclass
class AnalysisReport:
    variance: dict[int, float] = field(default_factory=dict)
    distance: dict[int, float] = field(default_factory=dict)
    gaas: dict[int, float] = field(default_factory=dict)
    eps1: list[float] = field(default_factory=list)
    eps2: list[float] = field(default_factory=list)
    loss_grid: list[list[float]] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
