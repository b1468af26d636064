"""Random small networks and gradient-comparison helpers shared by tests."""

import numpy as np

from nolab import tensor as T
from nolab.models import build_model


def random_small_net(seed: int):
    """A model of at most three parametrised layers and at most 500 parameters, plus a batch."""
    rng = np.random.default_rng(seed)
    for _ in range(100):
        size = int(rng.integers(4, 7))
        channels = int(rng.integers(1, 3))
        classes = int(rng.integers(2, 5))
        kind = rng.integers(3)
        if kind == 0:
            opts = dict(conv=(), hidden=(int(rng.integers(2, 8)),))
        elif kind == 1:
            opts = dict(conv=(int(rng.integers(1, 4)),), kernel=int(rng.integers(2, 4)), pool=bool(rng.integers(2)))
        else:
            opts = dict(conv=(int(rng.integers(1, 3)),), kernel=2, pool=False, hidden=(int(rng.integers(2, 6)),))
        model = build_model("custom-small-cnn", classes, (channels, size, size), seed=int(rng.integers(1 << 30)), **opts)
        if model.num_parameters() <= 500:
            n = int(rng.integers(1, 4))
            x = rng.uniform(0, 1, size=(n, channels, size, size))
            y = rng.integers(0, classes, size=n)
            return model, x, y
    raise RuntimeError("could not draw a small net")


def loss_of(model, x, y) -> float:
    return T.softmax_cross_entropy(model(x), y).item()


def rel_err(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def param_fd_errors(model, x, y, h: float = 1e-4) -> dict[str, float]:
    """Relative error between tape gradients and central differences, per parameter."""
    with T.Tape() as tape:
        loss = T.softmax_cross_entropy(model(x), y)
    tape.backward(loss, wrt=model.parameters())
    out = {}
    for name, p in model.params.items():
        base = p.data.copy()

        def f(arr, p=p):
            p.data = arr
            return loss_of(model, x, y)

        fd = T.finite_difference_grad(f, base, h)
        p.data = base
        out[name] = rel_err(p.grad, fd)
    return out


def random_attack_triple(seed: int):
    """(model, x, y, spec) with a random family, budget and step configuration."""
    from nolab.attacks import AttackSpec

    model, x, y = random_small_net(seed)
    rng = np.random.default_rng([seed, 1])
    family = ("fgsm", "rfgsm", "ifgsm", "pgd")[seed % 4]
    eps = float(rng.choice([0.0, rng.uniform(0, 0.5), 1.0], p=[0.05, 0.9, 0.05]))
    if family == "ifgsm":
        spec = AttackSpec(family, eps, steps=int(rng.integers(1, 5)), seed=seed)
    elif family == "pgd":
        spec = AttackSpec(family, eps, alpha=float(rng.uniform(0.005, 0.2)), steps=int(rng.integers(0, 6)), seed=seed,
                          random_start=bool(rng.integers(2)))
    elif family == "rfgsm":
        spec = AttackSpec(family, eps, alpha=float(rng.uniform(0, 1)) * eps, seed=seed,
                          variant=("paper", "eps-minus-alpha")[int(rng.integers(2))])
    else:
        spec = AttackSpec(family, eps, seed=seed)
    return model, x, y, spec


def linf(a, b) -> float:
    return float(np.abs(np.asarray(a) - np.asarray(b)).max())
