import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nolab import tensor as T
from nolab.attacks import (
    AttackSpec,
    ThreatModel,
    attack_accuracy,
    craft,
    fgsm,
    ifgsm,
    input_gradient,
    min_bb_accuracy,
    pgd,
    project,
    rfgsm,
)
from nolab.data import Dataset, synth_dataset
from nolab.models import build_model
from nolab.noise import init_noise
from nolab.train import TrainConfig, TrainState, accuracy, train_epoch

from nets import linf, random_attack_triple, rel_err

TOL = 1e-12


@settings(max_examples=200, deadline=None, derandomize=True)
@given(seed=st.integers(0, 10**6))
def test_outputs_in_box_and_bound(seed):
    model, x, y, spec = random_attack_triple(seed)
    adv = spec.run(model, x, y)
    assert adv.min() >= 0 and adv.max() <= 1
    assert linf(adv, x) <= spec.bound + TOL


@settings(max_examples=50, deadline=None, derandomize=True)
@given(seed=st.integers(0, 10**6))
def test_pgd_iterates_stay_in_ball(seed):
    model, x, y, _ = random_attack_triple(seed)
    trace = []
    pgd(model, x, y, 0.2, alpha=0.07, steps=5, seed=seed, trace=trace)
    assert len(trace) == 6
    for it in trace:
        assert linf(it, x) <= 0.2 + TOL and it.min() >= 0 and it.max() <= 1


@settings(max_examples=50, deadline=None, derandomize=True)
@given(seed=st.integers(0, 10**6), eps=st.floats(0, 1))
def test_single_step_ifgsm_is_fgsm(seed, eps):
    model, x, y, _ = random_attack_triple(seed)
    assert np.array_equal(ifgsm(model, x, y, eps, steps=1, beta=eps), fgsm(model, x, y, eps))


def test_fgsm_perturbation_scales_linearly():
    model, _, _, _ = random_attack_triple(4)
    rng = np.random.default_rng(0)
    x = rng.uniform(0.4, 0.6, size=(3, *model.input_shape))
    y = rng.integers(0, model.classes, size=3)
    d1 = fgsm(model, x, y, 0.1) - x
    d3 = fgsm(model, x, y, 0.3) - x
    np.testing.assert_allclose(d3, 3 * d1, rtol=0, atol=1e-15)


def test_zero_gradient_and_zero_budget_leave_input():
    model = build_model("custom-small-cnn", 2, (1, 2, 2), conv=(), hidden=())
    for p in model.params.values():
        p.data = np.zeros_like(p.data)
    x = np.full((2, 1, 2, 2), 0.3)
    assert np.array_equal(fgsm(model, x, np.array([0, 1]), 0.2), x)
    m2, x2, y2, _ = random_attack_triple(1)
    assert np.array_equal(fgsm(m2, x2, y2, 0.0), x2)


def test_logistic_gradient_sign_matches_closed_form():
    # two-class linear softmax is logistic regression on the logit difference
    model = build_model("custom-small-cnn", 2, (1, 1, 3), conv=(), hidden=())
    w = np.array([[0.5, -0.5], [-2.0, 1.0], [0.25, 0.75]])
    b = np.array([0.1, -0.2])
    model.params["fc1.w"].data, model.params["fc1.b"].data = w, b
    x = np.array([[[[0.2, 0.5, 0.9]]]])
    y = np.array([0])
    z = x.reshape(1, 3) @ w + b
    p1 = 1 / (1 + np.exp(-(z[0, 1] - z[0, 0])))
    # dL/dx = (p1 - [y==1]) * (w[:,1] - w[:,0])
    grad = (p1 - 0.0) * (w[:, 1] - w[:, 0])
    _, g = input_gradient(model, x, y)
    np.testing.assert_allclose(g.ravel(), grad, rtol=1e-12)
    adv = fgsm(model, x, y, 0.05)
    assert np.array_equal(np.sign(adv - x).ravel(), np.sign(grad))


def test_rfgsm_properties():
    model, x, y, _ = random_attack_triple(8)
    x = np.clip(x, 0.2, 0.8)
    assert np.array_equal(rfgsm(model, x, y, 0.1, alpha=0.0), fgsm(model, x, y, 0.1))
    assert np.array_equal(rfgsm(model, x, y, 0.1, seed=3), rfgsm(model, x, y, 0.1, seed=3))
    # the random step alone: second step of size zero via eps == alpha in the bounded variant
    step = rfgsm(model, x, y, 0.1, alpha=0.1, seed=5, variant="eps-minus-alpha") - x
    assert set(np.round(np.abs(step), 12).ravel()) == {0.1}
    with pytest.raises(ValueError):
        rfgsm(model, x, y, 0.1, alpha=0.2)


def test_projection_example():
    assert project(np.array([0.75]), np.array([0.5]), 0.1)[0] == pytest.approx(0.6)
    assert project(np.array([-0.2]), np.array([0.05]), 0.3)[0] == 0.0


def test_spec_configurations():
    AttackSpec("pgd", 0.3, alpha=0.01, steps=40)
    AttackSpec("pgd", 8 / 255, alpha=2 / 255, steps=7)
    assert AttackSpec("ifgsm", 0.1, steps=2).step_size == pytest.approx(0.05)
    assert AttackSpec("rfgsm", 0.2).bound == pytest.approx(0.3)
    with pytest.raises(ValueError):
        AttackSpec("pgd", 0.3, steps=40)
    with pytest.raises(ValueError):
        AttackSpec("cw", 0.3)
    with pytest.raises(ValueError):
        AttackSpec("fgsm", 1.5)


def test_inputs_outside_unit_box_rejected():
    model, x, y, _ = random_attack_triple(2)
    with pytest.raises(ValueError):
        fgsm(model, x + 2, y, 0.1)


def test_pgd_deterministic_under_seed():
    model, x, y, _ = random_attack_triple(3)
    a = pgd(model, x, y, 0.2, alpha=0.05, steps=3, seed=7)
    assert np.array_equal(a, pgd(model, x, y, 0.2, alpha=0.05, steps=3, seed=7))
    assert np.array_equal(pgd(model, x, y, 0.2, steps=0), x)


def test_white_box_gradient_goes_through_mean_template():
    model, x, y, _ = random_attack_triple(5)
    bank = init_noise(model.input_shape, 4, 0)
    _, g = input_gradient(model, x, y, bank)

    def f(v):
        return T.softmax_cross_entropy(model(bank.compose_mean(v)), y).item()

    assert rel_err(g, T.finite_difference_grad(f, x)) <= 1e-4
    _, g_plain = input_gradient(model, x, y)
    assert not np.allclose(g, g_plain)


@pytest.fixture(scope="module")
def trained_pair():
    ds = synth_dataset(3, 240, seed=1, size=6)
    models = []
    for seed in (0, 1):
        m = build_model("custom-small-cnn", 3, ds.sample_shape, seed=seed, conv=(3,), kernel=3)
        state = TrainState(m)
        for _ in range(5):
            train_epoch(state, ds, TrainConfig(eta=0.1, batch_size=16, seed=seed))
        models.append(m)
    return ds, models


def test_min_bb_properties(trained_pair):
    ds, (target, source) = trained_pair
    zero = min_bb_accuracy(target, None, source, ds, 0.0)
    assert zero.accuracy == accuracy(target, None, ds)
    res = min_bb_accuracy(target, None, source, ds, 0.2, seed=1)
    assert set(res.per_attack) == {"fgsm", "ifgsm-2", "rfgsm"}
    assert all(res.accuracy <= v for v in res.per_attack.values())
    assert res.accuracy == min(res.per_attack.values())


def test_black_box_threat_uses_source(trained_pair):
    ds, (target, source) = trained_pair
    spec = AttackSpec("fgsm", 0.2)
    bb = attack_accuracy(spec, target, None, ds, ThreatModel("black-box", source))
    adv = craft(spec, source, ds)
    assert bb == accuracy(target, None, Dataset(adv, ds.labels, ds.classes))
    with pytest.raises(ValueError):
        attack_accuracy(spec, target, None, ds, ThreatModel("black-box"))
