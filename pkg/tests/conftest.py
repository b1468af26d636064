import pytest


def synth_config(scenario="sgd", epochs=2, **extra):
    raw = {
        "scenario": scenario,
        "architecture": "custom-small-cnn",
        "options": {"conv": [3], "kernel": 3},
        "seed": 4,
        "data": {"source": "synth", "synth": {"classes": 3, "n_train": 72, "n_test": 24, "size": 6}},
        "train": {"eta": 0.05, "eta_noise": 0.002 if scenario.startswith("nol") else 0.0, "epochs": epochs, "batch_size": 16},
        "adv": {"eps": 0.1, "alpha": 0.02, "steps": 2},
    }
    source = {"architecture": "custom-small-cnn", "options": {"conv": [3]}, "train": {"epochs": 1, "batch_size": 16, "eta": 0.05}}
    if scenario.endswith("ens"):
        raw["ensadv_source"] = source
    raw.update(extra)
    if extra.get("bb_source") is True:
        raw["bb_source"] = source
    return raw


@pytest.fixture
def runs_root(tmp_path, monkeypatch):
    monkeypatch.setenv("NOLAB_RUNS", str(tmp_path / "runs"))
    return tmp_path / "runs"
