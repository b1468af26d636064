import numpy as np
import pytest

from nolab.data import (
    BadMagicError,
    BatchPlan,
    CountMismatchError,
    TruncatedPayloadError,
    batches,
    load_idx,
    load_mnist,
    mnist_dir,
    synth_dataset,
    write_idx,
)
from nolab.models import build_model
from nolab.train import TrainConfig, TrainState, accuracy, train_epoch


@pytest.fixture
def idx_pair(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(5, 4, 3), dtype=np.uint8)
    imgs[0, 0, 0], imgs[0, 0, 1] = 0, 255
    labels = rng.integers(0, 10, size=5, dtype=np.uint8)
    ip, lp = tmp_path / "img", tmp_path / "lab"
    write_idx(ip, lp, imgs, labels)
    return ip, lp, imgs, labels


def test_round_trip_and_scaling(idx_pair):
    ip, lp, imgs, labels = idx_pair
    ds = load_idx(ip, lp)
    assert ds.images.shape == (5, 1, 4, 3)
    assert ds.images[0, 0, 0, 0] == 0.0 and ds.images[0, 0, 0, 1] == 1.0
    assert np.array_equal(np.rint(ds.images[:, 0] * 255).astype(np.uint8), imgs)
    assert np.array_equal(ds.labels, labels)


def test_header_bytes(idx_pair):
    ip, lp, *_ = idx_pair
    assert ip.read_bytes()[:4] == b"\x00\x00\x08\x03"
    assert lp.read_bytes()[:4] == b"\x00\x00\x08\x01"


def test_bad_magic(idx_pair):
    ip, lp, *_ = idx_pair
    raw = bytearray(lp.read_bytes())
    raw[3] = 0x02
    lp.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError):
        load_idx(ip, lp)
    with pytest.raises(BadMagicError):
        load_idx(ip, ip)


def test_truncated_payload(idx_pair):
    ip, lp, *_ = idx_pair
    ip.write_bytes(ip.read_bytes()[:-1])
    with pytest.raises(TruncatedPayloadError):
        load_idx(ip, lp)


def test_count_mismatch(tmp_path):
    ip, lp = tmp_path / "i", tmp_path / "l"
    write_idx(ip, lp, np.zeros((3, 2, 2), np.uint8), np.zeros(4, np.uint8))
    with pytest.raises(CountMismatchError):
        load_idx(ip, lp)


def test_synth_determinism_and_range():
    a, b = synth_dataset(2, 100, seed=7), synth_dataset(2, 100, seed=7)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert np.bincount(a.labels).tolist() == [50, 50]


def test_synth_is_learnable_by_mlp():
    ds = synth_dataset(2, 200, seed=0)
    model = build_model("custom-small-cnn", 2, ds.sample_shape, seed=0, conv=(), hidden=(16,))
    state = TrainState(model)
    cfg = TrainConfig(eta=0.1, momentum=0.5, batch_size=20, seed=0)
    best = 0.0
    for _ in range(50):
        train_epoch(state, ds, cfg)
        best = accuracy(model, None, ds)
        if best >= 0.95:
            break
    assert best >= 0.95


def test_batch_arithmetic():
    ds = synth_dataset(2, 10, seed=0)
    sizes = [len(y) for _, y, _ in batches(ds, BatchPlan(4, drop_last=True))]
    assert sizes == [4, 4]
    sizes = [len(y) for _, y, _ in batches(ds, BatchPlan(4))]
    assert sizes == [4, 4, 2]


def test_shuffle_depends_on_seed_and_epoch():
    ds = synth_dataset(2, 50, seed=0)

    def order(seed, epoch):
        return np.concatenate([y for _, y, _ in batches(ds, BatchPlan(8, seed), epoch)])

    first = [x for x, _, _ in batches(ds, BatchPlan(8, 3), 1)][0]
    again = [x for x, _, _ in batches(ds, BatchPlan(8, 3), 1)][0]
    assert np.array_equal(first, again)
    assert np.array_equal(order(3, 1), order(3, 1))
    assert not np.array_equal(order(3, 1), order(3, 2))


@pytest.mark.skipif(not (mnist_dir() / "t10k-images-idx3-ubyte").exists(), reason="MNIST files not present")
def test_reference_mnist_test_split():
    ds = load_mnist("test")
    assert ds.images.shape == (10000, 1, 28, 28)
    assert np.bincount(ds.labels).tolist() == [980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009]
