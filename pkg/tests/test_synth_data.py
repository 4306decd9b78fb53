import numpy as np
import pytest

from qatbnn.errors import ConfigError, DomainError
from qatbnn.synth_data import (
    SPLITS,
    DatasetConfig,
    SignalWindow,
    build_dataset,
    corrupt,
    fault_signature,
    generate_fault_window,
    inject_noise,
    load_dataset,
    measured_snr_db,
    save_dataset,
)
from qatbnn.tensor_core import RngStream


def test_window_shape_and_determinism():
    a = generate_fault_window(2, 0.5, "clean", RngStream(1))
    b = generate_fault_window(2, 0.5, "clean", RngStream(1))
    assert a.channels.shape == (5, 256)
    np.testing.assert_array_equal(a.channels, b.channels)
    n1 = generate_fault_window(2, 0.5, 0.0, RngStream(1))
    n2 = generate_fault_window(2, 0.5, 0.0, RngStream(1))
    np.testing.assert_array_equal(n1.channels, n2.channels)


def test_clean_window_is_signature():
    w = generate_fault_window(3, 0.75, "clean", RngStream(4))
    np.testing.assert_array_equal(w.channels, fault_signature(3, 0.75, RngStream(4).child(0)))
    assert w.snr_db == "clean"


def test_fault_classes_differ():
    a = generate_fault_window(1, 0.5, "clean", RngStream(2)).channels
    b = generate_fault_window(5, 0.5, "clean", RngStream(2)).channels
    assert np.linalg.norm(a - b) > 0


@pytest.mark.parametrize("label,load", [(0, 0.5), (6, 0.5), (1, 1.5), (1, -0.1)])
def test_invalid_window_args(label, load):
    with pytest.raises(DomainError):
        generate_fault_window(label, load, "clean", RngStream(0))


def _clean(label=1, seed=0):
    return generate_fault_window(label, 0.5, "clean", RngStream(seed))


def test_noise_power_definition():
    w = _clean()
    noisy = inject_noise(w, -20.0, RngStream(3))
    noise = noisy.channels - w.channels
    ratio = np.mean(noise**2, axis=1) / np.mean(w.channels**2, axis=1)
    np.testing.assert_allclose(ratio, 100.0, rtol=1e-9)
    zero_db = inject_noise(w, 0.0, RngStream(5))
    p = np.mean((zero_db.channels - w.channels) ** 2, axis=1) / np.mean(w.channels**2, axis=1)
    assert np.all(np.abs(p - 1.0) < 0.05)


def test_high_snr_is_small_perturbation():
    w = _clean(2)
    noisy = inject_noise(w, 60.0, RngStream(1))
    rel = np.linalg.norm(noisy.channels - w.channels) / np.linalg.norm(w.channels)
    assert rel < 0.002


def test_measured_snr_over_seeds():
    for label in (1, 4):
        errs = []
        for seed in range(100):
            w = _clean(label, seed)
            for snr in (-20.0, 0.0, 10.0):
                n = inject_noise(w, snr, RngStream(seed, 9))
                errs.append(np.abs(measured_snr_db(w.channels, n.channels) - snr))
        assert np.max(errs) < 0.5


def test_zero_power_channel():
    w = SignalWindow(np.zeros((5, 16)), 1, 0.5)
    with pytest.raises(DomainError):
        inject_noise(w, 0.0, RngStream(0))


def test_noise_composes():
    w = inject_noise(_clean(), 10.0, RngStream(1))
    w2 = inject_noise(w, 10.0, RngStream(2))
    assert w2.snr_db == pytest.approx(10.0 - 10 * np.log10(2))


def test_dataset_counts_and_splits():
    ds = build_dataset(DatasetConfig(train_per_class=30, test_per_class=10, unseen_per_class=10))
    counts = ds.counts()
    assert counts["train"] == 90
    assert counts["test_unseen"] == 20
    for split in ("train", "val", "test_seen"):
        labels = [w.label for w in ds.split(split)]
        assert set(labels) == {1, 2, 3}
        assert all(labels.count(k) == len(labels) // 3 for k in (1, 2, 3))
    assert {w.label for w in ds.split("test_unseen")} == {4, 5}
    assert all(w.load in (0.25, 0.5, 0.75, 1.0) for w in ds.windows)
    ids = {id(w) for w in ds.windows}
    assert len(ids) == len(ds.windows)
    blobs = [w.channels.tobytes() for w in ds.windows]
    assert len(set(blobs)) == len(blobs)


def test_dataset_deterministic():
    a = build_dataset(DatasetConfig(master_seed=9))
    b = build_dataset(DatasetConfig(master_seed=9))
    for wa, wb in zip(a.windows, b.windows):
        np.testing.assert_array_equal(wa.channels, wb.channels)
    assert a.stats == b.stats


def test_dataset_config_errors():
    with pytest.raises(ConfigError):
        build_dataset(DatasetConfig(train_labels=(1, 2, 4)))
    with pytest.raises(ConfigError):
        build_dataset(DatasetConfig(train_per_class=0))


def test_standardized_train_split():
    ds = build_dataset(DatasetConfig(train_snr=("clean",)))
    x, y, labels = ds.arrays("train")
    assert x.shape == (90, 5, 1, 256)
    np.testing.assert_allclose(x.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(x.std(axis=(0, 2, 3)), 1.0, atol=1e-12)
    np.testing.assert_array_equal(y, labels - 1)


def test_persistence_roundtrip(tmp_path):
    ds = build_dataset(DatasetConfig(train_per_class=3, val_per_class=1, test_per_class=1,
                                     unseen_per_class=1, length=64))
    files = save_dataset(ds, tmp_path)
    assert {f.name for f in files} == {f"{s}.csv" for s in SPLITS} | {"manifest.json"}
    back = load_dataset(tmp_path)
    assert back.splits == ds.splits
    assert back.stats == ds.stats
    for a, b in zip(ds.windows, back.windows):
        np.testing.assert_array_equal(a.channels, b.channels)
        assert (a.label, a.load, a.snr_db) == (b.label, b.load, b.snr_db)


def _spectral_features(x):
    spec = np.abs(np.fft.rfft(x, axis=-1))
    # log band energies per channel: 16 equal-width bands
    bands = np.array_split(spec, 16, axis=-1)
    return np.log1p(np.concatenate([b.sum(axis=-1) for b in bands], axis=-1))


def test_linear_classifier_on_spectral_features():
    ds = build_dataset(DatasetConfig(train_per_class=40, test_per_class=30, train_snr=("clean",)))
    feats = lambda ws: np.stack([_spectral_features(w.channels).ravel() for w in ws])
    train, test = ds.split("train"), ds.split("test_seen")
    a = np.c_[feats(train), np.ones(len(train))]
    mean, std = a[:, :-1].mean(0), a[:, :-1].std(0) + 1e-12
    a[:, :-1] = (a[:, :-1] - mean) / std
    targets = np.eye(3)[[w.label - 1 for w in train]]
    coef = np.linalg.solve(a.T @ a + 1e-2 * np.eye(a.shape[1]), a.T @ targets)
    b = np.c_[feats(test), np.ones(len(test))]
    b[:, :-1] = (b[:, :-1] - mean) / std
    pred = (b @ coef).argmax(1)
    acc = np.mean(pred == np.array([w.label - 1 for w in test]))
    assert acc >= 0.9


def test_corrupt_uses_substreams():
    ws = [_clean(1, s) for s in range(3)]
    a = corrupt(ws, 0.0, RngStream(1))
    b = corrupt(ws, 0.0, RngStream(1))
    for wa, wb in zip(a, b):
        np.testing.assert_array_equal(wa.channels, wb.channels)
