"""Synthetic five-channel drive signals for five gear-fault classes.

Channels: speed, motor torque, DC-link voltage, active stator current,
reactive stator current. Each window shares a load-dependent baseline
(DC offset, shaft-rate fundamental, gear-mesh harmonic) and carries one
fault signature:

1 missing tooth   one strong damped impulse per shaft revolution
2 chipped tooth   a weaker impulse pair one tooth pitch apart
3 root crack      shaft-rate amplitude modulation of the mesh harmonic
4 surface crack   intermittent broadband bursts (random position)
5 eccentricity    slow sinusoidal modulation of speed, coupled into currents

Sampling is synchronous with the shaft (a window starts at the tacho
trigger), so phases only jitter slightly between windows.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError
from .tensor_core import RngStream, gaussian_sample

FAULT_NAMES = {
    1: "missing tooth",
    2: "chipped tooth",
    3: "root crack",
    4: "surface crack",
    5: "eccentricity",
}
CHANNELS = ("speed", "torque", "dc_voltage", "i_active", "i_reactive")
N_CHANNELS = len(CHANNELS)
SAMPLE_RATE = 5000.0
BASE_SHAFT_HZ = 100.0
TEETH = 9
SPLITS = ("train", "val", "test_seen", "test_unseen")
SEEN_LABELS = (1, 2, 3)
UNSEEN_LABELS = (4, 5)
DATASET_FORMAT = "qatbnn-dataset/1"

# per channel: DC offset, fundamental amplitude, fundamental phase, mesh amplitude, load gain
_BASELINE = np.array([
    [0.20, 0.40, 0.3, 0.05, 0.2],
    [0.10, 0.30, 1.1, 0.20, 1.0],
    [0.20, 0.20, 2.0, 0.05, 0.1],
    [0.10, 0.30, 0.7, 0.15, 1.0],
    [0.05, 0.25, 2.6, 0.10, 0.5],
])
# impulse gain per channel (speed, torque, vdc, i_a, i_r)
_IMPULSE_GAIN = np.array([0.5, 1.0, 0.4, 0.8, 0.6])


def _is_clean(snr_db):
    return snr_db is None or (isinstance(snr_db, str) and snr_db == "clean")


@dataclass
class SignalWindow:
    channels: np.ndarray
    label: int
    load: float
    snr_db: object = "clean"


def shaft_frequency(load):
    return BASE_SHAFT_HZ * (0.5 + 0.5 * load)


def _impulse_train(t, times, amp, decay=0.004, ring_hz=450.0):
    out = np.zeros_like(t)
    for t0 in times:
        tau = t - t0
        on = tau >= 0
        out[on] += amp * np.exp(-tau[on] / decay) * np.sin(2 * np.pi * ring_hz * tau[on])
    return out


def _rev_times(f_rot, duration, angle_frac):
    n_rev = int(math.ceil(duration * f_rot)) + 1
    return [(angle_frac + k) / f_rot for k in range(n_rev) if (angle_frac + k) / f_rot < duration]


def fault_signature(label: int, load: float, rng: RngStream, length: int = 256) -> np.ndarray:
    """Noiseless (5, length) window for one fault at one load."""
    if label not in FAULT_NAMES:
        raise DomainError(f"fault label must be in 1..5, got {label}")
    if not 0.0 <= load <= 1.0:
        raise DomainError(f"load must lie in [0, 1], got {load}")
    t = np.arange(length) / SAMPLE_RATE
    duration = length / SAMPLE_RATE
    f_rot = shaft_frequency(load)
    f_mesh = TEETH * f_rot
    jit = gaussian_sample(rng.child(0), (N_CHANNELS, 3))
    dc, amp, phase, mesh, gain = _BASELINE.T
    level = 1.0 + gain * (load - 0.5)
    amp = amp * level * (1.0 + 0.05 * jit[:, 0])
    phase = phase + 0.05 * jit[:, 1]
    mesh_phase = 0.5 + 0.05 * jit[:, 2]

    shaft = np.sin(2 * np.pi * f_rot * t[None, :] + phase[:, None])
    mesh_wave = np.sin(2 * np.pi * f_mesh * t[None, :] + mesh_phase[:, None])
    x = dc[:, None] * level[:, None] + amp[:, None] * shaft
    mesh_amp = np.broadcast_to((mesh * level)[:, None], x.shape).copy()

    if label == 1:
        imp = _impulse_train(t, _rev_times(f_rot, duration, 0.3), 3.0 * level[1])
        x += _IMPULSE_GAIN[:, None] * imp[None, :]
    elif label == 2:
        pitch = 1.0 / f_mesh
        times = [tk + d for tk in _rev_times(f_rot, duration, 0.3) for d in (0.0, pitch)]
        imp = _impulse_train(t, times, 1.5 * level[1])
        x += _IMPULSE_GAIN[:, None] * imp[None, :]
    elif label == 3:
        mod = 1.0 + 1.0 * np.sin(2 * np.pi * f_rot * t + 0.9)
        mesh_amp = mesh_amp * 5.0 * mod[None, :]
    elif label == 4:
        burst = np.zeros(length)
        brng = rng.child(1).generator()
        for tk in _rev_times(f_rot, duration, brng.uniform(0.0, 1.0)):
            start = int(tk * SAMPLE_RATE)
            stop = min(length, start + 20)
            burst[start:stop] = brng.standard_normal(stop - start)
        x += np.array([0.2, 1.0, 0.3, 0.9, 0.7])[:, None] * burst[None, :]
    elif label == 5:
        slow = np.sin(2 * np.pi * 0.5 * f_rot * t + 0.4)
        x[0] += 0.6 * amp[0] * slow
        x[0] *= 1.0 + 0.5 * slow
        x[3] += 0.3 * slow
        x[4] += 0.3 * np.cos(2 * np.pi * 0.5 * f_rot * t + 0.4)

    return x + mesh_amp * mesh_wave


def inject_noise(window: SignalWindow, snr_db: float, rng: RngStream) -> SignalWindow:
    """Additive white Gaussian noise at ``snr_db`` per channel.

    The realized noise is rescaled so its mean-square power hits the target
    exactly, so the measured SNR equals ``snr_db`` up to rounding.
    """
    x = np.asarray(window.channels, dtype=np.float64)
    power = np.mean(x**2, axis=1)
    if np.any(power == 0.0):
        raise DomainError("SNR is undefined for a zero-power channel")
    z = gaussian_sample(rng, x.shape)
    z = z / np.sqrt(np.mean(z**2, axis=1, keepdims=True))
    noise_power = power / 10.0 ** (snr_db / 10.0)
    noisy = x + z * np.sqrt(noise_power)[:, None]
    if _is_clean(window.snr_db):
        tag = float(snr_db)
    else:
        # noise powers add: combine the two SNRs
        prev = 10.0 ** (-float(window.snr_db) / 10.0)
        tag = float(-10.0 * math.log10(prev + 10.0 ** (-snr_db / 10.0)))
    return SignalWindow(noisy, window.label, window.load, tag)


def generate_fault_window(label, load, snr_db, rng: RngStream, length=256) -> SignalWindow:
    sig = fault_signature(label, load, rng.child(0), length)
    window = SignalWindow(sig, int(label), float(load), "clean")
    if _is_clean(snr_db):
        return window
    return inject_noise(window, float(snr_db), rng.child(1))


def measured_snr_db(clean, noisy):
    clean = np.asarray(clean)
    noise = np.asarray(noisy) - clean
    return 10.0 * np.log10(np.mean(clean**2, axis=-1) / np.mean(noise**2, axis=-1))


@dataclass
class DatasetConfig:
    train_per_class: int = 30
    val_per_class: int = 10
    test_per_class: int = 10
    unseen_per_class: int = 10
    length: int = 256
    loads: tuple = (0.25, 0.5, 0.75, 1.0)
    train_snr: tuple = ("clean", 0.0, -10.0)
    master_seed: int = 0
    train_labels: tuple = SEEN_LABELS
    unseen_labels: tuple = UNSEEN_LABELS

    def validate(self):
        counts = (self.train_per_class, self.val_per_class,
                  self.test_per_class, self.unseen_per_class)
        if any(int(c) < 1 for c in counts):
            raise ConfigError("split counts must be positive")
        if self.length < 16:
            raise ConfigError("window length must be at least 16 samples")
        if set(self.train_labels) & set(UNSEEN_LABELS):
            raise ConfigError("faults 4 and 5 are reserved for the unseen test split")
        if set(self.unseen_labels) - set(UNSEEN_LABELS):
            raise ConfigError("unseen split may only hold faults 4 and 5")
        if not self.loads or any(not 0.0 <= ld <= 1.0 for ld in self.loads):
            raise ConfigError("loads must be a non-empty set within [0, 1]")
        if not self.train_snr:
            raise ConfigError("train_snr needs at least one entry")

    def to_dict(self):
        return {
            "train_per_class": self.train_per_class,
            "val_per_class": self.val_per_class,
            "test_per_class": self.test_per_class,
            "unseen_per_class": self.unseen_per_class,
            "length": self.length,
            "loads": list(self.loads),
            "train_snr": list(self.train_snr),
            "master_seed": self.master_seed,
            "train_labels": list(self.train_labels),
            "unseen_labels": list(self.unseen_labels),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class Dataset:
    windows: list
    splits: list
    config: DatasetConfig
    stats: dict = field(default_factory=dict)

    def split(self, name):
        if name not in SPLITS:
            raise ConfigError(f"unknown split {name!r}")
        return [w for w, s in zip(self.windows, self.splits) if s == name]

    def counts(self):
        return {name: sum(1 for s in self.splits if s == name) for name in SPLITS}

    def arrays(self, name, windows=None):
        """Standardized (N, 5, 1, T) inputs, class indices (label - 1), raw labels."""
        ws = self.split(name) if windows is None else windows
        if not ws:
            raise ConfigError(f"split {name!r} is empty")
        return stack_windows(ws, self.stats)


def standardization_stats(windows):
    x = np.stack([w.channels for w in windows])
    return {
        "mean": x.mean(axis=(0, 2)).tolist(),
        "std": x.std(axis=(0, 2)).tolist(),
    }


def standardize(channels, stats):
    mean = np.asarray(stats["mean"])[:, None]
    std = np.asarray(stats["std"])[:, None]
    return (np.asarray(channels) - mean) / std


def stack_windows(windows, stats):
    x = np.stack([standardize(w.channels, stats) for w in windows])[:, :, None, :]
    labels = np.array([w.label for w in windows], dtype=np.int64)
    return np.ascontiguousarray(x), labels - 1, labels


_SPLIT_LABELS = {
    "train": "train_labels",
    "val": "train_labels",
    "test_seen": "train_labels",
    "test_unseen": "unseen_labels",
}
_SPLIT_COUNT = {
    "train": "train_per_class",
    "val": "val_per_class",
    "test_seen": "test_per_class",
    "test_unseen": "unseen_per_class",
}


def build_dataset(config: DatasetConfig) -> Dataset:
    config.validate()
    root = RngStream(int(config.master_seed))
    windows, splits = [], []
    for si, split in enumerate(SPLITS):
        n = int(getattr(config, _SPLIT_COUNT[split]))
        for label in getattr(config, _SPLIT_LABELS[split]):
            for i in range(n):
                rng = root.child(si, label, i)
                load_idx = int(rng.child(7).generator().integers(len(config.loads)))
                snr = config.train_snr[i % len(config.train_snr)] if split == "train" else "clean"
                windows.append(generate_fault_window(
                    label, float(config.loads[load_idx]), snr, rng, config.length))
                splits.append(split)
    ds = Dataset(windows, splits, config)
    train = ds.split("train")
    clean = [w for w in train if _is_clean(w.snr_db)]
    # noise-augmented windows would inflate the scale; use the clean ones when present
    ds.stats = standardization_stats(clean or train)
    return ds


def corrupt(windows, snr_db, rng: RngStream):
    """Return noisy copies of ``windows``; window i uses sub-stream i."""
    return [inject_noise(w, snr_db, rng.child(i)) for i, w in enumerate(windows)]


# -- persistence ------------------------------------------------------------

def _fmt_snr(s):
    return "clean" if _is_clean(s) else repr(float(s))


def _parse_snr(s):
    return "clean" if s == "clean" else float(s)


def _atomic_write_text(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save_dataset(ds: Dataset, out_dir) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    length = ds.config.length
    header = ["label", "load", "snr_db"] + [
        f"{ch}_{t}" for ch in CHANNELS for t in range(length)]
    split_files = {}
    for split in SPLITS:
        name = f"{split}.csv"
        rows = [header]
        for w in ds.split(split):
            rows.append([str(w.label), repr(w.load), _fmt_snr(w.snr_db)]
                        + [repr(float(v)) for v in w.channels.reshape(-1)])
        import io

        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(rows)
        _atomic_write_text(out / name, buf.getvalue())
        split_files[split] = {"file": name, "count": len(rows) - 1}
        written.append(out / name)
    manifest = {
        "format": DATASET_FORMAT,
        "channels": list(CHANNELS),
        "sample_rate_hz": SAMPLE_RATE,
        "length": length,
        "config": ds.config.to_dict(),
        "splits": split_files,
        "standardization": ds.stats,
    }
    _atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    written.append(out / "manifest.json")
    return written


def load_dataset(in_dir) -> Dataset:
    src = Path(in_dir)
    try:
        manifest = json.loads((src / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"no dataset manifest in {src}") from exc
    if manifest.get("format") != DATASET_FORMAT:
        raise ConfigError(f"unsupported dataset format {manifest.get('format')!r}")
    config = DatasetConfig.from_dict(manifest["config"])
    length = int(manifest["length"])
    windows, splits = [], []
    for split in SPLITS:
        entry = manifest["splits"][split]
        with open(src / entry["file"], newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                values = np.array([float(v) for v in row[3:]]).reshape(N_CHANNELS, length)
                windows.append(SignalWindow(values, int(row[0]), float(row[1]), _parse_snr(row[2])))
                splits.append(split)
    return Dataset(windows, splits, config, manifest["standardization"])
