"""Monte-Carlo predictive inference and the metrics built on it.

Uncertainties are entropies in nats: total is the entropy of the mean
predictive, aleatoric the mean per-sample entropy, epistemic their
difference (the mutual information between label and weights).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .bayes_net import BnnModel, forward_batch
from .errors import ConfigError, DomainError
from .synth_data import corrupt, stack_windows
from .tensor_core import RngStream

DEFAULT_LEVELS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99)
QUANTILES = (0.0, 0.25, 0.5, 0.75, 1.0)


def entropy(p, axis=-1):
    p = np.asarray(p, dtype=np.float64)
    logp = np.log(np.where(p > 0, p, 1.0))
    return -np.sum(p * logp, axis=axis)


def decompose_uncertainty(mc_probs):
    """(total, aleatoric, epistemic) for an (n_samples, classes) matrix."""
    rows = np.asarray(mc_probs, dtype=np.float64)
    if np.all(rows == rows[0]):
        # no disagreement between samples: the decomposition is exact
        h = float(entropy(rows[0]))
        return h, h, 0.0
    total = float(entropy(rows.mean(axis=0)))
    aleatoric = float(np.mean(entropy(rows, axis=1)))
    return total, aleatoric, total - aleatoric


@dataclass
class PredictiveSummary:
    mc_probs: np.ndarray
    mean_probs: np.ndarray = field(init=False)
    total_unc: float = field(init=False)
    aleatoric_unc: float = field(init=False)
    epistemic_unc: float = field(init=False)

    def __post_init__(self):
        rows = np.asarray(self.mc_probs, dtype=np.float64)
        self.mc_probs = rows
        self.mean_probs = rows[0].copy() if np.all(rows == rows[0]) else rows.mean(axis=0)
        self.total_unc, self.aleatoric_unc, self.epistemic_unc = decompose_uncertainty(rows)

    @property
    def predicted_class(self) -> int:
        return int(np.argmax(self.mean_probs))

    @property
    def confidence(self) -> float:
        return float(np.max(self.mean_probs))


def mc_probabilities(model: BnnModel, x, n_samples, rng: RngStream, plan=None):
    """(N, n_samples, classes); sample s uses stream ``rng.child(s)`` for every window."""
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    out = np.empty((len(x), n_samples, model.class_count))
    for s in range(n_samples):
        out[:, s, :] = tc.softmax(forward_batch(model, x, rng.child(s), plan), axis=1)
    return out


def predict_mc(model: BnnModel, window, n_samples, rng: RngStream, plan=None) -> PredictiveSummary:
    x = np.asarray(window, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, None, :]
    return PredictiveSummary(mc_probabilities(model, x[None], n_samples, rng, plan)[0])


def accuracy(summaries, labels) -> float:
    labels = list(labels)
    if not summaries or len(summaries) != len(labels):
        raise DomainError("accuracy needs equal-length, non-empty inputs")
    correct = sum(int(s.predicted_class == int(y)) for s, y in zip(summaries, labels))
    return correct / len(labels)


def _bin_index(conf, n_bins):
    # bin i covers (i/n, (i+1)/n]; zero confidence goes to bin 0
    idx = np.ceil(np.asarray(conf) * n_bins).astype(np.int64) - 1
    return np.clip(idx, 0, n_bins - 1)


def expected_calibration_error(summaries, labels, n_bins=10) -> float:
    if n_bins < 1:
        raise DomainError("n_bins must be >= 1")
    if not summaries:
        raise DomainError("ECE of an empty prediction set")
    conf = np.array([s.confidence for s in summaries])
    correct = np.array([s.predicted_class == int(y) for s, y in zip(summaries, labels)], float)
    idx = _bin_index(conf, n_bins)
    ece = 0.0
    for b in range(n_bins):
        sel = idx == b
        if sel.any():
            ece += sel.sum() / len(conf) * abs(correct[sel].mean() - conf[sel].mean())
    return float(ece)


def credible_set(mean_probs, level):
    """Smallest class set, by descending probability (ties: lower index first),
    whose mass reaches ``level``."""
    p = np.asarray(mean_probs)
    order = sorted(range(len(p)), key=lambda k: (-p[k], k))
    mass = 0.0
    chosen = []
    for k in order:
        chosen.append(k)
        mass += p[k]
        if mass >= level - 1e-12:
            break
    return chosen


def empirical_coverage(summaries, labels, levels=DEFAULT_LEVELS):
    levels = list(levels)
    if levels != sorted(levels):
        raise DomainError("coverage levels must be sorted ascending")
    labels = [int(y) for y in labels]
    curve = []
    for q in levels:
        hits = sum(int(y in credible_set(s.mean_probs, q)) for s, y in zip(summaries, labels))
        curve.append((float(q), hits / len(labels)))
    return curve


@dataclass
class EvalReport:
    accuracy: float
    ece: float
    n_bins: int
    n_samples: int
    noise_snr_db: object
    seen: dict
    unseen: dict
    confidence_quantiles: dict
    coverage: list
    pairs: list

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "ece": self.ece,
            "n_bins": self.n_bins,
            "mc_samples": self.n_samples,
            "noise_snr_db": self.noise_snr_db,
            "test_seen": self.seen,
            "test_unseen": self.unseen,
            "confidence_quantiles": self.confidence_quantiles,
            "coverage": [{"level": q, "coverage": c} for q, c in self.coverage],
        }


def _mean_unc(summaries):
    return {
        "count": len(summaries),
        "total": float(np.mean([s.total_unc for s in summaries])),
        "aleatoric": float(np.mean([s.aleatoric_unc for s in summaries])),
        "epistemic": float(np.mean([s.epistemic_unc for s in summaries])),
        "mean_confidence": float(np.mean([s.confidence for s in summaries])),
    }


def _quantiles(values):
    q = np.quantile(np.asarray(values, dtype=np.float64), QUANTILES)
    return dict(zip(("min", "q25", "median", "q75", "max"), (float(v) for v in q)))


def summarize(model, windows, stats, n_samples, rng, plan=None):
    x, y, labels = stack_windows(windows, stats)
    probs = mc_probabilities(model, x, n_samples, rng, plan)
    return [PredictiveSummary(p) for p in probs], y, labels


def evaluate(model: BnnModel, dataset, n_samples=64, rng: RngStream | None = None, plan=None,
             noise_snr=None, noise_seed=0, n_bins=10, levels=DEFAULT_LEVELS) -> EvalReport:
    """Accuracy, ECE, uncertainty means and box-plot data on the test splits.

    With ``noise_snr`` set, both test splits are corrupted at that SNR first.
    """
    rng = RngStream(0).child(0xE7A1) if rng is None else rng
    stats = model.stats or dataset.stats
    seen_w = dataset.split("test_seen")
    unseen_w = dataset.split("test_unseen")
    if not seen_w or not unseen_w:
        raise ConfigError("dataset lacks a test_seen or test_unseen split")
    if noise_snr is not None:
        noise_rng = RngStream(int(noise_seed)).child(0x4015E)
        seen_w = corrupt(seen_w, float(noise_snr), noise_rng.child(0))
        unseen_w = corrupt(unseen_w, float(noise_snr), noise_rng.child(1))
    seen, y_seen, lab_seen = summarize(model, seen_w, stats, n_samples, rng, plan)
    unseen, _, lab_unseen = summarize(model, unseen_w, stats, n_samples, rng, plan)
    quantiles = {}
    for fault in sorted(set(lab_seen.tolist()) | set(lab_unseen.tolist())):
        group = [s for s, lab in zip(seen, lab_seen) if lab == fault] or \
                [s for s, lab in zip(unseen, lab_unseen) if lab == fault]
        quantiles[str(fault)] = _quantiles([s.mean_probs.max() for s in group])
    pairs = [(s.confidence, int(s.predicted_class == y)) for s, y in zip(seen, y_seen)]
    return EvalReport(
        accuracy=accuracy(seen, y_seen),
        ece=expected_calibration_error(seen, y_seen, n_bins),
        n_bins=n_bins,
        n_samples=n_samples,
        noise_snr_db=noise_snr,
        seen=_mean_unc(seen),
        unseen=_mean_unc(unseen),
        confidence_quantiles=quantiles,
        coverage=empirical_coverage(seen, y_seen, levels),
        pairs=pairs,
    )
