"""Mean-field Gaussian Bayesian CNN with manual backpropagation.

Weights carry a factorized Gaussian posterior ``N(mu, softplus(rho)**2)``
against a ``N(0, prior_sigma**2)`` prior; biases are point estimates and are
never quantized. A forward pass draws one weight sample per layer from the
stream it is given (layer ``i`` uses ``rng.child(i)``) and can route sampled
weights and hidden activations through fake quantizers.
"""

from __future__ import annotations

import copy
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, NumericError, ShapeError
from .quantizer import QuantPlan, fake_quant_with_mask
from .tensor_core import RngStream

CHECKPOINT_FORMAT = "qatbnn-ckpt/1"

DEFAULT_ARCH = [
    {"kind": "conv2d", "filters": 8, "kh": 1, "kw": 5, "stride": 1, "activation": "relu"},
    {"kind": "conv2d", "filters": 16, "kh": 1, "kw": 5, "stride": 1, "activation": "relu"},
    {"kind": "maxpool", "axis": "time"},
    {"kind": "flatten"},
    {"kind": "dense", "units": 32, "activation": "relu"},
    {"kind": "dense", "units": 16, "activation": "relu"},
    {"kind": "dense", "units": 3, "activation": "none"},
]

# the full-size network: five conv layers, 2x1 pooling, hidden 128/64/32, 3 outputs
TABLE_II_ARCH = (
    [{"kind": "conv2d", "filters": f, "kh": 1, "kw": 5, "stride": 1, "activation": "relu"}
     for f in (8, 16, 16, 32, 32)]
    + [{"kind": "maxpool", "axis": "time"}, {"kind": "flatten"}]
    + [{"kind": "dense", "units": u, "activation": "relu"} for u in (128, 64, 32)]
    + [{"kind": "dense", "units": 3, "activation": "none"}]
)

INIT_MU_STD = 0.05
INIT_SIGMA = 0.01
PRIOR_SIGMA = 0.1


def inverse_softplus(y):
    return float(y + math.log(-math.expm1(-y)))


@dataclass
class GaussianVariationalLayer:
    kind: str
    mu: np.ndarray
    rho: np.ndarray
    bias: np.ndarray
    prior_sigma: float = PRIOR_SIGMA
    activation: str = "relu"
    stride: int = 1

    def __post_init__(self):
        if self.mu.shape != self.rho.shape:
            raise ShapeError("mu and rho must have identical shapes")

    @property
    def sigma(self):
        return tc.softplus(self.rho)

    @property
    def n_weights(self):
        return int(self.mu.size)


@dataclass
class MaxPool:
    axis: str = "time"

    @property
    def array_axis(self):
        # batch layout is (N, C, H, W); time runs along W
        return 3 if self.axis == "time" else 2


@dataclass
class Flatten:
    pass


def sample_weights(layer: GaussianVariationalLayer, rng: RngStream) -> np.ndarray:
    eps = tc.gaussian_sample(rng, layer.mu.shape)
    return layer.mu + layer.sigma * eps


def layer_kl(layer: GaussianVariationalLayer) -> float:
    s0 = layer.prior_sigma
    sigma = layer.sigma
    terms = np.log(s0 / sigma) + (sigma**2 + layer.mu**2) / (2 * s0**2) - 0.5
    return float(np.sum(terms))


kl_divergence = layer_kl


def layer_kl_grads(layer: GaussianVariationalLayer):
    s0 = layer.prior_sigma
    sigma = layer.sigma
    dmu = layer.mu / s0**2
    dsigma = -1.0 / sigma + sigma / s0**2
    return dmu, dsigma * tc.sigmoid(layer.rho)


@dataclass
class BnnModel:
    arch: list
    input_shape: tuple
    nodes: list
    class_count: int = 3
    stats: dict = field(default_factory=dict)

    @property
    def layers(self):
        return [n for n in self.nodes if isinstance(n, GaussianVariationalLayer)]

    def activation_sites(self):
        """Parameterized layers whose output is quantized: all but the logits layer."""
        return list(range(len(self.layers) - 1))

    def quant_sites(self):
        sites = [(i, "weight") for i in range(len(self.layers))]
        return sites + [(i, "activation") for i in self.activation_sites()]

    def kl(self):
        return sum(layer_kl(layer) for layer in self.layers)

    def n_weights(self):
        return sum(layer.n_weights for layer in self.layers)

    def copy(self):
        return copy.deepcopy(self)

    def params(self):
        """Flat list of the trainable arrays, in (mu, rho, bias) order per layer."""
        out = []
        for layer in self.layers:
            out.extend([layer.mu, layer.rho, layer.bias])
        return out

    def same_architecture(self, other):
        return self.arch == other.arch and tuple(self.input_shape) == tuple(other.input_shape)


def build_model(arch=None, input_shape=(5, 1, 256), seed=0, class_count=3,
                init_mu_std=INIT_MU_STD, init_sigma=INIT_SIGMA, prior_sigma=PRIOR_SIGMA):
    arch = copy.deepcopy(DEFAULT_ARCH if arch is None else arch)
    rng = RngStream(int(seed)).child(0xB44)
    shape = tuple(input_shape)
    if len(shape) != 3:
        raise ShapeError("input_shape must be (C, H, W)")
    rho0 = inverse_softplus(init_sigma)
    nodes = []
    li = 0
    for spec in arch:
        kind = spec["kind"]
        if kind == "conv2d":
            c, h, w = shape
            wshape = (spec["filters"], c, spec["kh"], spec["kw"])
            if spec["kh"] > h or spec["kw"] > w:
                raise ShapeError(f"conv kernel {wshape[2:]} larger than feature map {(h, w)}")
            mu = init_mu_std * tc.gaussian_sample(rng.child(li), wshape)
            nodes.append(GaussianVariationalLayer(
                "conv2d", mu, np.full(wshape, rho0), np.zeros(spec["filters"]),
                prior_sigma, spec.get("activation", "relu"), int(spec.get("stride", 1))))
            ho, wo = tc.conv_output_shape(h, w, spec["kh"], spec["kw"], int(spec.get("stride", 1)))
            shape = (spec["filters"], ho, wo)
            li += 1
        elif kind == "maxpool":
            pool = MaxPool(spec.get("axis", "time"))
            ax = pool.array_axis - 1
            if shape[ax] < 2:
                raise ShapeError("pooling axis shorter than 2")
            shape = tuple(s // 2 if i == ax else s for i, s in enumerate(shape))
            nodes.append(pool)
        elif kind == "flatten":
            shape = (int(np.prod(shape)),)
            nodes.append(Flatten())
        elif kind == "dense":
            if len(shape) != 1:
                raise ShapeError("dense layer needs a flattened input")
            wshape = (shape[0], spec["units"])
            mu = init_mu_std * tc.gaussian_sample(rng.child(li), wshape)
            nodes.append(GaussianVariationalLayer(
                "dense", mu, np.full(wshape, rho0), np.zeros(spec["units"]),
                prior_sigma, spec.get("activation", "relu")))
            shape = (spec["units"],)
            li += 1
        else:
            raise ConfigError(f"unknown layer kind {kind!r}")
    if shape != (class_count,):
        raise ShapeError(f"network output shape {shape} != ({class_count},)")
    return BnnModel(arch, tuple(input_shape), nodes, class_count)


# -- forward / backward -----------------------------------------------------

def _check_plan(model, plan):
    missing = plan.missing_sites(model.quant_sites())
    if missing:
        raise ConfigError(f"quantization plan lacks sites {missing}")


def forward_batch(model: BnnModel, x, rng: RngStream, plan: QuantPlan | None = None,
                  act_hook=None, keep_cache=False):
    """Logits (N, classes) for inputs (N, C, H, W) under one posterior sample.

    ``act_hook(layer_index, activation)`` runs on every quantizable activation
    before it is quantized; calibration uses it to refresh the plan in place.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(model.input_shape):
        raise ShapeError(f"input shape {x.shape[1:]} != model input {tuple(model.input_shape)}")
    if plan is not None and act_hook is None:
        _check_plan(model, plan)
    act_sites = set(model.activation_sites())
    caches = []
    h = x
    li = 0
    for node in model.nodes:
        if isinstance(node, GaussianVariationalLayer):
            eps = tc.gaussian_sample(rng.child(li), node.mu.shape)
            w = node.mu + node.sigma * eps
            wmask = None
            if plan is not None:
                spec = plan.get(li, "weight")
                if spec is None:
                    raise ConfigError(f"no weight quantizer for layer {li}")
                w, wmask = fake_quant_with_mask(w, spec)
            if node.kind == "conv2d":
                z = tc.conv2d_batch(h, w, node.stride) + node.bias[None, :, None, None]
            else:
                z = tc.matmul(h, w) + node.bias
            a = tc.relu(z) if node.activation == "relu" else z
            amask = None
            if li in act_sites and (plan is not None or act_hook is not None):
                if act_hook is not None:
                    act_hook(li, a)
                if plan is not None:
                    spec = plan.get(li, "activation")
                    if spec is None:
                        raise ConfigError(f"no activation quantizer for layer {li}")
                    a, amask = fake_quant_with_mask(a, spec)
            if keep_cache:
                caches.append((h, eps, w, wmask, z, amask))
            h = a
            li += 1
        elif isinstance(node, MaxPool):
            length = h.shape[node.array_axis]
            h_in_shape = h.shape
            h, pick = tc.maxpool_pairs(h, node.array_axis)
            if keep_cache:
                caches.append((pick, length, h_in_shape))
        else:
            if keep_cache:
                caches.append(h.shape)
            h = h.reshape(h.shape[0], -1)
    return (h, caches) if keep_cache else h


def forward(model: BnnModel, window, rng: RngStream, quant: QuantPlan | None = None):
    """Logits (classes,) for a single standardized window of shape (C, H, W) or (C, T)."""
    x = np.asarray(window, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, None, :]
    return forward_batch(model, x[None], rng, quant)[0]


def backward_batch(model: BnnModel, caches, dlogits):
    """Gradients [(dmu, drho, dbias) per layer] from dL/dlogits and forward caches."""
    grads = [None] * len(model.layers)
    g = dlogits
    li = len(model.layers)
    for node, cache in zip(reversed(model.nodes), reversed(caches)):
        if isinstance(node, GaussianVariationalLayer):
            li -= 1
            h_in, eps, w, wmask, z, amask = cache
            if amask is not None:
                g = g * amask
            if node.activation == "relu":
                g = g * (z > 0)
            if node.kind == "conv2d":
                dx, dw = tc.conv2d_batch_backward(h_in, w, g, node.stride)
                db = g.sum(axis=(0, 2, 3))
            else:
                dw = tc.matmul(np.ascontiguousarray(h_in.T), g)
                db = g.sum(axis=0)
                dx = tc.matmul(g, np.ascontiguousarray(w.T)) if li > 0 else None
            if wmask is not None:
                dw = dw * wmask
            grads[li] = (dw, dw * eps * tc.sigmoid(node.rho), db)
            g = dx
        elif isinstance(node, MaxPool):
            pick, length, _ = cache
            g = tc.maxpool_pairs_backward(g, pick, node.array_axis, length)
        else:
            g = g.reshape(cache)
    return grads


def _data_loss_and_grad(logits, y):
    p = tc.softmax(logits, axis=1)
    n = len(y)
    py = p[np.arange(n), y]
    floored = py < tc.PROB_FLOOR
    losses = -np.log(np.maximum(py, tc.PROB_FLOOR))
    d = p.copy()
    d[np.arange(n), y] -= 1.0
    d[floored] = 0.0
    return float(losses.mean()), d / n


def elbo_loss(model: BnnModel, x, y, rng: RngStream, kl_weight=1.0, mc_samples=1,
              dataset_size=None, plan: QuantPlan | None = None, act_hook=None,
              data_weight=1.0, return_parts=False):
    """Loss and gradients of mean cross-entropy plus ``kl_weight * KL / dataset_size``.

    MC sample ``m`` uses ``rng.child(m)``. ``data_weight=0`` isolates the KL term.
    With ``return_parts`` a third item holds the separate data and KL values.
    """
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ConfigError("empty batch")
    n_total = len(y) if dataset_size is None else dataset_size
    grads = [[np.zeros_like(l.mu), np.zeros_like(l.rho), np.zeros_like(l.bias)]
             for l in model.layers]
    data = 0.0
    for m in range(mc_samples):
        logits, caches = forward_batch(model, x, rng.child(m), plan, act_hook, keep_cache=True)
        loss_m, dlogits = _data_loss_and_grad(logits, y)
        data += loss_m / mc_samples
        if data_weight:
            for acc, g in zip(grads, backward_batch(model, caches, dlogits * (data_weight / mc_samples))):
                for a, gi in zip(acc, g):
                    a += gi
    kl = model.kl() if kl_weight else 0.0
    loss = data_weight * data + (kl_weight * kl / n_total if kl_weight else 0.0)
    if kl_weight:
        for acc, layer in zip(grads, model.layers):
            dmu, drho = layer_kl_grads(layer)
            acc[0] += kl_weight * dmu / n_total
            acc[1] += kl_weight * drho / n_total
    if return_parts:
        return loss, grads, {"data": data, "kl": kl}
    return loss, grads


# -- training ---------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 40
    batch_size: int = 16
    mc_train_samples: int = 2
    kl_anneal_fraction: float = 0.5
    kl_weight_max: float = 0.01
    momentum: float = 0.9
    grad_clip: float = 5.0
    val_mc_samples: int = 8
    lr_schedule: str = "cosine"
    seed: int = 0

    def validate(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("learning_rate, epochs and batch_size must be positive")
        if self.mc_train_samples < 1 or self.val_mc_samples < 1:
            raise ConfigError("Monte-Carlo sample counts must be positive")
        if not 0.0 <= self.kl_anneal_fraction <= 1.0:
            raise ConfigError("kl_anneal_fraction must lie in [0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")

    def to_dict(self):
        return asdict(self)


def kl_schedule(step, total_steps, anneal_fraction):
    """Linear 0 -> 1 ramp over the first ``anneal_fraction`` of steps, then 1."""
    ramp = anneal_fraction * total_steps
    if ramp <= 0:
        return 1.0
    return min(1.0, (step + 1) / ramp)


def mean_probs(model, x, n_samples, rng: RngStream, plan=None):
    acc = np.zeros((len(x), model.class_count))
    for s in range(n_samples):
        acc += tc.softmax(forward_batch(model, x, rng.child(s), plan), axis=1)
    return acc / n_samples


def sgd_loop(model: BnnModel, x, y, config: TrainConfig, rng: RngStream, *,
             plan=None, kl_weight_fn=None, epoch_start=None, epoch_end=None,
             x_val=None, y_val=None, act_hook_for_epoch=None):
    """Minibatch SGD with momentum on the ELBO; mutates ``model`` in place."""
    n = len(y)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = steps_per_epoch * config.epochs
    velocity = [np.zeros_like(p) for p in model.params()]
    history = {"loss": [], "data_loss": [], "val_accuracy": [], "kl_weight": []}
    step = 0
    for epoch in range(config.epochs):
        if epoch_start is not None:
            epoch_start(epoch)
        hook = act_hook_for_epoch(epoch) if act_hook_for_epoch else None
        order = rng.child(epoch, 0).generator().permutation(n)
        running = 0.0
        running_data = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            kw = kl_weight_fn(step, total) if kl_weight_fn else 1.0
            loss, grads, parts = elbo_loss(model, x[idx], y[idx], rng.child(epoch, b + 1), kw,
                                           config.mc_train_samples, n, plan, hook,
                                           return_parts=True)
            flat = [g for triple in grads for g in triple]
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in flat):
                raise NumericError(
                    f"non-finite loss at epoch {epoch} step {b} (loss={loss}); "
                    f"try a smaller learning rate than {config.learning_rate}")
            if config.grad_clip:
                norm = math.sqrt(sum(float(np.sum(g * g)) for g in flat))
                if norm > config.grad_clip:
                    flat = [g * (config.grad_clip / norm) for g in flat]
            lr = config.learning_rate
            if config.lr_schedule == "cosine":
                lr *= 0.5 * (1.0 + math.cos(math.pi * step / total))
            for p, v, g in zip(model.params(), velocity, flat):
                v *= config.momentum
                v -= lr * g
                p += v
            running += loss * len(idx)
            running_data += parts["data"] * len(idx)
            step += 1
        history["loss"].append(running / n)
        history["data_loss"].append(running_data / n)
        history["kl_weight"].append(kw)
        if x_val is not None:
            probs = mean_probs(model, x_val, config.val_mc_samples,
                               rng.child(epoch, 0xEA1), plan)
            history["val_accuracy"].append(float(np.mean(probs.argmax(1) == y_val)))
        if epoch_end is not None:
            epoch_end(epoch, history)
    return history


def train_fp32(model: BnnModel, dataset, config: TrainConfig):
    """Pre-train a copy of ``model`` on the train split; returns (model, history)."""
    config.validate()
    for name in ("train", "val"):
        labels = {w.label for w in dataset.split(name)}
        if labels - {1, 2, 3}:
            raise ConfigError(f"split {name!r} holds unseen-fault labels {sorted(labels)}")
    trained = model.copy()
    trained.stats = copy.deepcopy(dataset.stats)
    x, y, _ = dataset.arrays("train")
    xv, yv, _ = dataset.arrays("val")
    history = sgd_loop(
        trained, x, y, config, RngStream(int(config.seed)).child(0x7A1),
        kl_weight_fn=lambda s, t: config.kl_weight_max * kl_schedule(s, t, config.kl_anneal_fraction),
        x_val=xv, y_val=yv)
    return trained, history


# -- checkpoints ------------------------------------------------------------

def _arr(a):
    return {"shape": list(a.shape), "data": np.asarray(a).reshape(-1).tolist()}


def _unarr(d):
    return np.asarray(d["data"], dtype=np.float64).reshape(d["shape"])


def model_to_dict(model: BnnModel, plan: QuantPlan | None = None, extra=None):
    return {
        "format": CHECKPOINT_FORMAT,
        "arch": model.arch,
        "input_shape": list(model.input_shape),
        "class_count": model.class_count,
        "layers": [
            {"kind": l.kind, "activation": l.activation, "stride": l.stride,
             "prior_sigma": l.prior_sigma, "mu": _arr(l.mu), "rho": _arr(l.rho),
             "bias": _arr(l.bias)}
            for l in model.layers
        ],
        "standardization": model.stats,
        "quant_plan": None if plan is None else plan.to_list(),
        **(extra or {}),
    }


def model_from_dict(d):
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"unsupported checkpoint format {d.get('format')!r}")
    model = build_model(d["arch"], tuple(d["input_shape"]), class_count=d["class_count"])
    for layer, ld in zip(model.layers, d["layers"]):
        layer.mu = _unarr(ld["mu"])
        layer.rho = _unarr(ld["rho"])
        layer.bias = _unarr(ld["bias"])
        layer.prior_sigma = float(ld["prior_sigma"])
    model.stats = d.get("standardization") or {}
    plan = None if d.get("quant_plan") is None else QuantPlan.from_list(d["quant_plan"])
    return model, plan


def save_checkpoint(path, model: BnnModel, plan: QuantPlan | None = None, extra=None):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(model_to_dict(model, plan, extra)) + "\n")
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return (model, plan, raw dict)."""
    d = json.loads(Path(path).read_text())
    model, plan = model_from_dict(d)
    return model, plan, d
