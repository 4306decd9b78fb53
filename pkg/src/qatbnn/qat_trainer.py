"""Quantization-aware fine-tuning, direct post-training quantization, and the
float-vs-quantized fidelity measurement."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .bayes_net import BnnModel, TrainConfig, forward_batch, mean_probs, sgd_loop
from .errors import ConfigError
from .quantizer import SUPPORTED_BITS, QuantPlan, QuantSpec, RangeCalibrator
from .tensor_core import RngStream


@dataclass
class QatConfig:
    bits: int = 8
    epochs: int = 10
    learning_rate: float = 0.005
    batch_size: int = 16
    mc_train_samples: int = 2
    kl_weight: float = 0.01
    weight_sigma_k: float = 3.0
    act_ema_gamma: float = 0.99
    calibration_epochs: int = 1
    momentum: float = 0.9
    grad_clip: float = 5.0
    val_mc_samples: int = 8
    seed: int = 0

    @classmethod
    def from_pretraining(cls, train_cfg: TrainConfig, bits, seed=None, **overrides):
        """Default schedule: a quarter of the pre-training epochs at a tenth of its rate."""
        kw = dict(
            bits=bits,
            epochs=max(1, train_cfg.epochs // 4),
            learning_rate=train_cfg.learning_rate / 10.0,
            batch_size=train_cfg.batch_size,
            mc_train_samples=train_cfg.mc_train_samples,
            kl_weight=train_cfg.kl_weight_max,
            momentum=train_cfg.momentum,
            grad_clip=train_cfg.grad_clip,
            val_mc_samples=train_cfg.val_mc_samples,
            seed=train_cfg.seed if seed is None else seed,
        )
        kw.update(overrides)
        return cls(**kw)

    def validate(self):
        if self.bits not in SUPPORTED_BITS:
            raise ConfigError(f"bit width {self.bits} not in {SUPPORTED_BITS}")
        if self.epochs < 1:
            raise ConfigError("QAT needs at least one epoch")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.mc_train_samples < 1:
            raise ConfigError("learning_rate, batch_size and mc_train_samples must be positive")
        if not 1 <= self.calibration_epochs <= self.epochs:
            raise ConfigError("calibration_epochs must lie in [1, epochs]")

    def to_dict(self):
        return asdict(self)


def weight_plan(model: BnnModel, bits: int, sigma_k: float) -> QuantPlan:
    """Symmetric per-tensor weight ranges covering ``|mu| + sigma_k * sigma``."""
    plan = QuantPlan()
    for i, layer in enumerate(model.layers):
        bound = float(np.max(np.abs(layer.mu) + sigma_k * layer.sigma))
        bound = max(bound, 1e-8)
        plan.set(i, "weight", QuantSpec(bits, -bound, bound, "weight"))
    return plan


def _activation_hook(plan, calibrators, bits):
    def hook(layer, act):
        cal = calibrators[layer]
        cal.update(act)
        plan.set(layer, "activation", cal.spec(bits, "activation"))
    return hook


def _plan_ranges(plan: QuantPlan):
    return {f"{layer}:{site}": [spec.alpha, spec.beta]
            for (layer, site), spec in sorted(plan.specs.items())}


def qat_finetune(pretrained: BnnModel, dataset, config: QatConfig):
    """Fine-tune a copy of ``pretrained`` with fake-quantized weight samples and
    activations. Returns (model, plan, history).

    Weight ranges are fixed from the starting posterior. Activation ranges
    follow an EMA of batch min/max during the calibration epochs and are
    frozen afterwards.
    """
    config.validate()
    model = pretrained.copy()
    x, y, _ = dataset.arrays("train")
    xv, yv, _ = dataset.arrays("val")
    plan = weight_plan(model, config.bits, config.weight_sigma_k)
    calibrators = {i: RangeCalibrator("ema", config.act_ema_gamma, symmetric=True)
                   for i in model.activation_sites()}
    hook = _activation_hook(plan, calibrators, config.bits)
    history_ranges = []

    def hook_for_epoch(epoch):
        return hook if epoch < config.calibration_epochs else None

    def epoch_end(epoch, history):
        history_ranges.append(_plan_ranges(plan))

    loop_cfg = TrainConfig(
        learning_rate=config.learning_rate, epochs=config.epochs,
        batch_size=config.batch_size, mc_train_samples=config.mc_train_samples,
        momentum=config.momentum, grad_clip=config.grad_clip,
        val_mc_samples=config.val_mc_samples, seed=config.seed)
    history = sgd_loop(
        model, x, y, loop_cfg, RngStream(int(config.seed)).child(0x9A7, config.bits),
        plan=plan, kl_weight_fn=lambda s, t: config.kl_weight,
        x_val=xv, y_val=yv, act_hook_for_epoch=hook_for_epoch, epoch_end=epoch_end)
    history["ranges"] = history_ranges
    history["freeze_epoch"] = config.calibration_epochs
    return model, plan, history


def post_training_quantize(pretrained: BnnModel, bits: int, calibration_x, seed=0):
    """Direct quantization: no weight updates.

    Weight ranges are the symmetric max of the posterior means; activation
    ranges come from one min/max pass over ``calibration_x`` (N, C, H, W).
    """
    if bits not in SUPPORTED_BITS:
        raise ConfigError(f"bit width {bits} not in {SUPPORTED_BITS}")
    calibration_x = np.asarray(calibration_x, dtype=np.float64)
    if calibration_x.ndim != 4 or len(calibration_x) == 0:
        raise ConfigError("calibration slice is empty")
    model = pretrained.copy()
    plan = weight_plan(model, bits, sigma_k=0.0)
    calibrators = {i: RangeCalibrator("minmax", symmetric=True) for i in model.activation_sites()}
    forward_batch(model, calibration_x, RngStream(int(seed)).child(0x9C0),
                  plan, _activation_hook(plan, calibrators, bits))
    return model, plan


def fidelity_epsilon(reference: BnnModel, quantized: BnnModel, plan: QuantPlan | None,
                     x, mc_samples: int, rng: RngStream, reference_plan: QuantPlan | None = None):
    """Largest L2 gap between the two models' MC-mean class probabilities over ``x``.

    Both models read the same random streams, so weight-sample noise is paired.
    """
    if not reference.same_architecture(quantized):
        raise ConfigError("reference and quantized models differ in architecture")
    p_ref = mean_probs(reference, x, mc_samples, rng, reference_plan)
    p_q = mean_probs(quantized, x, mc_samples, rng, plan)
    return float(np.max(np.linalg.norm(p_ref - p_q, axis=1)))
