"""Cost and memory models, the bit-width sweep, and constrained bit-width selection."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields, replace

from .bayes_net import BnnModel
from .errors import ConfigError, DomainError
from .qat_trainer import QatConfig, fidelity_epsilon, qat_finetune
from .quantizer import SUPPORTED_BITS
from .tensor_core import RngStream, conv_output_shape
from .uncertainty_eval import evaluate

# per quantized site: alpha, beta and scale as float32
SITE_META_BYTES = 12
BIAS_BYTES = 4

SWEEP_COLUMNS = ("b", "accuracy", "ece", "cost", "memory_payload_bytes",
                 "memory_total_bytes", "epsilon", "seed")


def layer_macs(arch, input_shape):
    """Multiply-accumulate count of each parameterized layer for one input.

    ``input_shape`` is (C, H, W) for conv stacks or (features,) for a dense-only
    stack. Returns a list with one entry per conv/dense layer.
    """
    shape = tuple(int(s) for s in input_shape)
    out = []
    for spec in arch:
        kind = spec["kind"]
        if kind == "conv2d":
            if len(shape) != 3:
                raise DomainError("conv layer needs a (C, H, W) input")
            c, h, w = shape
            stride = int(spec.get("stride", 1))
            ho, wo = conv_output_shape(h, w, spec["kh"], spec["kw"], stride)
            out.append(spec["filters"] * c * spec["kh"] * spec["kw"] * ho * wo)
            shape = (spec["filters"], ho, wo)
        elif kind == "maxpool":
            ax = 2 if spec.get("axis", "time") == "time" else 1
            shape = tuple(s // 2 if i == ax else s for i, s in enumerate(shape))
        elif kind == "flatten":
            shape = (math.prod(shape),)
        elif kind == "dense":
            if len(shape) != 1:
                raise DomainError("dense layer needs a flattened input")
            out.append(shape[0] * spec["units"])
            shape = (spec["units"],)
        else:
            raise DomainError(f"unknown layer kind {kind!r}")
    return out


def _arch_and_shape(model, input_shape):
    if isinstance(model, BnnModel):
        return model.arch, model.input_shape
    if input_shape is None:
        raise DomainError("an architecture list needs an input_shape")
    return model, input_shape


def count_macs(model, input_shape=None) -> int:
    arch, shape = _arch_and_shape(model, input_shape)
    return sum(layer_macs(arch, shape))


def compute_cost(model, b_weights: int, b_acts: int, input_shape=None) -> float:
    """Bit-product cost proxy: MACs scaled by (b_w * b_a) / (32 * 32)."""
    if b_weights < 1 or b_acts < 1:
        raise DomainError("bit widths must be positive")
    return count_macs(model, input_shape) * (b_weights * b_acts) / 1024.0


def _param_counts(model, input_shape):
    """(weights, biases, weight tensors, activation sites) for a model or arch."""
    if isinstance(model, BnnModel):
        layers = model.layers
        return (sum(l.mu.size for l in layers), sum(l.bias.size for l in layers),
                len(layers), len(model.activation_sites()))
    arch, shape = _arch_and_shape(model, input_shape)
    weights = biases = n = 0
    cur = tuple(shape)
    for spec in arch:
        kind = spec["kind"]
        if kind == "conv2d":
            weights += spec["filters"] * cur[0] * spec["kh"] * spec["kw"]
            biases += spec["filters"]
            ho, wo = conv_output_shape(cur[1], cur[2], spec["kh"], spec["kw"],
                                       int(spec.get("stride", 1)))
            cur = (spec["filters"], ho, wo)
            n += 1
        elif kind == "maxpool":
            ax = 2 if spec.get("axis", "time") == "time" else 1
            cur = tuple(s // 2 if i == ax else s for i, s in enumerate(cur))
        elif kind == "flatten":
            cur = (math.prod(cur),)
        elif kind == "dense":
            weights += cur[0] * spec["units"]
            biases += spec["units"]
            cur = (spec["units"],)
            n += 1
    return weights, biases, n, max(n - 1, 0)


@dataclass(frozen=True)
class MemoryFootprint:
    payload_bytes: int
    overhead_bytes: int

    @property
    def total_bytes(self):
        return self.payload_bytes + self.overhead_bytes


def memory_footprint(model, b: int, input_shape=None) -> MemoryFootprint:
    """Deployed size: one b-bit value per weight, plus fixed metadata.

    The metadata overhead is float32 biases and three float32 numbers
    (alpha, beta, scale) per quantized site. It does not depend on ``b``.
    """
    if b < 1:
        raise DomainError("bit width must be positive")
    weights, biases, n_tensors, n_acts = _param_counts(model, input_shape)
    payload = -(-weights * b // 8)
    overhead = biases * BIAS_BYTES + (n_tensors + n_acts) * SITE_META_BYTES
    return MemoryFootprint(payload, overhead)


@dataclass(frozen=True)
class BitWidthReport:
    b: int
    accuracy: float
    ece: float
    cost: float
    memory_payload_bytes: int
    memory_total_bytes: int
    epsilon: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0 or not 0.0 <= self.ece <= 1.0:
            raise DomainError("accuracy and ece must lie in [0, 1]")
        if self.cost <= 0 or self.memory_payload_bytes <= 0:
            raise DomainError("cost and memory must be positive")


@dataclass(frozen=True)
class SelectionConstraints:
    a_min: float
    u_max: float


@dataclass(frozen=True)
class Selection:
    feasible: bool
    b: int | None
    report: BitWidthReport | None

    def to_dict(self):
        return {"feasible": self.feasible, "b": self.b,
                "report": None if self.report is None else asdict(self.report)}


def _satisfies(r: BitWidthReport, c: SelectionConstraints):
    return r.accuracy >= c.a_min and r.ece <= c.u_max


def select_bitwidth(reports, constraints: SelectionConstraints) -> Selection:
    """Cheapest report meeting both constraints; ties go to the smaller b.

    When nothing is feasible the result carries the report with the smallest
    total constraint violation (then lowest cost, then smallest b).
    """
    reports = list(reports)
    if not reports:
        raise DomainError("no reports to select from")
    feasible = [r for r in reports if _satisfies(r, constraints)]
    if feasible:
        best = min(feasible, key=lambda r: (r.cost, r.b))
        return Selection(True, best.b, best)

    def violation(r):
        return max(0.0, constraints.a_min - r.accuracy) + max(0.0, r.ece - constraints.u_max)

    closest = min(reports, key=lambda r: (violation(r), r.cost, r.b))
    return Selection(False, None, closest)


@dataclass
class SweepConfig:
    qat: QatConfig = field(default_factory=QatConfig)
    eval_samples: int = 64
    fidelity_samples: int = 32
    n_bins: int = 10
    seed: int = 0

    def validate(self):
        if self.eval_samples < 1 or self.fidelity_samples < 1 or self.n_bins < 1:
            raise ConfigError("sample and bin counts must be positive")


def sweep_bitwidths(pretrained: BnnModel, dataset, bits, config: SweepConfig | None = None):
    """One report per bit width, sorted by b; b=32 is the un-fine-tuned float model.

    Every quantized leg fine-tunes from the same ``pretrained`` weights and is
    evaluated with the same random streams.
    """
    config = SweepConfig() if config is None else config
    config.validate()
    bits = sorted(set(int(b) for b in bits) | {32})
    bad = [b for b in bits if b not in SUPPORTED_BITS]
    if bad:
        raise ConfigError(f"unsupported bit widths {bad}")
    eval_rng = RngStream(int(config.seed)).child(0x5EE9)
    fid_rng = RngStream(int(config.seed)).child(0xF1D)
    x_fid, _, _ = dataset.arrays("test_seen")
    reports = []
    for b in bits:
        if b == 32:
            model, plan, eps = pretrained, None, 0.0
        else:
            model, plan, _ = qat_finetune(pretrained, dataset, replace(config.qat, bits=b))
            eps = fidelity_epsilon(pretrained, model, plan, x_fid,
                                   config.fidelity_samples, fid_rng)
        rep = evaluate(model, dataset, config.eval_samples, eval_rng, plan, n_bins=config.n_bins)
        mem = memory_footprint(pretrained, b)
        reports.append(BitWidthReport(
            b=b, accuracy=rep.accuracy, ece=rep.ece, cost=compute_cost(pretrained, b, b),
            memory_payload_bytes=mem.payload_bytes, memory_total_bytes=mem.total_bytes,
            epsilon=eps, seed=int(config.seed)))
    return reports


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for r in reports:
        writer.writerow([r.b, repr(float(r.accuracy)), repr(float(r.ece)), repr(float(r.cost)),
                         r.memory_payload_bytes, r.memory_total_bytes,
                         repr(float(r.epsilon)), r.seed])
    return buf.getvalue()


def reports_from_csv(text: str):
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and set(SWEEP_COLUMNS) - set(rows[0]):
        raise ConfigError(f"sweep table lacks columns {sorted(set(SWEEP_COLUMNS) - set(rows[0]))}")
    ints = {f.name for f in fields(BitWidthReport) if f.type in ("int", int)}
    out = []
    for row in rows:
        kw = {k: (int(row[k]) if k in ints else float(row[k])) for k in SWEEP_COLUMNS}
        out.append(BitWidthReport(**kw))
    return out
