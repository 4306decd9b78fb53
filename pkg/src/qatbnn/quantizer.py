"""Fake quantization on a signed, zero-point-free integer grid.

A value x maps to ``clip(round(x / S), -2**(b-1), 2**(b-1) - 1) * S`` with
``S = (beta - alpha) / (2**b - 1)``. Rounding is half away from zero. The
backward rule is the clipped straight-through estimator: gradients pass
unchanged where the rounded integer is inside the grid, and are zeroed where
it saturates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, DomainError, ShapeError

SUPPORTED_BITS = (2, 3, 4, 8, 16, 32)
SITES = ("weight", "activation")


def compute_scale(alpha: float, beta: float, bits: int) -> float:
    if bits < 2:
        raise DomainError(f"bit width must be >= 2, got {bits}")
    if not alpha < beta:
        raise DomainError(f"clip range requires alpha < beta, got [{alpha}, {beta}]")
    return (beta - alpha) / (2**bits - 1)


def grid_bounds(bits: int) -> tuple[int, int]:
    return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    alpha: float
    beta: float
    site: str = "weight"
    scale: float = field(init=False)

    def __post_init__(self):
        if self.site not in SITES:
            raise ConfigError(f"unknown quantization site {self.site!r}")
        object.__setattr__(self, "scale", compute_scale(self.alpha, self.beta, self.bits))

    @property
    def qmin(self) -> int:
        return grid_bounds(self.bits)[0]

    @property
    def qmax(self) -> int:
        return grid_bounds(self.bits)[1]

    def to_dict(self):
        return {"bits": self.bits, "alpha": self.alpha, "beta": self.beta,
                "scale": self.scale, "site": self.site}

    @classmethod
    def from_dict(cls, d):
        spec = cls(int(d["bits"]), float(d["alpha"]), float(d["beta"]), d["site"])
        if "scale" in d and float(d["scale"]) != spec.scale:
            raise ConfigError("stored scale disagrees with (alpha, beta, bits)")
        return spec


def _fq(x, spec: QuantSpec):
    x = np.asarray(x, dtype=np.float64)
    flat = np.ascontiguousarray(x.reshape(-1))
    q, mask = kernels.fake_quant(flat, spec.scale, float(spec.qmin), float(spec.qmax))
    return np.asarray(q).reshape(x.shape), np.asarray(mask).reshape(x.shape)


def quantize(x, spec: QuantSpec):
    """Quantize-dequantize a scalar or array. Scalars come back as float."""
    q, _ = _fq(x, spec)
    return float(q) if q.ndim == 0 else q


def fake_quant_forward(x, spec: QuantSpec) -> np.ndarray:
    return _fq(x, spec)[0]


def fake_quant_with_mask(x, spec: QuantSpec):
    """Forward values plus the STE pass-through mask, computed in one sweep."""
    return _fq(x, spec)


def ste_backward(upstream_grad, x, spec: QuantSpec) -> np.ndarray:
    g = np.asarray(upstream_grad, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if g.shape != x.shape:
        raise ShapeError(f"gradient shape {g.shape} != input shape {x.shape}")
    _, mask = _fq(x, spec)
    return np.where(mask, g, 0.0)


class RangeCalibrator:
    """Running clip-range estimate from a stream of tensors.

    ``mode='minmax'`` keeps the global min/max; ``mode='ema'`` keeps an
    exponential moving average of per-batch min/max (first batch initializes).
    """

    def __init__(self, mode="minmax", gamma=0.99, symmetric=False):
        if mode not in ("minmax", "ema"):
            raise ConfigError(f"unknown calibration mode {mode!r}")
        if mode == "ema" and not 0.0 <= gamma <= 1.0:
            raise ConfigError("ema factor must lie in [0, 1]")
        self.mode = mode
        self.gamma = gamma
        self.symmetric = symmetric
        self.lo = None
        self.hi = None
        self.count = 0

    def update(self, t):
        t = np.asarray(t, dtype=np.float64)
        if t.size == 0:
            return
        lo, hi = float(t.min()), float(t.max())
        if self.count == 0:
            self.lo, self.hi = lo, hi
        elif self.mode == "minmax":
            self.lo, self.hi = min(self.lo, lo), max(self.hi, hi)
        else:
            g = self.gamma
            self.lo = g * self.lo + (1.0 - g) * lo
            self.hi = g * self.hi + (1.0 - g) * hi
        self.count += 1

    def range(self) -> tuple[float, float]:
        if self.count == 0:
            raise DomainError("no observations to calibrate from")
        lo, hi = self.lo, self.hi
        if self.symmetric:
            m = max(abs(lo), abs(hi))
            return -m, m
        return lo, hi

    def spec(self, bits, site, min_width=1e-8):
        lo, hi = self.range()
        if hi - lo < min_width:
            # degenerate (e.g. a dead ReLU site): widen so the scale stays positive
            mid = 0.5 * (lo + hi)
            lo, hi = mid - min_width / 2, mid + min_width / 2
        return QuantSpec(bits, lo, hi, site)


def calibrate_range(observations, mode="minmax", symmetric=False, gamma=0.99):
    cal = RangeCalibrator(mode, gamma, symmetric)
    for t in observations:
        cal.update(t)
    return cal.range()


@dataclass
class QuantPlan:
    """Per-site quantizers keyed by (parameterized layer index, site)."""

    specs: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.specs[key]

    def get(self, layer, site):
        return self.specs.get((layer, site))

    def set(self, layer, site, spec: QuantSpec):
        self.specs[(layer, site)] = spec

    def missing_sites(self, required):
        return [key for key in required if key not in self.specs]

    @property
    def bits(self):
        widths = {s.bits for s in self.specs.values()}
        return widths.pop() if len(widths) == 1 else sorted(widths)

    def to_list(self):
        return [{"layer": layer, **spec.to_dict()}
                for (layer, site), spec in sorted(self.specs.items())]

    @classmethod
    def from_list(cls, items):
        plan = cls()
        for d in items:
            spec = QuantSpec.from_dict(d)
            plan.set(int(d["layer"]), spec.site, spec)
        return plan
