"""Propagator and modulator gates.

The propagator fuses a stage's bottom-up features with the feedback arriving
from the stage above and resamples the result for the next top-down hop.
The modulator turns a feedback signal into a (0, 1) multiplicative gate over
the features entering a backbone stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .tensor import Parameter, Tensor

DEFAULT_PYRAMID_RATES = (1, 3, 5, 7)


def he_normal(rng: np.random.Generator, shape, dtype=np.float32) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def conv_params(prefix: str, rng, cout: int, cin: int, k: int, dtype=np.float32,
                bias_value: float = 0.0):
    w = Parameter(f"{prefix}.weight", he_normal(rng, (cout, cin, k, k), dtype))
    b = Parameter(f"{prefix}.bias", np.full(cout, bias_value, dtype=dtype))
    return w, b


@dataclass
class PropagatorParams:
    wa: Parameter  # 3x3 on bottom-up features
    ba: Parameter
    wb: Parameter  # 3x3 on incoming feedback
    bb: Parameter
    wc: Parameter  # 1x1 fusion, sets outgoing feedback width
    bc: Parameter

    def __post_init__(self):
        if self.wc.shape[1] != self.wa.shape[0] + self.wb.shape[0]:
            raise ValueError("propagator: fusion input channels must equal "
                             "W_a out + W_b out")

    @property
    def out_channels(self) -> int:
        return self.wc.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.wa, self.ba, self.wb, self.bb, self.wc, self.bc]

    @classmethod
    def init(cls, prefix: str, rng, features_in: int, feedback_in: int, width: int,
             dtype=np.float32) -> "PropagatorParams":
        wa, ba = conv_params(f"{prefix}.wa", rng, width, features_in, 3, dtype)
        wb, bb = conv_params(f"{prefix}.wb", rng, width, feedback_in, 3, dtype)
        wc, bc = conv_params(f"{prefix}.wc", rng, width, 2 * width, 1, dtype)
        return cls(wa, ba, wb, bb, wc, bc)


@dataclass
class ModulatorParams:
    w_pre: Parameter
    b_pre: Parameter
    w_squash: Parameter
    b_squash: Parameter
    pyramid_rates: tuple = DEFAULT_PYRAMID_RATES

    def __post_init__(self):
        self.pyramid_rates = tuple(int(r) for r in self.pyramid_rates)
        expected = self.w_pre.shape[0] * (1 + len(self.pyramid_rates))
        if self.w_squash.shape[1] != expected:
            raise ValueError(f"modulator: squash expects {self.w_squash.shape[1]} input "
                             f"channels, pyramid produces {expected}")

    @property
    def out_channels(self) -> int:
        return self.w_squash.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.w_pre, self.b_pre, self.w_squash, self.b_squash]

    @classmethod
    def init(cls, prefix: str, rng, feedback_in: int, features: int,
             pyramid_rates=DEFAULT_PYRAMID_RATES, dtype=np.float32,
             squash_bias: float = 0.0) -> "ModulatorParams":
        w_pre, b_pre = conv_params(f"{prefix}.pre", rng, features, feedback_in, 1, dtype)
        w_sq, b_sq = conv_params(f"{prefix}.squash", rng, features,
                                 features * (1 + len(pyramid_rates)), 1, dtype,
                                 bias_value=squash_bias)
        return cls(w_pre, b_pre, w_sq, b_sq, tuple(pyramid_rates))


def _spatial(t: Tensor) -> tuple[int, int]:
    return t.shape[2], t.shape[3]


def _to_size(t: Tensor, h: int, w: int) -> Tensor:
    return tc.bilinear_upsample(t, h, w)


def propagator_forward(feedback_next: Tensor, bottom_up: Tensor, params: PropagatorParams,
                       out_h: int, out_w: int) -> Tensor:
    """Compute the outgoing feedback for one stage.

    Both 3x3 paths are followed by ReLU; whichever path is spatially smaller
    is bilinearly upsampled to the other's size before concatenation.  The
    1x1 fusion output is upsampled to ``(out_h, out_w)``.
    """
    if bottom_up.shape[1] != params.wa.shape[1]:
        raise ValueError(f"propagator: bottom-up has {bottom_up.shape[1]} channels, "
                         f"W_a expects {params.wa.shape[1]}")
    if feedback_next.shape[1] != params.wb.shape[1]:
        raise ValueError(f"propagator: feedback has {feedback_next.shape[1]} channels, "
                         f"W_b expects {params.wb.shape[1]}")
    a = tc.relu(tc.conv2d(bottom_up, params.wa, params.ba, stride=1, pad=1))
    b = tc.relu(tc.conv2d(feedback_next, params.wb, params.bb, stride=1, pad=1))
    (ha, wa_), (hb, wb_) = _spatial(a), _spatial(b)
    h, w = max(ha, hb), max(wa_, wb_)
    if (ha, wa_) != (h, w):
        if ha > h or wa_ > w:
            raise ValueError("propagator: spatial dims not reconcilable")
        a = _to_size(a, h, w)
    if (hb, wb_) != (h, w):
        b = _to_size(b, h, w)
    fused = tc.conv2d(tc.concat_channels(a, b), params.wc, params.bc)
    if out_h < h or out_w < w:
        raise ValueError(f"propagator: target {out_h}x{out_w} smaller than fused {h}x{w}")
    return tc.bilinear_upsample(fused, out_h, out_w)


def effective_rates(rates, h: int, w: int) -> list[tuple[int, int]]:
    """Pyramid grid sizes, each rate clamped to the available spatial extent."""
    return [(min(r, h), min(r, w)) for r in rates]


def modulating_signal(feedback: Tensor, params: ModulatorParams) -> Tensor:
    """The (0, 1) gate computed from a feedback tensor."""
    x = tc.conv2d(feedback, params.w_pre, params.b_pre)
    h, w = _spatial(x)
    branches = [x]
    for rh, rw in effective_rates(params.pyramid_rates, h, w):
        pooled = tc.adaptive_avg_pool(x, rh, rw)
        branches.append(tc.bilinear_upsample(pooled, h, w))
    pyramid = tc.concat_channels(*branches)
    return tc.sigmoid(tc.conv2d(pyramid, params.w_squash, params.b_squash))


def modulator_forward(feedback: Tensor, features: Tensor, params: ModulatorParams,
                      active: bool) -> Tensor:
    if not active:
        return features
    if _spatial(feedback) != _spatial(features):
        raise ValueError(f"modulator: feedback {feedback.shape} and features "
                         f"{features.shape} differ spatially")
    if params.out_channels != features.shape[1]:
        raise ValueError(f"modulator: squash emits {params.out_channels} channels, "
                         f"features have {features.shape[1]}")
    return tc.eltwise_mul(features, modulating_signal(feedback, params))


@dataclass
class FeedbackProjection:
    """The 1x1 projection used by the non-cascaded routing baselines."""

    weight: Parameter
    bias: Parameter

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    @classmethod
    def init(cls, prefix: str, rng, cin: int, width: int, dtype=np.float32):
        return cls(*conv_params(prefix, rng, width, cin, 1, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return tc.conv2d(x, self.weight, self.bias)


@dataclass
class GateSet:
    """All gate parameters of one network, keyed by 1-based stage index."""

    propagators: dict = field(default_factory=dict)
    projections: dict = field(default_factory=dict)
    modulators: dict = field(default_factory=dict)

    def parameters(self) -> list[Parameter]:
        out = []
        for group in (self.propagators, self.projections, self.modulators):
            for k in sorted(group):
                out.extend(group[k].parameters())
        return out
