"""DIGNet assembly and unrolled iterative inference.

Iteration 1 is a plain feedforward pass with every modulator bypassed.  Each
later iteration first turns the previous iteration's stage outputs into one
feedback signal per stage (according to the routing variant), then repeats
the feedforward pass with the masked modulators re-weighting the input of
their stage.  Parameters are shared across iterations.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as tc
from .backbone import Backbone, BackboneConfig, build_backbone, default_backbone_config
from .gates import (
    DEFAULT_PYRAMID_RATES,
    FeedbackProjection,
    GateSet,
    ModulatorParams,
    PropagatorParams,
    modulator_forward,
    propagator_forward,
)
from .rng import stream
from .tensor import Parameter, Tape, Tensor


class RoutingVariant(str, enum.Enum):
    NONE = "none"
    CASCADED_DIG = "cascaded_dig"
    LAST_LAYER = "last_layer"
    STAGE_WISE = "stage_wise"


FEEDBACK_SEEDS = ("logits", "last_features")


def default_feedback_widths(num_stages: int) -> tuple:
    """Top-down decreasing widths for F^(n-1) ... F^1, listed bottom-up."""
    top_down = [32, 32, 16, 16, 8]
    if num_stages - 1 > len(top_down):
        top_down = top_down + [8] * (num_stages - 1 - len(top_down))
    return tuple(reversed(top_down[: num_stages - 1]))


@dataclass(frozen=True)
class NetworkConfig:
    backbone: BackboneConfig = field(default_factory=default_backbone_config)
    routing: RoutingVariant = RoutingVariant.CASCADED_DIG
    T: int = 2
    gating_mask: Optional[tuple] = None
    feedback_widths: Optional[tuple] = None
    feedback_seed: str = "logits"
    pyramid_rates: tuple = DEFAULT_PYRAMID_RATES
    squash_bias: float = 4.0  # sigmoid(4) ~ 0.982: gates start close to identity

    def __post_init__(self):
        n = self.backbone.num_stages
        object.__setattr__(self, "routing", RoutingVariant(self.routing))
        mask = (True,) * n if self.gating_mask is None else tuple(bool(m) for m in self.gating_mask)
        widths = (default_feedback_widths(n) if self.feedback_widths is None
                  else tuple(int(w) for w in self.feedback_widths))
        object.__setattr__(self, "gating_mask", mask)
        object.__setattr__(self, "feedback_widths", widths)
        object.__setattr__(self, "pyramid_rates", tuple(int(r) for r in self.pyramid_rates))
        if self.T < 1:
            raise ValueError(f"unroll depth T must be >= 1, got {self.T}")
        if len(mask) != n:
            raise ValueError(f"gating_mask has {len(mask)} entries for {n} stages")
        if len(widths) != n - 1:
            raise ValueError(f"feedback_widths needs {n - 1} entries (stages 1..n-1), "
                             f"got {len(widths)}")
        if any(w < 1 for w in widths):
            raise ValueError("feedback widths must be positive")
        if self.feedback_seed not in FEEDBACK_SEEDS:
            raise ValueError(f"feedback_seed must be one of {FEEDBACK_SEEDS}")
        if self.feedback_seed == "last_features" and n < 2:
            raise ValueError("last_features seeding needs at least two stages")
        if any(r < 1 for r in self.pyramid_rates):
            raise ValueError("pyramid rates must be positive")

    @property
    def num_stages(self) -> int:
        return self.backbone.num_stages

    @property
    def effective_mask(self) -> tuple:
        if self.routing is RoutingVariant.NONE:
            return (False,) * self.num_stages
        return self.gating_mask

    def seed_channels(self) -> int:
        stages = self.backbone.stages
        return stages[-1].out_channels if self.feedback_seed == "logits" else stages[-2].out_channels

    def feedback_channels(self, i: int) -> int:
        """Channel count of F^i (1-based stage index)."""
        return self.seed_channels() if i == self.num_stages else self.feedback_widths[i - 1]

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone.to_dict(),
            "routing": self.routing.value,
            "T": self.T,
            "gating_mask": list(self.gating_mask),
            "feedback_widths": list(self.feedback_widths),
            "feedback_seed": self.feedback_seed,
            "pyramid_rates": list(self.pyramid_rates),
            "squash_bias": self.squash_bias,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        bb = d.pop("backbone", None)
        backbone = default_backbone_config() if bb is None else BackboneConfig(
            tuple(bb["stages"]), bb["num_classes"], bb["output_stride"])
        for key in ("gating_mask", "feedback_widths", "pyramid_rates"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(backbone=backbone, **d)


@dataclass
class FeedbackState:
    """Feedback signals F^1 ... F^n (keyed 1-based) produced for iteration ``t``."""

    t: int
    signals: dict = field(default_factory=dict)

    def __getitem__(self, i: int) -> Tensor:
        return self.signals[i]

    def __len__(self) -> int:
        return len(self.signals)


@dataclass
class Unroll:
    logits: list
    feedback: list  # FeedbackState for t = 2..T (empty entries skipped)
    features: list  # per iteration: [f^0, f^1, ..., f^n]
    tape: Optional[Tape] = None

    @property
    def final(self) -> Tensor:
        return self.logits[-1]


class DIGNet:
    def __init__(self, config: NetworkConfig, backbone: Backbone, gates: GateSet):
        if backbone.config != config.backbone:
            raise ValueError("backbone does not match network config")
        self.config = config
        self.backbone = backbone
        self.gates = gates
        names = [p.name for p in self.parameters()]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")

    def parameters(self) -> list[Parameter]:
        return self.backbone.parameters() + self.gates.parameters()

    def named_parameters(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def forward(self, image: Tensor, T: Optional[int] = None) -> Unroll:
        return run_inference(self, image, T=T)


def build_gates(config: NetworkConfig, seed: int, dtype=np.float32) -> GateSet:
    gates = GateSet()
    if config.routing is RoutingVariant.NONE:
        return gates
    rng = stream(seed, "init.gates")
    n = config.num_stages
    stages = config.backbone.stages
    for k in range(n - 1, 0, -1):
        width = config.feedback_widths[k - 1]
        if config.routing is RoutingVariant.CASCADED_DIG:
            gates.propagators[k] = PropagatorParams.init(
                f"prop{k}", rng, stages[k - 1].out_channels, config.feedback_channels(k + 1),
                width, dtype)
        elif config.routing is RoutingVariant.LAST_LAYER:
            gates.projections[k] = FeedbackProjection.init(
                f"proj{k}", rng, config.seed_channels(), width, dtype)
        else:
            gates.projections[k] = FeedbackProjection.init(
                f"proj{k}", rng, stages[k - 1].out_channels, width, dtype)
    for i in range(1, n + 1):
        gates.modulators[i] = ModulatorParams.init(
            f"mod{i}", rng, config.feedback_channels(i), stages[i - 1].in_channels,
            config.pyramid_rates, dtype, squash_bias=config.squash_bias)
    return gates


def build_dignet(config: NetworkConfig, seed: int, dtype=np.float32) -> DIGNet:
    return DIGNet(config, build_backbone(config.backbone, seed, dtype),
                  build_gates(config, seed, dtype))


def _feedback_seed(features: list, config: NetworkConfig) -> Tensor:
    return features[-1] if config.feedback_seed == "logits" else features[-2]


def generate_feedback(features: list, config: NetworkConfig, gates: GateSet,
                      t: int = 2) -> FeedbackState:
    """Feedback signals for every stage from one completed pass.

    ``features`` is ``[f^0, f^1, ..., f^n]``; F^i is sized like f^(i-1), the
    input of stage i, except that F^n is the seed tensor verbatim.
    """
    n = config.num_stages
    if len(features) != n + 1:
        raise ValueError(f"expected {n + 1} feature tensors (f^0..f^n), got {len(features)}")
    state = FeedbackState(t)
    routing = config.routing
    if routing is RoutingVariant.NONE:
        return state
    seed = _feedback_seed(features, config)
    state.signals[n] = seed
    for k in range(n - 1, 0, -1):
        h, w = features[k - 1].shape[2], features[k - 1].shape[3]
        if routing is RoutingVariant.CASCADED_DIG:
            sig = propagator_forward(state.signals[k + 1], features[k],
                                     gates.propagators[k], h, w)
        elif routing is RoutingVariant.LAST_LAYER:
            sig = tc.bilinear_upsample(gates.projections[k](seed), h, w)
        else:
            sig = tc.bilinear_upsample(gates.projections[k](features[k]), h, w)
        state.signals[k] = sig
    return state


def _sized_feedback(sig: Tensor, like: Tensor) -> Tensor:
    h, w = like.shape[2], like.shape[3]
    if sig.shape[2:] == (h, w):
        return sig
    return tc.bilinear_upsample(sig, h, w)


def run_inference(model: DIGNet, image: Tensor, T: Optional[int] = None,
                  record_tape: bool = False) -> Unroll:
    """Unroll ``T`` iterations and return every iteration's logits.

    With ``record_tape`` a fresh tape is opened around the whole unroll (and
    returned on the result) unless one is already recording.
    """
    if record_tape and tc.active_tape() is None:
        with Tape() as tape:
            result = run_inference(model, image, T)
        result.tape = tape
        return result

    config = model.config
    T = config.T if T is None else T
    if T < 1:
        raise ValueError(f"unroll depth T must be >= 1, got {T}")
    model.backbone.check_input(image)
    mask = config.effective_mask
    gating = any(mask)
    n = config.num_stages

    logits, feedback, all_features = [], [], []
    prev = None
    for t in range(1, T + 1):
        state = None
        if t > 1 and gating:
            state = generate_feedback(prev, config, model.gates, t)
            feedback.append(state)
        x = image
        feats = [image]
        for i in range(1, n + 1):
            if state is not None and mask[i - 1]:
                fb = _sized_feedback(state[i], x)
                x = modulator_forward(fb, x, model.gates.modulators[i], active=True)
            x = model.backbone.stage(i, x)
            feats.append(x)
        logits.append(x)
        all_features.append(feats)
        prev = feats
    return Unroll(logits, feedback, all_features)


def predict_labels(logits) -> np.ndarray:
    """Per-pixel argmax over channels; ties go to the lowest class index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=1)


def upsample_logits(logits: Tensor, h: int, w: int) -> Tensor:
    return tc.bilinear_upsample(logits, h, w)
