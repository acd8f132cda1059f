"""Plain multi-stage convolutional backbone with a configurable output stride."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tc
from .gates import conv_params
from .rng import stream
from .tensor import Parameter, Tensor


@dataclass(frozen=True)
class StageSpec:
    in_channels: int
    out_channels: int
    num_convs: int = 1
    stride: int = 1
    relu: bool = True  # the classifier stage sets this False to emit raw logits

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1 or self.num_convs < 1:
            raise ValueError(f"invalid stage {self}")
        if self.stride not in (1, 2):
            raise ValueError(f"stage stride must be 1 or 2, got {self.stride}")


def default_stages(num_classes: int = 6) -> tuple:
    return (
        StageSpec(3, 16, 1, 2),
        StageSpec(16, 32, 1, 2),
        StageSpec(32, 48, 1, 2),
        StageSpec(48, 48, 1, 1),
        StageSpec(48, 48, 1, 1),
        StageSpec(48, num_classes, 1, 1, relu=False),
    )


@dataclass(frozen=True)
class BackboneConfig:
    stages: tuple = field(default_factory=default_stages)
    num_classes: int = 6
    output_stride: int = 8

    def __post_init__(self):
        stages = tuple(s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stages)
        object.__setattr__(self, "stages", stages)
        if not stages:
            raise ValueError("backbone needs at least one stage")
        for prev, nxt in zip(stages, stages[1:]):
            if prev.out_channels != nxt.in_channels:
                raise ValueError(f"inconsistent channel chain: {prev.out_channels} -> "
                                 f"{nxt.in_channels}")
        if stages[-1].out_channels != self.num_classes:
            raise ValueError(f"last stage emits {stages[-1].out_channels} channels, "
                             f"expected num_classes={self.num_classes}")
        stride = int(np.prod([s.stride for s in stages]))
        if stride != self.output_stride:
            raise ValueError(f"stage strides multiply to {stride}, "
                             f"output_stride is {self.output_stride}")

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def to_dict(self) -> dict:
        return {"stages": [asdict(s) for s in self.stages],
                "num_classes": self.num_classes, "output_stride": self.output_stride}

    def stage_sizes(self, h: int, w: int) -> list[tuple[int, int]]:
        """Spatial dims of f^0 (the input) through f^n."""
        sizes = [(h, w)]
        for s in self.stages:
            h, w = tc.conv_output_size(h, 3, s.stride, 1), tc.conv_output_size(w, 3, s.stride, 1)
            sizes.append((h, w))
        return sizes


def default_backbone_config(num_classes: int = 6) -> BackboneConfig:
    return BackboneConfig(default_stages(num_classes), num_classes, 8)


def stage_forward(x: Tensor, spec: StageSpec, params: list[tuple[Parameter, Parameter]]) -> Tensor:
    """``num_convs`` 3x3 convolutions, stride on the first, ReLU after each."""
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"stage expects {spec.in_channels} input channels, got {x.shape[1]}")
    for j, (w, b) in enumerate(params):
        x = tc.conv2d(x, w, b, stride=spec.stride if j == 0 else 1, pad=1)
        if spec.relu or j < len(params) - 1:
            x = tc.relu(x)
    return x


class Backbone:
    """Parameterized stage list f_1 ... f_n."""

    def __init__(self, config: BackboneConfig, stage_params: list):
        self.config = config
        self.stage_params = stage_params

    @property
    def specs(self) -> tuple:
        return self.config.stages

    def parameters(self) -> list[Parameter]:
        return [p for stage in self.stage_params for wb in stage for p in wb]

    def check_input(self, image: Tensor) -> None:
        os_ = self.config.output_stride
        h, w = image.shape[2], image.shape[3]
        if h % os_ or w % os_:
            raise ValueError(f"input {h}x{w} is not divisible by output stride {os_}")

    def stage(self, i: int, x: Tensor) -> Tensor:
        """Run stage ``i`` (1-based)."""
        return stage_forward(x, self.specs[i - 1], self.stage_params[i - 1])

    def forward(self, image: Tensor) -> Tensor:
        self.check_input(image)
        x = image
        for i in range(1, len(self.specs) + 1):
            x = self.stage(i, x)
        return x


def build_backbone(config: BackboneConfig, seed: int, dtype=np.float32) -> Backbone:
    """He-normal weights (variance 2/fan_in) and zero biases, drawn from ``seed``."""
    rng = stream(seed, "init.backbone")
    stage_params = []
    for i, spec in enumerate(config.stages, start=1):
        convs = []
        cin = spec.in_channels
        for j in range(1, spec.num_convs + 1):
            convs.append(conv_params(f"stage{i}.conv{j}", rng, spec.out_channels, cin, 3, dtype))
            cin = spec.out_channels
        stage_params.append(convs)
    return Backbone(config, stage_params)
