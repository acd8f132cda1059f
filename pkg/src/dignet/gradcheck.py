"""Finite-difference check of BPTT gradients on a tiny f64 DIGNet."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .backbone import BackboneConfig, StageSpec
from .model import NetworkConfig, build_dignet, run_inference
from .rng import stream
from .tensor import Tape, Tensor

TOLERANCE = 1e-4
EPSILON = 1e-4


def gradcheck_config() -> NetworkConfig:
    backbone = BackboneConfig(
        (StageSpec(3, 4, 1, 2), StageSpec(4, 3, 1, 1, relu=False)), num_classes=3,
        output_stride=2)
    return NetworkConfig(backbone=backbone, routing="cascaded_dig", T=2, feedback_widths=(4,))


@dataclass
class GradcheckReport:
    errors: dict = field(default_factory=dict)  # parameter name -> relative error
    tolerance: float = TOLERANCE

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return bool(self.errors) and self.max_error <= self.tolerance

    def lines(self) -> list[str]:
        out = [f"{name:32s} rel_err={err:.3e}" for name, err in self.errors.items()]
        out.append(f"max relative error {self.max_error:.3e} (tolerance {self.tolerance:.0e}): "
                   + ("PASS" if self.passed else "FAIL"))
        return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise ||a - n|| / max(||a||, ||n||), guarded for all-zero gradients."""
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < 1e-12:
        return float(diff)
    return float(diff / scale)


def _loss(model, image: Tensor, labels: np.ndarray) -> Tensor:
    logits = run_inference(model, image).final
    up = tc.bilinear_upsample(logits, labels.shape[1], labels.shape[2])
    return tc.softmax_cross_entropy(up, labels)


def gradcheck(seed: int = 0, config: NetworkConfig | None = None, size: int = 8,
              batch: int = 2, eps: float = EPSILON, tolerance: float = TOLERANCE,
              perturb: bool = False) -> GradcheckReport:
    """Compare tape gradients with central differences for every parameter entry.

    ``perturb`` corrupts the analytic gradients before comparison; it exists
    so the failure path can be exercised.
    """
    config = gradcheck_config() if config is None else config
    model = build_dignet(config, seed, dtype=np.float64)
    rng = stream(seed, "gradcheck.data")
    image = Tensor(rng.random((batch, 3, size, size)), dtype=np.float64)
    k = config.backbone.num_classes
    labels = rng.integers(0, k, size=(batch, size, size))

    model.zero_grad()
    with Tape() as tape:
        loss = _loss(model, image, labels)
        tape.backward(loss)
    report = GradcheckReport(tolerance=tolerance)
    for p in model.parameters():
        analytic = p.grad.copy()
        if perturb:
            analytic = analytic * 1.01 + 1e-3
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = float(_loss(model, image, labels).data)
            flat[idx] = orig - eps
            down = float(_loss(model, image, labels).data)
            flat[idx] = orig
            numeric.reshape(-1)[idx] = (up - down) / (2 * eps)
        report.errors[p.name] = relative_error(analytic, numeric)
    return report
