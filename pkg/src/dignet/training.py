"""BPTT training: momentum SGD, poly learning rate, loss on the last iteration only."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as tc
from .backbone import Backbone
from .checkpoint import Checkpoint
from .data import Dataset, Split
from .metrics import metrics_update, new_confusion, summarize
from .model import DIGNet, NetworkConfig, build_dignet, predict_labels, run_inference
from .rng import stream
from .tensor import NonFiniteError, Tape, Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    power: float = 0.9
    batch_size: int = 8
    max_iter: Optional[int] = None  # overrides epochs when set
    flip: bool = True
    eval_batch_size: int = 50

    def __post_init__(self):
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("batch sizes must be positive")
        if self.base_lr < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValueError("invalid optimizer hyperparameters")
        if self.max_iter is not None and self.max_iter < 1:
            raise ValueError("max_iter must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, last_good: Optional[Checkpoint]):
        super().__init__(message)
        self.last_good = last_good


def poly_lr(base_lr: float, it: int, max_iter: int, power: float) -> float:
    """``base_lr * (1 - it / max_iter) ** power``."""
    if max_iter <= 0:
        raise ValueError("max_iter must be positive")
    if not 0 <= it <= max_iter:
        raise ValueError(f"iteration {it} outside [0, {max_iter}]")
    return base_lr * (1.0 - it / max_iter) ** power


class SGD:
    """Momentum SGD with L2 weight decay folded into the velocity."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {p.name: np.zeros_like(p.data) for p in self.params}

    def hyperparameters(self) -> dict:
        return {"momentum": self.momentum, "weight_decay": self.weight_decay}

    def step(self, lr: float) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(f"gradient of {p.name}", "optimizer")
        dt = None
        for p in self.params:
            dt = p.data.dtype.type
            v = self.buffers[p.name]
            v *= dt(self.momentum)
            v += p.grad
            if self.weight_decay:
                v += dt(self.weight_decay) * p.data
            p.data = p.data - dt(lr) * v
            p.zero_grad()


def sgd_step(params, state: SGD, lr: float) -> None:
    state.step(lr)


def final_logits(model, images: Tensor) -> Tensor:
    if isinstance(model, Backbone):
        return model.forward(images)
    return run_inference(model, images).final


def batch_loss(model, images: np.ndarray, labels: np.ndarray) -> float:
    """Forward + backward on one batch; gradients accumulate on the parameters."""
    x = Tensor(images)
    with Tape() as tape:
        logits = final_logits(model, x)
        up = tc.bilinear_upsample(logits, labels.shape[1], labels.shape[2])
        loss = tc.softmax_cross_entropy(up, labels)
        tape.backward(loss)
    return float(loss.data)


def evaluate(model, split: Split, num_classes: int, batch_size: int = 50,
             T: Optional[int] = None) -> dict:
    cm = new_confusion(num_classes)
    for lo in range(0, len(split), batch_size):
        x = Tensor(split.images[lo: lo + batch_size])
        if T is not None and isinstance(model, DIGNet):
            logits = run_inference(model, x, T=T).final
        else:
            logits = final_logits(model, x)
        up = tc.bilinear_upsample(logits, split.labels.shape[1], split.labels.shape[2])
        cm = metrics_update(cm, predict_labels(up), split.labels[lo: lo + batch_size])
    return summarize(cm)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list
    model: object


def _params(model) -> list:
    return model.parameters()


def _model_config(model) -> dict:
    if isinstance(model, Backbone):
        return {"backbone_only": model.config.to_dict()}
    return model.config.to_dict()


def make_checkpoint(model, opt: SGD, train_config: TrainConfig, rngs: dict, it: int,
                    extra_config: Optional[dict] = None) -> Checkpoint:
    config = {"network": _model_config(model), "train": train_config.to_dict()}
    if extra_config:
        config.update(extra_config)
    return Checkpoint(
        config=config,
        params={p.name: p.data.copy() for p in _params(model)},
        momentum={k: v.copy() for k, v in opt.buffers.items()},
        optimizer=opt.hyperparameters(),
        rng_state={k: g.bit_generator.state for k, g in rngs.items()},
        iteration=it,
    )


def train(config: NetworkConfig, dataset: Dataset, epochs: int, seed: int,
          train_config: TrainConfig = TrainConfig(), model=None,
          log: Optional[Callable[[dict], None]] = None, dtype=np.float32) -> TrainResult:
    """Train from ``seed`` and return the final checkpoint and per-epoch metrics.

    ``model`` defaults to a fresh DIGNet built from ``config`` and ``seed``;
    pass a :class:`Backbone` to train the bare feedforward network.
    """
    if len(dataset.train) == 0:
        raise ValueError("training split is empty")
    if model is None:
        model = build_dignet(config, seed, dtype)
    params = _params(model)
    opt = SGD(params, train_config.momentum, train_config.weight_decay)
    rngs = {"order": stream(seed, "data.order"), "augment": stream(seed, "data.augment")}

    n = len(dataset.train)
    bs = train_config.batch_size
    steps_per_epoch = math.ceil(n / bs)
    total = train_config.max_iter or epochs * steps_per_epoch
    if total < 1:
        raise ValueError("nothing to train: zero epochs and no max_iter")

    records = []
    it = 0
    epoch = 0
    last_good = make_checkpoint(model, opt, train_config, rngs, it)
    while it < total:
        epoch += 1
        order = rngs["order"].permutation(n)
        losses = []
        lr = train_config.base_lr
        for lo in range(0, n, bs):
            if it >= total:
                break
            idx = order[lo: lo + bs]
            images = dataset.train.images[idx]
            labels = dataset.train.labels[idx]
            if train_config.flip:
                flip = rngs["augment"].random(len(idx)) < 0.5
                images = np.where(flip[:, None, None, None], images[..., ::-1], images)
                labels = np.where(flip[:, None, None], labels[..., ::-1], labels)
            lr = poly_lr(train_config.base_lr, it, total, train_config.power)
            try:
                loss = batch_loss(model, images, labels)
                if not math.isfinite(loss):
                    raise NonFiniteError("loss")
                opt.step(lr)
            except NonFiniteError as exc:
                raise TrainingDivergedError(
                    f"training diverged at iteration {it}: {exc}", last_good) from exc
            losses.append(loss)
            it += 1
        val = evaluate(model, dataset.val, dataset.num_classes,
                       train_config.eval_batch_size) if len(dataset.val) else {"miou": None}
        rec = {"epoch": epoch, "iter": it, "lr": lr, "loss": float(np.mean(losses)),
               "miou": val["miou"]}
        records.append(rec)
        logger.info("epoch %d iter %d loss %.4f miou %s", epoch, it, rec["loss"], rec["miou"])
        if log is not None:
            log(rec)
        last_good = make_checkpoint(model, opt, train_config, rngs, it)
    return TrainResult(last_good, records, model)


def format_log_line(rec: dict) -> str:
    return json.dumps(rec, sort_keys=False)


def load_params(model, ckpt: Checkpoint) -> None:
    """Copy checkpoint parameter arrays into ``model`` (names must match exactly)."""
    named = {p.name: p for p in _params(model)}
    if set(named) != set(ckpt.params):
        missing = sorted(set(named) ^ set(ckpt.params))
        raise ValueError(f"checkpoint parameters do not match model: {missing[:5]}")
    for name, p in named.items():
        arr = ckpt.params[name]
        if arr.shape != p.shape:
            raise ValueError(f"{name}: shape {arr.shape} vs model {p.shape}")
        p.data = arr.astype(p.dtype, copy=True)
        p.zero_grad()
