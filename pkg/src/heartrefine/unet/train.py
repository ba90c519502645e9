"""Mini-batch training with Adam and best-validation checkpointing."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .layers import softmax_cross_entropy
from .model import UNetConfig, unet_backward, unet_forward
from .weights import WeightStore

__all__ = ["TrainParams", "TrainResult", "TrainingDiverged", "Adam", "train", "evaluate_loss", "predict"]

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainParams:
    lr: float = 1e-3
    steps: int = 200
    batch: int = 1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    class_weights: Sequence[float] | None = None
    val_every: int = 0  # 0 disables validation checkpointing
    dtype: str = "float32"

    @classmethod
    def from_json(cls, d: dict) -> TrainParams:
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class TrainResult:
    weights: WeightStore
    loss_history: list[float]
    val_history: list[tuple[int, float]] = field(default_factory=list)
    best_step: int | None = None


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        if self.lr == 0:
            return
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for k, p in params.items():
            g = grads[k].astype(p.dtype, copy=False)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)


def _batch(dataset, idx, dtype):
    x = np.stack([dataset[i][0] for i in idx]).astype(dtype, copy=False)
    y = np.stack([dataset[i][1] for i in idx])
    return x, y


def evaluate_loss(weights: WeightStore, dataset, class_weights=None) -> float:
    losses = []
    dtype = next(iter(weights.params.values())).dtype
    for x, y in dataset:
        logits = unet_forward(weights.config, weights.params, x[None].astype(dtype, copy=False))
        loss, _ = softmax_cross_entropy(logits, y[None], class_weights)
        losses.append(loss)
    return float(np.mean(losses))


def predict(weights: WeightStore, x: np.ndarray) -> np.ndarray:
    """Logits for one (channels, z, y, x) sample."""
    dtype = next(iter(weights.params.values())).dtype
    return unet_forward(weights.config, weights.params, x[None].astype(dtype, copy=False))[0]


def train(config: UNetConfig, dataset, hp: TrainParams, val_dataset=None,
          init: WeightStore | None = None) -> TrainResult:
    """Fit a U-Net to ``dataset``, a list of (input grid, target label array).

    Inputs are ``(channels, z, y, x)``; targets ``(z, y, x)`` class indices.
    Samples are drawn without replacement per epoch from a seeded stream.
    With ``val_every`` and a validation set, the returned weights are those
    with the lowest validation loss.
    """
    if not dataset:
        raise ValueError("training set is empty")
    shapes = {(x.shape, y.shape) for x, y in dataset}
    if len(shapes) != 1:
        raise ValueError(f"samples disagree in shape: {sorted(shapes)}")
    dtype = np.dtype(hp.dtype)
    store = (init.copy() if init is not None else WeightStore.initialise(config, hp.seed, dtype)).astype(dtype)
    params = store.params
    opt = Adam(params, hp.lr, hp.beta1, hp.beta2, hp.eps)
    rng = np.random.default_rng(hp.seed + 1)
    order: list[int] = []
    history: list[float] = []
    val_history: list[tuple[int, float]] = []
    best = (np.inf, None, None)

    for step in range(hp.steps):
        idx = []
        while len(idx) < hp.batch:
            if not order:
                order = list(rng.permutation(len(dataset)))
            idx.append(order.pop(0))
        x, y = _batch(dataset, idx, dtype)
        logits, tape = unet_forward(config, params, x, keep_cache=True)
        loss, dlogits = softmax_cross_entropy(logits, y, hp.class_weights)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        grads = unet_backward(config, params, tape, dlogits.astype(dtype, copy=False))
        del tape
        opt.step(params, grads)
        history.append(loss)
        if hp.val_every and val_dataset and ((step + 1) % hp.val_every == 0 or step + 1 == hp.steps):
            vl = evaluate_loss(store, val_dataset, hp.class_weights)
            val_history.append((step + 1, vl))
            if vl < best[0]:
                best = (vl, step + 1, {k: v.copy() for k, v in params.items()})
        if step % 50 == 0:
            log.debug("step %d loss %.5f", step, loss)

    if best[2] is not None:
        store = WeightStore(config, best[2], dict(store.meta))
    return TrainResult(store, history, val_history, best[1])
