"""Minibatch SGD with momentum for every supported loss, including DReg and RC.

One training step:

1. take the next slice of this epoch's permutation as the batch;
2. compute per-sample cross-entropy (the difficulty score);
3. for ``dreg``/``rc``, mark the round(eta * B) highest-CE samples with
   delta = 0 (:func:`assign_delta`);
4. ``dreg`` averages delta * CE + (1 - delta) * beta * KL(p || u) over the
   batch; ``rc`` averages CE over the delta = 1 samples only; every other
   kind averages its own per-sample loss;
5. v <- momentum * v - lr * (grad + weight_decay * theta); theta <- theta + v.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from dreg import losses as L
from dreg._rng import make_rng
from dreg.errors import ConfigError, NumericError, TrainingError
from dreg.model import MlpParams, ModelConfig, backward, forward, init_params, softmax
from dreg.synthdata import LabeledDataset, round_half_even

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    loss: L.LossSpec = field(default_factory=L.LossSpec)
    batch_size: int = 64
    epochs: int = 100
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if int(self.batch_size) < 1:
            raise ConfigError("batch_size must be >= 1")
        if int(self.epochs) < 1:
            raise ConfigError("epochs must be >= 1")
        if not (self.lr >= 0.0 and math.isfinite(self.lr)):
            raise ConfigError("lr must be finite and >= 0")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError("momentum must lie in [0, 1)")
        if not (self.weight_decay >= 0.0 and math.isfinite(self.weight_decay)):
            raise ConfigError("weight_decay must be finite and >= 0")


@dataclass
class TrainReport:
    epoch_loss: list
    delta_zero_fraction: list
    params: MlpParams

    def to_dict(self) -> dict:
        return {
            "epochs": len(self.epoch_loss),
            "epoch_loss": [float(v) for v in self.epoch_loss],
            "delta_zero_fraction": [float(v) for v in self.delta_zero_fraction],
            "layer_dims": list(self.params.layer_dims),
            "activation": self.params.activation,
        }

    def to_json(self, **extra) -> str:
        return json.dumps({**self.to_dict(), **extra}, indent=2, sort_keys=True) + "\n"


def assign_delta(per_sample_losses, eta: float) -> np.ndarray:
    """0 for the round(eta * B) largest losses, 1 elsewhere.

    Ties are broken toward the lower index (it is selected first).
    """
    losses = np.asarray(per_sample_losses, dtype=np.float64).reshape(-1)
    if losses.size < 1:
        raise ConfigError("need at least one loss")
    if not (0.0 <= eta < 1.0):
        raise ConfigError(f"eta must lie in [0, 1), got {eta}")
    if np.any(np.isnan(losses)):
        raise NumericError("NaN in per-sample losses")
    m = round_half_even(eta * losses.size)
    delta = np.ones(losses.size, dtype=np.int64)
    if m:
        order = np.argsort(-losses, kind="stable")
        delta[order[:m]] = 0
    return delta


def batch_objective(spec: L.LossSpec, logits, y):
    """Mean batch objective, dL/dlogits for that mean, per-sample values, delta.

    Per-sample values are the terms that enter the mean (for ``rc`` the
    dropped samples contribute 0 and are excluded from the denominator).
    """
    b = logits.shape[0]
    if spec.kind in ("dreg", "rc"):
        ce = L.cross_entropy(logits, y)
        delta = assign_delta(ce.value, spec.eta)
        if spec.kind == "dreg":
            out = L.dreg_per_sample(logits, y, delta, spec.beta)
            return float(np.mean(out.value)), out.grad_logits / b, out.value, delta
        keep = delta.astype(bool)
        n_keep = int(keep.sum())
        if n_keep == 0:
            return 0.0, np.zeros_like(logits), np.zeros(b), delta
        grad = np.where(keep[:, None], ce.grad_logits, 0.0) / n_keep
        values = np.where(keep, ce.value, 0.0)
        return float(np.sum(values) / n_keep), grad, values, delta
    out = L.per_sample_loss(spec, logits, y)
    return float(np.mean(out.value)), out.grad_logits / b, out.value, np.ones(b, dtype=np.int64)


def train(cfg: TrainConfig, model_cfg: ModelConfig, ds: LabeledDataset, init: MlpParams | None = None,
          trajectory: list | None = None) -> TrainReport:
    """Run ``cfg.epochs`` passes of ceil(n / B) SGD steps.

    If ``trajectory`` is a list, a copy of the parameters after every step is
    appended to it.
    """
    if ds.n < 1:
        raise ConfigError("empty training set")
    dims = model_cfg.layer_dims
    if dims[0] != ds.d:
        raise ConfigError(f"model input size {dims[0]} != data dimension {ds.d}")
    if dims[-1] != ds.n_classes:
        raise ConfigError(f"model output size {dims[-1]} != number of classes {ds.n_classes}")

    params = init.copy() if init is not None else init_params(model_cfg)
    velocity = params.zeros_like()
    rng = make_rng(cfg.seed)
    spec = cfg.loss
    n, bsz = ds.n, int(cfg.batch_size)
    epoch_loss, zero_frac = [], []

    for epoch in range(int(cfg.epochs)):
        perm = rng.permutation(n)
        total, zeros = 0.0, 0
        for step, start in enumerate(range(0, n, bsz)):
            idx = perm[start : start + bsz]
            with np.errstate(invalid="ignore", over="ignore"):
                trace = forward(params, ds.features[idx])
            try:
                # an overflowing mean becomes inf and is reported below
                with np.errstate(over="ignore"):
                    loss, grad_logits, values, delta = batch_objective(spec, trace.logits, ds.labels[idx])
            except NumericError as e:
                raise TrainingError(str(e), epoch=epoch, step=step) from e
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss!r}", epoch=epoch, step=step)
            total += float(np.sum(values))
            zeros += int(np.sum(delta == 0))
            grads = backward(params, trace, grad_logits)
            for p, v, g in zip(params.arrays(), velocity.arrays(), grads.arrays()):
                v *= cfg.momentum
                v -= cfg.lr * (g + cfg.weight_decay * p)
                p += v
            if trajectory is not None:
                trajectory.append(params.copy())
        if not params.is_finite():
            raise TrainingError("parameters became non-finite", epoch=epoch, step=step)
        epoch_loss.append(total / n)
        zero_frac.append(zeros / n)
        log.debug("epoch %d loss %.6f delta0 %.4f", epoch, epoch_loss[-1], zero_frac[-1])
    return TrainReport(epoch_loss, zero_frac, params)


@dataclass
class Evaluation:
    probs: np.ndarray
    confidences: np.ndarray
    predictions: np.ndarray
    correct: np.ndarray


def evaluate(params: MlpParams, ds: LabeledDataset) -> Evaluation:
    """Max-probability confidence, argmax label (lowest index on ties), correctness."""
    probs = softmax(forward(params, ds.features).logits)
    pred = np.argmax(probs, axis=1)
    conf = probs[np.arange(ds.n), pred]
    return Evaluation(probs, conf, pred, pred == ds.labels)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
