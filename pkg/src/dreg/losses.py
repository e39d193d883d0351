"""Per-sample training losses with analytic gradients w.r.t. logits.

Every loss accepts either one sample (``logits`` of shape (K,), integer
``y``) or a batch (``logits`` of shape (B, K), ``y`` of shape (B,)) and
returns a :class:`LossOut` whose ``value`` has shape () or (B,) and whose
``grad_logits`` matches ``logits``. Probabilities and log-probabilities come
from the max-shifted log-softmax, so no log ever sees an exact zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dreg.errors import ConfigError
from dreg.model import log_softmax
from dreg.special import digamma, lgamma, trigamma

LOSS_KINDS = ("ce", "ls", "fl", "edl", "pc", "klu", "dreg", "rc")
EDL_CLAMP = 10.0


@dataclass(frozen=True)
class LossSpec:
    """Tagged loss selection.

    ``epsilon`` is used by ``ls``; ``gamma`` by ``fl`` (focusing), ``pc``
    (penalty) and ``edl`` (KL anneal weight); ``eta`` by ``dreg`` and ``rc``;
    ``beta`` by ``dreg``.
    """

    kind: str = "ce"
    epsilon: float | None = None
    gamma: float | None = None
    eta: float | None = None
    beta: float | None = None

    REQUIRED = {
        "ce": (),
        "klu": (),
        "ls": ("epsilon",),
        "fl": ("gamma",),
        "pc": ("gamma",),
        "edl": ("gamma",),
        "dreg": ("eta", "beta"),
        "rc": ("eta",),
    }

    def __post_init__(self):
        kind = str(self.kind).lower()
        object.__setattr__(self, "kind", kind)
        if kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        for name in self.REQUIRED[kind]:
            if getattr(self, name) is None:
                raise ConfigError(f"loss {kind!r} requires parameter {name!r}")
        if self.epsilon is not None and not (0.0 <= self.epsilon < 1.0):
            raise ConfigError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if self.gamma is not None and not self.gamma >= 0.0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.beta is not None and not self.beta >= 0.0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.eta is not None and not (0.0 <= self.eta < 1.0):
            raise ConfigError(f"eta must lie in [0, 1), got {self.eta}")

    def unused(self) -> list:
        """Names of parameters that are set but ignored by this kind."""
        needed = set(self.REQUIRED[self.kind])
        return [n for n in ("epsilon", "gamma", "eta", "beta") if getattr(self, n) is not None and n not in needed]


@dataclass
class LossOut:
    value: np.ndarray
    grad_logits: np.ndarray


def _prep(logits, y):
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    y2 = np.atleast_1d(np.asarray(y))
    if y2.shape != (z2.shape[0],):
        raise ConfigError("need one label per row of logits")
    if np.any(y2 < 0) or np.any(y2 >= z2.shape[1]):
        raise ConfigError(f"label out of range for K={z2.shape[1]}")
    return z2, y2.astype(np.int64), single


def _finish(value, grad, single):
    if single:
        return LossOut(value[0].item() if np.ndim(value[0]) == 0 else value[0], grad[0])
    return LossOut(value, grad)


def _onehot(y, k):
    out = np.zeros((y.shape[0], k))
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def _pick(a, y):
    return a[np.arange(y.shape[0]), y]


def _entropy_terms(logp):
    """Entropy H and dH/dlogits = -p * (log p + H)."""
    p = np.exp(logp)
    h = -np.sum(p * logp, axis=-1)
    return h, -p * (logp + h[:, None])


def cross_entropy(logits, y) -> LossOut:
    z, y, single = _prep(logits, y)
    logp = log_softmax(z)
    value = -_pick(logp, y)
    grad = np.exp(logp) - _onehot(y, z.shape[1])
    return _finish(value, grad, single)


def label_smoothing(logits, y, epsilon) -> LossOut:
    """Cross-entropy against (1 - eps) * onehot + eps / K."""
    if not (0.0 <= epsilon < 1.0):
        raise ConfigError(f"epsilon must lie in [0, 1), got {epsilon}")
    z, y, single = _prep(logits, y)
    k = z.shape[1]
    logp = log_softmax(z)
    target = (1.0 - epsilon) * _onehot(y, k) + epsilon / k
    value = -np.sum(target * logp, axis=-1)
    grad = np.exp(logp) - target
    return _finish(value, grad, single)


def focal_loss(logits, y, gamma) -> LossOut:
    """(1 - p_y)^gamma * (-log p_y)."""
    if not gamma >= 0.0:
        raise ConfigError(f"gamma must be >= 0, got {gamma}")
    z, y, single = _prep(logits, y)
    k = z.shape[1]
    logp = log_softmax(z)
    p = np.exp(logp)
    nll = -_pick(logp, y)
    py = _pick(p, y)
    # 1 - p_y as the sum of the other probabilities; exact when p_y ~ 1
    q = np.sum(np.where(_onehot(y, k) > 0, 0.0, p), axis=-1)
    if gamma == 0.0:
        return _finish(nll, p - _onehot(y, k), single)
    weight = q**gamma
    value = weight * nll
    # dvalue/dp_y = -gamma q^(gamma-1) nll - q^gamma / p_y ; dp_y/dz = p_y (e_y - p)
    with np.errstate(divide="ignore", invalid="ignore"):
        dweight = np.where(q > 0, gamma * q ** (gamma - 1.0) * nll, 0.0)
    dvalue_dz_scale = -(dweight * py + weight)
    grad = dvalue_dz_scale[:, None] * (_onehot(y, k) - p)
    return _finish(value, grad, single)


def entropy(probs):
    """Shannon entropy (nats) along the last axis; 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -np.sum(terms, axis=-1)


def kl_to_uniform(probs):
    """KL(p || uniform) = log K - H(p), computed as sum p log(K p)."""
    p = np.asarray(probs, dtype=np.float64)
    k = p.shape[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, k * p, 1.0)), 0.0)
    return np.maximum(np.sum(terms, axis=-1), 0.0)


def entropy_loss(logits) -> LossOut:
    """H(softmax(logits)) with its gradient."""
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    h, dh = _entropy_terms(log_softmax(z2))
    return _finish(h, dh, single)


def _klu_terms(logp):
    k = logp.shape[-1]
    p = np.exp(logp)
    # sum p (log p + log K): exact 0 for uniform logits
    value = np.maximum(np.sum(p * (logp + np.log(k)), axis=-1), 0.0)
    h = -np.sum(p * logp, axis=-1)
    # d(-H)/dz = p * (log p + H)
    grad = p * (logp + h[:, None])
    return value, grad


def kl_uniform_loss(logits) -> LossOut:
    """KL(softmax(logits) || uniform) with its gradient."""
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    value, grad = _klu_terms(log_softmax(z2))
    return _finish(value, grad, single)


def penalized_confidence(logits, y, gamma) -> LossOut:
    """CE - gamma * H(p). May be negative."""
    if not gamma >= 0.0:
        raise ConfigError(f"gamma must be >= 0, got {gamma}")
    z, y, single = _prep(logits, y)
    logp = log_softmax(z)
    ce = -_pick(logp, y)
    h, dh = _entropy_terms(logp)
    value = ce - gamma * h
    grad = np.exp(logp) - _onehot(y, z.shape[1]) - gamma * dh
    return _finish(value, grad, single)


def evidence_to_alpha(logits):
    """alpha = exp(clamp(z, -10, 10)) + 1 and d alpha / d z."""
    z = np.asarray(logits, dtype=np.float64)
    zc = np.clip(z, -EDL_CLAMP, EDL_CLAMP)
    ev = np.exp(zc)
    inside = (z > -EDL_CLAMP) & (z < EDL_CLAMP)
    return ev + 1.0, np.where(inside, ev, 0.0)


def dirichlet_kl_to_uniform(alpha):
    """KL(Dir(alpha) || Dir(1,...,1)) along the last axis."""
    a = np.asarray(alpha, dtype=np.float64)
    k = a.shape[-1]
    s = np.sum(a, axis=-1)
    return (
        lgamma(s)
        - lgamma(float(k))
        - np.sum(lgamma(a), axis=-1)
        + np.sum((a - 1.0) * (digamma(a) - np.asarray(digamma(s))[..., None]), axis=-1)
    )


def evidential_from_alpha(alpha, y, anneal) -> LossOut:
    """EDL objective on Dirichlet parameters; ``grad_logits`` holds d/d alpha.

    Expected CE under Dir(alpha) in digamma form, plus ``anneal`` times
    KL(Dir(alpha_tilde) || Dir(1)) with alpha_tilde = y + (1 - y) * alpha,
    i.e. the true-class concentration reset to 1 so only misleading evidence
    is penalised.
    """
    if not anneal >= 0.0:
        raise ConfigError(f"anneal weight must be >= 0, got {anneal}")
    alpha, y, single = _prep(alpha, y)
    if np.any(alpha <= 0):
        raise ConfigError("Dirichlet parameters must be positive")
    k = alpha.shape[1]
    onehot = _onehot(y, k)
    s = np.sum(alpha, axis=-1)
    fit = digamma(s) - _pick(digamma(alpha), y)
    dfit = trigamma(s)[:, None] - onehot * trigamma(alpha)

    at = onehot + (1.0 - onehot) * alpha
    st = np.sum(at, axis=-1)
    kl = dirichlet_kl_to_uniform(at)
    # d KL / d at_j = (at_j - 1) psi'(at_j) - psi'(St) * sum_k (at_k - 1)
    dkl = (at - 1.0) * trigamma(at) - (trigamma(st) * np.sum(at - 1.0, axis=-1))[:, None]
    dkl = dkl * (1.0 - onehot)
    return _finish(fit + anneal * kl, dfit + anneal * dkl, single)


def evidential_loss(logits, y, anneal) -> LossOut:
    """EDL loss with evidence exp(clamp(z, -10, 10)), alpha = evidence + 1."""
    z, y, single = _prep(logits, y)
    alpha, dalpha = evidence_to_alpha(z)
    out = evidential_from_alpha(alpha, y, anneal)
    return _finish(out.value, out.grad_logits * dalpha, single)


def dreg_per_sample(logits, y, delta, beta) -> LossOut:
    """delta * CE + (1 - delta) * beta * KL(p || uniform).

    The out-of-capability branch ignores the label. Branches are selected
    rather than blended, so ``delta == 1`` reproduces CE bit for bit.
    """
    if not beta >= 0.0:
        raise ConfigError(f"beta must be >= 0, got {beta}")
    z, y, single = _prep(logits, y)
    d = np.atleast_1d(np.asarray(delta))
    if d.shape != y.shape or not np.all((d == 0) | (d == 1)):
        raise ConfigError("delta must be 0/1 with one entry per sample")
    keep = d.astype(bool)
    logp = log_softmax(z)
    ce = -_pick(logp, y)
    ce_grad = np.exp(logp) - _onehot(y, z.shape[1])
    klu, klu_grad = _klu_terms(logp)
    value = np.where(keep, ce, beta * klu)
    grad = np.where(keep[:, None], ce_grad, beta * klu_grad)
    return _finish(value, grad, single)


def per_sample_loss(spec: LossSpec, logits, y) -> LossOut:
    """Dispatch for the label-only losses (not ``dreg``/``rc``)."""
    if spec.kind == "ce":
        return cross_entropy(logits, y)
    if spec.kind == "ls":
        return label_smoothing(logits, y, spec.epsilon)
    if spec.kind == "fl":
        return focal_loss(logits, y, spec.gamma)
    if spec.kind == "pc":
        return penalized_confidence(logits, y, spec.gamma)
    if spec.kind == "edl":
        return evidential_loss(logits, y, spec.gamma)
    if spec.kind == "klu":
        return kl_uniform_loss(logits)
    raise ConfigError(f"loss {spec.kind!r} needs batch context; use the trainer")
