"""Client objectives and their gradients w.r.t. network outputs.

Every loss returns its value together with upstream gradients for
:func:`hydrafl.nn.backward`. Batch reduction is always a mean over rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .errors import ConfigError, InputError, NumericError
from .nn import ForwardTrace

Array = np.ndarray


class LossKind(str, Enum):
    CE = "CE"
    FEDNTD = "FEDNTD"
    MOON = "MOON"
    HYDRA_NTD = "HYDRA_NTD"
    HYDRA_MOON = "HYDRA_MOON"

    @property
    def uses_ntd(self) -> bool:
        return self in (LossKind.FEDNTD, LossKind.HYDRA_NTD)

    @property
    def uses_contrastive(self) -> bool:
        return self in (LossKind.MOON, LossKind.HYDRA_MOON)

    @property
    def uses_aux(self) -> bool:
        return self in (LossKind.HYDRA_NTD, LossKind.HYDRA_MOON)


@dataclass(frozen=True)
class LossSpec:
    kind: LossKind = LossKind.CE
    beta: float = 1.0
    mu: float = 1.0
    b: float = 1.0
    gamma: float = 0.0
    tau: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not self.b >= 1:
            raise ConfigError(f"diminishing factor b must be >= 1, got {self.b}")
        for name in ("beta", "mu", "gamma"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be non-negative")

    @property
    def final_coef(self) -> float:
        """Weight of the final-layer distillation term (beta/b or mu/b)."""
        if self.kind.uses_ntd:
            return self.beta / self.b
        if self.kind.uses_contrastive:
            return self.mu / self.b
        return 0.0

    @property
    def aux_coef(self) -> float:
        return self.gamma if self.kind.uses_aux else 0.0

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "beta": self.beta, "mu": self.mu,
                "b": self.b, "gamma": self.gamma, "tau": self.tau}


@dataclass
class DistillContext:
    """Frozen-model outputs on the current batch."""

    server_logits: Optional[Array] = None
    server_representation: Optional[Array] = None
    prev_local_representation: Optional[Array] = None
    prev_local_aux_representation: Optional[Array] = None


@dataclass
class LossResult:
    loss: float
    ce: float
    kd_final: float = 0.0
    kd_aux: float = 0.0
    dlogits: Optional[Array] = None
    daux_logits: Optional[Array] = None
    drep: Optional[Array] = None
    daux_rep: Optional[Array] = None

    def upstream(self) -> dict:
        return {"dloss_dlogits": self.dlogits, "dloss_dauxlogits": self.daux_logits,
                "dloss_drep": self.drep, "dloss_dauxrep": self.daux_rep}


def log_softmax(logits: Array) -> Array:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: Array) -> Array:
    return np.exp(log_softmax(logits))


def _check_finite(*arrays: Array) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite logits or representations")


def _check_labels(labels: Array, num_classes: int) -> Array:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise InputError("labels must be a 1-D integer vector")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InputError(f"label out of range [0, {num_classes})")
    return labels


def cross_entropy(logits: Array, labels: Array) -> tuple[float, Array]:
    """Mean softmax cross-entropy and its gradient (softmax - onehot) / batch."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(labels, logits.shape[1])
    _check_finite(logits)
    n = logits.shape[0]
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / n


def softened_kl(student_logits: Array, teacher_logits: Array, tau: float) -> tuple[float, Array]:
    """KL(softmax(teacher/tau) || softmax(student/tau)) averaged over rows.

    The gradient is taken through the student only. No tau**2 rescaling.
    """
    if not tau > 0:
        raise ConfigError("tau must be positive")
    student = np.asarray(student_logits, dtype=np.float64)
    teacher = np.asarray(teacher_logits, dtype=np.float64)
    if student.shape != teacher.shape:
        raise ConfigError(f"student {student.shape} and teacher {teacher.shape} shapes differ")
    _check_finite(student, teacher)
    n = student.shape[0]
    log_p_t = log_softmax(teacher / tau)
    log_p_s = log_softmax(student / tau)
    p_t = np.exp(log_p_t)
    loss = float((p_t * (log_p_t - log_p_s)).sum() / n)
    grad = (np.exp(log_p_s) - p_t) / (tau * n)
    return max(loss, 0.0), grad


def not_true_projection(logits: Array, labels: Array) -> Array:
    """Drop each row's true-class column, keeping the rest in ascending class order."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise InputError("not-true projection needs at least two classes")
    labels = _check_labels(labels, logits.shape[1])
    keep = np.ones(logits.shape, dtype=bool)
    keep[np.arange(logits.shape[0]), labels] = False
    return logits[keep].reshape(logits.shape[0], logits.shape[1] - 1)


def _scatter_not_true(reduced: Array, labels: Array, num_classes: int) -> Array:
    full = np.zeros((reduced.shape[0], num_classes))
    keep = np.ones(full.shape, dtype=bool)
    keep[np.arange(full.shape[0]), labels] = False
    full[keep] = reduced.ravel()
    return full


def not_true_kl(student_logits: Array, teacher_logits: Array, labels: Array,
                tau: float) -> tuple[float, Array]:
    """Softened KL over not-true logits; gradient scattered back to full width."""
    value, g = softened_kl(not_true_projection(student_logits, labels),
                           not_true_projection(teacher_logits, labels), tau)
    return value, _scatter_not_true(g, np.asarray(labels), student_logits.shape[1])


def _row_norms(z: Array, name: str) -> Array:
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms == 0):
        raise NumericError(f"zero-norm row in {name}: cosine similarity undefined")
    return norms


def contrastive_loss(z_local: Array, z_global: Array, z_prev: Array,
                     tau: float) -> tuple[float, Array]:
    """Model-contrastive loss with the global representation as the positive.

    Per row ``-log(e^{s_g} / (e^{s_g} + e^{s_p}))`` with ``s = cos(.)/tau``,
    which equals ``log(1 + e^{s_p - s_g})``.
    """
    if not tau > 0:
        raise ConfigError("tau must be positive")
    zl, zg, zp = (np.asarray(z, dtype=np.float64) for z in (z_local, z_global, z_prev))
    if not zl.shape == zg.shape == zp.shape:
        raise ConfigError("representations must share one shape")
    _check_finite(zl, zg, zp)
    nl, ng, np_ = _row_norms(zl, "z_local"), _row_norms(zg, "z_global"), _row_norms(zp, "z_prev")
    cos_g = (zl * zg).sum(axis=1) / (nl * ng)
    cos_p = (zl * zp).sum(axis=1) / (nl * np_)
    diff = (cos_p - cos_g) / tau
    n = zl.shape[0]
    loss = float(np.logaddexp(0.0, diff).mean())

    # d loss / d cos_g = -sigmoid(diff)/tau, d loss / d cos_p = +sigmoid(diff)/tau
    w = 0.5 * (1.0 + np.tanh(0.5 * diff)) / tau
    unit_l = zl / nl[:, None]

    def dcos(other: Array, other_norm: Array, cos: Array) -> Array:
        return (other / other_norm[:, None] - cos[:, None] * unit_l) / nl[:, None]

    grad = (w[:, None] * (dcos(zp, np_, cos_p) - dcos(zg, ng, cos_g))) / n
    return loss, grad


def _require(value, what: str):
    if value is None:
        raise ConfigError(f"missing {what}")
    return value


def ntd_loss(trace: ForwardTrace, context: DistillContext, labels: Array,
             spec: LossSpec) -> LossResult:
    """CE + (beta/b) * KL over not-true logits of client vs server."""
    if not spec.kind.uses_ntd:
        raise ConfigError(f"ntd_loss does not handle {spec.kind.value}")
    server = _require(context.server_logits, "server logits")
    ce, dlogits = cross_entropy(trace.logits, labels)
    kd, dkd = not_true_kl(trace.logits, server, labels, spec.tau)
    coef = spec.beta / spec.b
    loss = ce + coef * kd
    if coef != 0:
        dlogits = dlogits + coef * dkd
    return LossResult(loss, ce, kd_final=kd, dlogits=dlogits)


def moon_loss(trace: ForwardTrace, context: DistillContext, labels: Array,
              spec: LossSpec) -> LossResult:
    """CE + (mu/b) * contrastive(z_c, z_s, z_prev)."""
    if not spec.kind.uses_contrastive:
        raise ConfigError(f"moon_loss does not handle {spec.kind.value}")
    z_s = _require(context.server_representation, "server representation")
    z_prev = _require(context.prev_local_representation, "previous local representation")
    ce, dlogits = cross_entropy(trace.logits, labels)
    con, dcon = contrastive_loss(trace.representation, z_s, z_prev, spec.tau)
    coef = spec.mu / spec.b
    result = LossResult(ce + coef * con, ce, kd_final=con, dlogits=dlogits)
    if coef != 0:
        result.drep = coef * dcon
    return result


def hydra_loss(trace: ForwardTrace, context: DistillContext, labels: Array,
               spec: LossSpec) -> LossResult:
    """Base loss (diminished final-layer term) plus gamma * shallow distillation on the aux head."""
    if not spec.kind.uses_aux:
        raise ConfigError(f"hydra_loss does not handle {spec.kind.value}")
    if trace.aux_logits is None:
        raise ConfigError("hybrid loss needs a model with an auxiliary head")

    if spec.kind is LossKind.HYDRA_NTD:
        result = ntd_loss(trace, context, labels, spec)
        aux, daux = not_true_kl(trace.aux_logits, context.server_logits, labels, spec.tau)
        result.kd_aux = aux
        result.loss = result.loss + spec.gamma * aux
        if spec.gamma != 0:
            result.daux_logits = spec.gamma * daux
        return result

    result = moon_loss(trace, context, labels, spec)
    z_prev_aux = _require(context.prev_local_aux_representation,
                          "previous local aux representation")
    if trace.aux_representation.shape != context.server_representation.shape:
        raise ConfigError("aux representation width must equal the trunk representation width")
    aux, daux = contrastive_loss(trace.aux_representation, context.server_representation,
                                 z_prev_aux, spec.tau)
    result.kd_aux = aux
    result.loss = result.loss + spec.gamma * aux
    if spec.gamma != 0:
        result.daux_rep = spec.gamma * daux
    return result


def client_loss(trace: ForwardTrace, context: DistillContext, labels: Array,
                spec: LossSpec) -> LossResult:
    kind = spec.kind
    if kind is LossKind.CE:
        ce, dlogits = cross_entropy(trace.logits, labels)
        return LossResult(ce, ce, dlogits=dlogits)
    if kind.uses_aux:
        return hydra_loss(trace, context, labels, spec)
    if kind.uses_ntd:
        return ntd_loss(trace, context, labels, spec)
    return moon_loss(trace, context, labels, spec)
