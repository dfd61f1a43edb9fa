"""Dense ReLU network with an optional auxiliary classifier on a shallow layer.

Everything here is a pure function over flat float64 parameter vectors so that
client training can be replayed bit-for-bit and run from several workers.

Layout of a :class:`ParameterVector` (in this order)::

    trunk.0.weight, trunk.0.bias, ..., trunk.{L-1}.bias,
    head.weight, head.bias,
    aux.0.weight, aux.0.bias, ..., aux.head.weight, aux.head.bias

so the trunk+head parameters always form a prefix, independent of the aux head.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericError

Array = np.ndarray


@dataclass(frozen=True)
class ModelArch:
    input_dim: int = 784
    trunk_dims: tuple[int, ...] = (200, 100)
    num_classes: int = 10
    # after which trunk hidden layer the aux head reads; None = no aux head
    aux_tap_index: Optional[int] = 0
    aux_hidden_dims: tuple[int, ...] = (64,)
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "trunk_dims", tuple(int(d) for d in self.trunk_dims))
        object.__setattr__(self, "aux_hidden_dims", tuple(int(d) for d in self.aux_hidden_dims))
        self.validate()

    def validate(self) -> None:
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        if self.input_dim <= 0 or self.num_classes <= 0:
            raise ConfigError("input_dim and num_classes must be positive")
        if not self.trunk_dims or any(d <= 0 for d in self.trunk_dims):
            raise ConfigError(f"trunk_dims must be non-empty and positive, got {self.trunk_dims}")
        if self.aux_tap_index is not None:
            if not 0 <= self.aux_tap_index < len(self.trunk_dims) - 1:
                raise ConfigError(
                    f"aux_tap_index {self.aux_tap_index} must be a shallow trunk layer "
                    f"(0 <= index < {len(self.trunk_dims) - 1})"
                )
            if not self.aux_hidden_dims or any(d <= 0 for d in self.aux_hidden_dims):
                raise ConfigError("aux head needs at least one positive hidden width")

    @property
    def has_aux(self) -> bool:
        return self.aux_tap_index is not None

    @property
    def representation_dim(self) -> int:
        return self.trunk_dims[-1]

    @property
    def aux_representation_dim(self) -> int | None:
        return self.aux_hidden_dims[-1] if self.has_aux else None

    def without_aux(self) -> "ModelArch":
        return replace(self, aux_tap_index=None)

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes: list[tuple[str, tuple[int, ...]]] = []
        fan_in = self.input_dim
        for i, width in enumerate(self.trunk_dims):
            shapes += [(f"trunk.{i}.weight", (fan_in, width)), (f"trunk.{i}.bias", (width,))]
            fan_in = width
        shapes += [("head.weight", (fan_in, self.num_classes)), ("head.bias", (self.num_classes,))]
        if self.has_aux:
            fan_in = self.trunk_dims[self.aux_tap_index]
            for i, width in enumerate(self.aux_hidden_dims):
                shapes += [(f"aux.{i}.weight", (fan_in, width)), (f"aux.{i}.bias", (width,))]
                fan_in = width
            shapes += [("aux.head.weight", (fan_in, self.num_classes)),
                       ("aux.head.bias", (self.num_classes,))]
        return shapes

    def layout(self) -> tuple[tuple[str, int, tuple[int, ...]], ...]:
        entries = []
        offset = 0
        for name, shape in self.layer_shapes():
            entries.append((name, offset, shape))
            offset += int(np.prod(shape))
        return tuple(entries)

    def num_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layer_shapes())


@dataclass(frozen=True)
class ParameterVector:
    """Flat float64 vector plus ``(name, offset, shape)`` layout entries."""

    values: Array
    layout: tuple[tuple[str, int, tuple[int, ...]], ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ConfigError("parameter values must be a flat vector")
        expected = sum(int(np.prod(shape)) for _, _, shape in self.layout)
        if values.size != expected:
            raise ConfigError(f"parameter vector has {values.size} values, layout needs {expected}")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size

    def view(self, name: str) -> Array:
        for entry, offset, shape in self.layout:
            if entry == name:
                return self.values[offset:offset + int(np.prod(shape))].reshape(shape)
        raise KeyError(name)

    def with_values(self, values: Array) -> "ParameterVector":
        return ParameterVector(np.asarray(values, dtype=np.float64), self.layout)

    def zeros_like(self) -> "ParameterVector":
        return ParameterVector(np.zeros_like(self.values), self.layout)

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.copy(), self.layout)

    def check_layout(self, other: "ParameterVector | ModelArch") -> None:
        layout = other.layout() if isinstance(other, ModelArch) else other.layout
        if tuple(layout) != tuple(self.layout):
            raise ConfigError("parameter layout does not match")


def zero_params(arch: ModelArch) -> ParameterVector:
    return ParameterVector(np.zeros(arch.num_params()), arch.layout())


def init_params(arch: ModelArch, seed: int) -> ParameterVector:
    """Glorot-uniform weights, zero biases, drawn from PCG64(seed) in layout order."""
    rng = np.random.Generator(np.random.PCG64(seed))
    values = np.zeros(arch.num_params())
    for name, offset, shape in arch.layout():
        if name.endswith(".weight"):
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            size = shape[0] * shape[1]
            values[offset:offset + size] = rng.uniform(-limit, limit, size=size)
    return ParameterVector(values, arch.layout())


@dataclass
class ForwardTrace:
    inputs: Array
    trunk_pre: list[Array]
    trunk_post: list[Array]
    logits: Array
    aux_pre: list[Array] = field(default_factory=list)
    aux_post: list[Array] = field(default_factory=list)
    aux_logits: Optional[Array] = None

    @property
    def per_layer_activations(self) -> list[Array]:
        return self.trunk_post

    @property
    def representation(self) -> Array:
        # pre-activation of the last hidden layer: a linear projection, never clamped to zero
        return self.trunk_pre[-1]

    @property
    def aux_representation(self) -> Optional[Array]:
        return self.aux_pre[-1] if self.aux_pre else None

    @property
    def batch_size(self) -> int:
        return self.inputs.shape[0]


def _check_params(arch: ModelArch, params: ParameterVector) -> None:
    if tuple(params.layout) != arch.layout():
        raise ConfigError("parameter layout does not match the architecture")


def forward(arch: ModelArch, params: ParameterVector, batch: Array) -> ForwardTrace:
    _check_params(arch, params)
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise ConfigError(f"batch shape {x.shape} does not match input_dim {arch.input_dim}")

    trunk_pre, trunk_post = [], []
    h = x
    for i in range(len(arch.trunk_dims)):
        z = h @ params.view(f"trunk.{i}.weight") + params.view(f"trunk.{i}.bias")
        h = np.maximum(z, 0.0)
        trunk_pre.append(z)
        trunk_post.append(h)
    logits = h @ params.view("head.weight") + params.view("head.bias")

    trace = ForwardTrace(x, trunk_pre, trunk_post, logits)
    if arch.has_aux:
        a = trunk_post[arch.aux_tap_index]
        for i in range(len(arch.aux_hidden_dims)):
            z = a @ params.view(f"aux.{i}.weight") + params.view(f"aux.{i}.bias")
            a = np.maximum(z, 0.0)
            trace.aux_pre.append(z)
            trace.aux_post.append(a)
        trace.aux_logits = a @ params.view("aux.head.weight") + params.view("aux.head.bias")
    return trace


def _check_upstream(name: str, grad: Optional[Array], like: Optional[Array]) -> Optional[Array]:
    if grad is None:
        return None
    if like is None:
        raise ConfigError(f"{name} given but the trace has no such output")
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != like.shape:
        raise ConfigError(f"{name} has shape {grad.shape}, expected {like.shape}")
    return grad


def backward(
    arch: ModelArch,
    params: ParameterVector,
    trace: ForwardTrace,
    dloss_dlogits: Optional[Array] = None,
    dloss_dauxlogits: Optional[Array] = None,
    dloss_drep: Optional[Array] = None,
    dloss_dauxrep: Optional[Array] = None,
) -> ParameterVector:
    """Gradient of the loss w.r.t. all parameters given upstream gradients.

    ``None`` stands for an all-zero upstream gradient. Aux-head gradients enter
    the trunk at the tap activation, so only trunk layers at or below the tap
    receive them.
    """
    _check_params(arch, params)
    dlogits = _check_upstream("dloss_dlogits", dloss_dlogits, trace.logits)
    drep = _check_upstream("dloss_drep", dloss_drep, trace.representation)
    daux_logits = _check_upstream("dloss_dauxlogits", dloss_dauxlogits, trace.aux_logits)
    daux_rep = _check_upstream("dloss_dauxrep", dloss_dauxrep, trace.aux_representation)

    grad = params.zeros_like()
    batch = trace.batch_size
    n_trunk = len(arch.trunk_dims)

    def linear_grad(name: str, inputs: Array, dz: Array) -> None:
        grad.view(f"{name}.weight")[...] = inputs.T @ dz
        grad.view(f"{name}.bias")[...] = dz.sum(axis=0)

    # aux head first: its result is an extra gradient on the tap activation
    d_tap = None
    if arch.has_aux and (daux_logits is not None or daux_rep is not None):
        n_aux = len(arch.aux_hidden_dims)
        if daux_logits is None:
            da = np.zeros_like(trace.aux_post[-1])
        else:
            linear_grad("aux.head", trace.aux_post[-1], daux_logits)
            da = daux_logits @ params.view("aux.head.weight").T
        for i in reversed(range(n_aux)):
            dz = da * (trace.aux_pre[i] > 0)
            if i == n_aux - 1 and daux_rep is not None:
                dz = dz + daux_rep
            inputs = trace.trunk_post[arch.aux_tap_index] if i == 0 else trace.aux_post[i - 1]
            linear_grad(f"aux.{i}", inputs, dz)
            da = dz @ params.view(f"aux.{i}.weight").T
        d_tap = da

    top = n_trunk - 1
    if dlogits is not None:
        linear_grad("head", trace.trunk_post[-1], dlogits)
        dh = dlogits @ params.view("head.weight").T
    elif drep is not None:
        dh = np.zeros((batch, arch.trunk_dims[-1]))
    elif d_tap is not None:
        # layers above the tap get exactly zero
        top = arch.aux_tap_index
        dh = np.zeros_like(d_tap)
    else:
        return grad

    for i in reversed(range(top + 1)):
        if d_tap is not None and i == arch.aux_tap_index:
            dh = dh + d_tap
        dz = dh * (trace.trunk_pre[i] > 0)
        if i == n_trunk - 1 and drep is not None:
            dz = dz + drep
        inputs = trace.inputs if i == 0 else trace.trunk_post[i - 1]
        linear_grad(f"trunk.{i}", inputs, dz)
        if i > 0:
            dh = dz @ params.view(f"trunk.{i}.weight").T
    return grad


def grad_check(
    arch: ModelArch,
    params: ParameterVector,
    loss_closure: Callable[[ParameterVector, Array], tuple[float, ParameterVector]],
    batch: Array,
    eps: float = 1e-5,
    coords: Optional[Sequence[int]] = None,
) -> float:
    """Max relative error between the closure's analytic gradient and central differences.

    ``loss_closure(params, batch)`` returns ``(loss, analytic_grad)``; only the
    loss is used at the perturbed points. Per coordinate the error is
    ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if not eps > 0:
        raise ConfigError("grad_check step must be positive")
    _check_params(arch, params)
    loss, analytic = loss_closure(params, batch)
    if not np.isfinite(loss):
        raise NumericError("loss is not finite at the base point")
    analytic = np.asarray(analytic.values if isinstance(analytic, ParameterVector) else analytic)

    idx = range(len(params)) if coords is None else coords
    worst = 0.0
    work = params.values.copy()
    for i in idx:
        orig = work[i]
        work[i] = orig + eps
        up, _ = loss_closure(params.with_values(work), batch)
        work[i] = orig - eps
        down, _ = loss_closure(params.with_values(work), batch)
        work[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"loss is not finite when perturbing coordinate {i}")
        numeric = (up - down) / (2 * eps)
        err = abs(analytic[i] - numeric) / max(1e-8, abs(analytic[i]) + abs(numeric))
        worst = max(worst, err)
    return float(worst)


@dataclass(frozen=True)
class OptimizerState:
    """SGD hyperparameters plus the momentum buffer (``None`` means all zeros)."""

    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-5
    momentum_buffer: Optional[Array] = None

    def fresh(self) -> "OptimizerState":
        return replace(self, momentum_buffer=None)

    def to_dict(self) -> dict:
        return {"lr": self.lr, "momentum": self.momentum, "weight_decay": self.weight_decay}


def sgd_step(
    params: ParameterVector, grad: ParameterVector, state: OptimizerState
) -> tuple[ParameterVector, OptimizerState]:
    """buf <- momentum*buf + grad + wd*params;  params <- params - lr*buf."""
    grad.check_layout(params)
    if not np.all(np.isfinite(grad.values)):
        raise NumericError("non-finite gradient passed to sgd_step")
    d = grad.values
    if state.weight_decay != 0:
        d = d + state.weight_decay * params.values
    if state.momentum_buffer is None:
        buf = d.copy()
    else:
        if state.momentum_buffer.shape != params.values.shape:
            raise ConfigError("momentum buffer does not match the parameter layout")
        buf = state.momentum * state.momentum_buffer + d
    new_values = params.values - state.lr * buf
    return params.with_values(new_values), replace(state, momentum_buffer=buf)
