"""Dense float32 tensors with tape-recorded reverse-mode gradients.

Every operator returns a new :class:`Tensor` that remembers its parents and a
closure computing the vector-Jacobian product.  :func:`backward` walks that
tape once and writes gradients only into tensors that belong to a
non-frozen :class:`ParamGroup`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, StateError, ValidationError

BackwardFn = Callable[[np.ndarray, Sequence[bool]], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "name", "_parents", "_backward")

    def __init__(self, data, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    @classmethod
    def zeros(cls, *shape: int, name: str | None = None) -> "Tensor":
        return cls(np.zeros(shape, dtype=np.float32), name=name)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


def _result(data: np.ndarray, parents: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    out._parents = parents
    out._backward = fn
    return out


class Role(enum.Enum):
    FAST = "fast"
    SLOW = "slow"
    FROZEN = "frozen"


@dataclass
class ParamGroup:
    params: list[Tensor]
    role: Role = Role.SLOW

    def as_role(self, role: Role) -> "ParamGroup":
        """Same tensors, different role (the classifier is both fast and slow)."""
        return ParamGroup(self.params, role)

    @property
    def trainable(self) -> bool:
        return self.role is not Role.FROZEN

    def numel(self) -> int:
        return sum(p.size for p in self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)


# ---------------------------------------------------------------------------
# forward operators


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, int, int]:
    n, c, _, _ = x.shape
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return cols, oh, ow


def _col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c, h, w = x_shape
    d = dcols.reshape(n, oh, ow, c, kh, kw)
    dx = np.zeros(x_shape, dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx


def conv_output_size(size: int, kernel: int, stride: int, padding: int = 0) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Valid (unpadded by default) cross-correlation over NCHW input."""
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be rank 4 [N,C,H,W], got shape {x.shape}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be rank 4 [K,C,kh,kw], got shape {weight.shape}")
    k, c, kh, kw = weight.shape
    if x.shape[1] != c:
        raise ShapeError(f"channel mismatch: input axis 1 is {x.shape[1]}, weight axis 1 is {c}")
    if bias.shape != (k,):
        raise ShapeError(f"bias shape {bias.shape} does not match weight axis 0 ({k})")
    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if xd.shape[2] < kh or xd.shape[3] < kw:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than input spatial axes 2,3 ({xd.shape[2]}x{xd.shape[3]})"
        )
    n = xd.shape[0]
    cols, oh, ow = _im2col(xd, kh, kw, stride)
    wmat = weight.data.reshape(k, -1)
    out = (cols @ wmat.T + bias.data).reshape(n, oh, ow, k).transpose(0, 3, 1, 2)
    padded_shape = xd.shape

    def backward(g, need):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, k)
        dx = dw = db = None
        if need[0]:
            dx = _col2im(gm @ wmat, padded_shape, kh, kw, stride, oh, ow)
            if padding:
                dx = dx[:, :, padding:-padding, padding:-padding]
        if need[1]:
            dw = (gm.T @ cols).reshape(weight.shape)
        if need[2]:
            db = gm.sum(axis=0)
        return dx, dw, db

    return _result(np.ascontiguousarray(out), (x, weight, bias), backward)


def fc(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Fully connected layer: ``x @ weight.T + bias`` with weight of shape [out, in]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"fc expects rank-2 input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"fc feature mismatch: input axis 1 is {x.shape[1]}, weight axis 1 is {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match weight axis 0 ({weight.shape[0]})")
    out = x.data @ weight.data.T + bias.data

    def backward(g, need):
        return (
            g @ weight.data if need[0] else None,
            g.T @ x.data if need[1] else None,
            g.sum(axis=0) if need[2] else None,
        )

    return _result(out, (x, weight, bias), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, np.float32(0))

    def backward(g, need):
        return (g * (x.data > 0),)

    return _result(out, (x,), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two equally shaped tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul operands differ in shape: {a.shape} vs {b.shape}")
    out = a.data * b.data

    def backward(g, need):
        return (g * b.data if need[0] else None, g * a.data if need[1] else None)

    return _result(out, (a, b), backward)


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    out = x.data.reshape(shape[0], -1)

    def backward(g, need):
        return (g.reshape(shape),)

    return _result(out, (x,), backward)


def softmax_ce(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over the batch; returns a scalar tensor."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be rank 2 [batch, classes], got {logits.shape}")
    n, c = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for a batch of {n}")
    if n == 0:
        raise ValidationError("empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise ValidationError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = np.mean(logsum - z[np.arange(n), labels])
    probs = np.exp(z - logsum[:, None])

    def backward(g, need):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return ((d * (float(g.reshape(-1)[0]) / n)).astype(np.float32),)

    return _result(np.asarray(loss, dtype=np.float32), (logits,), backward)


# ---------------------------------------------------------------------------
# reverse pass


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, groups: Iterable[ParamGroup]) -> None:
    """Accumulate d(loss)/d(param) into ``.grad`` of every non-frozen param.

    Params the loss does not depend on receive an exact zero gradient.
    Frozen groups are never written.  The tape is released afterwards, so
    a second call on the same loss is a state error.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    if loss._backward is None:
        raise StateError("backward() called on a tensor with no recorded forward pass")
    groups = list(groups)
    targets = {id(p) for grp in groups if grp.trainable for p in grp.params}

    order = _topological(loss)
    # which nodes lie on a path to a trainable param
    needed: dict[int, bool] = {}
    for node in order:
        needed[id(node)] = id(node) in targets or any(needed[id(p)] for p in node._parents)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[int, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if id(node) in targets:
                leaf_grads[id(node)] = g
            continue
        mask = [needed[id(p)] for p in node._parents]
        for p, pg in zip(node._parents, node._backward(g, mask)):
            if pg is None or not needed[id(p)]:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg

    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()

    for grp in groups:
        if not grp.trainable:
            continue
        for p in grp.params:
            g = leaf_grads.get(id(p))
            g = np.zeros_like(p.data) if g is None else g.astype(np.float32, copy=False)
            p.grad = g if p.grad is None else p.grad + g


# ---------------------------------------------------------------------------
# optimizers


def sgd_step(group: ParamGroup, lr: float) -> None:
    """In-place ``p -= lr * grad``; clears the gradients afterwards."""
    if not group.trainable:
        raise StateError("cannot step a frozen parameter group")
    for p in group.params:
        if p.grad is None:
            raise StateError(f"sgd_step: parameter {p.name or p.shape} has no gradient")
    for p in group.params:
        p.data -= np.float32(lr) * p.grad
        p.grad = None


@dataclass
class AdamState:
    """First and second moment buffers, one pair per parameter in group order."""

    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_group(cls, group: ParamGroup) -> "AdamState":
        return cls(
            [np.zeros_like(p.data) for p in group.params],
            [np.zeros_like(p.data) for p in group.params],
        )

    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.m) + sum(a.nbytes for a in self.v)


def adam_step(
    group: ParamGroup,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    t: int = 1,
) -> None:
    """Bias-corrected Adam update; ``t`` is the 1-based step count."""
    if t <= 0:
        raise ValidationError(f"Adam step counter must be >= 1, got {t}")
    if not group.trainable:
        raise StateError("cannot step a frozen parameter group")
    if len(state.m) != len(group.params):
        raise StateError("Adam moment state was not allocated for this group")
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, m, v in zip(group.params, state.m, state.v):
        if p.grad is None:
            raise StateError(f"adam_step: parameter {p.name or p.shape} has no gradient")
        g = p.grad
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(np.float32)
        p.grad = None


class Adam:
    """Stateful wrapper that owns the moments and the step counter."""

    def __init__(self, group: ParamGroup, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.group = group.as_role(Role.SLOW) if group.role is Role.FAST else group
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState.for_group(group)
        self.t = 0

    def step(self) -> None:
        self.t += 1
        adam_step(self.group, self.state, self.lr, self.beta1, self.beta2, self.eps, self.t)
