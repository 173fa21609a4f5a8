"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation builds a fresh node holding the result values, the
parent nodes, and a closure that routes the incoming gradient to those
parents. Calling :meth:`Tensor.backward` on a scalar walks the recorded
graph once in reverse topological order. Arrays that took part in a
recorded forward pass must not be mutated in place; optimizer updates
therefore replace parameter arrays instead of editing them.

The module also carries the Adam optimizer, a central-finite-difference
gradient checker, and the text checkpoint format used to persist named
arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import DataFormatError, NumericError

CHECKPOINT_HEADER = "asis-ckpt v1"


class Tensor:
    """A numpy float64 array plus the bookkeeping for reverse mode."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        values,
        requires_grad: bool = False,
        parents: tuple = (),
        backward: Callable[[np.ndarray], None] | None = None,
    ):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.values)

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every grad-requiring node.

        Leaf gradients are allocated on first touch, so a leaf the graph
        never reaches keeps ``grad`` as None.
        """
        if self.values.size != 1:
            raise ValueError("backward() requires a scalar root")
        order = _toposort(self)
        self.grad = np.ones_like(self.values)
        for node in reversed(order):
            if node._backward is not None and node.requires_grad and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _toposort(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _accum(node: Tensor, grad: np.ndarray) -> None:
    if node.requires_grad:
        if node.grad is None:
            seeded = np.array(grad, dtype=np.float64)
            if seeded.shape != node.values.shape:
                seeded = np.broadcast_to(seeded, node.values.shape).copy()
            node.grad = seeded
        else:
            node.grad += grad


def _needs_grad(*nodes: Tensor) -> bool:
    return any(n.requires_grad for n in nodes)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a row vector b broadcast over rows of a."""
    if a.shape == b.shape:
        out_values = a.values + b.values

        def backward(grad: np.ndarray) -> None:
            _accum(a, grad)
            _accum(b, grad)

    elif a.values.ndim == 2 and b.shape == (a.shape[1],):
        out_values = a.values + b.values[None, :]

        def backward(grad: np.ndarray) -> None:
            _accum(a, grad)
            _accum(b, grad.sum(axis=0))

    else:
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}")
    return Tensor(out_values, _needs_grad(a, b), (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.shape != b.shape:
        raise ValueError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out_values = a.values * b.values

    def backward(grad: np.ndarray) -> None:
        _accum(a, grad * b.values)
        _accum(b, grad * a.values)

    return Tensor(out_values, _needs_grad(a, b), (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (no gradient for the constant)."""
    c = float(c)

    def backward(grad: np.ndarray) -> None:
        _accum(a, grad * c)

    return Tensor(a.values * c, a.requires_grad, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a 2-D (M, K) tensor with a 2-D (K, N) tensor."""
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ValueError("matmul expects 2-D tensors")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dims differ, {a.shape} vs {b.shape}")
    out_values = a.values @ b.values

    def backward(grad: np.ndarray) -> None:
        _accum(a, grad @ b.values.T)
        _accum(b, a.values.T @ grad)

    return Tensor(out_values, _needs_grad(a, b), (a, b), backward)


def relu(a: Tensor) -> Tensor:
    """max(x, 0); the subgradient at 0 is taken as 0."""
    mask = a.values > 0.0
    out_values = np.where(mask, a.values, 0.0)

    def backward(grad: np.ndarray) -> None:
        _accum(a, grad * mask)

    return Tensor(out_values, a.requires_grad, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""

    def backward(grad: np.ndarray) -> None:
        _accum(a, np.full_like(a.values, float(grad)))

    return Tensor(np.float64(a.values.sum()), a.requires_grad, (a,), backward)


def global_max_pool(a: Tensor) -> Tensor:
    """Column-wise max of an (N, F) tensor, shape (F,).

    The gradient flows to the first row attaining each column maximum.
    """
    if a.values.ndim != 2 or a.shape[0] < 1:
        raise ValueError("global_max_pool expects a non-empty (N, F) tensor")
    arg = a.values.argmax(axis=0)
    cols = np.arange(a.shape[1])
    out_values = a.values[arg, cols]

    def backward(grad: np.ndarray) -> None:
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.values)
            np.add.at(a.grad, (arg, cols), grad)

    return Tensor(out_values, a.requires_grad, (a,), backward)


def broadcast_rows(v: Tensor, n: int) -> Tensor:
    """Tile a (F,) vector into an (n, F) matrix; gradient sums over rows."""
    if v.values.ndim != 1:
        raise ValueError("broadcast_rows expects a 1-D tensor")
    out_values = np.broadcast_to(v.values, (n, v.shape[0])).copy()

    def backward(grad: np.ndarray) -> None:
        _accum(v, grad.sum(axis=0))

    return Tensor(out_values, v.requires_grad, (v,), backward)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    """Column-wise concatenation of two (N, *) tensors."""
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ValueError(f"concat_cols: incompatible shapes {a.shape}, {b.shape}")
    out_values = np.concatenate([a.values, b.values], axis=1)
    split = a.shape[1]

    def backward(grad: np.ndarray) -> None:
        _accum(a, grad[:, :split])
        _accum(b, grad[:, split:])

    return Tensor(out_values, _needs_grad(a, b), (a, b), backward)


def group_max(a: Tensor, indices: np.ndarray) -> Tensor:
    """Row-group maximum: out[i, c] = max over k of a[indices[i, k], c].

    ``indices`` is an integer (N, K) matrix treated as a constant. The
    gradient flows only through the entry selected for each (i, c); ties
    resolve to the first index in the row.
    """
    indices = np.asarray(indices)
    if a.values.ndim != 2 or indices.ndim != 2:
        raise ValueError("group_max expects a 2-D tensor and a 2-D index matrix")
    if indices.size == 0:
        raise ValueError("group_max: empty index matrix")
    if indices.min() < 0 or indices.max() >= a.shape[0]:
        raise ValueError("group_max: index out of range")
    gathered = a.values[indices]                      # (N, K, F)
    arg = gathered.argmax(axis=1)                     # (N, F), first max
    out_values = np.take_along_axis(gathered, arg[:, None, :], axis=1)[:, 0, :]
    source_rows = np.take_along_axis(indices, arg, axis=1)

    def backward(grad: np.ndarray) -> None:
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.values)
            cols = np.broadcast_to(np.arange(a.shape[1]), grad.shape)
            np.add.at(a.grad, (source_rows, cols), grad)

    return Tensor(out_values, a.requires_grad, (a,), backward)


class BatchNormState:
    """Running first and second moments of one normalization layer."""

    __slots__ = ("mean", "var")

    def __init__(self, width: int):
        self.mean = np.zeros(width, dtype=np.float64)
        self.var = np.ones(width, dtype=np.float64)


def batchnorm(
    x: Tensor,
    bn_scale: Tensor,
    bn_shift: Tensor,
    state: BatchNormState,
    epsilon: float = 1e-5,
    momentum: float = 0.9,
    training: bool = True,
) -> Tensor:
    """Column-wise batch normalization of an (N, F) tensor.

    Training mode normalizes by batch statistics (population variance)
    and folds them into ``state`` with the given momentum on the old
    value. Inference mode normalizes by the running statistics, which
    stay fixed.
    """
    if x.values.ndim != 2:
        raise ValueError("batchnorm expects an (N, F) tensor")
    n, width = x.shape
    if bn_scale.shape != (width,) or bn_shift.shape != (width,):
        raise ValueError("batchnorm: scale/shift width mismatch")
    if training:
        if n < 2:
            raise ValueError("batchnorm in training mode needs at least 2 rows")
        mean = x.values.mean(axis=0)
        var = x.values.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + epsilon)
        x_hat = (x.values - mean) * inv_std
        state.mean = momentum * state.mean + (1.0 - momentum) * mean
        state.var = momentum * state.var + (1.0 - momentum) * var

        def backward(grad: np.ndarray) -> None:
            d_hat = grad * bn_scale.values
            if x.requires_grad:
                term = (
                    n * d_hat
                    - d_hat.sum(axis=0)
                    - x_hat * (d_hat * x_hat).sum(axis=0)
                )
                _accum(x, term * inv_std / n)
            _accum(bn_scale, (grad * x_hat).sum(axis=0))
            _accum(bn_shift, grad.sum(axis=0))

    else:
        inv_std = 1.0 / np.sqrt(state.var + epsilon)
        x_hat = (x.values - state.mean) * inv_std

        def backward(grad: np.ndarray) -> None:
            _accum(x, grad * bn_scale.values * inv_std)
            _accum(bn_scale, (grad * x_hat).sum(axis=0))
            _accum(bn_shift, grad.sum(axis=0))

    out_values = bn_scale.values * x_hat + bn_shift.values
    return Tensor(out_values, _needs_grad(x, bn_scale, bn_shift), (x, bn_scale, bn_shift), backward)


@dataclass
class AdamState:
    """Adam moments plus the step counter and learning-rate schedule."""

    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    lr_halve_interval: int = 300_000
    timestep: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def current_lr(self) -> float:
        """Learning rate that the next step will use."""
        return self.learning_rate * 0.5 ** (self.timestep // self.lr_halve_interval)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState) -> float:
    """Apply one Adam update to every named parameter; returns the lr used.

    The learning rate starts at ``state.learning_rate`` and is halved
    after every ``lr_halve_interval`` completed steps. Parameter arrays
    are replaced, not mutated, so earlier tapes stay valid.
    """
    lr = state.current_lr()
    state.timestep += 1
    t = state.timestep
    bias1 = 1.0 - state.beta1 ** t
    bias2 = 1.0 - state.beta2 ** t
    for name, param in params.items():
        grad = np.asarray(grads[name], dtype=np.float64)
        if grad.shape != param.shape:
            raise ValueError(f"adam_step: gradient shape mismatch for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(param.values)
            state.v[name] = np.zeros_like(param.values)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        m_hat = m / bias1
        v_hat = v / bias2
        param.values = param.values - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return lr


def gradient_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must return a scalar tensor computed from ``params`` alone (it
    is re-evaluated many times). Every coordinate of every parameter is
    perturbed by ±``step``. The relative error for a coordinate is
    |analytic - fd| / max(1, |analytic|, |fd|).
    """
    for param in params.values():
        param.zero_grad()
    out = f(params)
    if not np.isfinite(out.values):
        raise NumericError("gradient_check: function value is not finite")
    out.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.values))
        for name, p in params.items()
    }
    worst = 0.0
    for name, param in params.items():
        base = param.values
        flat_base = base.ravel()
        for i in range(flat_base.size):
            for sign in (+1.0, -1.0):
                shifted = base.copy()
                shifted.ravel()[i] = flat_base[i] + sign * step
                param.values = shifted
                value = float(f(params).values)
                if not np.isfinite(value):
                    param.values = base
                    raise NumericError("gradient_check: perturbed value is not finite")
                if sign > 0:
                    f_plus = value
                else:
                    f_minus = value
            param.values = base
            fd = (f_plus - f_minus) / (2.0 * step)
            a = analytic[name].ravel()[i]
            err = abs(a - fd) / max(1.0, abs(a), abs(fd))
            worst = max(worst, err)
    return worst


def save_checkpoint(path, arrays: Mapping[str, np.ndarray]) -> None:
    """Write named arrays as text: a header, then two lines per array.

    Line one carries the name, the rank and the dimensions; line two the
    row-major values with full round-trip precision.
    """
    lines = [CHECKPOINT_HEADER]
    for name, array in arrays.items():
        array = np.asarray(array, dtype=np.float64)
        if " " in name:
            raise ValueError(f"checkpoint names must not contain spaces: {name!r}")
        dims = " ".join(str(d) for d in array.shape)
        lines.append(f"{name} {array.ndim}" + (f" {dims}" if dims else ""))
        lines.append(" ".join(repr(float(x)) for x in array.ravel()))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise DataFormatError(f"{path}: missing checkpoint header {CHECKPOINT_HEADER!r}")
    arrays: dict[str, np.ndarray] = {}
    pos = 1
    while pos < len(lines):
        if lines[pos].strip() == "":
            pos += 1
            continue
        head = lines[pos].split()
        if len(head) < 2:
            raise DataFormatError(f"{path}: line {pos + 1}: malformed array header")
        name = head[0]
        try:
            ndim = int(head[1])
            shape = tuple(int(d) for d in head[2:])
        except ValueError as exc:
            raise DataFormatError(f"{path}: line {pos + 1}: malformed array header") from exc
        if len(shape) != ndim:
            raise DataFormatError(f"{path}: line {pos + 1}: rank/dimension count mismatch")
        if pos + 1 >= len(lines):
            raise DataFormatError(f"{path}: line {pos + 1}: missing value line for {name!r}")
        try:
            flat = np.fromiter((float(x) for x in lines[pos + 1].split()), dtype=np.float64)
        except ValueError as exc:
            raise DataFormatError(f"{path}: line {pos + 2}: unreadable values") from exc
        expected = int(np.prod(shape)) if shape else 1
        if flat.size != expected:
            raise DataFormatError(
                f"{path}: line {pos + 2}: {name!r} expects {expected} values, got {flat.size}"
            )
        if name in arrays:
            raise DataFormatError(f"{path}: duplicate array name {name!r}")
        arrays[name] = flat.reshape(shape)
        pos += 2
    return arrays
