"""
Dense matrix arithmetic with reverse-mode differentiation and the Adam optimizer

Values are 2-D float64 numpy arrays (scalars are 1x1, vectors are 1xn rows).
A Tape records every operation of one forward pass (define-by-run); it is
rebuilt for each minibatch and confined to a single worker. Recorded values
are read-only once produced, so they can be shared freely.

Broadcasting is limited to a 1xn row (bias) or a 1x1 scalar against an mxn
operand.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from mmnorm.utils.errors import ContractError, DimensionError, NumericError

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]
Operand = Union["Tensor", np.ndarray, float, int]


def as_matrix(value) -> np.ndarray:
    """Copy a scalar, vector or matrix into a read-only 2-D float64 array"""
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError("matrices are two-dimensional", shape=arr.shape)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class TapeNode:
    """One recorded operation: kind, input node ids, forward value, local derivative"""
    node_id: int
    op: str
    inputs: Tuple[int, ...]
    value: np.ndarray
    requires_grad: bool
    backward: Optional[BackwardFn] = None


class Tensor:
    """Handle to a node on a tape"""

    __slots__ = ("tape", "node_id")
    # ndarray operands defer to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.node_id = node_id

    @property
    def node(self) -> TapeNode:
        return self.tape.nodes[self.node_id]

    @property
    def value(self) -> np.ndarray:
        return self.node.value

    @property
    def shape(self) -> Tuple[int, int]:
        return self.node.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.node.requires_grad

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ContractError("item() needs a 1x1 tensor", shape=self.shape)
        return float(self.value[0, 0])

    def numpy(self) -> np.ndarray:
        return np.array(self.value)

    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Operand) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Operand) -> "Tensor":
        return div(other, self)

    def __matmul__(self, other: Operand) -> "Tensor":
        return matmul(self, other)

    def __rmatmul__(self, other: Operand) -> "Tensor":
        return matmul(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __repr__(self) -> str:
        return f"<Tensor(node={self.node_id}, op={self.node.op}, shape={self.shape})>"


class Tape:
    """Dynamic computation tape; node ids are assigned in creation order"""

    def __init__(self):
        self.nodes: List[TapeNode] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(
        self,
        op: str,
        inputs: Sequence[Tensor],
        value: np.ndarray,
        backward: Optional[BackwardFn],
        requires_grad: Optional[bool] = None,
    ) -> Tensor:
        """Append a node; rejects non-finite forward values"""
        value = np.asarray(value, dtype=np.float64)
        if value.ndim != 2:
            raise DimensionError(f"{op}: result is not a matrix", shape=value.shape)
        if not np.isfinite(value).all():
            raise NumericError(f"non-finite result in {op}", op=op, node=len(self.nodes))
        value.flags.writeable = False

        input_ids = tuple(t.node_id for t in inputs)
        if requires_grad is None:
            requires_grad = any(self.nodes[i].requires_grad for i in input_ids)
        node = TapeNode(
            node_id=len(self.nodes),
            op=op,
            inputs=input_ids,
            value=value,
            requires_grad=requires_grad,
            backward=backward if requires_grad else None,
        )
        self.nodes.append(node)
        return Tensor(self, node.node_id)

    def leaf(self, value) -> Tensor:
        """Differentiable input (a parameter or a perturbed input)"""
        return self.record("leaf", (), as_matrix(value), None, requires_grad=True)

    def constant(self, value) -> Tensor:
        return self.record("constant", (), as_matrix(value), None, requires_grad=False)

    def backward(self, loss: Tensor, wrt: Sequence[Tensor]) -> List[np.ndarray]:
        """
        Reverse pass from a scalar loss

        Nodes are visited once each in reverse creation order, which is a
        reverse topological order. Gradients from shared subexpressions are
        summed. Tensors in `wrt` with no path to the loss get zeros.
        """
        self._own(loss, *wrt)
        if loss.shape != (1, 1):
            raise ContractError("backward needs a scalar loss", shape=loss.shape)

        wanted = {t.node_id for t in wrt}
        grads: Dict[int, np.ndarray] = {loss.node_id: np.ones((1, 1))}
        for node in reversed(self.nodes[: loss.node_id + 1]):
            if node.backward is None:
                continue
            if node.node_id in wanted:
                upstream = grads.get(node.node_id)
            else:
                upstream = grads.pop(node.node_id, None)
            if upstream is None:
                continue
            for input_id, grad in zip(node.inputs, node.backward(upstream)):
                if grad is None or not self.nodes[input_id].requires_grad:
                    continue
                if input_id in grads:
                    grads[input_id] = grads[input_id] + grad
                else:
                    grads[input_id] = grad

        return [
            np.array(grads[t.node_id]) if t.node_id in grads else np.zeros(t.shape)
            for t in wrt
        ]

    def _own(self, *tensors: Tensor) -> None:
        for t in tensors:
            if t.tape is not self:
                raise ContractError("tensor belongs to a different tape", node=t.node_id)


def _operands(*xs: Operand) -> Tuple[Tape, List[Tensor]]:
    tapes = {id(x.tape): x.tape for x in xs if isinstance(x, Tensor)}
    if not tapes:
        raise ContractError("operation needs at least one tensor operand")
    if len(tapes) > 1:
        raise ContractError("operands belong to different tapes")
    tape = next(iter(tapes.values()))
    return tape, [x if isinstance(x, Tensor) else tape.constant(x) for x in xs]


def _broadcast_shape(op: str, left: Tuple[int, int], right: Tuple[int, int]) -> Tuple[int, int]:
    if left == right:
        return left
    for small, big in ((left, right), (right, left)):
        if small == (1, 1) or (small[0] == 1 and small[1] == big[1]):
            return big
    raise DimensionError(f"{op}: incompatible shapes", left=left, right=right)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape == (1, 1):
        return grad.sum().reshape(1, 1)
    return grad.sum(axis=0, keepdims=True)


# Forward operations

def add(a: Operand, b: Operand) -> Tensor:
    tape, (a, b) = _operands(a, b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return tape.record(
        "add", (a, b), a.value + b.value,
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a: Operand, b: Operand) -> Tensor:
    tape, (a, b) = _operands(a, b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return tape.record(
        "sub", (a, b), a.value - b.value,
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a: Operand, b: Operand) -> Tensor:
    tape, (a, b) = _operands(a, b)
    _broadcast_shape("mul", a.shape, b.shape)
    av, bv = a.value, b.value
    return tape.record(
        "mul", (a, b), av * bv,
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a: Operand, b: Operand) -> Tensor:
    tape, (a, b) = _operands(a, b)
    _broadcast_shape("div", a.shape, b.shape)
    av, bv = a.value, b.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv
    return tape.record(
        "div", (a, b), out,
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * av / (bv * bv), bv.shape)),
    )


def neg(a: Operand) -> Tensor:
    tape, (a,) = _operands(a)
    return tape.record("neg", (a,), -a.value, lambda g: (-g,))


def scale(a: Operand, factor: float) -> Tensor:
    """Multiply by a fixed python scalar"""
    tape, (a,) = _operands(a)
    factor = float(factor)
    return tape.record("scale", (a,), factor * a.value, lambda g: (factor * g,))


def matmul(a: Operand, b: Operand) -> Tensor:
    tape, (a, b) = _operands(a, b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError("matmul: inner dimensions differ", left=a.shape, right=b.shape)
    av, bv = a.value, b.value
    return tape.record("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def exp(a: Operand) -> Tensor:
    tape, (a,) = _operands(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return tape.record("exp", (a,), out, lambda g: (g * out,))


def log(a: Operand) -> Tensor:
    tape, (a,) = _operands(a)
    av = a.value
    if (av <= 0).any():
        raise NumericError("log of a non-positive value", node=a.node_id, minimum=float(av.min()))
    return tape.record("log", (a,), np.log(av), lambda g: (g / av,))


def relu(a: Operand) -> Tensor:
    tape, (a,) = _operands(a)
    active = a.value > 0
    return tape.record("relu", (a,), np.where(active, a.value, 0.0), lambda g: (g * active,))


def tanh(a: Operand) -> Tensor:
    tape, (a,) = _operands(a)
    out = np.tanh(a.value)
    return tape.record("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def square(a: Operand) -> Tensor:
    tape, (a,) = _operands(a)
    av = a.value
    return tape.record("square", (a,), av * av, lambda g: (2.0 * av * g,))


def sum(a: Operand, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    """Sum of all entries (1x1), of each column (axis=0, 1xn) or of each row (axis=1, mx1)"""
    tape, (a,) = _operands(a)
    shape = a.shape
    if axis is None:
        out = np.array([[a.value.sum()]])
    elif axis in (0, 1):
        out = a.value.sum(axis=axis, keepdims=True)
    else:
        raise ContractError("axis must be None, 0 or 1", axis=axis)
    return tape.record("sum", (a,), out, lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Operand, axis: Optional[int] = None) -> Tensor:
    tape, (a,) = _operands(a)
    count = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / count)


def concat_cols(parts: Sequence[Operand]) -> Tensor:
    """Horizontal concatenation; all parts need the same row count"""
    if not parts:
        raise ContractError("concat_cols needs at least one part")
    tape, parts = _operands(*parts)
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise DimensionError("concat_cols: row counts differ", rows=sorted(rows))
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    out = np.hstack([p.value for p in parts])
    return tape.record(
        "concat_cols", parts, out,
        lambda g: tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(bounds) - 1)),
    )


def logsumexp(a: Operand, axis: int = 1) -> Tensor:
    """Stable log(sum(exp(a))) along one axis, keeping that axis with size 1"""
    tape, (a,) = _operands(a)
    if axis not in (0, 1):
        raise ContractError("axis must be 0 or 1", axis=axis)
    av = a.value
    peak = av.max(axis=axis, keepdims=True)
    shifted = np.exp(av - peak)
    total = shifted.sum(axis=axis, keepdims=True)
    out = peak + np.log(total)
    weights = shifted / total
    return tape.record("logsumexp", (a,), out, lambda g: (g * weights,))


def clamp(a: Operand, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    """Clip into [lo, hi]; gradient passes only where the input lies inside the range"""
    tape, (a,) = _operands(a)
    av = a.value
    inside = np.ones(av.shape, dtype=bool)
    if lo is not None:
        inside &= av >= lo
    if hi is not None:
        inside &= av <= hi
    out = np.clip(av, lo, hi) if (lo is not None or hi is not None) else av
    return tape.record("clamp", (a,), out, lambda g: (g * inside,))


def stop_gradient(a: Operand) -> Tensor:
    """Identity forward; blocks every derivative on the way back"""
    tape, (a,) = _operands(a)
    return tape.record("stop_gradient", (a,), a.value, None, requires_grad=False)


# Optimizer

@dataclass(frozen=True)
class AdamState:
    """Moment estimates and hyperparameters for one parameter matrix"""
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(
        cls,
        shape: Tuple[int, ...],
        lr: float = 1e-5,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> "AdamState":
        return cls(np.zeros(shape), np.zeros(shape), 0, lr, beta1, beta2, eps)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> Tuple[np.ndarray, AdamState]:
    """
    One bias-corrected Adam update

    Returns:
        (updated parameter, updated state); inputs are not modified
    """
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise DimensionError(
            "adam_step: shapes differ", param=param.shape, grad=grad.shape, state=state.m.shape
        )
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    updated = param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if not np.isfinite(updated).all():
        raise NumericError("Adam produced a non-finite parameter", step=t)
    updated.flags.writeable = False
    return updated, replace(state, m=m, v=v, t=t)


class Adam:
    """Adam over a named parameter group"""

    def __init__(
        self,
        params: Mapping[str, np.ndarray],
        lr: float = 1e-5,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.states: Dict[str, AdamState] = {
            name: AdamState.fresh(value.shape, lr, beta1, beta2, eps)
            for name, value in params.items()
        }

    @property
    def names(self) -> List[str]:
        return list(self.states)

    def step(
        self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]
    ) -> Dict[str, np.ndarray]:
        """Return a new parameter mapping; entries outside this group are passed through untouched"""
        updated = dict(params)
        for name, state in self.states.items():
            updated[name], self.states[name] = adam_step(params[name], grads[name], state)
        return updated
