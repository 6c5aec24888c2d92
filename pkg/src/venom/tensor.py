"""Dense float64 tensors with reverse-mode differentiation.

Just enough machinery for small MLPs, softmax classifiers and input-gradient
extraction: a fixed set of differentiable primitives (add, mul, matmul, affine,
relu, tanh, log_softmax, sum, mean, square, gather_rows), a per-evaluation Tape
that records them in execution order, and a backward pass that replays the tape
once in reverse.  Everything else is composed from these.

A Tape is confined to one logical task and is discarded after backward; there is
no persistent graph.  Tensors are immutable during shared reads, so trained
models can be evaluated concurrently as long as each caller owns its own tape.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolationError, DetachedGraphError, NumericError


class Tensor:
    """A dense float64 array, optionally participating in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolationError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{rg})"

    # Sugar over the fixed primitive set; subtraction is composed, not a primitive.
    def __add__(self, other):
        return add(self, other if isinstance(other, Tensor) else Tensor(other))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return add(self, mul(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], None]


class Tape:
    """Ordered record of primitive applications for one evaluation.

    Operands always precede their results (execution order), so one reverse
    sweep visits every node exactly once.  A tape can be consumed by backward
    only once; build a fresh one per evaluation.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if getattr(_TAPE_SLOT, "active", None) is not None:
            raise ContractViolationError("a tape is already active in this task")
        _TAPE_SLOT.active = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_SLOT.active = None
        return False

    def __len__(self) -> int:
        return len(self.nodes)


# one active tape per thread: parallel callers own disjoint tapes
_TAPE_SLOT = threading.local()


def _record(output: Tensor, inputs: tuple[Tensor, ...], backward: Callable[[np.ndarray], None]) -> Tensor:
    tape = getattr(_TAPE_SLOT, "active", None)
    if tape is not None and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        tape.nodes.append(_Node(output, inputs, backward))
    return output


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ContractViolationError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data)

    def bwd(g: np.ndarray) -> None:
        _accum(a, g)
        _accum(b, g)

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; ``b`` may be a same-shape Tensor or a python scalar."""
    if isinstance(b, Tensor):
        if a.data.shape != b.data.shape:
            raise ContractViolationError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
        out = Tensor(a.data * b.data)

        def bwd(g: np.ndarray) -> None:
            _accum(a, g * b.data)
            _accum(b, g * a.data)

        return _record(out, (a, b), bwd)

    s = float(b)
    out = Tensor(a.data * s)

    def bwd_s(g: np.ndarray) -> None:
        _accum(a, g * s)

    return _record(out, (a,), bwd_s)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ContractViolationError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g: np.ndarray) -> None:
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _record(out, (a, b), bwd)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Row-batched x @ w + b with b broadcast over rows."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ContractViolationError(f"affine shape mismatch: {x.data.shape} @ {w.data.shape}")
    if b.data.shape != (w.data.shape[1],):
        raise ContractViolationError(f"affine bias shape {b.data.shape} != ({w.data.shape[1]},)")
    out = Tensor(x.data @ w.data + b.data)

    def bwd(g: np.ndarray) -> None:
        _accum(x, g @ w.data.T)
        _accum(w, x.data.T @ g)
        _accum(b, g.sum(axis=0))

    return _record(out, (x, w, b), bwd)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))

    def bwd(g: np.ndarray) -> None:
        _accum(x, g * (x.data > 0.0))

    return _record(out, (x,), bwd)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y)

    def bwd(g: np.ndarray) -> None:
        _accum(x, g * (1.0 - y * y))

    return _record(out, (x,), bwd)


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log softmax of a 2-d tensor, numerically stabilised."""
    if x.data.ndim != 2:
        raise ContractViolationError(f"log_softmax expects 2-d input, got shape {x.data.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = shifted - lse
    out = Tensor(y)

    def bwd(g: np.ndarray) -> None:
        _accum(x, g - np.exp(y) * g.sum(axis=1, keepdims=True))

    return _record(out, (x,), bwd)


def tsum(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())

    def bwd(g: np.ndarray) -> None:
        _accum(x, np.broadcast_to(g, x.data.shape).copy())

    return _record(out, (x,), bwd)


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(x.data.sum() / n)

    def bwd(g: np.ndarray) -> None:
        _accum(x, np.broadcast_to(g / n, x.data.shape).copy())

    return _record(out, (x,), bwd)


def square(x: Tensor) -> Tensor:
    out = Tensor(x.data * x.data)

    def bwd(g: np.ndarray) -> None:
        _accum(x, g * 2.0 * x.data)

    return _record(out, (x,), bwd)


def gather_rows(table: Tensor, indices) -> Tensor:
    """Select rows of a 2-d table by integer index; backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.data.ndim != 2:
        raise ContractViolationError(f"gather_rows expects 2-d table, got shape {table.data.shape}")
    if idx.ndim != 1 or idx.min(initial=0) < 0 or (idx.size and idx.max() >= table.data.shape[0]):
        raise ContractViolationError("gather_rows index out of range")
    out = Tensor(table.data[idx])

    def bwd(g: np.ndarray) -> None:
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, idx, g)

    return _record(out, (table,), bwd)


# ---------------------------------------------------------------------------
# backward


def backward_grad(tape: Tape, output_scalar: Tensor) -> None:
    """Replay ``tape`` in reverse, accumulating gradients into ``.grad`` buffers.

    The output must be a single-element tensor produced by the tape.  Leaves
    with ``requires_grad`` end up with a gradient buffer; everything else is
    left untouched.  A tape can only be consumed once.
    """
    if output_scalar.size != 1:
        raise ContractViolationError(f"backward output has {output_scalar.size} elements, expected 1")
    if not tape.nodes:
        raise ContractViolationError("backward over an empty tape")
    if tape._consumed:
        raise ContractViolationError("tape already consumed by a previous backward")
    if not any(node.output is output_scalar for node in tape.nodes):
        raise DetachedGraphError("output is not connected to this tape; no gradients to report")
    tape._consumed = True

    output_scalar.grad = np.ones_like(output_scalar.data)
    for node in reversed(tape.nodes):
        if node.output.grad is not None:
            node.backward(node.output.grad)


def clear_grads(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# plain MLPs, used directly by the victim classifiers and by gradient checks


@dataclass
class Layer:
    w: Tensor
    b: Tensor
    activation: str  # "relu" | "tanh" | "none"


@dataclass
class MLP:
    layers: list[Layer] = field(default_factory=list)

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.append(layer.w)
            out.append(layer.b)
        return out


_ACTIVATIONS = {"relu": relu, "tanh": tanh, "none": lambda t: t}


def mlp_init(sizes: Sequence[int], activation: str, rng: np.random.Generator) -> MLP:
    """He-style initialisation; the final layer is linear."""
    layers = []
    for i in range(len(sizes) - 1):
        fan_in = sizes[i]
        w = Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, sizes[i + 1])), requires_grad=True)
        b = Tensor(np.zeros(sizes[i + 1]), requires_grad=True)
        act = activation if i < len(sizes) - 2 else "none"
        layers.append(Layer(w, b, act))
    return MLP(layers)


def forward_eval(net: MLP, x: Tensor) -> Tensor:
    """Evaluate an MLP on a (batch, features) input.

    Records onto the active tape if any participating tensor requires grad.
    """
    if x.data.ndim != 2:
        raise ContractViolationError(f"forward_eval expects (batch, features) input, got {x.data.shape}")
    if not net.layers:
        raise ContractViolationError("forward_eval on an empty network")
    if x.data.shape[1] != net.layers[0].w.data.shape[0]:
        raise ContractViolationError(
            f"input width {x.data.shape[1]} != network input width {net.layers[0].w.data.shape[0]}"
        )
    for p in net.parameters():
        if not np.isfinite(p.data).all():
            raise NumericError("non-finite network parameter")
    h = x
    for layer in net.layers:
        if layer.activation not in _ACTIVATIONS:
            raise ContractViolationError(f"unknown activation {layer.activation!r}")
        h = _ACTIVATIONS[layer.activation](affine(h, layer.w, layer.b))
    return h


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst: tuple[int, int] | None  # (parameter index, flat coordinate) of the worst error

    def __str__(self) -> str:
        tag = "pass" if self.passed else "FAIL"
        loc = "" if self.worst is None else f" worst at param {self.worst[0]} coord {self.worst[1]}"
        return f"gradcheck {tag}: max rel error {self.max_rel_error:.3e}{loc}"


def finite_diff_check(net: MLP, x: Tensor, tolerance: float, step: float = 1e-5) -> GradCheckReport:
    """Compare reverse-mode gradients of sum(net(x)) against central differences.

    Checks every requires_grad parameter and, when flagged, the input itself.
    """
    if tolerance <= 0:
        raise ContractViolationError("tolerance must be positive")

    checked = [t for t in [x, *net.parameters()] if t.requires_grad]
    clear_grads(checked)
    with Tape() as tape:
        loss = tsum(forward_eval(net, x))
    backward_grad(tape, loss)

    def loss_value() -> float:
        return float(forward_eval(net, x).data.sum())

    max_err = 0.0
    worst = None
    for pi, t in enumerate(checked):
        auto = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for ci in range(flat.size):
            orig = flat[ci]
            flat[ci] = orig + step
            up = loss_value()
            flat[ci] = orig - step
            down = loss_value()
            flat[ci] = orig
            fd = (up - down) / (2.0 * step)
            a = auto.reshape(-1)[ci]
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            if err > max_err:
                max_err = err
                worst = (pi, ci)
    clear_grads(checked)
    return GradCheckReport(passed=max_err <= tolerance, max_rel_error=max_err, worst=worst)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_init(params: Sequence[Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    if lr <= 0:
        raise ContractViolationError("learning rate must be positive")
    return AdamState(
        lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        m=[np.zeros_like(p.data) for p in params],
        v=[np.zeros_like(p.data) for p in params],
    )


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> None:
    """One bias-corrected Adam update, in place on ``params``."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ContractViolationError("adam_step parameter/gradient count mismatch")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ContractViolationError(f"adam_step grad shape {g.shape} != param shape {p.data.shape}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
