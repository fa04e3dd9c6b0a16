"""Dense f64 tensors with tape-based reverse-mode differentiation.

Only the handful of operations needed by the two DeepONet variants and their
losses are provided. Every operation checks shapes explicitly and either runs
untracked (plain numpy) or, when any operand lives on a :class:`Tape`,
records a local gradient rule on that tape.

Example::

    tape = Tape()
    w = tape.watch(weight_param)
    y = affine(x, w, b)
    loss = mse(y, target)
    tape.backward(loss)          # fills weight_param.grad
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, UsageError

GradFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def _c_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    # ascontiguousarray would promote 0-d scalars to shape (1,)
    return arr if arr.flags.c_contiguous else arr.copy()


class Tensor:
    """A C-contiguous float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: Optional["Tape"] = None, node_id: Optional[int] = None):
        self.data = _c_array(data)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.node_id is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = f", node={self.node_id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{flag})"


@dataclass
class Parameter:
    """A named trainable array and its gradient buffer."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = _c_array(self.value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size


@dataclass
class _Record:
    inputs: tuple
    output_id: int
    grad_fn: GradFn


class Tape:
    """Ordered log of tracked operations for one forward pass.

    Records are appended in execution order, so the list is already
    topologically sorted; :meth:`backward` walks it once in reverse.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._watched: dict[int, Parameter] = {}
        self._next_id = 0
        self._consumed = False

    def _new_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def watch(self, param: Parameter) -> Tensor:
        """Return a tracked leaf tensor aliasing ``param.value``."""
        t = Tensor(param.value, tape=self, node_id=self._new_id())
        self._watched[t.node_id] = param
        return t

    def constant(self, data) -> Tensor:
        return Tensor(data)

    def record(self, inputs: Sequence[Tensor], out: np.ndarray, grad_fn: GradFn) -> Tensor:
        if self._consumed:
            raise UsageError("tape already consumed by backward(); build a new one per forward pass")
        t = Tensor(out, tape=self, node_id=self._new_id())
        self.records.append(_Record(tuple(inputs), t.node_id, grad_fn))
        return t

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Reverse-accumulate d(loss)/d(param) into every watched parameter.

        Returns a ``{param.name: grad}`` mapping (the same arrays stored on the
        parameters). Parameters that do not influence the loss get zeros.
        """
        if loss.tape is not self or not loss.tracked:
            raise UsageError("loss is not on this tape")
        if loss.data.size != 1 or loss.data.ndim != 0:
            raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones((), dtype=np.float64)}
        for rec in reversed(self.records):
            g = grads.pop(rec.output_id, None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.grad_fn(g)):
                if gi is None or inp.node_id is None:
                    continue
                prev = grads.get(inp.node_id)
                grads[inp.node_id] = gi if prev is None else prev + gi
        self._consumed = True
        out = {}
        for nid, param in self._watched.items():
            g = grads.get(nid)
            param.grad = np.zeros_like(param.value) if g is None else _c_array(g)
            out[param.name] = param.grad
        return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors: Tensor) -> Optional[Tape]:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise UsageError("operands belong to different tapes")
            tape = t.tape
    return tape


def _emit(inputs: Sequence[Tensor], out: np.ndarray, grad_fn: GradFn) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out)
    return tape.record(inputs, out, grad_fn)


# ---------------------------------------------------------------------------
# operations


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def grad_fn(g):
        return g @ B.T, A.T @ g

    return _emit((a, b), A @ B, grad_fn)


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` applied over all leading dimensions of ``x``."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if w.data.ndim != 2 or b.data.ndim != 1 or b.shape[0] != w.shape[1]:
        raise DimensionError(f"affine: weight {w.shape} and bias {b.shape} disagree")
    if x.data.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"affine: input {x.shape} does not end in {w.shape[0]}")
    lead = x.shape[:-1]
    X = x.data.reshape(-1, w.shape[0])
    W = w.data
    out = (X @ W + b.data).reshape(lead + (w.shape[1],))

    def grad_fn(g):
        G = g.reshape(-1, W.shape[1])
        return (G @ W.T).reshape(x.shape), X.T @ G, G.sum(axis=0)

    return _emit((x, w, b), out, grad_fn)


def sine_activation(x, omega: float) -> Tensor:
    if not omega > 0:
        raise UsageError(f"omega must be positive, got {omega}")
    x = _as_tensor(x)
    z = omega * x.data
    out = np.sin(z)

    def grad_fn(g):
        return (g * (omega * np.cos(z)),)

    return _emit((x,), out, grad_fn)


def tanh_activation(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)

    def grad_fn(g):
        return (g * (1.0 - out * out),)

    return _emit((x,), out, grad_fn)


def identity(x) -> Tensor:
    return _as_tensor(x)


ACTIVATIONS = {"tanh": tanh_activation, "identity": identity}


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    src = x.shape

    def grad_fn(g):
        return (g.reshape(src),)

    return _emit((x,), x.data.reshape(shape), grad_fn)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")

    def grad_fn(g):
        return g, g

    return _emit((a, b), a.data + b.data, grad_fn)


def mul(a, b) -> Tensor:
    """Elementwise product of equally shaped tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    A, B = a.data, b.data

    def grad_fn(g):
        return g * B, g * A

    return _emit((a, b), A * B, grad_fn)


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    src = x.shape

    def grad_fn(g):
        return (np.broadcast_to(g, src).copy(),)

    return _emit((x,), np.asarray(x.data.sum()), grad_fn)


def dot_hidden(branch, trunk) -> Tensor:
    """``out[b, i] = sum_h branch[b, h] * trunk[b, i, h]``."""
    branch, trunk = _as_tensor(branch), _as_tensor(trunk)
    Bd, Td = branch.data, trunk.data
    if Bd.ndim != 2 or Td.ndim != 3 or Bd.shape[0] != Td.shape[0] or Bd.shape[1] != Td.shape[2]:
        raise DimensionError(f"dot_hidden: branch {branch.shape} vs trunk {trunk.shape}")
    out = np.matmul(Td, Bd[:, :, None])[:, :, 0]

    def grad_fn(g):
        gb = np.matmul(g[:, None, :], Td)[:, 0, :]
        gt = g[:, :, None] * Bd[:, None, :]
        return gb, gt

    return _emit((branch, trunk), out, grad_fn)


def fuse(branch_mid, trunk_mid) -> Tensor:
    """Broadcast product ``F[b, i, h] = branch_mid[b, h] * trunk_mid[b, i, h]``."""
    branch_mid, trunk_mid = _as_tensor(branch_mid), _as_tensor(trunk_mid)
    Bd, Td = branch_mid.data, trunk_mid.data
    if Bd.ndim != 2 or Td.ndim != 3 or Bd.shape[0] != Td.shape[0] or Bd.shape[1] != Td.shape[2]:
        raise DimensionError(f"fuse: branch {branch_mid.shape} vs trunk {trunk_mid.shape}")
    out = Bd[:, None, :] * Td

    def grad_fn(g):
        return (g * Td).sum(axis=1), g * Bd[:, None, :]

    return _emit((branch_mid, trunk_mid), out, grad_fn)


def contract_vector(branch_fin, trunk_fin) -> Tensor:
    """``out[b, i, c] = sum_h branch_fin[b, h, c] * trunk_fin[b, i, h, c]``."""
    branch_fin, trunk_fin = _as_tensor(branch_fin), _as_tensor(trunk_fin)
    Bd, Td = branch_fin.data, trunk_fin.data
    if (
        Bd.ndim != 3
        or Td.ndim != 4
        or Bd.shape[0] != Td.shape[0]
        or Bd.shape[1:] != Td.shape[2:]
    ):
        raise DimensionError(
            f"contract_vector: branch {branch_fin.shape} vs trunk {trunk_fin.shape}"
        )
    out = (Td * Bd[:, None, :, :]).sum(axis=2)

    def grad_fn(g):
        gb = (Td * g[:, :, None, :]).sum(axis=1)
        gt = g[:, :, None, :] * Bd[:, None, :, :]
        return gb, gt

    return _emit((branch_fin, trunk_fin), out, grad_fn)


def mse(pred, target) -> Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def grad_fn(g):
        scaled = (2.0 / n) * g * diff
        return scaled, -scaled

    return _emit((pred, target), np.asarray(np.mean(diff * diff)), grad_fn)
