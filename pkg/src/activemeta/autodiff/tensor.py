"""Tensor, Tape and the reverse-mode ``grad`` driver.

A :class:`Tape` is an append-only list of recorded operations.  Tensors
created through :meth:`Tape.watch` (and everything computed from them) carry
a reference to their tape and a node index.  Tensors without a tape are
constants.  There is no global "current tape": an operation records onto
the tape of its tracked inputs, so distinct tapes never interact.

Backward rules are written with the same differentiable ops as the forward
pass.  With ``create_graph=True`` they are recorded on the tape, which makes
the returned gradients differentiable (gradient-of-gradient).
"""

from __future__ import annotations

from typing import Any, Callable, Iterable, Sequence

import numpy as np

from ..errors import GradError, NonFiniteError, TapeMismatchError

# backward(upstream_grad, inputs, ctx, needs) -> one gradient (or None) per input;
# ``needs[i]`` is False when input i is untracked or precedes every requested tensor.
Backward = Callable[["Tensor", tuple["Tensor", ...], Any, tuple[bool, ...]], Sequence["Tensor | None"]]


class Node:
    __slots__ = ("op", "inputs", "backward", "ctx")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], backward: Backward | None, ctx: Any):
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.ctx = ctx

    @property
    def input_ids(self) -> tuple[int | None, ...]:
        return tuple(t.node_id for t in self.inputs)

    def __repr__(self) -> str:
        return f"Node({self.op}, inputs={self.input_ids})"


class Tape:
    """Append-only record of operations."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, value) -> "Tensor":
        """Register ``value`` (array, number or Tensor) as a differentiable leaf."""
        data = value.data if isinstance(value, Tensor) else value
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "watch")
        self.nodes.append(Node("leaf", (), None, None))
        return Tensor._wrap(arr, self, len(self.nodes) - 1)

    def _append(self, op: str, data: np.ndarray, inputs, backward, ctx) -> "Tensor":
        self.nodes.append(Node(op, inputs, backward, ctx))
        return Tensor._wrap(data, self, len(self.nodes) - 1)


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        bad = int(arr.size - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{where}: {bad} non-finite value(s) in tensor of shape {arr.shape}")


class Tensor:
    """Float64 n-d array, optionally linked to a tape node."""

    __slots__ = ("data", "tape", "node_id")
    __array_priority__ = 100

    def __init__(self, data, tape: Tape | None = None, node_id: int | None = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "Tensor")
        arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self.node_id = node_id

    @classmethod
    def _wrap(cls, arr: np.ndarray, tape: Tape | None = None, node_id: int | None = None) -> "Tensor":
        t = cls.__new__(cls)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t.data = arr
        t.tape = tape
        t.node_id = node_id
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{tag})"


def record(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], backward: Backward, ctx: Any = None) -> Tensor:
    """Wrap ``out`` and, if any input is tracked, append a node to its tape."""
    _check_finite(out, op)
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise TapeMismatchError(f"{op}: inputs belong to different tapes")
    if tape is None:
        return Tensor._wrap(out)
    return tape._append(op, out, inputs, backward, ctx)


def grad(output: Tensor, wrt: Iterable[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of scalar ``output`` with respect to each tensor in ``wrt``.

    Tensors in ``wrt`` that are on the tape but do not influence ``output``
    get zero gradients.  With ``create_graph`` the results are recorded on
    the tape and can be differentiated again.
    """
    from .ops import add

    wrt = list(wrt)
    if output.shape != ():
        raise GradError(f"grad: output must be a scalar, got shape {output.shape}")
    if not wrt:
        return []
    tape = output.tape
    if tape is None:
        raise GradError("grad: output is not recorded on a tape")
    wanted: dict[int, list[int]] = {}
    for pos, w in enumerate(wrt):
        if not isinstance(w, Tensor) or w.tape is not tape:
            raise GradError(f"grad: wrt[{pos}] is not on the output's tape")
        wanted.setdefault(w.node_id, []).append(pos)

    lo = min(wanted)
    results: list[Tensor | None] = [None] * len(wrt)
    grads: dict[int, Tensor] = {output.node_id: Tensor._wrap(np.ones(()))}
    for nid in range(output.node_id, lo - 1, -1):
        g = grads.pop(nid, None)
        if g is None:
            continue
        for pos in wanted.get(nid, ()):
            results[pos] = g
        node = tape.nodes[nid]
        if node.backward is None or nid == lo:
            continue
        needs = tuple(t.tape is not None and t.node_id >= lo for t in node.inputs)
        if not any(needs):
            continue
        if create_graph:
            inputs = node.inputs
        else:
            inputs = tuple(t.detach() for t in node.inputs)
            g = g.detach()
        in_grads = node.backward(g, inputs, node.ctx, needs)
        for t, gi, need in zip(node.inputs, in_grads, needs):
            if gi is None or not need:
                continue
            if not create_graph and gi.tape is not None:
                gi = gi.detach()
            prev = grads.get(t.node_id)
            grads[t.node_id] = gi if prev is None else add(prev, gi)

    out = []
    for w, r in zip(wrt, results):
        out.append(r if r is not None else Tensor._wrap(np.zeros(w.shape)))
    return out
