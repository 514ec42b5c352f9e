"""Recording, replay and reverse-mode differentiation of kernel applications."""

from __future__ import annotations

import itertools
from collections.abc import Callable, Iterator, Mapping
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from finetune_lab.autodiff.kernels import KERNELS, ShapeMismatchError
from finetune_lab.autodiff.tensor import Node, Tensor
from finetune_lab.utils import FinetuneLabError


class GraphError(FinetuneLabError):
    """Misuse of a graph: unknown op, unbound input, backward before forward."""

    pass


_grad_enabled: ContextVar[bool] = ContextVar("grad_enabled", default=True)
_tracer: ContextVar[Graph | None] = ContextVar("tracer", default=None)
_node_ids = itertools.count()


@contextmanager
def no_grad() -> Iterator[None]:
    """Run kernels without recording nodes (evaluation, EMA swaps, finite differences)."""

    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


def apply(kind: str, *inputs: Tensor, node_id: int | None = None, **attrs: Any) -> Tensor:
    """Run kernel ``kind`` on ``inputs`` and record a node when gradients are needed."""

    kernel = KERNELS.get(kind)
    if kernel is None:
        raise GraphError(f"unknown op kind {kind!r}")
    nid = next(_node_ids) if node_id is None else node_id
    try:
        out_data, saved = kernel.forward(*(t.data for t in inputs), **attrs)
    except ShapeMismatchError as exc:
        exc.node_id = nid
        raise
    needs_grad = _grad_enabled.get() and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs_grad)
    if needs_grad:
        out.node = Node(id=nid, kind=kind, inputs=inputs, attrs=attrs, saved=saved)
    tracer = _tracer.get()
    if tracer is not None:
        tracer._record(kind, inputs, attrs, out)
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in seen:
            continue
        seen.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in tensor.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Apply the chain rule from a scalar ``loss`` down to every requires-grad leaf.

    Leaf gradients are added into ``Tensor.grad``; intermediate gradients are kept
    local to this call.
    """

    if loss.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for tensor in reversed(_topological_order(loss)):
        grad = grads.pop(id(tensor), None)
        if grad is None:
            continue
        node = tensor.node
        if node is None:
            tensor.accumulate_grad(grad)
            continue
        input_grads = KERNELS[node.kind].backward(node.saved, grad, **node.attrs)
        for parent, parent_grad in zip(node.inputs, input_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + parent_grad
            else:
                grads[key] = parent_grad


@dataclass(slots=True)
class _Record:
    kind: str
    inputs: tuple[int, ...]
    attrs: dict[str, Any]


@dataclass
class Graph:
    """A topologically ordered program over named inputs.

    Slots are numbered in creation order, so every input id precedes its consumer.
    A slot is a named input, a captured constant tensor, or a kernel record.
    """

    input_slots: dict[str, int] = field(default_factory=dict)
    output_slots: dict[str, int] = field(default_factory=dict)
    constants: dict[int, Tensor] = field(default_factory=dict)
    records: dict[int, _Record] = field(default_factory=dict)
    num_slots: int = 0
    _slot_of: dict[int, int] = field(default_factory=dict, repr=False)
    _values: list[Tensor | None] | None = field(default=None, repr=False)

    @classmethod
    def trace(cls, fn: Callable[..., Any], **example_inputs: Any) -> Graph:
        """Record ``fn`` applied to ``example_inputs``.

        ``fn`` returns a tensor (named ``"output"``) or a mapping of named tensors.
        Tensors reached by ``fn`` that are not among the inputs are captured by
        reference as constants, so replay reads their current data.
        """

        graph = cls()
        placeholders: dict[str, Tensor] = {}
        for name, value in example_inputs.items():
            tensor = value if isinstance(value, Tensor) else Tensor(value)
            placeholders[name] = tensor
            graph.input_slots[name] = graph._new_slot(tensor)

        token = _tracer.set(graph)
        try:
            result = fn(**placeholders)
        finally:
            _tracer.reset(token)

        outputs = {"output": result} if isinstance(result, Tensor) else dict(result)
        for name, tensor in outputs.items():
            graph.output_slots[name] = graph._slot(tensor)
        graph._slot_of.clear()
        return graph

    @property
    def executed(self) -> bool:
        return self._values is not None

    def _new_slot(self, tensor: Tensor) -> int:
        slot = self.num_slots
        self.num_slots += 1
        self._slot_of[id(tensor)] = slot
        return slot

    def _slot(self, tensor: Tensor) -> int:
        slot = self._slot_of.get(id(tensor))
        if slot is None:
            slot = self._new_slot(tensor)
            self.constants[slot] = tensor
        return slot

    def _record(
        self, kind: str, inputs: tuple[Tensor, ...], attrs: dict[str, Any], out: Tensor
    ) -> None:
        input_ids = tuple(self._slot(t) for t in inputs)
        slot = self._new_slot(out)
        self.records[slot] = _Record(kind=kind, inputs=input_ids, attrs=dict(attrs))

    def forward(self, inputs: Mapping[str, Any]) -> dict[str, Tensor]:
        """Materialize every slot for the bound ``inputs`` and return the outputs."""

        missing = sorted(set(self.input_slots) - set(inputs))
        if missing:
            raise GraphError(f"unbound graph inputs: {missing}")
        unknown = sorted(set(inputs) - set(self.input_slots))
        if unknown:
            raise GraphError(f"unknown graph inputs: {unknown}")

        values: list[Tensor | None] = [None] * self.num_slots
        for name, slot in self.input_slots.items():
            value = inputs[name]
            values[slot] = value if isinstance(value, Tensor) else Tensor(value)
        for slot, tensor in self.constants.items():
            values[slot] = tensor

        token = _tracer.set(None)
        try:
            for slot in range(self.num_slots):
                record = self.records.get(slot)
                if record is None:
                    continue
                if record.kind not in KERNELS:
                    raise GraphError(f"node {slot}: unknown op kind {record.kind!r}")
                args = tuple(values[i] for i in record.inputs)
                values[slot] = apply(record.kind, *args, node_id=slot, **record.attrs)
        finally:
            _tracer.reset(token)

        self._values = values
        return {name: values[slot] for name, slot in self.output_slots.items()}

    def backward(self, output: str = "output") -> dict[str, np.ndarray | None]:
        """Differentiate the last forward's ``output`` and return input gradients."""

        if self._values is None:
            raise GraphError("backward called before forward")
        if output not in self.output_slots:
            raise GraphError(f"unknown graph output {output!r}")
        backward(self._values[self.output_slots[output]])
        return {
            name: self._values[slot].grad
            for name, slot in self.input_slots.items()
            if self._values[slot].requires_grad
        }


def forward(graph: Graph, inputs: Mapping[str, Any]) -> dict[str, Tensor]:
    """Functional alias of :meth:`Graph.forward`."""

    return graph.forward(inputs)
