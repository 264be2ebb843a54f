"""One-shot reverse-mode tape.

A :class:`Graph` records nodes in forward order; ``backward`` sweeps them in
reverse.  Every node receives its gradient as the sum of its consumers'
contributions taken in ascending ``(consumer id, input slot)`` order, so two
identical recordings give bitwise identical gradients.

Parameters are not nodes.  A node that consumes a parameter carries it in
``param`` and is one of the parameter's *use sites*; the parameter edge of a
node can be addressed as ``(node_id, PARAM_SLOT)`` when masking.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .errors import ContractError, GraphError, StateError
from .tensor import as_tensor

PARAM_SLOT = -1

# vjp(grad_out, needs) -> (per-input grads, param grad); entries may be None
Vjp = Callable[[np.ndarray, tuple], tuple]


class Parameter:
    """A named trainable tensor.

    ``use_sites`` and ``grad`` belong to the graph that most recently recorded
    a use of this parameter; a new recording resets them.
    """

    def __init__(self, name: str, value):
        self.name = name
        self.value = as_tensor(value)
        self.grad = np.zeros_like(self.value)
        self.use_sites: list[int] = []
        self._graph: Optional[Graph] = None

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


@dataclass
class Node:
    id: int
    op: str
    inputs: tuple
    value: np.ndarray
    barrier: bool = False
    param: Optional[Parameter] = None
    vjp: Optional[Vjp] = field(default=None, repr=False)
    needs_grad: bool = True
    meta: dict = field(default_factory=dict, repr=False)


@dataclass
class GradMap:
    """Gradients of one backward sweep, keyed by node id and parameter name."""

    nodes: dict
    params: dict
    shapes: dict = field(repr=False, default_factory=dict)

    def __getitem__(self, node_id: int) -> np.ndarray:
        if node_id in self.nodes:
            return self.nodes[node_id]
        return np.zeros(self.shapes[node_id])

    def param(self, name: str) -> np.ndarray:
        return self.params[name]


def _accumulate(contribs: list) -> np.ndarray:
    contribs.sort(key=lambda item: (item[0], item[1]))
    total = np.array(contribs[0][2], dtype=np.float64, copy=True)
    for _, _, g in contribs[1:]:
        total += g
    return total


class Graph:
    def __init__(self):
        self.nodes: list[Node] = []
        self.parameters: dict[str, Parameter] = {}
        self._backward_done = False
        self._per_use: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self.nodes)

    # -- recording ---------------------------------------------------------

    def record(
        self,
        op: str,
        inputs: Iterable[int],
        value,
        vjp: Optional[Vjp] = None,
        param: Optional[Parameter] = None,
        barrier: bool = False,
        needs_grad: Optional[bool] = None,
        **meta,
    ) -> int:
        inputs = tuple(int(i) for i in inputs)
        nid = len(self.nodes)
        for i in inputs:
            if not 0 <= i < nid:
                raise GraphError(f"unknown input id {i} (graph has {nid} nodes)")
        value = as_tensor(value)
        if not np.isfinite(value).all():
            raise ContractError(f"op {op!r} produced a non-finite value")
        if needs_grad is None:
            needs_grad = param is not None or any(self.nodes[i].needs_grad for i in inputs)
        if barrier:
            needs_grad = False
        if param is not None:
            self._bind(param)
            param.use_sites.append(nid)
        self.nodes.append(
            Node(nid, op, inputs, value, barrier, param, vjp, needs_grad, meta)
        )
        self._backward_done = False
        return nid

    def _bind(self, param: Parameter) -> None:
        known = self.parameters.get(param.name)
        if known is not None and known is not param:
            raise GraphError(f"two distinct parameters named {param.name!r}")
        if param._graph is not self:
            param._graph = self
            param.use_sites = []
            param.grad = np.zeros_like(param.value)
            self.parameters[param.name] = param

    def input(self, value, name: str = "", requires_grad: bool = True) -> int:
        return self.record("input", (), value, needs_grad=requires_grad, name=name)

    def stop_gradient(self, x: int) -> int:
        self._check_id(x)
        return self.record("stop_gradient", (x,), self.nodes[x].value.copy(), barrier=True)

    def value(self, node_id: int) -> np.ndarray:
        self._check_id(node_id)
        return self.nodes[node_id].value

    def _check_id(self, node_id: int) -> None:
        if not 0 <= node_id < len(self.nodes):
            raise GraphError(f"unknown node id {node_id}")

    # -- backward ----------------------------------------------------------

    def _sweep(self, loss: int, blocked: frozenset) -> tuple[dict, dict]:
        self._check_id(loss)
        if self.nodes[loss].value.shape != (1, 1, 1, 1):
            raise ContractError(
                f"loss must have shape (1, 1, 1, 1), got {self.nodes[loss].value.shape}"
            )
        pending: dict[int, list] = {loss: [(loss, 0, np.ones((1, 1, 1, 1)))]}
        grads: dict[int, np.ndarray] = {}
        param_contrib: dict[int, np.ndarray] = {}
        for nid in range(loss, -1, -1):
            contribs = pending.pop(nid, None)
            if not contribs:
                continue
            g = _accumulate(contribs)
            grads[nid] = g
            node = self.nodes[nid]
            if node.barrier or node.vjp is None or not node.needs_grad:
                continue
            needs = tuple(
                self.nodes[i].needs_grad and (nid, slot) not in blocked
                for slot, i in enumerate(node.inputs)
            )
            in_grads, p_grad = node.vjp(g, needs)
            for slot, (src, gi) in enumerate(zip(node.inputs, in_grads)):
                if gi is None or not needs[slot]:
                    continue
                pending.setdefault(src, []).append((nid, slot, gi))
            if node.param is not None and (nid, PARAM_SLOT) not in blocked:
                param_contrib[nid] = p_grad
        return grads, param_contrib

    def _param_grads(self, param_contrib: dict) -> tuple[dict, dict]:
        per_use: dict[int, np.ndarray] = {}
        totals: dict[str, np.ndarray] = {}
        for name, param in self.parameters.items():
            uses = [
                (nid, 0, param_contrib.get(nid, np.zeros_like(param.value)))
                for nid in param.use_sites
            ]
            for nid, _, g in uses:
                per_use[nid] = g
            totals[name] = _accumulate(uses) if uses else np.zeros_like(param.value)
        return totals, per_use

    def _grad_map(self, grads: dict, params: dict) -> GradMap:
        shapes = {n.id: n.value.shape for n in self.nodes}
        return GradMap(grads, params, shapes)

    def backward(self, loss: int) -> GradMap:
        """Full reverse sweep; fills ``Parameter.grad``.  Allowed once per recording."""
        if self._backward_done:
            raise StateError("backward already ran on this recording; re-record first")
        grads, contrib = self._sweep(loss, frozenset())
        totals, per_use = self._param_grads(contrib)
        for name, g in totals.items():
            self.parameters[name].grad = g
        self._per_use = per_use
        self._backward_done = True
        return self._grad_map(grads, totals)

    def backward_masked(self, loss: int, blocked_edges) -> GradMap:
        """Reverse sweep with the chain-rule edges in ``blocked_edges`` cut.

        Edges are ``(consumer_id, input_slot)``; ``PARAM_SLOT`` addresses a
        node's parameter edge.  Parameter gradients are returned in the map
        only and never written to ``Parameter.grad``.
        """
        blocked = frozenset((int(c), int(s)) for c, s in blocked_edges)
        for consumer, slot in blocked:
            self._check_edge(consumer, slot)
        grads, contrib = self._sweep(loss, blocked)
        totals, _ = self._param_grads(contrib)
        return self._grad_map(grads, totals)

    def _check_edge(self, consumer: int, slot: int) -> None:
        if not 0 <= consumer < len(self.nodes):
            raise ContractError(f"edge ({consumer}, {slot}): no such consumer node")
        node = self.nodes[consumer]
        if slot == PARAM_SLOT:
            if node.param is None:
                raise ContractError(f"edge ({consumer}, param): node has no parameter")
        elif not 0 <= slot < len(node.inputs):
            raise ContractError(f"edge ({consumer}, {slot}): node has {len(node.inputs)} inputs")

    def per_use_grads(self, param: Parameter) -> list[np.ndarray]:
        if not self._backward_done:
            raise StateError("per_use_grads requires a completed backward")
        if param._graph is not self:
            return []
        return [self._per_use[nid] for nid in param.use_sites]

    # -- introspection -----------------------------------------------------

    def reaches_backward(self, from_loss: int, to: int, blocked_edges=()) -> bool:
        """True iff a gradient path from ``from_loss`` to ``to`` avoids all barriers."""
        self._check_id(from_loss)
        self._check_id(to)
        blocked = {(int(c), int(s)) for c, s in blocked_edges}
        seen = {from_loss}
        queue = deque([from_loss])
        while queue:
            nid = queue.popleft()
            if nid == to:
                return True
            node = self.nodes[nid]
            if node.barrier:
                continue
            for slot, src in enumerate(node.inputs):
                if (nid, slot) in blocked or src in seen:
                    continue
                seen.add(src)
                queue.append(src)
        return False

    def consumers(self, node_id: int) -> list[tuple[int, int]]:
        """All ``(consumer_id, slot)`` edges leaving ``node_id``."""
        return [
            (n.id, slot)
            for n in self.nodes[node_id + 1:]
            for slot, src in enumerate(n.inputs)
            if src == node_id
        ]

    def dump(self) -> str:
        lines = []
        for n in self.nodes:
            ids = ",".join(str(i) for i in n.inputs) or "-"
            pname = n.param.name if n.param is not None else "-"
            lines.append(f"node {n.id} {n.op} inputs={ids} barrier={int(n.barrier)} param={pname}")
        return "\n".join(lines) + "\n"
