"""Define-by-run reverse-mode differentiation.

Every op builds a :class:`Node` holding its value, its parents and a closure
mapping the output gradient to one gradient per parent. Nodes whose parents
need no gradient record nothing, so inference runs at plain numpy cost.
"""
import numpy as np


class Node:
    __slots__ = ("value", "parents", "op", "_backward", "grad", "requires_grad", "name")

    def __init__(self, value, parents=(), op="leaf", backward=None,
                 requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.op = op
        self._backward = backward
        self.requires_grad = requires_grad
        self.name = name
        self.grad = np.zeros_like(self.value) if (requires_grad and not self.parents) else None

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self):
        return not self.parents

    def zero_grad(self):
        if self.is_leaf and self.requires_grad:
            self.grad = np.zeros_like(self.value)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Node{tag}(op={self.op}, shape={self.value.shape})"

    # arithmetic sugar; the ops module does the work
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def param(value, name=None):
    """Trainable leaf."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def const(value):
    if isinstance(value, Node):
        return value
    return Node(value)


def make(value, parents, op, backward):
    """Create an op output; drops the backward closure when no parent needs it."""
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Node(value, op=op)
    return Node(value, parents=parents, op=op, backward=backward, requires_grad=True)


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable trainable leaf.

    Returns a dict mapping each reached leaf to the gradient added by this
    call. Leaf ``.grad`` accumulates across calls until ``zero_grad``.
    """
    if loss.value.size != 1 or loss.value.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    grads = {id(loss): np.ones_like(loss.value)}
    reached = {}
    if not loss.requires_grad:
        return reached
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = node.grad + g if node.grad is not None else g.copy()
            reached[node] = reached[node] + g if node in reached else g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.value.shape:
                raise RuntimeError(f"{node.op}: gradient shape {pg.shape} != parent shape {p.value.shape}")
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return reached


def zero_grad(params):
    for p in params:
        p.zero_grad()
