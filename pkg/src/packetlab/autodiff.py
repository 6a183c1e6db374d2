"""Reverse-mode automatic differentiation over dense float64 arrays.

The graph is built once from symbolic leaves, then evaluated with concrete
bindings.  Gradients are available with respect to any differentiable leaf,
including network *inputs*, which is what the gradient-direction attacks and
the packet derivative need.

Conventions:
- everything is float64; finiteness is enforced after every primitive,
- relu has subgradient 0 at 0,
- conv2d is stride 1 with zero "same" padding,
- the only broadcast is bias_add over the batch axis.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ADError", "ShapeError", "NonFiniteError", "UnboundLeafError",
    "Node", "Graph", "leaf", "forward", "gradient",
    "add", "sub", "mul", "scale", "matmul", "bias_add", "relu",
    "conv2d", "maxpool2", "reshape", "clamp", "ssum", "mean_all",
    "softmax_xent", "ensure_finite",
]


class ADError(Exception):
    pass


class ShapeError(ADError):
    pass


class NonFiniteError(ADError):
    pass


class UnboundLeafError(ADError):
    pass


def ensure_finite(arr, where=""):
    """Return arr as a float64 array, raising NonFiniteError on NaN/Inf."""
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {where or 'array'}")
    return arr


_node_counter = 0


class Node:
    """One primitive operation (or leaf) in a computation graph."""

    __slots__ = ("op", "inputs", "attrs", "id")

    def __init__(self, op, inputs=(), **attrs):
        global _node_counter
        self.op = op
        self.inputs = tuple(inputs)
        self.attrs = attrs
        self.id = _node_counter
        _node_counter += 1

    def __repr__(self):
        return f"Node({self.op}, id={self.id})"


def leaf(name, differentiable=True):
    """A named placeholder bound to a concrete array at evaluation time."""
    return Node("leaf", name=name, differentiable=differentiable)


# ---------------------------------------------------------------- builders

def add(a, b):
    return Node("add", (a, b))


def sub(a, b):
    return Node("sub", (a, b))


def mul(a, b):
    return Node("mul", (a, b))


def scale(a, c):
    return Node("scale", (a,), c=float(c))


def matmul(a, b):
    return Node("matmul", (a, b))


def bias_add(x, b):
    """x + b with b broadcast over the batch axis (dense or conv layout)."""
    return Node("bias_add", (x, b))


def relu(x):
    return Node("relu", (x,))


def conv2d(x, w):
    """x: (N, C, H, W), w: (F, C, kh, kw); stride 1, zero same padding."""
    return Node("conv2d", (x, w))


def maxpool2(x):
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped."""
    return Node("maxpool2", (x,))


def reshape(x, shape):
    return Node("reshape", (x,), shape=tuple(shape))


def clamp(x, lo, hi):
    return Node("clamp", (x,), lo=float(lo), hi=float(hi))


def ssum(x):
    return Node("ssum", (x,))


def mean_all(x):
    return Node("mean_all", (x,))


def softmax_xent(logits, labels):
    """Per-sample cross-entropy of softmax(logits) against integer labels.

    labels must be a non-differentiable leaf bound to an int array (N,).
    Returns shape (N,).
    """
    return Node("softmax_xent", (logits, labels))


# ---------------------------------------------------------------- kernels

def _im2col(xp, kh, kw):
    """Padded input (N, C, H, W) -> patch matrix (N, Ho*Wo, C*kh*kw)."""
    n, c, h, w = xp.shape
    ho, wo = h - kh + 1, w - kw + 1
    s = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, (n, c, kh, kw, ho, wo), (s[0], s[1], s[2], s[3], s[2], s[3]))
    return windows.transpose(0, 4, 5, 1, 2, 3).reshape(n, ho * wo, c * kh * kw)


def _conv_forward(x, w, want_cols=False):
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: bad shapes {x.shape} / {w.shape}")
    f, c, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _im2col(xp, kh, kw)
    y = cols @ w.reshape(f, -1).T                      # (N, Ho*Wo, F)
    n, _, h, wdt = x.shape
    out = y.transpose(0, 2, 1).reshape(n, f, h, wdt)
    return (out, cols) if want_cols else out


def _pool_crop(x):
    n, c, h, w = x.shape
    return x[:, :, :h - h % 2, :w - w % 2]


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels, n, k):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape}, expected ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError("label out of range")
    return labels.astype(np.intp)


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _eval_op(node, vals):
    op = node.op
    if op == "add":
        a, b = vals
        _same_shape(a, b, op)
        return a + b
    if op == "sub":
        a, b = vals
        _same_shape(a, b, op)
        return a - b
    if op == "mul":
        a, b = vals
        _same_shape(a, b, op)
        return a * b
    if op == "scale":
        return vals[0] * node.attrs["c"]
    if op == "matmul":
        a, b = vals
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
        return a @ b
    if op == "bias_add":
        x, b = vals
        if x.ndim == 2 and b.shape == (x.shape[1],):
            return x + b
        if x.ndim == 4 and b.shape == (x.shape[1],):
            return x + b[:, None, None]
        raise ShapeError(f"bias_add: {x.shape} + {b.shape}")
    if op == "relu":
        return np.maximum(vals[0], 0.0)
    if op == "conv2d":
        return _conv_forward(vals[0], vals[1])   # cols cached by _run instead
    if op == "maxpool2":
        x = _pool_crop(vals[0])
        n, c, h, w = x.shape
        return x.reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))
    if op == "reshape":
        shape = node.attrs["shape"]
        x = vals[0]
        if np.prod(shape) != x.size and -1 not in shape:
            raise ShapeError(f"reshape: {x.shape} -> {shape}")
        return x.reshape(shape)
    if op == "clamp":
        return np.clip(vals[0], node.attrs["lo"], node.attrs["hi"])
    if op == "ssum":
        return np.asarray(vals[0].sum())
    if op == "mean_all":
        return np.asarray(vals[0].mean())
    if op == "softmax_xent":
        logits, labels = vals
        if logits.ndim != 2:
            raise ShapeError(f"softmax_xent: logits {logits.shape}")
        n, k = logits.shape
        labels = _check_labels(labels, n, k)
        z = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        return lse - z[np.arange(n), labels]
    raise ADError(f"unknown op {op}")


def _grad_op(node, g, vals, out, aux=None, need=None):
    """Partial adjoints per input; entries whose input is not on a path to a
    requested leaf may be returned as None (and are skipped for the
    expensive ops)."""
    op = node.op
    if need is None:
        need = (True,) * len(node.inputs)
    if op == "add":
        return (g, g)
    if op == "sub":
        return (g, -g)
    if op == "mul":
        a, b = vals
        return (g * b, g * a)
    if op == "scale":
        return (g * node.attrs["c"],)
    if op == "matmul":
        a, b = vals
        return (g @ b.T if need[0] else None,
                a.T @ g if need[1] else None)
    if op == "bias_add":
        x, b = vals
        if x.ndim == 2:
            return (g, g.sum(axis=0))
        return (g, g.sum(axis=(0, 2, 3)))
    if op == "relu":
        return (g * (vals[0] > 0),)
    if op == "conv2d":
        x, w = vals
        dw = None
        if need[1]:
            f = w.shape[0]
            n, _, h, wdt = x.shape
            cols = aux
            if cols is None:
                kh, kw = w.shape[2], w.shape[3]
                xp = np.pad(x, ((0, 0), (0, 0), (kh // 2, kh // 2),
                                (kw // 2, kw // 2)))
                cols = _im2col(xp, kh, kw)
            gm = g.reshape(n, f, h * wdt).transpose(0, 2, 1)
            dw = np.tensordot(gm, cols, axes=([0, 1], [0, 1])).reshape(w.shape)
        dx = None
        if need[0]:
            wt = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
            dx = _conv_forward(g, wt)
        return (dx, dw)
    if op == "maxpool2":
        x = vals[0]
        xc = _pool_crop(x)
        n, c, h, w = xc.shape
        wnd = xc.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        flat = wnd.reshape(n, c, h // 2, w // 2, 4)
        amax = flat.argmax(axis=-1)                    # first max wins: fixed tie-break
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, amax[..., None], g[..., None], axis=-1)
        dxc = dflat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(
            0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        dx = np.zeros_like(x)
        dx[:, :, :h, :w] = dxc
        return (dx,)
    if op == "reshape":
        return (g.reshape(vals[0].shape),)
    if op == "clamp":
        x = vals[0]
        inside = (x > node.attrs["lo"]) & (x < node.attrs["hi"])
        return (g * inside,)
    if op == "ssum":
        return (np.broadcast_to(g, vals[0].shape).copy(),)
    if op == "mean_all":
        return (np.full(vals[0].shape, float(g) / vals[0].size),)
    if op == "softmax_xent":
        logits, labels = vals
        n, k = logits.shape
        labels = _check_labels(labels, n, k)
        p = _softmax(logits)
        p[np.arange(n), labels] -= 1.0
        return (p * np.asarray(g).reshape(n, 1) if np.ndim(g) else p * float(g), None)
    raise ADError(f"unknown op {op}")


# ---------------------------------------------------------------- graph

def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for inp in node.inputs:
            stack.append((inp, False))
    return order


class Graph:
    """A frozen computation rooted at one node.

    Immutable after construction; forward/gradient are pure functions of the
    bindings and safe to call concurrently.
    """

    def __init__(self, root):
        self.root = root
        self.order = _toposort(root)
        self.leaves = {n.attrs["name"]: n for n in self.order if n.op == "leaf"}
        self._needed_cache = {}

    def forward(self, bindings):
        return self._run(bindings)[0][self.root.id]

    def _needed(self, wrt):
        """Ids of nodes on some path from a requested leaf to the root."""
        key = tuple(sorted(wrt))
        if key in self._needed_cache:
            return self._needed_cache[key]
        wanted = set(key)
        needed = set()
        for node in self.order:
            if node.op == "leaf":
                if node.attrs["name"] in wanted:
                    needed.add(node.id)
            elif any(i.id in needed for i in node.inputs):
                needed.add(node.id)
        self._needed_cache[key] = needed
        return needed

    def _run(self, bindings, cols_for=()):
        """Evaluate all nodes; cache im2col patches for convs in cols_for."""
        vals, aux = {}, {}
        for node in self.order:
            if node.op == "leaf":
                name = node.attrs["name"]
                if name not in bindings:
                    raise UnboundLeafError(f"leaf '{name}' not bound")
                v = np.asarray(bindings[name])
                if node.attrs.get("differentiable", True):
                    v = ensure_finite(v, f"leaf '{name}'")
                vals[node.id] = v
            elif node.op == "conv2d" and node.id in cols_for:
                out, cols = _conv_forward(vals[node.inputs[0].id],
                                          vals[node.inputs[1].id],
                                          want_cols=True)
                aux[node.id] = cols
                vals[node.id] = ensure_finite(out, "op 'conv2d'")
            else:
                out = _eval_op(node, [vals[i.id] for i in node.inputs])
                vals[node.id] = ensure_finite(out, f"op '{node.op}'")
        return vals, aux

    def gradient(self, bindings, wrt):
        """Reverse-mode gradients of the scalar root for the named leaves."""
        return self.value_and_grad(bindings, wrt)[1]

    def value_and_grad(self, bindings, wrt, aux=()):
        """(root value, leaf gradients[, aux node values]) from one pass."""
        wrt = list(wrt)
        for name in wrt:
            if name not in self.leaves:
                raise UnboundLeafError(f"unknown leaf '{name}'")
            if not self.leaves[name].attrs.get("differentiable", True):
                raise ADError(f"leaf '{name}' is not differentiable")
        needed = self._needed(wrt) if wrt else set()
        cols_for = {n.id for n in self.order
                    if n.op == "conv2d" and n.inputs[1].id in needed}
        vals, op_aux = self._run(bindings, cols_for=cols_for)
        root_val = vals[self.root.id]
        if np.size(root_val) != 1:
            raise ShapeError(f"gradient needs a scalar root, got {root_val.shape}")
        grads = self._leaf_grads(vals, wrt, bindings, op_aux, needed) if wrt else {}
        if aux:
            return root_val, grads, [vals[a.id] for a in aux]
        return root_val, grads

    def _leaf_grads(self, vals, wrt, bindings, op_aux=None, needed=None):
        op_aux = op_aux or {}
        if needed is None:
            needed = self._needed(wrt)
        grads = {self.root.id: np.ones(np.shape(vals[self.root.id]))}
        out = {}
        for node in reversed(self.order):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if node.op == "leaf":
                name = node.attrs["name"]
                if name in wrt:
                    out[name] = ensure_finite(g, f"gradient of '{name}'")
                continue
            need = tuple(i.id in needed for i in node.inputs)
            if not any(need):
                continue
            ins = [vals[i.id] for i in node.inputs]
            partials = _grad_op(node, g, ins, vals[node.id],
                                aux=op_aux.pop(node.id, None), need=need)
            for inp, p, wanted in zip(node.inputs, partials, need):
                if p is None or not wanted:
                    continue
                if inp.op == "leaf" and not inp.attrs.get("differentiable", True):
                    continue
                if inp.id in grads:
                    grads[inp.id] = grads[inp.id] + p
                else:
                    grads[inp.id] = p
        for name in wrt:
            if name not in out:
                out[name] = np.zeros(np.shape(bindings[name]))
        return out


def forward(graph, bindings):
    if isinstance(graph, Node):
        graph = Graph(graph)
    return graph.forward(bindings)


def gradient(graph, bindings, wrt):
    if isinstance(graph, Node):
        graph = Graph(graph)
    return graph.gradient(bindings, wrt)
