"""Dense tensor ops with reverse-mode differentiation.

Tensors are plain ``numpy.ndarray`` values in NCHW layout. A :class:`Graph`
records a DAG of primitive nodes; because a node can only reference nodes
that already exist, node ids are a topological order by construction.

Example
-------
>>> g = Graph(np.float64)
>>> x = g.input("x")
>>> y = g.relu(x)
>>> _ = g.forward({x: np.array([-1.0, 0.0, 2.0])})
>>> g.value(y)
array([0., 0., 2.])
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import RngStream

OP_KINDS = (
    "input",
    "parameter",
    "conv2d",
    "relu",
    "sigmoid",
    "max_pool2d",
    "upsample_nearest2x",
    "concat_channels",
    "add",
    "dropout",
    "global_average_pool",
    "affine_scale_bias",
)
MODES = ("train", "eval", "mc_dropout")


class GraphError(Exception):
    pass


class ShapeError(GraphError, ValueError):
    pass


class UnboundInputError(GraphError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class BackwardBeforeForwardError(GraphError, RuntimeError):
    pass


@dataclass(eq=False)
class Node:
    id: int
    op_kind: str
    inputs: tuple[int, ...]
    attributes: dict[str, Any] = field(default_factory=dict)
    name: str | None = None
    value: np.ndarray | None = None
    adjoint: np.ndarray | None = None
    _cache: Any = field(default=None, repr=False)

    def label(self) -> str:
        return f"node {self.id} ({self.op_kind}{' ' + repr(self.name) if self.name else ''})"


def conv_out_extent(n: int, kernel: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - kernel) // stride + 1


def _im2col(x, k, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)
    return cols, ho, wo


def _col2im(dcols, x_shape, k, stride, pad, ho, wo):
    n, c, h, w = x_shape
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    d = dcols.reshape(n, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[:, :, i, j]
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return dx


class Graph:
    """Single-writer computation graph.

    ``forward`` and ``backward`` mutate node values and adjoints, so one
    instance must not be driven from several threads; use :meth:`clone`.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self._names: dict[str, int] = {}
        self._forward_done = False

    # -- construction -------------------------------------------------
    def _add(self, op_kind, inputs=(), name=None, **attributes) -> int:
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(f"unknown input node {i} for {op_kind}")
        if name is not None:
            if name in self._names:
                raise GraphError(f"duplicate node name {name!r}")
            self._names[name] = len(self.nodes)
        node = Node(len(self.nodes), op_kind, tuple(inputs), attributes, name)
        self.nodes.append(node)
        self._forward_done = False
        return node.id

    def input(self, name: str) -> int:
        return self._add("input", (), name)

    def parameter(self, name: str, value) -> int:
        nid = self._add("parameter", (), name)
        self.set_parameter(nid, value)
        return nid

    def conv2d(self, x, w, b=None, *, stride=1, pad=0, name=None) -> int:
        inputs = (x, w) if b is None else (x, w, b)
        return self._add("conv2d", inputs, name, stride=int(stride), pad=int(pad))

    def relu(self, x, name=None) -> int:
        return self._add("relu", (x,), name)

    def sigmoid(self, x, name=None) -> int:
        return self._add("sigmoid", (x,), name)

    def max_pool2d(self, x, *, kernel=2, stride=None, name=None) -> int:
        return self._add("max_pool2d", (x,), name, kernel=int(kernel),
                         stride=int(stride if stride is not None else kernel))

    def upsample_nearest2x(self, x, name=None) -> int:
        return self._add("upsample_nearest2x", (x,), name)

    def concat_channels(self, *xs, name=None) -> int:
        if len(xs) < 2:
            raise GraphError("concat_channels needs at least two inputs")
        return self._add("concat_channels", xs, name)

    def add(self, a, b, name=None) -> int:
        return self._add("add", (a, b), name)

    def dropout(self, x, rate=0.0, *, stream=None, name=None) -> int:
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        sid = len(self.nodes) if stream is None else int(stream)
        return self._add("dropout", (x,), name, rate=float(rate), stream=sid)

    def global_average_pool(self, x, name=None) -> int:
        return self._add("global_average_pool", (x,), name)

    def affine_scale_bias(self, x, scale, bias, name=None) -> int:
        return self._add("affine_scale_bias", (x, scale, bias), name)

    # -- accessors ----------------------------------------------------
    def __len__(self):
        return len(self.nodes)

    def node(self, ref) -> Node:
        if isinstance(ref, str):
            if ref not in self._names:
                raise KeyError(f"no node named {ref!r}")
            ref = self._names[ref]
        return self.nodes[ref]

    def id_of(self, name: str) -> int:
        return self.node(name).id

    def value(self, ref) -> np.ndarray:
        node = self.node(ref)
        if node.value is None:
            raise BackwardBeforeForwardError(f"{node.label()} has no value; run forward first")
        return node.value

    @property
    def topological_order(self) -> range:
        return range(len(self.nodes))

    def parameter_ids(self) -> list[int]:
        return [n.id for n in self.nodes if n.op_kind == "parameter"]

    def parameters(self) -> dict[str, np.ndarray]:
        return {n.name: n.value for n in self.nodes if n.op_kind == "parameter"}

    def set_parameter(self, ref, value) -> None:
        node = self.node(ref)
        if node.op_kind != "parameter":
            raise GraphError(f"{node.label()} is not a parameter")
        arr = np.array(value, dtype=self.dtype, copy=True)
        if node.value is not None and node.value.shape != arr.shape:
            raise ShapeError(f"{node.label()}: expected shape {node.value.shape}, got {arr.shape}")
        arr.flags.writeable = False
        node.value = arr

    def dropout_ids(self) -> list[int]:
        return [n.id for n in self.nodes if n.op_kind == "dropout"]

    def set_dropout_rate(self, rate: float) -> None:
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        for nid in self.dropout_ids():
            self.nodes[nid].attributes["rate"] = float(rate)

    def astype(self, dtype) -> "Graph":
        g = self.clone()
        g.dtype = np.dtype(dtype)
        for n in g.nodes:
            if n.op_kind == "parameter":
                n.value = None
        for n, src in zip(g.nodes, self.nodes):
            if n.op_kind == "parameter":
                g.set_parameter(n.id, src.value)
        return g

    def clone(self) -> "Graph":
        """Structural copy sharing (read-only) parameter arrays."""
        g = Graph.__new__(Graph)
        g.dtype = self.dtype
        g._names = dict(self._names)
        g._forward_done = False
        g.nodes = []
        for n in self.nodes:
            keep = n.value if n.op_kind == "parameter" else None
            g.nodes.append(Node(n.id, n.op_kind, n.inputs, copy.deepcopy(n.attributes), n.name, keep))
        return g

    # -- evaluation ---------------------------------------------------
    def forward(self, bindings: Mapping, mode: str = "eval", rng: RngStream | None = None,
                overrides: Mapping | None = None) -> dict[int, np.ndarray]:
        """Evaluate every node; returns ``{node_id: value}``.

        ``overrides`` pins chosen non-parameter nodes to given values (used
        for finite differences with respect to intermediate activations).
        """
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        bound = {self.node(k).id: v for k, v in bindings.items()}
        pinned = {self.node(k).id: v for k, v in (overrides or {}).items()}
        if mode != "eval" and rng is None:
            rng = RngStream(0)
        for node in self.nodes:
            node.adjoint = None
            node._cache = None
            if node.op_kind == "parameter":
                continue
            if node.id in pinned:
                node.value = np.asarray(pinned[node.id], dtype=self.dtype)
                continue
            if node.op_kind == "input":
                if node.id not in bound:
                    raise UnboundInputError(f"{node.label()} is not bound")
                node.value = np.asarray(bound[node.id], dtype=self.dtype)
                continue
            args = [self.nodes[i].value for i in node.inputs]
            node.value = _FORWARD[node.op_kind](self, node, args, mode, rng)
        self._forward_done = True
        return {n.id: n.value for n in self.nodes}

    def backward(self, seed, seed_grad) -> dict[int, np.ndarray]:
        """Accumulate adjoints of ``sum(seed_grad * value(seed))``."""
        if not self._forward_done:
            raise BackwardBeforeForwardError("backward called before forward")
        seed_node = self.node(seed)
        seed_grad = np.asarray(seed_grad, dtype=self.dtype)
        if seed_grad.shape != seed_node.value.shape:
            raise ShapeError(f"{seed_node.label()}: seed_grad shape {seed_grad.shape} "
                             f"!= value shape {seed_node.value.shape}")
        adj: dict[int, np.ndarray] = {seed_node.id: seed_grad.copy()}
        for nid in range(seed_node.id, -1, -1):
            g = adj.get(nid)
            node = self.nodes[nid]
            if g is None or not node.inputs:
                continue
            grads = _BACKWARD[node.op_kind](self, node, g)
            for i, gi in zip(node.inputs, grads):
                if gi is None:
                    continue
                if i in adj:
                    adj[i] = adj[i] + gi
                else:
                    adj[i] = gi
        out = {}
        for node in self.nodes:
            a = adj.get(node.id)
            if a is None:
                a = np.zeros_like(node.value) if node.value is not None else None
            node.adjoint = a
            out[node.id] = a
        return out


# ---------------------------------------------------------------------------
# primitive forward rules: (graph, node, args, mode, rng) -> value


def _shape_fail(node, msg):
    raise ShapeError(f"{node.label()}: {msg}")


def _fwd_conv2d(g, node, args, mode, rng):
    x, w = args[0], args[1]
    if x.ndim != 4 or w.ndim != 4:
        _shape_fail(node, f"expected 4-d input and weight, got {x.shape} and {w.shape}")
    o, c, kh, kw = w.shape
    if kh != kw:
        _shape_fail(node, f"only square kernels are supported, got {kh}x{kw}")
    if x.shape[1] != c:
        _shape_fail(node, f"input has {x.shape[1]} channels, weight expects {c}")
    s, p = node.attributes["stride"], node.attributes["pad"]
    if conv_out_extent(x.shape[2], kh, s, p) < 1 or conv_out_extent(x.shape[3], kh, s, p) < 1:
        _shape_fail(node, f"kernel {kh} too large for input {x.shape[2:]} with pad {p}")
    cols, ho, wo = _im2col(x, kh, s, p)
    out = np.matmul(w.reshape(o, -1), cols)
    if len(args) == 3:
        b = args[2]
        if b.shape != (o,):
            _shape_fail(node, f"bias shape {b.shape} != ({o},)")
        out += b[None, :, None]
    node._cache = (cols, ho, wo)
    return out.reshape(x.shape[0], o, ho, wo)


def _fwd_relu(g, node, args, mode, rng):
    return np.maximum(args[0], 0)


def _fwd_sigmoid(g, node, args, mode, rng):
    x = args[0]
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _fwd_max_pool2d(g, node, args, mode, rng):
    x = args[0]
    if x.ndim != 4:
        _shape_fail(node, f"expected 4-d input, got {x.shape}")
    k, s = node.attributes["kernel"], node.attributes["stride"]
    if x.shape[2] < k or x.shape[3] < k:
        _shape_fail(node, f"pool kernel {k} larger than input {x.shape[2:]}")
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    flat = win.reshape(win.shape[:4] + (k * k,))
    # argmax returns the first maximum in row-major window order: ties go to it.
    idx = flat.argmax(axis=-1)
    node._cache = idx
    return np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]


def _fwd_upsample(g, node, args, mode, rng):
    x = args[0]
    if x.ndim != 4:
        _shape_fail(node, f"expected 4-d input, got {x.shape}")
    return x.repeat(2, axis=2).repeat(2, axis=3)


def _fwd_concat(g, node, args, mode, rng):
    ref = args[0].shape
    for a in args[1:]:
        if a.ndim != 4 or a.shape[0] != ref[0] or a.shape[2:] != ref[2:]:
            _shape_fail(node, f"cannot concatenate {a.shape} with {ref} along channels")
    node._cache = [a.shape[1] for a in args]
    return np.concatenate(args, axis=1)


def _fwd_add(g, node, args, mode, rng):
    a, b = args
    if a.shape != b.shape:
        _shape_fail(node, f"operand shapes differ: {a.shape} vs {b.shape}")
    return a + b


def _fwd_dropout(g, node, args, mode, rng):
    x = args[0]
    rate = node.attributes["rate"]
    if mode == "eval" or rate == 0.0:
        return x
    u = rng.generator(node.attributes["stream"]).random(x.shape)
    mask = (u >= rate).astype(g.dtype) / g.dtype.type(1.0 - rate)
    node._cache = mask
    return x * mask


def _fwd_gap(g, node, args, mode, rng):
    x = args[0]
    if x.ndim != 4:
        _shape_fail(node, f"expected 4-d input, got {x.shape}")
    return x.mean(axis=(2, 3))


def _fwd_affine(g, node, args, mode, rng):
    x, scale, bias = args
    c = x.shape[1]
    if scale.shape != (c,) or bias.shape != (c,):
        _shape_fail(node, f"scale/bias shapes {scale.shape}/{bias.shape} do not match {c} channels")
    shape = (1, c) + (1,) * (x.ndim - 2)
    return x * scale.reshape(shape) + bias.reshape(shape)


# ---------------------------------------------------------------------------
# primitive backward rules: (graph, node, upstream) -> tuple of input grads


def _bwd_conv2d(g, node, up):
    x = g.nodes[node.inputs[0]].value
    w = g.nodes[node.inputs[1]].value
    cols, ho, wo = node._cache
    n, o = up.shape[:2]
    up2 = up.reshape(n, o, ho * wo)
    dw = np.einsum("nol,nkl->ok", up2, cols, optimize=True).reshape(w.shape)
    dcols = np.matmul(w.reshape(o, -1).T, up2)
    dx = _col2im(dcols, x.shape, w.shape[2], node.attributes["stride"], node.attributes["pad"], ho, wo)
    if len(node.inputs) == 3:
        return dx, dw, up.sum(axis=(0, 2, 3))
    return dx, dw


def _bwd_relu(g, node, up):
    return (up * (g.nodes[node.inputs[0]].value > 0),)


def _bwd_sigmoid(g, node, up):
    y = node.value
    return (up * y * (1 - y),)


def _bwd_max_pool2d(g, node, up):
    x = g.nodes[node.inputs[0]].value
    k, s = node.attributes["kernel"], node.attributes["stride"]
    idx = node._cache
    n, c, ho, wo = idx.shape
    rows = np.arange(ho)[:, None] * s + idx // k
    cols = np.arange(wo)[None, :] * s + idx % k
    dx = np.zeros_like(x)
    nn_, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
    nn_ = np.broadcast_to(nn_[:, :, None, None], idx.shape)
    cc = np.broadcast_to(cc[:, :, None, None], idx.shape)
    if s >= k:
        dx[nn_, cc, rows, cols] = up
    else:
        np.add.at(dx, (nn_, cc, rows, cols), up)
    return (dx,)


def _bwd_upsample(g, node, up):
    n, c, h, w = up.shape
    return (up.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)),)


def _bwd_concat(g, node, up):
    splits = np.cumsum(node._cache)[:-1]
    return tuple(np.split(up, splits, axis=1))


def _bwd_add(g, node, up):
    return up, up


def _bwd_dropout(g, node, up):
    if node._cache is None:
        return (up,)
    return (up * node._cache,)


def _bwd_gap(g, node, up):
    x = g.nodes[node.inputs[0]].value
    hw = x.shape[2] * x.shape[3]
    return (np.broadcast_to((up / hw)[:, :, None, None], x.shape).copy(),)


def _bwd_affine(g, node, up):
    x, scale, _ = (g.nodes[i].value for i in node.inputs)
    c = x.shape[1]
    axes = (0,) + tuple(range(2, x.ndim))
    shape = (1, c) + (1,) * (x.ndim - 2)
    return up * scale.reshape(shape), (up * x).sum(axis=axes), up.sum(axis=axes)


_FORWARD: dict[str, Callable] = {
    "conv2d": _fwd_conv2d,
    "relu": _fwd_relu,
    "sigmoid": _fwd_sigmoid,
    "max_pool2d": _fwd_max_pool2d,
    "upsample_nearest2x": _fwd_upsample,
    "concat_channels": _fwd_concat,
    "add": _fwd_add,
    "dropout": _fwd_dropout,
    "global_average_pool": _fwd_gap,
    "affine_scale_bias": _fwd_affine,
}
_BACKWARD: dict[str, Callable] = {
    "conv2d": _bwd_conv2d,
    "relu": _bwd_relu,
    "sigmoid": _bwd_sigmoid,
    "max_pool2d": _bwd_max_pool2d,
    "upsample_nearest2x": _bwd_upsample,
    "concat_channels": _bwd_concat,
    "add": _bwd_add,
    "dropout": _bwd_dropout,
    "global_average_pool": _bwd_gap,
    "affine_scale_bias": _bwd_affine,
}


def forward(graph: Graph, bindings, mode="eval", rng=None, overrides=None):
    return graph.forward(bindings, mode=mode, rng=rng, overrides=overrides)


def backward(graph: Graph, seed, seed_grad):
    return graph.backward(seed, seed_grad)


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    n_flagged: int
    flagged: list[tuple[int, ...]] = field(default_factory=list)

    def passes(self, tol: float) -> bool:
        return self.n_checked > 0 and self.max_rel_error <= tol


def grad_check(graph: Graph, node, eps: float = 1e-5, *, bindings, output=None,
               projection=None, mode="eval", rng=None, n_samples: int | None = 64,
               sample_seed: int = 0, kink_tol: float = 1e-3) -> GradCheckReport:
    """Compare autodiff adjoints against central differences.

    The scalar checked is ``sum(projection * value(output))`` where
    ``output`` defaults to the last node and ``projection`` to a fixed
    random tensor. ``node`` may be an input, a parameter, or any
    intermediate node (perturbed through ``overrides``). Coordinates whose
    one-sided slopes disagree (relu kinks, max-pool ties) are flagged as
    non-differentiable and excluded from the error.
    """
    if graph.dtype != np.float64:
        raise GraphError("grad_check requires a float64 graph")
    target = graph.node(node)
    out_id = len(graph.nodes) - 1 if output is None else graph.node(output).id
    graph.forward(bindings, mode=mode, rng=rng)
    base = graph.value(target.id).copy()
    out_val = graph.value(out_id)
    if projection is None:
        projection = np.random.default_rng(sample_seed + 1).standard_normal(out_val.shape)
    projection = np.asarray(projection, dtype=np.float64)
    analytic = graph.backward(out_id, projection)[target.id].copy()

    def scalar(perturbed):
        if target.op_kind == "parameter":
            graph.set_parameter(target.id, perturbed)
            graph.forward(bindings, mode=mode, rng=rng)
        elif target.op_kind == "input":
            b = dict(bindings)
            b[target.id] = perturbed
            b.pop(target.name, None)
            graph.forward(b, mode=mode, rng=rng)
        else:
            graph.forward(bindings, mode=mode, rng=rng, overrides={target.id: perturbed})
        return float(np.sum(projection * graph.value(out_id)))

    f0 = scalar(base)
    coords = list(np.ndindex(base.shape))
    if n_samples is not None and len(coords) > n_samples:
        pick = np.random.default_rng(sample_seed).choice(len(coords), n_samples, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    max_err, checked, flagged = 0.0, 0, []
    try:
        for c in coords:
            xp = base.copy()
            xp[c] += eps
            fp = scalar(xp)
            xm = base.copy()
            xm[c] -= eps
            fm = scalar(xm)
            right, left = (fp - f0) / eps, (f0 - fm) / eps
            numeric = (fp - fm) / (2 * eps)
            if abs(right - left) > kink_tol * max(1.0, abs(numeric)):
                flagged.append(c)
                continue
            err = abs(analytic[c] - numeric) / max(1.0, abs(numeric))
            max_err = max(max_err, err)
            checked += 1
    finally:
        if target.op_kind == "parameter":
            graph.set_parameter(target.id, base)
        graph.forward(bindings, mode=mode, rng=rng)
    return GradCheckReport(max_err, checked, len(flagged), flagged)
