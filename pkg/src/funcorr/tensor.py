"""Dense tensor engine with reverse-mode differentiation on an explicit tape.

Values are float32 by default; a float64 mode exists for gradient checking.
Every primitive validates output finiteness (NaN/Inf is an error state) and
records itself on the active tape when any input is tape-attached.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DomainError, NumericError, ShapeError

DEFAULT_DTYPE = np.float32


def make_rng(*entropy) -> np.random.Generator:
    """Seeded splittable PRNG; pass extra ints to derive independent streams."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(entropy))))


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Fan-in scaled normal init, the conventional choice for ReLU stacks."""
    std = math.sqrt(2.0 / max(1, fan_in))
    return (rng.standard_normal(shape) * std).astype(dtype)


class Tensor:
    """N-dimensional float array, optionally attached to the active tape."""

    __slots__ = ("data", "node")

    def __init__(self, data, dtype=None):
        if dtype is None:
            if isinstance(data, (np.ndarray, np.floating)) and data.dtype in (
                np.float32,
                np.float64,
            ):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"


class Node:
    """One recorded primitive application."""

    __slots__ = ("id", "kind", "input_ids", "attrs", "backward_fn", "tape")

    def __init__(self, id, kind, input_ids, attrs, backward_fn, tape):
        self.id = id
        self.kind = kind
        self.input_ids = input_ids
        self.attrs = attrs
        self.backward_fn = backward_fn
        self.tape = tape


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Ordered record of primitive applications for one backward pass.

    Creation order is topological order, so backward is a single reverse
    sweep visiting each node exactly once. A tape is single-threaded and
    consumed by its backward pass.
    """

    def __init__(self):
        self._nodes: list[Node] = []
        self._attached: list[Tensor] = []
        self._consumed = False
        self._prev = None

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        for t in self._attached:
            t.node = None
        self._attached.clear()
        return False

    def __len__(self):
        return len(self._nodes)

    def _add(self, kind, input_ids, attrs, out: Tensor, backward_fn) -> Node:
        if self._consumed:
            raise ContractError("tape already consumed by backward(); open a new tape")
        node = Node(len(self._nodes), kind, input_ids, attrs, backward_fn, self)
        self._nodes.append(node)
        out.node = node
        self._attached.append(out)
        return node

    def watch(self, t: Tensor) -> int:
        """Attach a leaf tensor so gradients are produced for it."""
        if t.node is not None and t.node.tape is self:
            return t.node.id
        node = self._add("leaf", (), {}, t, None)
        return node.id

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Reverse sweep from a scalar loss; returns node-id -> gradient."""
        if loss.node is None or loss.node.tape is not self:
            raise ContractError("loss is not attached to this tape")
        if loss.data.size != 1:
            raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
        if self._consumed:
            raise ContractError("tape already consumed by backward()")
        self._consumed = True

        grads: list[np.ndarray | None] = [None] * len(self._nodes)
        grads[loss.node.id] = np.ones_like(loss.data)
        for node in reversed(self._nodes[: loss.node.id + 1]):
            g = grads[node.id]
            if g is None or node.backward_fn is None:
                continue
            input_grads = node.backward_fn(g)
            for iid, ig in zip(node.input_ids, input_grads):
                if iid is None or ig is None:
                    continue
                if grads[iid] is None:
                    # keep the reference; accumulation below never mutates it,
                    # so aliasing with other edges' gradients is harmless
                    grads[iid] = ig
                else:
                    grads[iid] = grads[iid] + ig
        return {i: Tensor(g) for i, g in enumerate(grads) if g is not None}


def active_tape() -> "Tape | None":
    return _ACTIVE_TAPE


def _check_finite(kind: str, data: np.ndarray) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"op '{kind}' produced non-finite values")


def _record(kind, inputs, attrs, out_data, make_backward) -> Tensor:
    _check_finite(kind, out_data)
    out = Tensor(out_data)
    tape = _ACTIVE_TAPE
    if tape is None:
        return out
    ids = tuple(
        t.node.id if (t.node is not None and t.node.tape is tape) else None for t in inputs
    )
    if all(i is None for i in ids):
        return out
    needs = tuple(i is not None for i in ids)
    tape._add(kind, ids, attrs, out, make_backward(needs))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting introduced."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive catalog
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul expects (m,k)x(k,n), got {a.data.shape} and {b.data.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def make_backward(needs):
        def backward(g):
            ga = g @ bd.T if needs[0] else None
            gb = ad.T @ g if needs[1] else None
            return (ga, gb)

        return backward

    return _record("matmul", (a, b), {}, out, make_backward)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    """(B,C,Hp,Wp) -> (C*kh*kw, B*OH*OW) column matrix plus output extents."""
    b, c = xp.shape[0], xp.shape[1]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B,C,OH,OW,kh,kw)
    oh, ow = win.shape[2], win.shape[3]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, b * oh * ow)
    return np.ascontiguousarray(cols), oh, ow


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, (Cout,Cin,kh,kw) kernel, no bias."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.data.shape}, {w.data.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.data.shape} vs kernel {w.data.shape}"
        )
    bsz, cin, h, wd = x.data.shape
    cout, _, kh, kw = w.data.shape
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {h}x{wd}")
    xp = (
        np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        if padding
        else x.data
    )
    cols, oh, ow = _im2col(xp, kh, kw, stride)
    w2 = w.data.reshape(cout, -1)
    out = (w2 @ cols).reshape(cout, bsz, oh, ow).transpose(1, 0, 2, 3)

    def make_backward(needs):
        def backward(g):
            g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, bsz * oh * ow)
            gw = (g2 @ cols.T).reshape(w.data.shape) if needs[1] else None
            gx = None
            if needs[0]:
                dcols = (w2.T @ g2).reshape(cin, kh, kw, bsz, oh, ow)
                dxp = np.zeros_like(xp)
                for ki in range(kh):
                    for kj in range(kw):
                        dxp[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += (
                            dcols[:, ki, kj].transpose(1, 0, 2, 3)
                        )
                gx = dxp[:, :, padding : padding + h, padding : padding + wd] if padding else dxp
            return (gx, gw)

        return backward

    return _record("conv2d", (x, w), {"stride": stride, "padding": padding}, out, make_backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add cannot broadcast {a.data.shape} with {b.data.shape}") from exc
    ash, bsh = a.data.shape, b.data.shape

    def make_backward(needs):
        def backward(g):
            ga = _unbroadcast(g, ash) if needs[0] else None
            gb = _unbroadcast(g, bsh) if needs[1] else None
            return (ga, gb)

        return backward

    return _record("add", (a, b), {}, out, make_backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul cannot broadcast {a.data.shape} with {b.data.shape}") from exc
    ad, bd = a.data, b.data

    def make_backward(needs):
        def backward(g):
            ga = _unbroadcast(g * bd, ad.shape) if needs[0] else None
            gb = _unbroadcast(g * ad, bd.shape) if needs[1] else None
            return (ga, gb)

        return backward

    return _record("mul", (a, b), {}, out, make_backward)


def scale(x: Tensor, factor: float) -> Tensor:
    f = float(factor)
    out = x.data * f

    def make_backward(needs):
        return lambda g: (g * f,)

    return _record("scale", (x,), {"factor": f}, out, make_backward)


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    out = x.data.sum(axis=axis)
    shp = x.data.shape

    def make_backward(needs):
        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, shp).astype(g.dtype, copy=True),)
            return (np.broadcast_to(np.expand_dims(g, axis), shp).astype(g.dtype, copy=True),)

        return backward

    return _record("sum", (x,), {"axis": axis}, out, make_backward)


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    out = x.data.mean(axis=axis)
    shp = x.data.shape

    def make_backward(needs):
        def backward(g):
            gg = g / n
            if axis is None:
                return (np.broadcast_to(gg, shp).astype(g.dtype, copy=True),)
            return (np.broadcast_to(np.expand_dims(gg, axis), shp).astype(g.dtype, copy=True),)

        return backward

    return _record("mean", (x,), {"axis": axis}, out, make_backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    mask = x.data > 0  # subgradient 0 at exactly 0

    def make_backward(needs):
        return lambda g: (g * mask,)

    return _record("relu", (x,), {}, out, make_backward)


def softmax(x: Tensor, axis: int) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def make_backward(needs):
        def backward(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            return ((g - dot) * y,)

        return backward

    return _record("softmax", (x,), {"axis": axis}, y, make_backward)


def logsumexp(x: Tensor, axis: int | None = None) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze() if axis is None else np.squeeze(m + np.log(s), axis=axis)
    soft = e / s

    def make_backward(needs):
        def backward(g):
            if axis is None:
                return (soft * g,)
            return (soft * np.expand_dims(g, axis),)

        return backward

    return _record("logsumexp", (x,), {"axis": axis}, out, make_backward)


def l2normalize(x: Tensor, axis: int, eps: float = 1e-12) -> Tensor:
    n2 = (x.data * x.data).sum(axis=axis, keepdims=True) + eps
    n = np.sqrt(n2)
    y = x.data / n
    xd = x.data

    def make_backward(needs):
        def backward(g):
            dot = (g * xd).sum(axis=axis, keepdims=True)
            return (g / n - xd * (dot / (n2 * n)),)

        return backward

    return _record("l2normalize", (x,), {"axis": axis, "eps": eps}, y, make_backward)


class BatchNormState:
    """Per-channel running statistics mutated by train-mode forward passes."""

    __slots__ = ("mean", "var")

    def __init__(self, channels: int, dtype=DEFAULT_DTYPE):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str = "train",
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d expects (B,C,H,W), got {x.data.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"batchnorm2d affine shape mismatch for {c} channels")
    if mode not in ("train", "eval"):
        raise ContractError(f"batchnorm2d mode must be train|eval, got {mode!r}")
    axes = (0, 2, 3)
    if mode == "train":
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)  # biased, so normalized output has unit variance
        state.mean[...] = (1.0 - momentum) * state.mean + momentum * mu
        state.var[...] = (1.0 - momentum) * state.var + momentum * var
    else:
        mu = state.mean
        var = state.var
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * invstd.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)
    n = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
    gdata = gamma.data

    def make_backward(needs):
        def backward(g):
            gbeta = g.sum(axis=axes) if needs[2] else None
            ggamma = (g * xhat).sum(axis=axes) if needs[1] else None
            gx = None
            if needs[0]:
                dxhat = g * gdata.reshape(1, c, 1, 1)
                if mode == "train":
                    s1 = dxhat.sum(axis=axes, keepdims=True)
                    s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
                    gx = (dxhat - s1 / n - xhat * (s2 / n)) * invstd.reshape(1, c, 1, 1)
                else:
                    gx = dxhat * invstd.reshape(1, c, 1, 1)
            return (gx, ggamma, gbeta)

        return backward

    attrs = {"mode": mode, "eps": eps, "momentum": momentum}
    return _record("batchnorm2d", (x, gamma, beta), attrs, out, make_backward)


def index_spatial(x: Tensor, cells) -> Tensor:
    """Gather per-cell feature vectors: (C,H,W) indexed at [(row,col)] -> (K,C)."""
    if x.data.ndim != 3:
        raise ShapeError(f"index_spatial expects (C,H,W), got {x.data.shape}")
    _, h, w = x.data.shape
    cells = [(int(r), int(c)) for r, c in cells]
    for r, c in cells:
        if not (0 <= r < h and 0 <= c < w):
            raise DomainError(f"cell ({r},{c}) outside {h}x{w} grid")
    rows = np.array([r for r, _ in cells])
    colsx = np.array([c for _, c in cells])
    out = x.data[:, rows, colsx].T  # (K,C)
    shp = x.data.shape

    def make_backward(needs):
        def backward(g):
            gx = np.zeros(shp, dtype=g.dtype)
            for k, (r, c) in enumerate(cells):
                gx[:, r, c] += g[k]
            return (gx,)

        return backward

    return _record("index_spatial", (x,), {"cells": tuple(cells)}, out, make_backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.data.shape} to {shape}") from exc
    old = x.data.shape

    def make_backward(needs):
        return lambda g: (g.reshape(old),)

    return _record("reshape", (x,), {"shape": shape}, out, make_backward)


def stack(xs) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ContractError("stack requires at least one tensor")
    shp = xs[0].data.shape
    for t in xs:
        if t.data.shape != shp:
            raise ShapeError(f"stack shape mismatch: {t.data.shape} vs {shp}")
    out = np.stack([t.data for t in xs], axis=0)

    def make_backward(needs):
        def backward(g):
            return tuple(g[i] if needs[i] else None for i in range(len(xs)))

        return backward

    return _record("stack", tuple(xs), {}, out, make_backward)


def take_row(x: Tensor, index: int) -> Tensor:
    index = int(index)
    if not (0 <= index < x.data.shape[0]):
        raise DomainError(f"row {index} outside leading extent {x.data.shape[0]}")
    out = x.data[index]
    shp = x.data.shape

    def make_backward(needs):
        def backward(g):
            gx = np.zeros(shp, dtype=g.dtype)
            gx[index] = g
            return (gx,)

        return backward

    return _record("take_row", (x,), {"index": index}, out, make_backward)


# Core catalog plus the structural primitives (reshape/stack/take_row) that the
# gated mixing and the contrastive objective are expressed with.
OP_KINDS = (
    "matmul",
    "conv2d",
    "add",
    "mul",
    "scale",
    "sum",
    "mean",
    "relu",
    "batchnorm2d",
    "softmax",
    "logsumexp",
    "l2normalize",
    "index_spatial",
    "reshape",
    "stack",
    "take_row",
)


def op_apply(kind: str, inputs, attrs: dict | None = None) -> Tensor:
    """Generic dispatcher over the primitive catalog."""
    attrs = dict(attrs or {})
    inputs = list(inputs)
    if kind == "matmul":
        return matmul(*inputs)
    if kind == "conv2d":
        return conv2d(inputs[0], inputs[1], attrs.get("stride", 1), attrs.get("padding", 0))
    if kind == "add":
        return add(*inputs)
    if kind == "mul":
        return mul(*inputs)
    if kind == "scale":
        return scale(inputs[0], attrs["factor"])
    if kind == "sum":
        return reduce_sum(inputs[0], attrs.get("axis"))
    if kind == "mean":
        return reduce_mean(inputs[0], attrs.get("axis"))
    if kind == "relu":
        return relu(inputs[0])
    if kind == "batchnorm2d":
        return batchnorm2d(
            inputs[0],
            inputs[1],
            inputs[2],
            attrs["state"],
            attrs.get("mode", "train"),
            attrs.get("eps", 1e-5),
            attrs.get("momentum", 0.1),
        )
    if kind == "softmax":
        return softmax(inputs[0], attrs["axis"])
    if kind == "logsumexp":
        return logsumexp(inputs[0], attrs.get("axis"))
    if kind == "l2normalize":
        return l2normalize(inputs[0], attrs["axis"], attrs.get("eps", 1e-12))
    if kind == "index_spatial":
        return index_spatial(inputs[0], attrs["cells"])
    if kind == "reshape":
        return reshape(inputs[0], attrs["shape"])
    if kind == "stack":
        return stack(inputs)
    if kind == "take_row":
        return take_row(inputs[0], attrs["index"])
    raise ContractError(f"unknown op kind {kind!r}")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    kind: str
    max_rel_error: float
    passed: bool
    notes: list[str] = field(default_factory=list)


def _gradcheck_setup(kind: str, shapes, rng: np.random.Generator):
    """Random float64 inputs plus attrs for one catalog op."""
    mk = lambda s: rng.standard_normal(s).astype(np.float64)
    attrs: dict = {}
    notes: list[str] = []
    if kind == "relu":
        x = mk(shapes[0])
        near = np.abs(x) < 1e-3
        if near.any():
            x = x + np.sign(x + 0.5) * near * 0.25  # step off the kink
            notes.append("resampled inputs near relu kink")
        return [x], attrs, notes
    if kind == "conv2d":
        attrs = {"stride": 1, "padding": 1}
        return [mk(shapes[0]), mk(shapes[1])], attrs, notes
    if kind == "batchnorm2d":
        c = shapes[0][1]
        attrs = {"state": BatchNormState(c, dtype=np.float64), "mode": "train"}
        return [mk(shapes[0]), 1.0 + 0.1 * mk((c,)), 0.1 * mk((c,))], attrs, notes
    if kind in ("softmax", "logsumexp", "l2normalize", "sum", "mean"):
        attrs = {"axis": 0 if len(shapes[0]) == 1 else len(shapes[0]) - 1}
        if kind == "l2normalize":
            attrs["eps"] = 1e-12
        return [mk(shapes[0])], attrs, notes
    if kind == "scale":
        return [mk(shapes[0])], {"factor": 1.7}, notes
    if kind == "index_spatial":
        _, h, w = shapes[0]
        k = min(3, h * w)
        cells = [(int(rng.integers(h)), int(rng.integers(w))) for _ in range(k)]
        return [mk(shapes[0])], {"cells": cells}, notes
    if kind == "reshape":
        total = int(np.prod(shapes[0]))
        return [mk(shapes[0])], {"shape": (total,)}, notes
    if kind == "take_row":
        return [mk(shapes[0])], {"index": int(rng.integers(shapes[0][0]))}, notes
    return [mk(s) for s in shapes], attrs, notes


def grad_check(kind: str, shapes, seed: int, eps: float = 1e-4, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients against central finite differences (float64)."""
    if kind not in OP_KINDS:
        raise ContractError(f"unknown op kind {kind!r}")
    total = sum(int(np.prod(s)) for s in shapes)
    if total > 512:
        raise ContractError(f"grad_check shapes too large ({total} elements > 512)")
    rng = make_rng(seed, hash(kind) & 0xFFFF)
    arrays, attrs, notes = _gradcheck_setup(kind, shapes, rng)

    def objective(arrs):
        if kind == "batchnorm2d":  # fresh state: forward mutates running stats
            attrs["state"] = BatchNormState(arrs[0].shape[1], dtype=np.float64)
        tensors = [Tensor(a.copy()) for a in arrs]
        out = op_apply(kind, tensors, attrs)
        return out

    proj = None
    analytic = []
    with Tape() as tape:
        tensors = [Tensor(a.copy()) for a in arrays]
        for t in tensors:
            tape.watch(t)
        if kind == "batchnorm2d":
            attrs["state"] = BatchNormState(arrays[0].shape[1], dtype=np.float64)
        out = op_apply(kind, tensors, attrs)
        proj = make_rng(seed, 999).standard_normal(out.data.shape).astype(np.float64)
        loss = reduce_sum(mul(out, Tensor(proj)))
        grads = tape.backward(loss)
        for t in tensors:
            gid = t.node.id
            analytic.append(grads[gid].data if gid in grads else np.zeros_like(t.data))

    max_rel = 0.0
    for i, a in enumerate(arrays):
        flat = a.reshape(-1)
        num = np.zeros_like(flat)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = float((objective(arrays).data * proj).sum())
            flat[j] = orig - eps
            dn = float((objective(arrays).data * proj).sum())
            flat[j] = orig
            num[j] = (up - dn) / (2 * eps)
        num = num.reshape(a.shape)
        denom = np.maximum(1.0, np.maximum(np.abs(analytic[i]), np.abs(num)))
        rel = float(np.max(np.abs(analytic[i] - num) / denom)) if a.size else 0.0
        max_rel = max(max_rel, rel)
    return GradCheckReport(kind=kind, max_rel_error=max_rel, passed=max_rel < tol, notes=notes)


# ---------------------------------------------------------------------------
# parameters and optimizer
# ---------------------------------------------------------------------------


class Param:
    __slots__ = ("value", "momentum", "trainable")

    def __init__(self, value: Tensor, trainable: bool):
        self.value = value
        self.momentum = np.zeros_like(value.data)
        self.trainable = trainable


class ParameterStore:
    """Named parameters with momentum buffers and a frozen flag."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        self._params[name] = Param(t, trainable)
        return t

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name].value

    def names(self) -> list[str]:
        return list(self._params)

    def trainable_names(self) -> list[str]:
        return [n for n, p in self._params.items() if p.trainable]

    def is_trainable(self, name: str) -> bool:
        return self._params[name].trainable

    def watch_all(self, tape: Tape) -> None:
        for p in self._params.values():
            if p.trainable:
                tape.watch(p.value)

    def named_gradients(self, grad_map: dict[int, Tensor]) -> dict[str, Tensor]:
        """Map a backward() result onto trainable parameter names."""
        out = {}
        for name, p in self._params.items():
            if not p.trainable:
                continue
            node = p.value.node
            if node is not None and node.id in grad_map:
                out[name] = grad_map[node.id]
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.value.data.copy() for n, p in self._params.items()}


def sgd_step(
    store: ParameterStore,
    grads: dict[str, Tensor],
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
) -> ParameterStore:
    """v <- momentum*v + g + wd*w ; w <- w - lr*v. Frozen entries untouched."""
    if lr == 0.0:
        return store  # no-op by contract, including momentum buffers
    for name in store.trainable_names():
        if name not in grads:
            raise ContractError(f"missing gradient for trainable parameter {name!r}")
        p = store._params[name]
        g = grads[name].data
        if g.shape != p.value.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} != parameter shape {p.value.data.shape} for {name!r}"
            )
        v = p.momentum
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p.value.data
        p.value.data -= lr * v
    return store
