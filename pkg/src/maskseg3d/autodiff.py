"""Dense float64 tensors with reverse-mode differentiation.

Only the operations the segmentation model needs are provided.  Every forward
op records a node holding its inputs and a closure that maps the output
gradient to input gradients; ``backward`` replays those nodes in reverse
topological order and then releases the saved activations.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, FormatError, NumericError, UsageError

NEG_INF = np.finfo(np.float64).min
LAYER_NORM_EPS = 1e-5


class AllMaskedError(NumericError):
    """A softmax row had every position masked out."""


class _Node:
    __slots__ = ("inputs", "backward_fn", "released")

    def __init__(self, inputs, backward_fn):
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.released = False


class Tensor:
    """A float64 array with an optional gradient slot.

    Values are never modified in place after creation.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output from {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    out._node = _Node(tuple(inputs), backward_fn) if out.requires_grad else None
    return out


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise UsageError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def back(g):
        return (g @ B.T, A.T @ g)

    return _make(A @ B, (a, b), back, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise UsageError("transpose expects a matrix")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b with b broadcast over rows."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    # only row-vector / scalar broadcasting is supported
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise UsageError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None
    if out not in (a.shape, b.shape):
        raise UsageError(f"{op}: two-sided broadcasting {a.shape}, {b.shape} not supported")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(_as_tensor(a), float(b))
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    A, B = a.data, b.data

    def back(g):
        return (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape))

    return _make(A * B, (a, b), back, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return _make(np.where(keep, x.data, 0.0), (x,), lambda g: (g * keep,), "relu")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NumericError from _make
        out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log of non-positive value")
    X = x.data
    return _make(np.log(X), (x,), lambda g: (g / X,), "log")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = x.shape
    if axis is None:
        return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    out = x.data.sum(axis=axis)

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(out, (x,), back, "sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


# ---------------------------------------------------------------- normalisation / softmax


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise each row over the last axis, then apply gain and bias."""
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gain.data
    n = X.shape[-1]

    def back(g):
        gx = g * G
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        dgain = (g * xhat).reshape(-1, n).sum(axis=0)
        dbias = g.reshape(-1, n).sum(axis=0)
        return (dx, dgain, dbias)

    return _make(xhat * G + bias.data, (x, gain, bias), back, "layer_norm")


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    out = _softmax_rows(x.data)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), back, "softmax")


def masked_softmax(logits: Tensor, additive_mask) -> Tensor:
    """Row softmax of ``logits + additive_mask``.

    Mask entries are 0 (keep) or ``NEG_INF`` (drop).  Dropped positions come
    out exactly 0; a row with nothing kept raises ``AllMaskedError``.
    """
    mask = additive_mask.data if isinstance(additive_mask, Tensor) else np.asarray(additive_mask, dtype=np.float64)
    if mask.shape != logits.shape:
        raise UsageError(f"mask shape {mask.shape} does not match logits {logits.shape}")
    keep = mask == 0.0
    if not np.all(keep | (mask == NEG_INF)):
        raise UsageError("additive mask entries must be 0 or NEG_INF")
    if np.any(~keep.any(axis=-1)):
        raise AllMaskedError("softmax row with every position masked")
    z = np.where(keep, logits.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (logits,), back, "masked_softmax")


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), back, "log_softmax")


# ---------------------------------------------------------------- indexing / shape


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows of a matrix; index -1 yields a zero row."""
    idx = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    if idx.size and (idx.max() >= n or idx.min() < -1):
        raise UsageError("row index out of range")
    valid = idx >= 0
    safe = np.where(valid, idx, 0)
    out = x.data[safe]
    if not valid.all():
        out = np.where(valid.reshape(valid.shape + (1,) * (out.ndim - valid.ndim)), out, 0.0)
    shape = x.shape

    def back(g):
        grad = np.zeros(shape)
        flat_idx = safe.reshape(-1)
        flat_g = g.reshape((-1,) + shape[1:])
        flat_valid = valid.reshape(-1)
        np.add.at(grad, flat_idx[flat_valid], flat_g[flat_valid])
        return (grad,)

    return _make(out, (x,), back, "take_rows")


def take(x: Tensor, rows, cols) -> Tensor:
    """Pick individual entries x[rows[i], cols[i]]."""
    r = np.asarray(rows, dtype=np.int64)
    c = np.asarray(cols, dtype=np.int64)
    shape = x.shape

    def back(g):
        grad = np.zeros(shape)
        np.add.at(grad, (r, c), g)
        return (grad,)

    return _make(x.data[r, c], (x,), back, "take")


def segment_mean(x: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Average rows sharing a segment id; every segment must be non-empty."""
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.shape[0] != x.shape[0]:
        raise UsageError("segment ids must label every row")
    counts = np.bincount(seg, minlength=num_segments).astype(np.float64)
    if np.any(counts == 0):
        raise UsageError("empty segment in segment_mean")
    out = np.zeros((num_segments,) + x.shape[1:])
    np.add.at(out, seg, x.data)
    out /= counts.reshape((-1,) + (1,) * (x.ndim - 1))

    def back(g):
        return ((g / counts.reshape((-1,) + (1,) * (g.ndim - 1)))[seg],)

    return _make(out, (x,), back, "segment_mean")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    arrays = [t.data for t in tensors]
    out = np.concatenate(arrays, axis=axis)
    sizes = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tuple(tensors), back, "concat")


def split_columns(x: Tensor, parts: int) -> list[Tensor]:
    if x.ndim != 2 or x.shape[1] % parts:
        raise UsageError(f"cannot split {x.shape} into {parts} column blocks")
    w = x.shape[1] // parts
    return [columns(x, i * w, (i + 1) * w) for i in range(parts)]


def columns(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def back(g):
        grad = np.zeros(shape)
        grad[:, start:stop] = g
        return (grad,)

    return _make(x.data[:, start:stop].copy(), (x,), back, "columns")


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


# ---------------------------------------------------------------- backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for inp in t._node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf requiring grad.

    Saved activations are released afterwards; a second call on the same
    graph raises ``UsageError``.
    """
    if root.size != 1:
        raise UsageError("backward requires a scalar root")
    if not root.requires_grad:
        raise UsageError("root does not depend on any parameter")
    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        node = t._node
        if node is None:
            if g is not None:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        if node.released:
            raise UsageError("backward called twice on the same graph; run a new forward pass")
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
    for t in order:
        if t._node is not None:
            t._node.released = True
            t._node.backward_fn = None


# ---------------------------------------------------------------- optimiser


class AdamW:
    """Adam with decoupled weight decay (Loshchilov & Hutter)."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        self.params = dict(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = {name: {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)} for name, p in self.params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.data = adamw_update(p.data, g, self.state[name], self.t, lr, self.betas, self.eps, self.weight_decay)


def adamw_update(w: np.ndarray, g: np.ndarray, state: dict, t: int, lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0) -> np.ndarray:
    """One AdamW update; ``state`` holds first/second moments and is updated in place."""
    if lr <= 0:
        raise ConfigError("learning rate must be positive")
    b1, b2 = betas
    state["m"] = b1 * state["m"] + (1 - b1) * g
    state["v"] = b2 * state["v"] + (1 - b2) * g * g
    m_hat = state["m"] / (1 - b1 ** t)
    v_hat = state["v"] / (1 - b2 ** t)
    w = w - lr * weight_decay * w
    return w - lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"M3DCKPT\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: Mapping[str, np.ndarray | Tensor], meta: dict | None = None) -> None:
    """Write named float64 arrays plus a JSON metadata block.

    Layout: magic (8 bytes), version (u32 LE), header length (u64 LE),
    UTF-8 JSON header, then each array's row-major little-endian float64
    bytes in header order.
    """
    entries, blobs, offset = [], [], 0
    for name in sorted(params):
        arr = params[name]
        arr = np.array(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8", order="C")  # keeps 0-d shape
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    if len(raw) < 20:
        raise FormatError(f"{path}: truncated header")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    body = 20 + hlen
    if len(raw) < body:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[20:body])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header: {exc}") from None
    if not isinstance(header, dict) or not isinstance(header.get("tensors"), list):
        raise FormatError(f"{path}: header has no tensor table")
    out = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        start = body + e["offset"]
        if start + 8 * n > len(raw):
            raise FormatError(f"{path}: truncated data for {e['name']}")
        out[e["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=start).reshape(tuple(e["shape"])).astype(np.float64)
    return out, header["meta"]


def numerical_gradient(f: Callable[[], float], param: Tensor, index: tuple, h: float = 1e-5) -> float:
    """Central finite difference of ``f`` w.r.t. one entry of ``param``."""
    orig = param.data[index]
    data = param.data.copy()
    data[index] = orig + h
    param.data = data
    up = f()
    data = param.data.copy()
    data[index] = orig - h
    param.data = data
    down = f()
    data = param.data.copy()
    data[index] = orig
    param.data = data
    return (up - down) / (2 * h)


def iter_leaves(tensors: Iterable[Tensor]):
    for t in tensors:
        if t.requires_grad and t._node is None:
            yield t


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``; returns the norm before clipping."""
    params = [p for p in params if p.grad is not None]
    norm = float(np.sqrt(np.sum([np.sum(p.grad * p.grad) for p in params]))) if params else 0.0
    if max_norm is not None and norm > max_norm:
        f = max_norm / (norm + 1e-12)
        for p in params:
            p.grad = p.grad * f
    return norm
