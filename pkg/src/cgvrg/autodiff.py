"""Small reverse-mode autodiff engine on top of numpy.

Every primitive application creates a ``Tensor`` that remembers its parents
and a backward closure. Node ids are handed out from a monotonically
increasing counter, so sorting the reachable nodes by id (descending) replays
the recorded tape in reverse topological order. A graph lives only as long as
the tensors that reference it, which gives a fresh tape per training step.
"""
from __future__ import annotations

import contextlib
import itertools
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

_node_ids = itertools.count()
_grad_enabled = True
_default_dtype = np.float32


class ShapeError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (inference on frozen parameters)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors built from python data."""
    global _default_dtype
    prev = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = prev


def default_dtype():
    return _default_dtype


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None and data.dtype.kind == "f":
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype or _default_dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.node_id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar, all routed through primitives
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scalar_scale(as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), scalar_scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_scale(self, float(other))
        return elementwise_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    @property
    def T(self):
        return transpose(self)


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _default_dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives: each returns (forward value, backward(grad_out) -> input grads)

def _p_matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a @ b
    return out, lambda g: (g @ b.T, a.T @ g)


def _p_add(a, b):
    try:
        out = a + b
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    return out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _p_mul(a, b):
    try:
        out = a * b
    except ValueError:
        raise ShapeError(f"elementwise_mul: cannot broadcast {a.shape} with {b.shape}") from None
    return out, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _p_concat(*xs):
    if not xs:
        raise ShapeError("concat_last_axis: no inputs")
    lead = xs[0].shape[:-1]
    for x in xs:
        if x.ndim != xs[0].ndim or x.shape[:-1] != lead:
            raise ShapeError(
                f"concat_last_axis: shapes differ outside last axis: {[x.shape for x in xs]}"
            )
    out = np.concatenate(xs, axis=-1)
    splits = np.cumsum([x.shape[-1] for x in xs])[:-1]
    return out, lambda g: tuple(np.split(g, splits, axis=-1))


def _p_relu(a):
    mask = a > 0
    return a * mask, lambda g: (g * mask,)


def _p_sigmoid(a):
    out = np.exp(-np.logaddexp(0.0, -a)).astype(a.dtype, copy=False)
    return out, lambda g: (g * out * (1.0 - out),)


def _p_tanh(a):
    out = np.tanh(a)
    return out, lambda g: (g * (1.0 - out * out),)


def _p_log(a):
    if np.any(a <= 0):
        raise ValueError("log: non-positive input")
    return np.log(a), lambda g: (g / a,)


def _p_exp(a):
    out = np.exp(a)
    return out, lambda g: (g * out,)


def _p_mean_over_rows(a):
    if a.ndim != 2:
        raise ShapeError(f"mean_over_rows: expected a 2-d tensor, got {a.shape}")
    n = a.shape[0]
    return a.mean(axis=0, keepdims=True), lambda g: (np.broadcast_to(g / n, a.shape).copy(),)


def _p_sum(a):
    return np.asarray(a.sum(), dtype=a.dtype), lambda g: (np.broadcast_to(g, a.shape).copy(),)


def _p_scalar_scale(a, *, scale: float):
    s = a.dtype.type(scale)
    return a * s, lambda g: (g * s,)


def _p_gather_rows(table, *, indices):
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-d, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {table.shape[0]} rows: {idx.tolist()}")

    def backward(g):
        gt = np.zeros_like(table)
        np.add.at(gt, idx, g)
        return (gt,)

    return table[idx], backward


def _p_take(a, *, key):
    out = a[key]
    basic = all(isinstance(k, (slice, int)) for k in (key if isinstance(key, tuple) else (key,)))

    def backward(g):
        ga = np.zeros_like(a)
        if basic:
            ga[key] = g
        else:
            np.add.at(ga, key, g)
        return (ga,)

    return np.array(out, copy=True), backward


def _p_transpose(a):
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a 2-d tensor, got {a.shape}")
    return a.T.copy(), lambda g: (g.T,)


def _p_clamp(a, *, lo: float, hi: float):
    inside = (a >= lo) & (a <= hi)
    return np.clip(a, lo, hi), lambda g: (g * inside,)


def _check_axis(a, axis):
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("softmax: non-finite input")


def _p_softmax(a, *, axis: int):
    _check_axis(a, axis)
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return out, lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),)


def _p_log_softmax(a, *, axis: int):
    _check_axis(a, axis)
    shifted = a - a.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return out, lambda g: (g - soft * g.sum(axis=axis, keepdims=True),)


PRIMITIVES: dict[str, Callable] = {
    "matmul": _p_matmul,
    "add": _p_add,
    "elementwise_mul": _p_mul,
    "concat_last_axis": _p_concat,
    "relu": _p_relu,
    "sigmoid": _p_sigmoid,
    "tanh": _p_tanh,
    "log": _p_log,
    "exp": _p_exp,
    "mean_over_rows": _p_mean_over_rows,
    "sum": _p_sum,
    "scalar_scale": _p_scalar_scale,
    "gather_rows": _p_gather_rows,
    "take": _p_take,
    "transpose": _p_transpose,
    "clamp": _p_clamp,
    "softmax": _p_softmax,
    "log_softmax": _p_log_softmax,
}


def apply_primitive(op_kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    try:
        fn = PRIMITIVES[op_kind]
    except KeyError:
        raise ValueError(f"unknown primitive {op_kind!r}") from None
    inputs = [as_tensor(x) for x in inputs]
    value, backward = fn(*(t.data for t in inputs), **attrs)
    out = Tensor(np.asarray(value))
    out.op = op_kind
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._parents = tuple(inputs)
        out._backward = backward
    return out


def matmul(a, b):
    return apply_primitive("matmul", [a, b])


def add(a, b):
    return apply_primitive("add", [a, b])


def elementwise_mul(a, b):
    return apply_primitive("elementwise_mul", [a, b])


def concat_last_axis(*xs):
    return apply_primitive("concat_last_axis", list(xs))


def relu(a):
    return apply_primitive("relu", [a])


def sigmoid(a):
    return apply_primitive("sigmoid", [a])


def tanh(a):
    return apply_primitive("tanh", [a])


def log(a):
    return apply_primitive("log", [a])


def exp(a):
    return apply_primitive("exp", [a])


def mean_over_rows(a):
    return apply_primitive("mean_over_rows", [a])


def sum_all(a):
    return apply_primitive("sum", [a])


def scalar_scale(a, scale: float):
    return apply_primitive("scalar_scale", [a], scale=scale)


def gather_rows(table, indices):
    return apply_primitive("gather_rows", [table], indices=indices)


def take(a, key):
    return apply_primitive("take", [a], key=key)


def transpose(a):
    return apply_primitive("transpose", [a])


def clamp(a, lo: float, hi: float):
    return apply_primitive("clamp", [a], lo=lo, hi=hi)


def softmax(logits, axis: int = -1):
    return apply_primitive("softmax", [logits], axis=axis)


def log_softmax(logits, axis: int = -1):
    return apply_primitive("log_softmax", [logits], axis=axis)


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    """Stack (1, d) row tensors into an (n, d) tensor."""
    if len(rows) == 1:
        return rows[0]
    # concat along the last axis of the transposes keeps the primitive set small
    return transpose(concat_last_axis(*[transpose(r) for r in rows]))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def lstm_cell(x_in: Tensor, h_prev: Tensor, c_prev: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor):
    """One LSTM step. Gate order in the fused weight: input, forget, cell, output.

    ``w_x`` is (input_dim, 4H), ``w_h`` is (H, 4H), ``b`` is (4H,).
    """
    hidden = h_prev.shape[-1]
    if w_x.shape[0] != x_in.shape[-1] or w_h.shape != (hidden, 4 * hidden) or c_prev.shape != h_prev.shape:
        raise ShapeError(
            f"lstm_cell: x {x_in.shape}, h {h_prev.shape}, c {c_prev.shape} do not fit "
            f"w_x {w_x.shape}, w_h {w_h.shape}"
        )
    z = add(add(matmul(x_in, w_x), matmul(h_prev, w_h)), b)
    i = sigmoid(take(z, (slice(None), slice(0, hidden))))
    f = sigmoid(take(z, (slice(None), slice(hidden, 2 * hidden))))
    g = tanh(take(z, (slice(None), slice(2 * hidden, 3 * hidden))))
    o = sigmoid(take(z, (slice(None), slice(3 * hidden, 4 * hidden))))
    c = add(elementwise_mul(f, c_prev), elementwise_mul(i, g))
    h = elementwise_mul(o, tanh(c))
    return h, c


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(p for p in t._parents if p.requires_grad)
    nodes.sort(key=lambda t: t.node_id, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in nodes:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g.astype(t.data.dtype, copy=False)
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# parameters, initialisation and Adam


class Parameters:
    """Named leaf tensors plus their Adam moments and step counter."""

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, path: str, value: np.ndarray) -> Tensor:
        if path in self.tensors:
            raise KeyError(f"duplicate parameter path {path!r}")
        t = Tensor(np.array(value, dtype=value.dtype if value.dtype.kind == "f" else np.float32),
                   requires_grad=True)
        t.zero_grad()
        self.tensors[path] = t
        self.m[path] = np.zeros_like(t.data)
        self.v[path] = np.zeros_like(t.data)
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self.tensors[path]

    def __contains__(self, path: str) -> bool:
        return path in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def subset(self, prefix: str) -> dict[str, Tensor]:
        return {k: t for k, t in self.tensors.items() if k.startswith(prefix)}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def num_elements(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def astype(self, dtype) -> "Parameters":
        out = Parameters()
        for k, t in self.tensors.items():
            out.add(k, t.data.astype(dtype))
            out.m[k] = self.m[k].astype(dtype)
            out.v[k] = self.v[k].astype(dtype)
        out.step = self.step
        return out

    def copy(self) -> "Parameters":
        return self.astype(next(iter(self.tensors.values())).dtype) if self.tensors else Parameters()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out)).astype(dtype)


def add_linear(params: Parameters, path: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> None:
    params.add(f"{path}/w", glorot_uniform(rng, fan_in, fan_out))
    params.add(f"{path}/b", np.zeros(fan_out, dtype=np.float32))


def add_embedding(params: Parameters, path: str, rows: int, dim: int, rng: np.random.Generator) -> None:
    params.add(path, rng.uniform(-0.1, 0.1, size=(rows, dim)).astype(np.float32))


def add_lstm(params: Parameters, path: str, input_dim: int, hidden: int, rng: np.random.Generator) -> None:
    params.add(f"{path}/w_x", glorot_uniform(rng, input_dim, 4 * hidden))
    params.add(f"{path}/w_h", glorot_uniform(rng, hidden, 4 * hidden))
    params.add(f"{path}/b", np.zeros(4 * hidden, dtype=np.float32))


def adam_step(params: Parameters, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> Parameters:
    """Bias-corrected Adam update; zeroes gradients afterwards."""
    for path, t in params.items():
        if t.grad is None:
            raise GradientError(f"adam_step: parameter {path!r} has no gradient")
    params.step += 1
    k = params.step
    c1 = 1.0 - beta1**k
    c2 = 1.0 - beta2**k
    for path, t in params.items():
        g = t.grad
        m = params.m[path]
        v = params.v[path]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        t.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(t.data.dtype)
        t.zero_grad()
    return params


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    per_tensor: dict[str, float] = field(default_factory=dict)
    checked_entries: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def gradient_check(fn: Callable[[], Tensor], point: Parameters | dict[str, Tensor] | Tensor,
                   step: float = 1e-5, tolerance: float = 1e-6, floor: float = 1e-6,
                   max_entries: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare backward gradients of ``fn()`` with central finite differences.

    ``point`` holds the leaf tensors that are perturbed in place. Relative error
    per entry is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps entries
    whose true gradient is ~0 from being judged on round-off alone.
    """
    if isinstance(point, Tensor):
        leaves = {"x": point}
    elif isinstance(point, Parameters):
        leaves = dict(point.items())
    else:
        leaves = dict(point)
    for t in leaves.values():
        if t.data.dtype != np.float64:
            raise GradientError("gradient_check needs float64 tensors")
        t.requires_grad = True
        t.zero_grad()

    loss = fn()
    if loss.data.size != 1:
        raise ShapeError(f"gradient_check: fn must be scalar-valued, got shape {loss.shape}")
    backward(loss)
    analytic = {k: t.grad.copy() for k, t in leaves.items()}

    rng = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_error=0.0, tolerance=tolerance)
    with no_grad():
        for name, t in leaves.items():
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            worst = 0.0
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                fp = fn().item()
                flat[i] = orig - step
                fm = fn().item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * step)
                ana = analytic[name].reshape(-1)[i]
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                worst = max(worst, err)
            report.per_tensor[name] = worst
            report.checked_entries += len(idx)
            report.max_rel_error = max(report.max_rel_error, worst)
    for t in leaves.values():
        t.zero_grad()
    return report


# ---------------------------------------------------------------------------
# checkpoint file

MAGIC = b"CGVRG1"
FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, params: Parameters, meta: dict | None = None) -> None:
    """Write parameters, Adam moments and step counter.

    Layout: magic, u32 version, u64 header length, JSON header, then for each
    entry in header order the little-endian float32 buffers of value, m, v.
    """
    entries = []
    blobs = []
    for name in sorted(params.tensors):
        t = params.tensors[name]
        entries.append({"path": name, "shape": list(t.shape)})
        for arr in (t.data, params.m[name], params.v[name]):
            blobs.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    header = json.dumps(
        {"entries": entries, "step": params.step, "meta": meta or {}},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path: str | Path) -> tuple[Parameters, dict]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<IQ", raw, off)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += struct.calcsize("<IQ")
    header = json.loads(raw[off: off + hlen].decode("utf-8"))
    off += hlen
    params = Parameters()
    for entry in header["entries"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        arrays = []
        for _ in range(3):
            arrays.append(np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32))
            off += 4 * n
        params.add(entry["path"], arrays[0])
        params.m[entry["path"]] = arrays[1]
        params.v[entry["path"]] = arrays[2]
    params.step = int(header["step"])
    return params, header.get("meta", {})


def iter_rows(t: Tensor) -> Iterable[Tensor]:
    for i in range(t.shape[0]):
        yield take(t, (slice(i, i + 1),))
