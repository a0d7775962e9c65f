"""Dense tensors with a small reverse-mode tape.

Only the operations the networks in this package need are implemented. There
is no broadcasting: every op checks shapes explicitly. Convolutions, linear
layers and most elementwise ops accept an optional leading batch axis.

Usage::

    with Tape() as tape:
        y = relu(linear(x, w, b))
        loss = mean_all(y)
    grads = backward(tape, loss)
    grads[w]  # ndarray shaped like w
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not satisfy an op's contract."""


class NumericError(FloatingPointError):
    """A forward op produced NaN or Inf."""


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """Immutable n-d array plus a flag saying whether gradients are wanted."""

    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = _as_array(data, dtype).view()
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], tuple]


@dataclass
class Tape:
    """Ordered record of differentiable ops. Activate with ``with``."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)


_ACTIVE: list[Tape] = []


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    if not np.isfinite(out).all():
        raise NumericError(f"{op}: non-finite values in output")
    tape = _ACTIVE[-1] if _ACTIVE else None
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        result.node = len(tape.nodes)
        tape.nodes.append(Node(op, tuple(inputs), result, vjp))
    return result


class Gradients(dict):
    """Maps leaf Tensors (by identity) to gradient arrays."""

    def by_name(self, params: "ParamStore") -> dict[str, np.ndarray]:
        return {name: self[t] for name, t in params.items() if t in self}


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Reverse-mode pass from a scalar ``loss`` recorded on ``tape``."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None or loss.node >= len(tape.nodes) or tape.nodes[loss.node].output is not loss:
        raise ValueError("loss is not recorded on this tape")
    return _backward_from(tape, loss, np.ones(loss.shape, dtype=loss.dtype))


def _backward_from(tape: Tape, out: Tensor, seed: np.ndarray) -> Gradients:
    grads: dict[int, np.ndarray] = {id(out): seed}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes[: out.node + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.vjp(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if t.node is None:
                leaves[key] = t
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    result = Gradients()
    for key, t in leaves.items():
        result[t] = grads[key].astype(t.dtype, copy=False).reshape(t.shape)
    return result


def _shape_error(op: str, *tensors) -> ShapeError:
    shapes = ", ".join(str(tuple(np.shape(t.data if isinstance(t, Tensor) else t))) for t in tensors)
    return ShapeError(f"{op}: incompatible shapes {shapes}")


# ---------------------------------------------------------------------------
# convolution


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0:
        raise ShapeError(f"conv: kernel {k} larger than padded input {size} + 2*{pad}")
    return span // stride + 1


def _im2col(xc: np.ndarray, ks, outs, stride: int) -> np.ndarray:
    """Channels-first padded input [C, N, *S] -> columns [C*K, N*prod(outs)]."""
    offsets = list(np.ndindex(*ks))
    cols = np.empty((xc.shape[0], len(offsets), xc.shape[1]) + outs, dtype=xc.dtype)
    for k, offs in enumerate(offsets):
        cols[:, k] = xc[_window(offs, outs, stride)]
    return cols.reshape(xc.shape[0] * len(offsets), -1)


def _window(offs, outs, stride):
    return (slice(None), slice(None)) + tuple(
        slice(o, o + stride * (s - 1) + 1, stride) for o, s in zip(offs, outs)
    )


def _convnd(op: str, nd: int, x: Tensor, w: Tensor, b: Tensor, stride: int, pad: int) -> Tensor:
    batched = x.ndim == nd + 2
    if x.ndim not in (nd + 1, nd + 2) or w.ndim != nd + 2 or b.shape != (w.shape[0],):
        raise _shape_error(op, x, w, b)
    if w.shape[1] != x.shape[-nd - 1]:
        raise _shape_error(op, x, w)
    ks = w.shape[2:]
    if any(k % 2 == 0 for k in ks) or stride < 1 or pad < 0:
        raise ShapeError(f"{op}: kernel {ks} must be odd, stride >= 1, pad >= 0")
    xd = x.data if batched else x.data[None]
    n, cin = xd.shape[:2]
    outs = tuple(_conv_out(s, k, stride, pad) for s, k in zip(xd.shape[2:], ks))
    cout = w.shape[0]
    # channels-first layout so every kernel offset copies one contiguous block
    xc = np.ascontiguousarray(np.moveaxis(xd, 1, 0))
    if pad:
        xc = np.pad(xc, [(0, 0), (0, 0)] + [(pad, pad)] * nd)
    offsets = list(np.ndindex(*ks))
    cols = _im2col(xc, ks, outs, stride)
    wmat = w.data.reshape(cout, -1)
    out = wmat @ cols
    out += b.data[:, None]
    out = np.moveaxis(out.reshape((cout, n) + outs), 0, 1)
    out = np.ascontiguousarray(out if batched else out[0])

    def vjp(g):
        gd = g if batched else g[None]
        g2 = np.moveaxis(gd, 1, 0).reshape(cout, -1)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=1) if b.requires_grad else None
        gx = None
        if x.requires_grad and stride == 1 and cout < cin:
            # full correlation of the output gradient with the flipped, transposed kernel
            full = [k - 1 - pad for k in ks]
            gc = np.moveaxis(gd, 1, 0)
            if any(full):
                gc = np.pad(gc, [(0, 0), (0, 0)] + [(f, f) for f in full])
            flip = np.flip(w.data, axis=tuple(range(2, nd + 2))).swapaxes(0, 1).reshape(cin, -1)
            gxc = (flip @ _im2col(np.ascontiguousarray(gc), ks, xd.shape[2:], 1)).reshape((cin, n) + xd.shape[2:])
            gxd = np.moveaxis(gxc, 0, 1)
            gx = gxd if batched else gxd[0]
        elif x.requires_grad:
            gcols = (wmat.T @ g2).reshape((cin, len(offsets), n) + outs)
            gxc = np.zeros(xc.shape, dtype=gcols.dtype)
            for k, offs in enumerate(offsets):
                gxc[_window(offs, outs, stride)] += gcols[:, k]
            if pad:
                gxc = gxc[(slice(None), slice(None)) + (slice(pad, -pad),) * nd]
            gxd = np.moveaxis(gxc, 0, 1)
            gx = gxd if batched else gxd[0]
        return gx, gw, gb

    return _emit(op, (x, w, b), out, vjp)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [(N,) C_in, H, W] with ``w`` [C_out, C_in, kH, kW]."""
    return _convnd("conv2d", 2, x, w, b, stride, pad)


def conv3d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """3D analogue of :func:`conv2d` on [(N,) C_in, D, H, W] inputs."""
    return _convnd("conv3d", 3, x, w, b, stride, pad)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``w @ x + b`` for x of shape [N] or [B, N]."""
    if x.ndim not in (1, 2) or w.ndim != 2 or w.shape[1] != x.shape[-1] or b.shape != (w.shape[0],):
        raise _shape_error("linear", x, w, b)
    out = x.data @ w.data.T + b.data

    def vjp(g):
        g2 = g.reshape(-1, w.shape[0])
        x2 = x.data.reshape(-1, w.shape[1])
        gx = (g @ w.data) if x.requires_grad else None
        gw = g2.T @ x2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _emit("linear", (x, w, b), out, vjp)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = (1.0 / (1.0 + np.exp(-x.data))).astype(x.dtype)
    return _emit("sigmoid", (x,), out, lambda g: (g * out * (1 - out),))


def elementwise_abs(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _emit("abs", (x,), np.abs(x.data), lambda g: (g * sign,))


def _same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise _shape_error(op, a, b)


def elementwise_sub(a: Tensor, b: Tensor) -> Tensor:
    _same("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same("mul", a, b)
    return _emit("mul", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, factor: float) -> Tensor:
    out = (x.data * factor).astype(x.dtype)
    return _emit("scale", (x,), out, lambda g: (g * factor,))


def mean_all(x: Tensor) -> Tensor:
    k = x.size
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype)
    return _emit("mean_all", (x,), out, lambda g: (np.full(x.shape, g / k, dtype=x.dtype),))


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    return _emit("sum_all", (x,), out, lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def mean_axis(x: Tensor, axis: int) -> Tensor:
    axis = axis % x.ndim
    k = x.shape[axis]
    out = x.data.mean(axis=axis).astype(x.dtype)

    def vjp(g):
        return (np.repeat(np.expand_dims(g / k, axis), k, axis=axis).astype(x.dtype),)

    return _emit("mean_axis", (x,), out, vjp)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input")
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref.shape)) if i != axis
        ):
            raise _shape_error("concat", *tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", tuple(tensors), out, vjp)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if math.prod(shape) != x.size or any(s < 0 for s in shape):
        raise ShapeError(f"reshape: cannot view {x.shape} ({x.size} elements) as {shape}")
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def take(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather rows along axis 0; repeated indices accumulate in backward."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= x.shape[0])):
        raise ShapeError(f"take: indices out of range for leading axis {x.shape[0]}")

    def vjp(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit("take", (x,), x.data[idx], vjp)


def _nearest_matrix(src: int, dst: int, dtype) -> np.ndarray:
    m = np.zeros((dst, src), dtype=dtype)
    m[np.arange(dst), (np.arange(dst) * src) // dst] = 1
    return m


def resize_nearest(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Nearest-neighbour resize of the last two axes to ``size``."""
    if x.ndim < 2:
        raise _shape_error("resize_nearest", x)
    rows = _nearest_matrix(x.shape[-2], size[0], x.dtype)
    cols = _nearest_matrix(x.shape[-1], size[1], x.dtype)
    out = rows @ x.data @ cols.T
    return _emit("resize_nearest", (x,), out, lambda g: (rows.T @ g @ cols,))


# ---------------------------------------------------------------------------
# parameters, initialisation and optimisation


class ParamStore:
    """Named learnable tensors. Entries are replaced, never mutated."""

    def __init__(self, items: Mapping[str, np.ndarray] | None = None):
        self._params: dict[str, Tensor] = {}
        for name, value in (items or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        t = Tensor(np.array(value, dtype=np.float32) if not isinstance(value, np.ndarray) else value,
                   requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __setitem__(self, name: str, value: Tensor) -> None:
        self._params[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def num_params(self, prefix: str = "") -> int:
        return sum(self._params[n].size for n in self.names(prefix))

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({n: t.data.astype(dtype) for n, t in self._params.items()})

    def copy(self) -> "ParamStore":
        return ParamStore({n: t.data.copy() for n, t in self._params.items()})

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._params.items()}


def kaiming_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape)).astype(np.float32)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: ParamStore,
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float = 3e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    names: Iterable[str] | None = None,
) -> ParamStore:
    """One bias-corrected Adam update of ``names`` (default: every parameter)."""
    names = list(params) if names is None else list(names)
    missing = [n for n in names if n not in grads]
    if missing:
        raise KeyError(f"adam_step: no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name in names:
        p = params[name].data
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise _shape_error("adam_step", p, g)
        m = state.m.get(name, np.zeros(p.shape))
        v = state.v.get(name, np.zeros(p.shape))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        params[name] = Tensor((p - update).astype(p.dtype), requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# checkpoint file: b"NVMC", u32 version, u32 index length, JSON index, raw f32 LE

CHECKPOINT_MAGIC = b"NVMC"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: ParamStore, path: str | Path) -> None:
    index, blobs, offset = {}, [], 0
    for name, t in params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        index[name] = {"offset": offset, "shape": list(t.shape)}
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(index, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path: str | Path) -> ParamStore:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an NVMC checkpoint")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    index = json.loads(buf[12 : 12 + hlen])
    base = 12 + hlen
    store = ParamStore()
    for name in index:
        entry = index[name]
        count = math.prod(entry["shape"])
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=base + entry["offset"])
        store.add(name, arr.astype(np.float32).reshape(entry["shape"]))
    return store
