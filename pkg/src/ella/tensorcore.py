"""Minimal dense tensor engine with reverse-mode differentiation.

Values are float64 by default (float32 optional, with looser tolerances).
Tensors record their parents and a backward closure; ``backward`` replays the
implicit tape in reverse topological order. Single-threaded per tape.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

DEFAULT_DTYPE = np.float64

CKPT_MAGIC = b"ELLACKPT v1\n"
_DTYPE_CODES = {0: np.float64, 1: np.float32}
_CODE_FOR = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents), dtype=data.dtype)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# -- arithmetic -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(out):
        a.accumulate(_unbroadcast(out.grad, a.shape))
        b.accumulate(_unbroadcast(out.grad, b.shape))

    return _result(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(out):
        a.accumulate(_unbroadcast(out.grad, a.shape))
        b.accumulate(_unbroadcast(-out.grad, b.shape))

    return _result(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(out):
        a.accumulate(_unbroadcast(out.grad * b.data, a.shape))
        b.accumulate(_unbroadcast(out.grad * a.data, b.shape))

    return _result(data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(out):
        a.accumulate(c * out.grad)

    return _result(a.data * c, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def backward(out):
        a.accumulate(out.grad @ b.data.T)
        b.accumulate(a.data.T @ out.grad)

    return _result(data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    def backward(out):
        a.accumulate(out.grad.T)

    return _result(a.data.T, (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(out):
        a.accumulate(out.grad.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), backward)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(out):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * out.grad.ndim
            idx[axis] = slice(start, stop)
            t.accumulate(out.grad[tuple(idx)])

    return _result(data, tuple(tensors), backward)


def select_rows(a: Tensor, indices: list[int]) -> Tensor:
    """Row gather (embedding select): rows of ``a`` at ``indices``."""
    idx = np.asarray(indices, dtype=np.intp)
    if a.data.ndim != 2:
        raise ShapeError(f"select_rows expects a 2-d tensor, got {a.shape}")
    data = a.data[idx]

    def backward(out):
        if a.requires_grad:
            g = np.zeros_like(a.data)
            np.add.at(g, idx, out.grad)
            a.accumulate(g)

    return _result(data, (a,), backward)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    data = a.data.mean(axis=axis)
    count = a.data.size if axis is None else a.shape[axis]

    def backward(out):
        g = out.grad
        if axis is None:
            a.accumulate(np.full_like(a.data, g / count))
        else:
            a.accumulate(np.broadcast_to(np.expand_dims(g, axis) / count, a.shape).copy())

    return _result(data, (a,), backward)


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    data = a.data.sum(axis=axis)

    def backward(out):
        g = out.grad
        if axis is None:
            a.accumulate(np.full_like(a.data, g))
        else:
            a.accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _result(data, (a,), backward)


# -- nonlinearities ----------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(out):
        a.accumulate(out.grad * mask)

    return _result(np.where(mask, a.data, 0.0), (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    # numerically stable in both tails
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(out):
        a.accumulate(out.grad * y * (1.0 - y))

    return _result(y, (a,), backward)


def tlog(a: Tensor) -> Tensor:
    def backward(out):
        a.accumulate(out.grad / a.data)

    return _result(np.log(a.data), (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data > lo) & (a.data < hi)

    def backward(out):
        a.accumulate(out.grad * mask)

    return _result(np.clip(a.data, lo, hi), (a,), backward)


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(out):
        dy = out.grad
        a.accumulate(y * (dy - (dy * y).sum(axis=-1, keepdims=True)))

    return _result(y, (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def backward(out):
        dy = out.grad
        beta.accumulate(_unbroadcast(dy, beta.shape))
        gamma.accumulate(_unbroadcast(dy * xhat, gamma.shape))
        dxhat = dy * gamma.data
        x.accumulate(
            inv
            * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / d
            )
        )

    return _result(data, (x, gamma, beta), backward)


# -- tape -------------------------------------------------------------------


def backward(out: Tensor, seed: np.ndarray | None = None) -> None:
    """Reverse-mode accumulation from ``out`` through its tape."""
    if not out.requires_grad:
        raise ValueError("output does not require grad")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    out.grad = np.ones_like(out.data) if seed is None else np.asarray(seed, dtype=out.data.dtype)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node)


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()


# -- verification harness -----------------------------------------------------


def grad_check(
    f,
    params: dict[str, Tensor],
    eps: float = 1e-5,
    n_samples: int = 100,
    seed: int = 0,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` is a nullary closure over ``params`` returning a scalar Tensor.
    Coordinates are sampled uniformly across all parameters.
    """
    if not (1e-7 <= eps <= 1e-4):
        raise ValueError("eps must lie in [1e-7, 1e-4]")
    zero_grads(params)
    out = f()
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise FloatingPointError("non-finite forward value")
    backward(out)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
        if p.requires_grad
    }

    coords = []
    for name in sorted(analytic):
        for idx in range(params[name].data.size):
            coords.append((name, idx))
    rng = np.random.default_rng(seed)
    if len(coords) > n_samples:
        chosen = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[i] for i in sorted(chosen)]

    max_rel = 0.0
    for name, idx in coords:
        flat = params[name].data.reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + eps
        f_plus = float(f().data)
        flat[idx] = orig - eps
        f_minus = float(f().data)
        flat[idx] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError("non-finite value during finite differencing")
        fd = (f_plus - f_minus) / (2.0 * eps)
        an = float(analytic[name].reshape(-1)[idx])
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
        max_rel = max(max_rel, rel)
    return max_rel


# -- optimizer ----------------------------------------------------------------


class AdamState:
    def __init__(self) -> None:
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(
    params: dict[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """In-place Adam update with bias correction; parameters without a
    gradient are treated as zero-gradient (unchanged moments still decay)."""
    state.step += 1
    t = state.step
    for name in sorted(params):
        p = params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1**t)
        vhat = v / (1.0 - beta2**t)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


# -- checkpoint container ------------------------------------------------------


def save_arrays(arrays: dict[str, np.ndarray], path: str | Path) -> None:
    """Versioned binary container of named arrays (little-endian raw values)."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name])
            if arr.dtype not in _CODE_FOR:
                arr = arr.astype(np.float64)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", _CODE_FOR[arr.dtype], arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file (bad header)")
    off = len(CKPT_MAGIC)
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        code, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        dtype = np.dtype(_DTYPE_CODES[code]).newbyteorder("<")
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype=dtype, count=n, offset=off).reshape(shape)
        off += arr.nbytes
        arrays[name] = arr.astype(_DTYPE_CODES[code])
    return arrays


def save_checkpoint(params: dict[str, Tensor], path: str | Path) -> None:
    save_arrays({name: p.data for name, p in params.items()}, path)


def load_checkpoint(path: str | Path, requires_grad: bool = True) -> dict[str, Tensor]:
    return {
        name: Tensor(arr, requires_grad=requires_grad)
        for name, arr in load_arrays(path).items()
    }
