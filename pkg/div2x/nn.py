"""Dense tensors with reverse-mode automatic differentiation.

Every forward op returns a new Tensor; when any input requires a gradient the
output records its parents and a closure that pushes the output gradient back
into them. ``Tensor.backward`` walks the graph once in reverse topological
order, and gradients always accumulate.
"""
import contextlib
import hashlib
import logging
import math
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

_dtype = np.float32

Number = Union[int, float]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Switch the dtype new tensors are created with (float32 train, float64 checks)"""
    global _dtype
    previous = _dtype
    _dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = previous


def default_dtype():
    return _dtype


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=_dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, name={self.name!r})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out.name = self.name
        out._parents = ()
        out._backward = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True).reshape(self.shape)
        else:
            self.grad += grad

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if not self.requires_grad:
            raise ValueError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() without a gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = backward if out.requires_grad else None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


class Parameter(Tensor):
    """A learnable leaf tensor"""
    __slots__ = ()

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True, name=name)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _add_scalar(as_tensor(a), float(b))
    a = as_tensor(a)
    _same_shape(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)
    return _result(a.data + b.data, (a, b), backward)


def _add_scalar(a: Tensor, c: float) -> Tensor:
    def backward(g):
        a._accumulate(g)
    return _result(a.data + a.data.dtype.type(c), (a,), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(-g)
    return _result(-a.data, (a,), backward)


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _add_scalar(as_tensor(a), -float(b))
    return add(a, neg(b))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = a.data.dtype.type(b)

        def backward_scalar(g):
            a._accumulate(g * c)
        return _result(a.data * c, (a,), backward_scalar)
    _same_shape(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)
    return _result(a.data * b.data, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    positive = a.data > 0

    def backward(g):
        a._accumulate(g * positive)
    return _result(np.where(positive, a.data, 0).astype(a.data.dtype), (a,), backward)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.data)

    def backward(g):
        a._accumulate(g * s * (1 - s))
    return _result(s, (a,), backward)


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)) computed without overflow"""
    value = -np.logaddexp(0, -a.data).astype(a.data.dtype)

    def backward(g):
        a._accumulate(g * _stable_sigmoid(-a.data))
    return _result(value, (a,), backward)


def pow_scalar(a: Tensor, exponent: float) -> Tensor:
    """a ** exponent for a >= 0"""
    if np.any(a.data < 0):
        raise ValueError("pow_scalar expects a non-negative base")
    value = np.power(a.data, exponent)

    def backward(g):
        if exponent == 0:
            return
        a._accumulate(g * exponent * np.power(a.data, exponent - 1))
    return _result(value.astype(a.data.dtype, copy=False), (a,), backward)


# ---------------------------------------------------------------- reductions / shape

def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(np.broadcast_to(g, a.shape))
    return _result(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), backward)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    def backward(g):
        a._accumulate(g.reshape(a.shape))
    return _result(a.data.reshape(shape), (a,), backward)


def broadcast_to(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """Explicit broadcast: a's shape must be a prefix of shape (trailing axes added)"""
    if tuple(shape[:a.data.ndim]) != a.shape:
        raise ValueError(f"broadcast_to: {a.shape} is not a leading prefix of {shape}")
    extra = len(shape) - a.data.ndim
    expanded = a.data.reshape(a.shape + (1,) * extra)

    def backward(g):
        a._accumulate(g.sum(axis=tuple(range(a.data.ndim, len(shape)))))
    return _result(np.broadcast_to(expanded, shape).copy(), (a,), backward)


def concat_axis(tensors: Sequence[Tensor], axis: int) -> Tensor:
    axis = axis % tensors[0].data.ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                t._accumulate(g[tuple(index)])
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ndim = tensors[0].data.ndim + 1
    axis = axis % ndim
    for t in tensors[1:]:
        _same_shape(tensors[0], t, "stack")

    def backward(g):
        for k, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, k, axis=axis))
    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        a._accumulate(full)
    return _result(np.array(a.data[index]), (a,), backward)


def max_over_axes(a: Tensor, axes: Sequence[int]) -> Tensor:
    """Max over axes; the gradient goes to the first maximal element"""
    axes = tuple(sorted(ax % a.data.ndim for ax in axes))
    keep = tuple(ax for ax in range(a.data.ndim) if ax not in axes)
    moved = np.transpose(a.data, keep + axes)
    kept_shape = moved.shape[:len(keep)]
    flat = moved.reshape(kept_shape + (-1,))
    arg = flat.argmax(axis=-1)
    value = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        grad_flat = np.zeros_like(flat)
        np.put_along_axis(grad_flat, arg[..., None], g[..., None], axis=-1)
        grad_moved = grad_flat.reshape(moved.shape)
        a._accumulate(np.transpose(grad_moved, np.argsort(keep + axes)))
    return _result(value, (a,), backward)


def softmax_axis(a: Tensor, axis: int) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))
    return _result(y, (a,), backward)


# ---------------------------------------------------------------- spatial

def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """'Same'-padded cross-correlation of an H×W×Cin field with a k×k×Cin×Cout kernel"""
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ValueError(f"conv2d expects H×W×Cin input and k×k×Cin×Cout kernel, got {x.shape} and {kernel.shape}")
    k, k2, c_in, c_out = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d kernel must be square with odd size, got {kernel.shape}")
    if x.shape[2] != c_in:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match Cout={c_out}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d stride must be 1 or 2, got {stride}")

    h, w = x.shape[:2]
    pad = k // 2
    padded = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)))
    out_h, out_w = -(-h // stride), -(-w // stride)
    # windows: out_h × out_w × Cin × k × k
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(0, 1))
    windows = windows[::stride, ::stride][:out_h, :out_w]
    out = np.einsum("hwcij,ijco->hwo", windows, kernel.data, optimize=True)
    if bias is not None:
        out = out + bias.data

    def backward(g):
        if kernel.requires_grad:
            kernel._accumulate(np.einsum("hwcij,hwo->ijco", windows, g, optimize=True))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 1)))
        if x.requires_grad:
            grad_windows = np.einsum("hwo,ijco->hwcij", g, kernel.data, optimize=True)
            grad_padded = np.zeros_like(padded)
            for i in range(k):
                for j in range(k):
                    grad_padded[i:i + stride * out_h:stride, j:j + stride * out_w:stride] += grad_windows[:, :, :, i, j]
            x._accumulate(grad_padded[pad:pad + h, pad:pad + w])

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out.astype(x.data.dtype, copy=False), parents, backward)


def bilinear_sample(feature: Tensor, offsets: Tensor) -> Tensor:
    """out(p) = feature(p + offsets(p)) with bilinear weights; offsets in cells (row, col), border clamped"""
    h, w, c = feature.shape
    if offsets.shape != (h, w, 2):
        raise ValueError(f"bilinear_sample offsets must be {(h, w, 2)}, got {offsets.shape}")
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    raw_r = rows + offsets.data[..., 0]
    raw_c = cols + offsets.data[..., 1]
    pr = np.clip(raw_r, 0, h - 1)
    pc = np.clip(raw_c, 0, w - 1)
    r0 = np.clip(np.floor(pr).astype(np.int64), 0, max(h - 2, 0))
    c0 = np.clip(np.floor(pc).astype(np.int64), 0, max(w - 2, 0))
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (pr - r0)[..., None]
    fc = (pc - c0)[..., None]
    f = feature.data
    f00, f01, f10, f11 = f[r0, c0], f[r0, c1], f[r1, c0], f[r1, c1]
    out = (1 - fr) * (1 - fc) * f00 + (1 - fr) * fc * f01 + fr * (1 - fc) * f10 + fr * fc * f11
    inside_r = ((raw_r >= 0) & (raw_r <= h - 1))[..., None]
    inside_c = ((raw_c >= 0) & (raw_c <= w - 1))[..., None]

    def backward(g):
        if feature.requires_grad:
            grad = np.zeros_like(f)
            np.add.at(grad, (r0, c0), g * (1 - fr) * (1 - fc))
            np.add.at(grad, (r0, c1), g * (1 - fr) * fc)
            np.add.at(grad, (r1, c0), g * fr * (1 - fc))
            np.add.at(grad, (r1, c1), g * fr * fc)
            feature._accumulate(grad)
        if offsets.requires_grad:
            d_r = (1 - fc) * (f10 - f00) + fc * (f11 - f01)
            d_c = (1 - fr) * (f01 - f00) + fr * (f11 - f10)
            if h == 1:
                d_r = np.zeros_like(d_r)
            if w == 1:
                d_c = np.zeros_like(d_c)
            grad_off = np.stack([(g * d_r * inside_r).sum(axis=-1),
                                 (g * d_c * inside_c).sum(axis=-1)], axis=-1)
            offsets._accumulate(grad_off)
    return _result(out.astype(f.dtype, copy=False), (feature, offsets), backward)


# ---------------------------------------------------------------- losses

def masked_l1(a: Tensor, b: Tensor, mask: np.ndarray, normalizer: Optional[float] = None) -> Tensor:
    """Σ |a − b| · mask(m, n) over cells and channels, divided by H·W unless a normalizer is given"""
    _same_shape(a, b, "masked_l1")
    h, w = a.shape[:2]
    mask = np.asarray(mask)
    if mask.shape != (h, w):
        raise ValueError(f"masked_l1: mask shape {mask.shape} does not match {(h, w)}")
    norm = float(h * w) if normalizer is None else float(normalizer)
    weight = mask.astype(a.data.dtype).reshape((h, w) + (1,) * (a.data.ndim - 2))
    diff = a.data - b.data
    value = np.asarray((np.abs(diff) * weight).sum() / norm, dtype=a.data.dtype)

    def backward(g):
        grad = g * np.sign(diff) * weight / norm
        if a.requires_grad:
            a._accumulate(np.broadcast_to(grad, a.shape))
        if b.requires_grad:
            b._accumulate(-np.broadcast_to(grad, b.shape))
    return _result(value, (a, b), backward)


# ---------------------------------------------------------------- modules

def _param_seed(base_seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{base_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class Module:
    """Container that discovers Parameters and sub-Modules through its attributes"""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=f"{name}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.named_parameters():
            key = f"{prefix}{name}"
            if key not in state:
                raise KeyError(f"Missing parameter {key} in state dict")
            value = np.asarray(state[key])
            if value.shape != p.shape:
                raise ValueError(f"Parameter {key}: expected shape {p.shape}, got {value.shape}")
            p.data = value.astype(p.data.dtype, copy=True)


class Conv2d(Module):
    def __init__(self, name: str, c_in: int, c_out: int, kernel_size: int, stride: int = 1,
                 seed: int = 0, zero_init: bool = False, bias_init: float = 0.0):
        self.stride = stride
        shape = (kernel_size, kernel_size, c_in, c_out)
        if zero_init:
            weight = np.zeros(shape)
        else:
            fan_in = kernel_size * kernel_size * c_in
            bound = math.sqrt(6.0 / fan_in)
            rng = np.random.default_rng(_param_seed(seed, f"{name}.weight"))
            weight = rng.uniform(-bound, bound, size=shape)
        self.weight = Parameter(weight, name=f"{name}.weight")
        self.bias = Parameter(np.full(c_out, bias_init), name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride)


# ---------------------------------------------------------------- optimizer

def sgd_step(params: Sequence[Parameter], grads: Sequence[np.ndarray], lr: float, momentum: float,
             velocities: Dict[int, np.ndarray]) -> bool:
    """v <- mu v + g; p <- p - lr v. Returns False (nothing changed) if any gradient is non-finite"""
    if lr <= 0:
        raise ValueError(f"Learning rate must be positive, got {lr}")
    if any(not np.all(np.isfinite(g)) for g in grads):
        return False
    for p, g in zip(params, grads):
        v = velocities.get(id(p))
        v = g.copy() if v is None else momentum * v + g
        velocities[id(p)] = v
        p.data = (p.data - lr * v).astype(p.data.dtype, copy=False)
    return True


class SGD:
    """Momentum SGD over a fixed parameter list with optional global-norm clipping"""

    def __init__(self, params: Sequence[Parameter], lr: float, momentum: float = 0.9,
                 grad_clip: Optional[float] = None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.grad_clip = grad_clip
        self.velocities: Dict[int, np.ndarray] = {}
        self.rejected_steps = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> bool:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if self.grad_clip is not None:
            norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
            if math.isfinite(norm) and norm > self.grad_clip:
                scale = self.grad_clip / norm
                grads = [g * scale for g in grads]
        accepted = sgd_step(self.params, grads, self.lr, self.momentum, self.velocities)
        if not accepted:
            self.rejected_steps += 1
            logging.warning(f"Rejected optimizer step with non-finite gradient (total {self.rejected_steps})")
        return accepted


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 1:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))
