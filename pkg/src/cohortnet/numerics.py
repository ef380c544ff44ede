"""Reverse-mode autodiff over dense numpy arrays, plus the Adam optimizer.

The engine covers only the primitives the pipeline needs: broadcasted
elementwise arithmetic, (batched) matmul, sigmoid/tanh/exp/log, softmax,
concatenation, reshaping, reductions, and a GRU cell built from them.
Everything is float64 and deterministic: no threading, fixed evaluation
order.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_diff = grad.ndim - len(shape)
    if ndim_diff > 0:
        grad = grad.sum(axis=tuple(range(ndim_diff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the computation graph wrapping a float64 ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    # keep numpy from absorbing Tensor operands into object arrays
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad = None
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    # -- graph construction helpers ------------------------------------

    @staticmethod
    def _coerce(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other):
        other = Tensor._coerce(other)
        out = Tensor(self.data + other.data, parents=(self, other))

        def backward(g):
            return (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape))

        out._backward = backward if out.requires_grad else None
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, parents=(self,))
        out._backward = (lambda g: (-g,)) if out.requires_grad else None
        return out

    def __sub__(self, other):
        return self + (-Tensor._coerce(other))

    def __rsub__(self, other):
        return Tensor._coerce(other) + (-self)

    def __mul__(self, other):
        other = Tensor._coerce(other)
        out = Tensor(self.data * other.data, parents=(self, other))

        def backward(g):
            return (
                _unbroadcast(g * other.data, self.shape),
                _unbroadcast(g * self.data, other.shape),
            )

        out._backward = backward if out.requires_grad else None
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._coerce(other)
        out = Tensor(self.data / other.data, parents=(self, other))

        def backward(g):
            return (
                _unbroadcast(g / other.data, self.shape),
                _unbroadcast(-g * self.data / other.data**2, other.shape),
            )

        out._backward = backward if out.requires_grad else None
        return out

    def __matmul__(self, other):
        other = Tensor._coerce(other)
        out = Tensor(np.matmul(self.data, other.data), parents=(self, other))
        a, b = self.data, other.data

        def backward(g):
            if b.ndim == 1:
                if a.ndim == 1:
                    ga, gb = g * b, g * a
                else:
                    ga = np.expand_dims(g, -1) * b
                    gb = np.matmul(np.swapaxes(a, -1, -2), np.expand_dims(g, -1))[..., 0]
            elif a.ndim == 1:
                ga = np.matmul(g, np.swapaxes(b, -1, -2))
                gb = np.expand_dims(a, -1) * np.expand_dims(g, -2)
            else:
                ga = np.matmul(g, np.swapaxes(b, -1, -2))
                gb = np.matmul(np.swapaxes(a, -1, -2), g)
            return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

        out._backward = backward if out.requires_grad else None
        return out

    # -- nonlinearities -------------------------------------------------

    def sigmoid(self):
        y = 1.0 / (1.0 + np.exp(-self.data))
        out = Tensor(y, parents=(self,))
        out._backward = (lambda g: (g * y * (1.0 - y),)) if out.requires_grad else None
        return out

    def tanh(self):
        y = np.tanh(self.data)
        out = Tensor(y, parents=(self,))
        out._backward = (lambda g: (g * (1.0 - y * y),)) if out.requires_grad else None
        return out

    def exp(self):
        y = np.exp(self.data)
        out = Tensor(y, parents=(self,))
        out._backward = (lambda g: (g * y,)) if out.requires_grad else None
        return out

    def log(self):
        out = Tensor(np.log(self.data), parents=(self,))
        d = self.data
        out._backward = (lambda g: (g / d,)) if out.requires_grad else None
        return out

    def clamp(self, lo, hi):
        """Clip values; gradient passes through only inside [lo, hi]."""
        y = np.clip(self.data, lo, hi)
        out = Tensor(y, parents=(self,))
        inside = (self.data >= lo) & (self.data <= hi)
        out._backward = (lambda g: (g * inside,)) if out.requires_grad else None
        return out

    def softmax(self, axis=-1, mask=None):
        """Numerically stable softmax along `axis`.

        `mask` is an optional additive ndarray (e.g. -inf entries) applied to
        the logits before normalization; masked entries get weight exactly 0.
        """
        x = self.data if mask is None else self.data + mask
        shifted = x - np.max(x, axis=axis, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=axis, keepdims=True)
        out = Tensor(y, parents=(self,))

        def backward(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            return (y * (g - dot),)

        out._backward = backward if out.requires_grad else None
        return out

    # -- shape ops -------------------------------------------------------

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), parents=(self,))
        orig = self.shape
        out._backward = (lambda g: (g.reshape(orig),)) if out.requires_grad else None
        return out

    def swapaxes(self, a, b):
        out = Tensor(np.swapaxes(self.data, a, b), parents=(self,))
        out._backward = (lambda g: (np.swapaxes(g, a, b),)) if out.requires_grad else None
        return out

    def __getitem__(self, idx):
        out = Tensor(self.data[idx], parents=(self,))
        shape = self.shape

        def backward(g):
            full = np.zeros(shape)
            np.add.at(full, idx, g)
            return (full,)

        out._backward = backward if out.requires_grad else None
        return out

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), parents=(self,))
        shape = self.shape

        def backward(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        out._backward = backward if out.requires_grad else None
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- autodiff --------------------------------------------------------

    def backward(self):
        """Backpropagate from this scalar, accumulating into `.grad`."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate (additive across repeated backward calls)
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg


def concat(tensors, axis=0):
    tensors = [Tensor._coerce(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), parents=tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    out._backward = backward if out.requires_grad else None
    return out


class ParamStore:
    """Named trainable tensors with gradient accumulators."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return sorted(self.params)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: self.params[k].data for k in self.names()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for k in self.names():
            src = arrays[k]
            if src.shape != self.params[k].data.shape:
                raise ValueError(f"shape mismatch loading {k!r}")
            self.params[k].data = src.astype(np.float64)


class Adam:
    """Adam with bias correction; zeroes gradients after each step."""

    def __init__(self, store: ParamStore, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(store[k].data) for k in store.names()}
        self.v = {k: np.zeros_like(store[k].data) for k in store.names()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k in self.store.names():
            p = self.store[k]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            m_hat = self.m[k] / (1 - b1**self.t)
            v_hat = self.v[k] / (1 - b2**self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        self.store.zero_grad()


def gru_cell_step(x: Tensor, h_prev: Tensor, weights: dict) -> Tensor:
    """One GRU step: h = (1-z)*h_prev + z*htilde, z the update gate.

    `weights` holds Wz/Uz/bz, Wr/Ur/br, Wh/Uh/bh.  Input matrices map
    d_in -> d_h as (..., d_in, d_h); works batched via numpy matmul
    broadcasting (stacked per-feature weight banks included).
    """
    z = (x @ weights["Wz"] + h_prev @ weights["Uz"] + weights["bz"]).sigmoid()
    r = (x @ weights["Wr"] + h_prev @ weights["Ur"] + weights["br"]).sigmoid()
    htilde = (x @ weights["Wh"] + (r * h_prev) @ weights["Uh"] + weights["bh"]).tanh()
    return (1.0 - z) * h_prev + z * htilde


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    s = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-s, s, size=shape)


def add_gru_params(store: ParamStore, prefix: str, rng, d_in: int, d_h: int,
                   bank: int | None = None):
    """Register GRU weights under `prefix`; `bank` stacks per-feature copies."""
    def shp(*s):
        return (bank, *s) if bank is not None else s

    # banked biases are (bank, 1, d_h) so they broadcast over the batch axis
    bias_shape = (bank, 1, d_h) if bank is not None else (d_h,)
    for gate in ("z", "r", "h"):
        store.add(f"{prefix}.W{gate}", init_uniform(rng, shp(d_in, d_h), d_in))
        store.add(f"{prefix}.U{gate}", init_uniform(rng, shp(d_h, d_h), d_h))
        store.add(f"{prefix}.b{gate}", np.zeros(bias_shape))


def gru_weights(store: ParamStore, prefix: str) -> dict:
    return {
        key: store[f"{prefix}.{mat}{gate}"]
        for gate in ("z", "r", "h")
        for key, mat in ((f"W{gate}", "W"), (f"U{gate}", "U"), (f"b{gate}", "b"))
    }


def finite_difference_check(loss_fn, store: ParamStore, eps=1e-5,
                            names=None) -> float:
    """Max relative error between analytic gradients and central differences.

    `loss_fn()` must build a fresh graph from `store` and return the scalar
    loss Tensor.
    """
    store.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {k: (store[k].grad.copy() if store[k].grad is not None
                    else np.zeros_like(store[k].data))
                for k in store.names()}
    worst = 0.0
    for k in (names if names is not None else store.names()):
        p = store[k]
        flat = p.data.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = float(loss_fn().data)
            flat[idx] = orig - eps
            down = float(loss_fn().data)
            flat[idx] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic[k].reshape(-1)[idx]
            # Floor the denominator: entries much smaller than 1e-6 sit at
            # the noise floor of central differences and carry no signal.
            denom = max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, abs(a - numeric) / denom)
    store.zero_grad()
    return worst
