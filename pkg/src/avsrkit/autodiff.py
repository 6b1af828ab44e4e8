"""Reverse-mode automatic differentiation over float64 numpy arrays.

A `Tensor` wraps an ndarray plus a closure that scatters its output gradient
into its parents.  Graphs are built eagerly by the arithmetic methods below;
`backward()` runs an iterative topological sweep so deep stacks don't hit the
recursion limit.  Everything stays in float64, which keeps finite-difference
checks meaningful (central differences at h=1e-5 resolve ~1e-10 curvature).

Custom ops (e.g. losses with analytic gradients) can construct nodes directly:

    out = Tensor(value, parents=(x,), backward=lambda g: x.accumulate(g * ...))
"""

import numpy as np
from scipy.special import logsumexp as _np_logsumexp


def unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _as_array(value):
    return np.asarray(value, dtype=np.float64)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = _as_array(data)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward
        if parents:
            self.requires_grad = any(p.requires_grad for p in parents)
        else:
            self.requires_grad = requires_grad

    # -- bookkeeping ---------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def accumulate(self, grad):
        """Add `grad` into this node's gradient buffer (no-op if grad-free)."""
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += unbroadcast(_as_array(grad), self.data.shape)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        topo, visited, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={'yes' if self.requires_grad else 'no'})"

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data + other.data, parents=(self, other))
        out._backward = lambda g: (self.accumulate(g), other.accumulate(g))
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, parents=(self,))
        out._backward = lambda g: self.accumulate(-g)
        return out

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tensor) else Tensor(-_as_array(other)))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data * other.data, parents=(self, other))
        out._backward = lambda g: (self.accumulate(g * other.data),
                                   other.accumulate(g * self.data))
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data / other.data, parents=(self, other))
        out._backward = lambda g: (self.accumulate(g / other.data),
                                   other.accumulate(-g * self.data / other.data ** 2))
        return out

    def __rtruediv__(self, other):
        return Tensor(other) / self

    def __pow__(self, p):
        if not np.isscalar(p):
            raise TypeError("exponent must be a scalar")
        out = Tensor(self.data ** p, parents=(self,))
        out._backward = lambda g: self.accumulate(g * p * self.data ** (p - 1))
        return out

    def __matmul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        if self.ndim < 2 or other.ndim < 2:
            raise ValueError("matmul operands must be at least 2-d")
        out = Tensor(self.data @ other.data, parents=(self, other))

        def backward(g):
            self.accumulate(unbroadcast(g @ other.data.swapaxes(-1, -2), self.shape))
            other.accumulate(unbroadcast(self.data.swapaxes(-1, -2) @ g, other.shape))

        out._backward = backward
        return out

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), parents=(self,))
        out._backward = lambda g: self.accumulate(g.reshape(self.shape))
        return out

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))
        out = Tensor(self.data.transpose(axes), parents=(self,))
        out._backward = lambda g: self.accumulate(g.transpose(inverse))
        return out

    def __getitem__(self, key):
        out = Tensor(self.data[key], parents=(self,))
        advanced = _is_advanced(key)

        def backward(g):
            if not self.requires_grad:
                return
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            if advanced:
                np.add.at(self.grad, key, g)
            else:
                self.grad[key] += g

        out._backward = backward
        return out

    def pad(self, pad_width):
        """Zero-pad; pad_width is a per-axis list of (before, after)."""
        out = Tensor(np.pad(self.data, pad_width), parents=(self,))
        sl = tuple(slice(b, b + n) for (b, _), n in zip(pad_width, self.shape))
        out._backward = lambda g: self.accumulate(g[sl])
        return out

    # -- reductions and pointwise -------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), parents=(self,))

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self.accumulate(np.broadcast_to(g, self.shape))

        out._backward = backward
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # The closures below capture the output VALUE, never the output node:
    # a node referencing itself through its own backward closure is a
    # reference cycle, and a training loop that allocates megabytes of
    # cyclic garbage per step outruns the cycle collector.

    def exp(self):
        val = np.exp(self.data)
        out = Tensor(val, parents=(self,))
        out._backward = lambda g: self.accumulate(g * val)
        return out

    def log(self):
        out = Tensor(np.log(self.data), parents=(self,))
        out._backward = lambda g: self.accumulate(g / self.data)
        return out

    def tanh(self):
        val = np.tanh(self.data)
        out = Tensor(val, parents=(self,))
        out._backward = lambda g: self.accumulate(g * (1.0 - val ** 2))
        return out

    def sigmoid(self):
        x = self.data
        val = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                       np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        out = Tensor(val, parents=(self,))
        out._backward = lambda g: self.accumulate(g * val * (1.0 - val))
        return out

    def swish(self):
        return self * self.sigmoid()


def _is_advanced(key):
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(p, (np.ndarray, list)) for p in parts)


def concat(tensors, axis=0):
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), parents=tuple(tensors))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t.accumulate(g[tuple(sl)])

    out._backward = backward
    return out


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    val = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(val, parents=(x,))

    def backward(g):
        inner = (g * val).sum(axis=axis, keepdims=True)
        x.accumulate(val * (g - inner))

    out._backward = backward
    return out


def log_softmax(x, axis=-1):
    val = x.data - _np_logsumexp(x.data, axis=axis, keepdims=True)
    out = Tensor(val, parents=(x,))

    def backward(g):
        x.accumulate(g - np.exp(val) * g.sum(axis=axis, keepdims=True))

    out._backward = backward
    return out


def logsumexp(x, axis=-1, keepdims=False):
    val = _np_logsumexp(x.data, axis=axis, keepdims=keepdims)
    out = Tensor(val, parents=(x,))
    soft = np.exp(x.data - _np_logsumexp(x.data, axis=axis, keepdims=True))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        x.accumulate(soft * g)

    out._backward = backward
    return out


def finite_difference_check(build_loss, params, h=1e-5, samples_per_param=4, rng=None):
    """Compare analytic gradients against central differences.

    `build_loss` is a zero-argument callable returning a scalar Tensor built
    from `params` (name -> Tensor leaves).  A few entries of each parameter
    are perturbed.  Returns the worst relative error found.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.zero_grad()
    loss = build_loss()
    loss.backward()
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in params.items()}
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.shape[0]
        idx = rng.choice(n, size=min(samples_per_param, n), replace=False)
        for i in idx:
            keep = flat[i]
            flat[i] = keep + h
            up = build_loss().item()
            flat[i] = keep - h
            down = build_loss().item()
            flat[i] = keep
            numeric = (up - down) / (2.0 * h)
            ana = analytic[name].reshape(-1)[i]
            # the floor keeps FD noise on true-zero gradients (e.g. shift
            # directions softmax is invariant to) from reading as error
            denom = max(1e-4, abs(numeric) + abs(ana))
            worst = max(worst, abs(numeric - ana) / denom)
    return worst
