"""Neural building blocks composed from autodiff primitives.

Convolutions are written as loops over kernel offsets, each offset giving one
strided slice and one channel-mixing matmul; their gradients come from the
primitives, so a finite-difference check of a composite block validates the
whole stack.  All modules take an `rng` so parameter init is a pure function
of the seed.

Sequence masking discipline: attention masks padded keys, and callers must
zero padded frames before any temporal convolution.  Together those keep a
padded batch numerically identical to per-utterance processing.
"""

import numpy as np

from .autodiff import Tensor, concat, softmax
from .errors import ConfigurationError

NEG_INF = -1e9


class Module:
    """Base with recursive parameter discovery over attributes and lists."""

    def named_parameters(self, prefix=""):
        out = {}
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(prefix=f"{name}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(prefix=f"{name}{i}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def state_arrays(self):
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_arrays(self, arrays, strict=True):
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        if strict and missing:
            raise ConfigurationError(f"missing parameters: {sorted(missing)[:5]} ...")
        loaded = []
        for name, p in params.items():
            if name in arrays:
                src = np.asarray(arrays[name], dtype=np.float64)
                if src.shape != p.data.shape:
                    raise ConfigurationError(
                        f"{name}: shape {src.shape} does not match {p.data.shape}")
                p.data = src.copy()
                loaded.append(name)
        return loaded


def _init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(max(1, fan_in))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        self.w = _init(rng, (d_in, d_out), d_in)
        self.b = _init(rng, (d_out,), d_in) if bias else None

    def __call__(self, x):
        out = x @ self.w
        return out + self.b if self.b is not None else out


class Embedding(Module):
    def __init__(self, num_embeddings, d_model, rng):
        self.table = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_model),
                                       size=(num_embeddings, d_model)), requires_grad=True)

    def __call__(self, ids):
        return self.table[np.asarray(ids, dtype=np.int64)]


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered * ((var + self.eps) ** -0.5) * self.gamma + self.beta


def sinusoidal_positions(length, d_model):
    """Absolute sinusoidal position table, (length, d_model) constant."""
    pos = np.arange(length)[:, None]
    i = np.arange(d_model // 2)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d_model)
    table = np.zeros((length, d_model))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


def lengths_to_mask(lengths, t_max=None):
    """(B,) lengths -> (B, T) float 1/0 mask."""
    lengths = np.asarray(lengths, dtype=np.int64)
    t_max = int(t_max if t_max is not None else lengths.max())
    return (np.arange(t_max)[None, :] < lengths[:, None]).astype(np.float64)


def apply_frame_mask(x, mask):
    """Zero padded frames; x (B, T, D), mask (B, T)."""
    return x * Tensor(mask[:, :, None])


class MultiHeadAttention(Module):
    """Scaled dot-product attention with key-padding and additive masks."""

    def __init__(self, d_model, n_head, rng):
        if d_model % n_head != 0:
            raise ConfigurationError(f"d_model {d_model} not divisible by {n_head} heads")
        self.n_head = n_head
        self.d_head = d_model // n_head
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(d_model, d_model, rng)
        self.wv = Linear(d_model, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)

    def __call__(self, query, key, value, key_mask=None, attn_bias=None,
                 return_weights=False):
        b, tq, d = query.shape
        tk = key.shape[1]

        def heads(t, proj, length):
            return proj(t).reshape(b, length, self.n_head, self.d_head).transpose(0, 2, 1, 3)

        q = heads(query, self.wq, tq)
        k = heads(key, self.wk, tk)
        v = heads(value, self.wv, tk)
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(self.d_head))
        bias = np.zeros((b, 1, 1, tk))
        if key_mask is not None:
            bias = bias + (1.0 - key_mask[:, None, None, :]) * NEG_INF
        if attn_bias is not None:
            bias = bias + attn_bias[None, None, :, :]
        scores = scores + Tensor(bias)
        weights = softmax(scores, axis=-1)
        mixed = (weights @ v).transpose(0, 2, 1, 3).reshape(b, tq, d)
        out = self.wo(mixed)
        if key_mask is not None:
            # batch items whose keys are all masked output zeros rather than
            # the uniform-attention fallback softmax would give
            alive = (key_mask.sum(axis=1) > 0).astype(np.float64)
            out = out * Tensor(alive[:, None, None])
        if return_weights:
            return out, weights.data
        return out


def causal_bias(t_len):
    """(T, T) additive mask hiding future positions."""
    return np.triu(np.full((t_len, t_len), NEG_INF), k=1)


# -- convolutions -------------------------------------------------------------

def conv1d(x, w, b=None, stride=1, padding=0):
    """x (B, Cin, T), w (Cout, Cin, K) -> (B, Cout, T_out)."""
    _, _, t_in = x.shape
    c_out, _, k = w.shape
    if padding:
        x = x.pad([(0, 0), (0, 0), (padding, padding)])
        t_in += 2 * padding
    t_out = (t_in - k) // stride + 1
    if t_out < 1:
        raise ConfigurationError(f"conv1d output empty: T={t_in}, K={k}, stride={stride}")
    acc = None
    for off in range(k):
        sl = x[:, :, off:off + (t_out - 1) * stride + 1:stride]   # (B, Cin, T_out)
        term = sl.transpose(0, 2, 1) @ w[:, :, off].transpose(1, 0)
        acc = term if acc is None else acc + term
    if b is not None:
        acc = acc + b
    return acc.transpose(0, 2, 1)


def depthwise_conv1d(x, w, b=None, padding=0):
    """x (B, C, T), per-channel kernels w (C, K), stride 1."""
    _, c, t_in = x.shape
    k = w.shape[1]
    if padding:
        x = x.pad([(0, 0), (0, 0), (padding, padding)])
        t_in += 2 * padding
    t_out = t_in - k + 1
    acc = None
    for off in range(k):
        term = x[:, :, off:off + t_out] * w[:, off].reshape(1, c, 1)
        acc = term if acc is None else acc + term
    if b is not None:
        acc = acc + b.reshape(1, c, 1)
    return acc


def conv2d(x, w, b=None, stride=1, padding=0):
    """x (B, Cin, H, W), w (Cout, Cin, Kh, Kw) -> (B, Cout, H_out, W_out)."""
    stride = (stride, stride) if np.isscalar(stride) else tuple(stride)
    padding = (padding, padding) if np.isscalar(padding) else tuple(padding)
    _, _, h_in, w_in = x.shape
    c_out, _, kh, kw = w.shape
    if any(padding):
        x = x.pad([(0, 0), (0, 0), (padding[0], padding[0]), (padding[1], padding[1])])
        h_in += 2 * padding[0]
        w_in += 2 * padding[1]
    h_out = (h_in - kh) // stride[0] + 1
    w_out = (w_in - kw) // stride[1] + 1
    acc = None
    for ih in range(kh):
        for iw in range(kw):
            sl = x[:, :, ih:ih + (h_out - 1) * stride[0] + 1:stride[0],
                   iw:iw + (w_out - 1) * stride[1] + 1:stride[1]]
            term = sl.transpose(0, 2, 3, 1) @ w[:, :, ih, iw].transpose(1, 0)
            acc = term if acc is None else acc + term
    if b is not None:
        acc = acc + b
    return acc.transpose(0, 3, 1, 2)


def conv3d(x, w, b=None, stride=(1, 1, 1), padding=(0, 0, 0)):
    """x (B, Cin, T, H, W), w (Cout, Cin, Kt, Kh, Kw)."""
    _, _, t_in, h_in, w_in = x.shape
    c_out, _, kt, kh, kw = w.shape
    if any(padding):
        x = x.pad([(0, 0), (0, 0), (padding[0], padding[0]),
                   (padding[1], padding[1]), (padding[2], padding[2])])
        t_in += 2 * padding[0]
        h_in += 2 * padding[1]
        w_in += 2 * padding[2]
    t_out = (t_in - kt) // stride[0] + 1
    h_out = (h_in - kh) // stride[1] + 1
    w_out = (w_in - kw) // stride[2] + 1
    acc = None
    for it in range(kt):
        for ih in range(kh):
            for iw in range(kw):
                sl = x[:, :, it:it + (t_out - 1) * stride[0] + 1:stride[0],
                       ih:ih + (h_out - 1) * stride[1] + 1:stride[1],
                       iw:iw + (w_out - 1) * stride[2] + 1:stride[2]]
                term = sl.transpose(0, 2, 3, 4, 1) @ w[:, :, it, ih, iw].transpose(1, 0)
                acc = term if acc is None else acc + term
    if b is not None:
        acc = acc + b
    return acc.transpose(0, 4, 1, 2, 3)


class Conv1d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0, bias=True):
        self.stride = stride
        self.padding = padding
        self.w = _init(rng, (c_out, c_in, kernel), c_in * kernel)
        self.b = _init(rng, (c_out,), c_in * kernel) if bias else None

    def __call__(self, x):
        return conv1d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class DepthwiseConv1d(Module):
    def __init__(self, channels, kernel, rng, padding=0):
        self.padding = padding
        self.w = _init(rng, (channels, kernel), kernel)
        self.b = _init(rng, (channels,), kernel)

    def __call__(self, x):
        return depthwise_conv1d(x, self.w, self.b, padding=self.padding)


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0, bias=True):
        kernel = (kernel, kernel) if np.isscalar(kernel) else tuple(kernel)
        self.stride = stride
        self.padding = padding
        fan = c_in * kernel[0] * kernel[1]
        self.w = _init(rng, (c_out, c_in) + kernel, fan)
        self.b = _init(rng, (c_out,), fan) if bias else None

    def __call__(self, x):
        return conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class Conv3d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=(1, 1, 1), padding=(0, 0, 0)):
        kernel = tuple(kernel)
        fan = c_in * int(np.prod(kernel))
        self.stride = tuple(stride)
        self.padding = tuple(padding)
        self.w = _init(rng, (c_out, c_in) + kernel, fan)
        self.b = _init(rng, (c_out,), fan)

    def __call__(self, x):
        return conv3d(x, self.w, self.b, stride=self.stride, padding=self.padding)


def zero_stuff(x, stride):
    """Insert stride-1 zeros between time steps: (B, C, T) -> (B, C, (T-1)*stride+1)."""
    if stride == 1:
        return x
    b, c, t = x.shape
    cols = [x.reshape(b, c, t, 1)]
    for _ in range(stride - 1):
        cols.append((x * 0.0).reshape(b, c, t, 1))
    stuffed = concat(cols, axis=3).reshape(b, c, t * stride)
    return stuffed[:, :, :(t - 1) * stride + 1]


class ConvTranspose1d(Module):
    """Fractionally-strided conv: zero-stuff by `stride`, then unit-stride conv.

    With kernel 4, stride 2, padding 1 the output length is exactly 2T.
    """

    def __init__(self, c_in, c_out, kernel, rng, stride=2, padding=1):
        self.stride = stride
        self.padding = padding
        self.kernel = kernel
        self.w = _init(rng, (c_out, c_in, kernel), c_in * kernel)
        self.b = _init(rng, (c_out,), c_in * kernel)

    def __call__(self, x):
        stuffed = zero_stuff(x, self.stride)
        return conv1d(stuffed, self.w, self.b, stride=1,
                      padding=self.kernel - 1 - self.padding)

    def out_length(self, t_in):
        return (t_in - 1) * self.stride - 2 * self.padding + self.kernel
