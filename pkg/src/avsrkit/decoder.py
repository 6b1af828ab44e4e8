"""Autoregressive transformer decoder and language model.

Token conventions: unit ids 0..V-1 are the characters; the embedding table
has one extra row V used as the start-of-sequence input; output class V is
end-of-sequence.  The decoder cross-attends over one encoder memory, or two
(audio then video) when built for the dual-memory fusion variant.
"""

import numpy as np

from .autodiff import Tensor
from .errors import ConfigurationError
from .nn import (
    Embedding,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    causal_bias,
    sinusoidal_positions,
)


class _FFN(Module):
    def __init__(self, d_model, d_ffn, rng):
        self.norm = LayerNorm(d_model)
        self.up = Linear(d_model, d_ffn, rng)
        self.down = Linear(d_ffn, d_model, rng)

    def __call__(self, x):
        return self.down(self.up(self.norm(x)).swish())


class DecoderLayer(Module):
    def __init__(self, d_model, n_head, d_ffn, rng, dual_memory=False):
        self.self_norm = LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, n_head, rng)
        self.cross_norm = LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_head, rng)
        if dual_memory:
            self.cross2_norm = LayerNorm(d_model)
            self.cross2_attn = MultiHeadAttention(d_model, n_head, rng)
        self.dual_memory = dual_memory
        self.ffn = _FFN(d_model, d_ffn, rng)

    def __call__(self, x, memory, memory_mask, causal, memory2=None, memory2_mask=None):
        if memory2 is not None and not self.dual_memory:
            raise ConfigurationError("this decoder reads a single memory")
        normed = self.self_norm(x)
        x = x + self.self_attn(normed, normed, normed, attn_bias=causal)
        x = x + self.cross_attn(self.cross_norm(x), memory, memory,
                                key_mask=memory_mask)
        if self.dual_memory:
            if memory2 is None:
                raise ConfigurationError("dual-memory decoder needs a second memory")
            x = x + self.cross2_attn(self.cross2_norm(x), memory2, memory2,
                                     key_mask=memory2_mask)
        x = x + self.ffn(x)
        return x


class TransformerDecoder(Module):
    """Teacher-forced logits over V+1 classes (units plus end-of-sequence)."""

    def __init__(self, vocab_size, d_model, n_head, d_ffn, num_layers, rng,
                 dual_memory=False):
        if vocab_size < 1 or num_layers < 1:
            raise ConfigurationError("need vocab_size >= 1 and num_layers >= 1")
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.embed = Embedding(vocab_size + 1, d_model, rng)   # extra row: sos
        self.layers = [DecoderLayer(d_model, n_head, d_ffn, rng, dual_memory)
                       for _ in range(num_layers)]
        self.out_norm = LayerNorm(d_model)
        self.out_proj = Linear(d_model, vocab_size + 1, rng)   # extra class: eos

    @property
    def sos_id(self):
        return self.vocab_size

    @property
    def eos_id(self):
        return self.vocab_size

    def __call__(self, ys_in, memory, memory_mask=None, memory2=None,
                 memory2_mask=None):
        ys_in = np.asarray(ys_in, dtype=np.int64)
        if ys_in.ndim != 2 or ys_in.shape[1] < 1:
            raise ConfigurationError(f"decoder input must be (B, L>=1), got {ys_in.shape}")
        if ys_in.max() > self.vocab_size or ys_in.min() < 0:
            raise ConfigurationError("decoder input ids outside embedding table")
        length = ys_in.shape[1]
        x = self.embed(ys_in) * np.sqrt(self.d_model)
        x = x + Tensor(sinusoidal_positions(length, self.d_model)[None])
        causal = causal_bias(length)
        for layer in self.layers:
            x = layer(x, memory, memory_mask, causal, memory2, memory2_mask)
        return self.out_proj(self.out_norm(x))


class TransformerLM(Module):
    """Causal transformer over unit sequences; scores include eos."""

    def __init__(self, vocab_size, d_model, n_head, d_ffn, num_layers, rng):
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.embed = Embedding(vocab_size + 1, d_model, rng)
        self.layers = []
        for _ in range(num_layers):
            self.layers.append(_LMLayer(d_model, n_head, d_ffn, rng))
        self.out_norm = LayerNorm(d_model)
        self.out_proj = Linear(d_model, vocab_size + 1, rng)

    @property
    def sos_id(self):
        return self.vocab_size

    @property
    def eos_id(self):
        return self.vocab_size

    def __call__(self, ys_in):
        ys_in = np.asarray(ys_in, dtype=np.int64)
        length = ys_in.shape[1]
        x = self.embed(ys_in) * np.sqrt(self.d_model)
        x = x + Tensor(sinusoidal_positions(length, self.d_model)[None])
        causal = causal_bias(length)
        for layer in self.layers:
            x = layer(x, causal)
        return self.out_proj(self.out_norm(x))


class _LMLayer(Module):
    def __init__(self, d_model, n_head, d_ffn, rng):
        self.norm = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_head, rng)
        self.ffn = _FFN(d_model, d_ffn, rng)

    def __call__(self, x, causal):
        normed = self.norm(x)
        x = x + self.attn(normed, normed, normed, attn_bias=causal)
        return x + self.ffn(x)
