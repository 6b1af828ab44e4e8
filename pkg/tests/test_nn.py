import numpy as np
import pytest

from avsrkit.autodiff import Tensor, finite_difference_check
from avsrkit.errors import ConfigurationError
from avsrkit.nn import (
    Conv1d,
    Conv2d,
    Conv3d,
    ConvTranspose1d,
    DepthwiseConv1d,
    Embedding,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    apply_frame_mask,
    causal_bias,
    lengths_to_mask,
    sinusoidal_positions,
    zero_stuff,
)


def check_module(module, build, tol=1e-6, samples=4):
    err = finite_difference_check(build, module.named_parameters(),
                                  samples_per_param=samples,
                                  rng=np.random.default_rng(3))
    assert err < tol, f"finite-difference mismatch: {err}"


def test_linear_forward_and_grad():
    rng = np.random.default_rng(0)
    layer = Linear(5, 3, rng)
    x = Tensor(rng.normal(size=(2, 4, 5)))
    np.testing.assert_allclose(layer(x).data, x.data @ layer.w.data + layer.b.data)
    check_module(layer, lambda: (layer(x) ** 2).sum())


def test_layernorm_statistics_and_grad():
    rng = np.random.default_rng(1)
    ln = LayerNorm(8)
    x = Tensor(rng.normal(3.0, 2.0, size=(4, 8)))
    out = ln(x).data
    np.testing.assert_allclose(out.mean(axis=-1), np.zeros(4), atol=1e-7)
    np.testing.assert_allclose(out.var(axis=-1), np.ones(4), atol=1e-4)
    xt = Tensor(x.data, requires_grad=True)
    params = dict(ln.named_parameters())
    params["x"] = xt
    err = finite_difference_check(lambda: (ln(xt) ** 3).sum(), params,
                                  rng=np.random.default_rng(5))
    assert err < 1e-6


def test_embedding_gather():
    rng = np.random.default_rng(2)
    emb = Embedding(7, 4, rng)
    ids = np.array([[0, 3, 3], [6, 0, 1]])
    out = emb(ids)
    assert out.shape == (2, 3, 4)
    np.testing.assert_allclose(out.data[0, 1], emb.table.data[3])
    check_module(emb, lambda: (emb(ids) ** 2).sum())


def test_sinusoidal_positions_table():
    table = sinusoidal_positions(16, 8)
    assert table.shape == (16, 8)
    np.testing.assert_allclose(table[0], [0, 1, 0, 1, 0, 1, 0, 1], atol=1e-12)
    np.testing.assert_allclose(table[3, 0], np.sin(3.0), atol=1e-12)


def test_lengths_to_mask():
    mask = lengths_to_mask([3, 1], t_max=4)
    np.testing.assert_array_equal(mask, [[1, 1, 1, 0], [1, 0, 0, 0]])


# -- attention ---------------------------------------------------------------

def test_attention_rows_sum_to_one_under_masking():
    rng = np.random.default_rng(4)
    attn = MultiHeadAttention(8, 2, rng)
    x = Tensor(rng.normal(size=(2, 5, 8)))
    mask = lengths_to_mask([5, 3], t_max=5)
    out, weights = attn(x, x, x, key_mask=mask, return_weights=True)
    assert out.shape == (2, 5, 8)
    np.testing.assert_allclose(weights.sum(axis=-1), np.ones((2, 2, 5)), atol=1e-6)
    # padded keys of the second item get exactly zero attention
    np.testing.assert_allclose(weights[1, :, :, 3:], 0.0, atol=0.0)


def test_attention_key_masking_equals_shorter_input():
    rng = np.random.default_rng(5)
    attn = MultiHeadAttention(8, 2, rng)
    x_short = Tensor(rng.normal(size=(1, 3, 8)))
    pad = np.concatenate([x_short.data, rng.normal(size=(1, 2, 8))], axis=1)
    x_pad = Tensor(pad)
    mask = lengths_to_mask([3], t_max=5)
    out_pad = attn(x_pad, x_pad, x_pad, key_mask=mask).data[:, :3]
    out_short = attn(x_short, x_short, x_short).data
    np.testing.assert_allclose(out_pad, out_short, atol=1e-10)


def test_attention_causal_bias():
    rng = np.random.default_rng(6)
    attn = MultiHeadAttention(8, 2, rng)
    x = Tensor(rng.normal(size=(1, 4, 8)))
    _, weights = attn(x, x, x, attn_bias=causal_bias(4), return_weights=True)
    upper = np.triu(np.ones((4, 4)), k=1).astype(bool)
    assert np.all(weights[0, :, upper] == 0.0)


def test_attention_gradients():
    rng = np.random.default_rng(7)
    attn = MultiHeadAttention(8, 2, rng)
    q = Tensor(rng.normal(size=(2, 3, 8)))
    kv = Tensor(rng.normal(size=(2, 4, 8)))
    mask = lengths_to_mask([4, 2], t_max=4)
    check_module(attn, lambda: (attn(q, kv, kv, key_mask=mask) ** 2).sum())


def test_attention_rejects_bad_head_count():
    with pytest.raises(ConfigurationError):
        MultiHeadAttention(10, 3, np.random.default_rng(0))


# -- convolutions ------------------------------------------------------------

def reference_conv1d(x, w, b, stride, padding):
    x = np.pad(x, [(0, 0), (0, 0), (padding, padding)])
    b_sz, _, t_in = x.shape
    c_out, _, k = w.shape
    t_out = (t_in - k) // stride + 1
    out = np.zeros((b_sz, c_out, t_out))
    for t in range(t_out):
        patch = x[:, :, t * stride:t * stride + k]
        out[:, :, t] = np.einsum("bck,ock->bo", patch, w) + b
    return out


def test_conv1d_matches_reference():
    rng = np.random.default_rng(8)
    conv = Conv1d(3, 5, 3, rng, stride=2, padding=1)
    x = Tensor(rng.normal(size=(2, 3, 9)))
    ref = reference_conv1d(x.data, conv.w.data, conv.b.data, 2, 1)
    np.testing.assert_allclose(conv(x).data, ref, atol=1e-12)
    # stride-2 pad-1 kernel-3 halves the length, rounding up
    assert conv(x).shape[2] == 5
    check_module(conv, lambda: (conv(x) ** 2).sum())


def test_conv1d_length_arithmetic():
    rng = np.random.default_rng(9)
    conv = Conv1d(1, 1, 3, rng, stride=2, padding=1)
    for t in (4, 8, 12, 100):
        x = Tensor(np.zeros((1, 1, t)))
        assert conv(x).shape[2] == (t + 1) // 2


def test_depthwise_conv1d():
    rng = np.random.default_rng(10)
    conv = DepthwiseConv1d(4, 5, rng, padding=2)
    x = Tensor(rng.normal(size=(2, 4, 7)))
    out = conv(x)
    assert out.shape == (2, 4, 7)
    # channel c only sees channel c
    x2 = x.data.copy()
    x2[:, 0] += 10.0
    out2 = conv(Tensor(x2))
    np.testing.assert_allclose(out2.data[:, 1:], out.data[:, 1:], atol=1e-12)
    assert not np.allclose(out2.data[:, 0], out.data[:, 0])
    check_module(conv, lambda: (conv(x) ** 2).sum())


def test_conv2d_shapes_and_grad():
    rng = np.random.default_rng(11)
    conv = Conv2d(2, 4, 3, rng, stride=2, padding=1)
    x = Tensor(rng.normal(size=(2, 2, 8, 8)))
    out = conv(x)
    assert out.shape == (2, 4, 4, 4)
    check_module(conv, lambda: (conv(x) ** 2).sum(), samples=3)


def test_conv3d_shapes_and_grad():
    rng = np.random.default_rng(12)
    conv = Conv3d(1, 3, (3, 3, 3), rng, stride=(1, 2, 2), padding=(1, 1, 1))
    x = Tensor(rng.normal(size=(1, 1, 5, 8, 8)))
    out = conv(x)
    assert out.shape == (1, 3, 5, 4, 4)
    check_module(conv, lambda: (conv(x) ** 2).sum(), samples=3)


def test_zero_stuff():
    x = Tensor(np.array([[[1.0, 2.0, 3.0]]]))
    out = zero_stuff(x, 2)
    np.testing.assert_array_equal(out.data, [[[1.0, 0.0, 2.0, 0.0, 3.0]]])


def test_conv_transpose_doubles_length():
    rng = np.random.default_rng(13)
    up = ConvTranspose1d(3, 3, 4, rng, stride=2, padding=1)
    for t in (1, 2, 5, 17, 256):
        x = Tensor(np.zeros((1, 3, t)))
        out = up(x)
        assert out.shape == (1, 3, 2 * t)
        assert up.out_length(t) == 2 * t


def test_conv_transpose_matches_scipy_upsample_semantics():
    # zero-stuffed correlation: output at even positions mixes taps 1 and 3,
    # odd positions taps 0 and 2
    rng = np.random.default_rng(14)
    up = ConvTranspose1d(1, 1, 4, rng, stride=2, padding=1)
    x = np.array([[[1.0, -2.0, 0.5]]])
    out = up(Tensor(x)).data[0, 0]
    w = up.w.data[0, 0]
    b = up.b.data[0]
    stuffed = np.array([0.0, 0.0, 1.0, 0.0, -2.0, 0.0, 0.5, 0.0, 0.0])
    expect = [np.dot(stuffed[i:i + 4], w) + b for i in range(6)]
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_conv_transpose_grad():
    rng = np.random.default_rng(15)
    up = ConvTranspose1d(2, 3, 4, rng)
    x = Tensor(rng.normal(size=(2, 2, 6)))
    check_module(up, lambda: (up(x) ** 2).sum())


def test_module_parameter_naming_and_state():
    rng = np.random.default_rng(16)

    class Stack(Module):
        def __init__(self):
            self.proj = Linear(4, 4, rng)
            self.blocks = [LayerNorm(4), LayerNorm(4)]

    stack = Stack()
    names = set(stack.named_parameters())
    assert names == {"proj.w", "proj.b", "blocks0.gamma", "blocks0.beta",
                     "blocks1.gamma", "blocks1.beta"}
    state = stack.state_arrays()
    state["proj.w"] = state["proj.w"] + 1.0
    stack.load_state_arrays(state)
    np.testing.assert_allclose(stack.proj.w.data, state["proj.w"])
    with pytest.raises(ConfigurationError):
        stack.load_state_arrays({k: v for k, v in state.items() if k != "proj.w"})
    bad = dict(state)
    bad["proj.w"] = np.zeros((2, 2))
    with pytest.raises(ConfigurationError):
        stack.load_state_arrays(bad)


def test_apply_frame_mask():
    x = Tensor(np.ones((2, 3, 4)))
    mask = lengths_to_mask([2, 3], t_max=3)
    out = apply_frame_mask(x, mask)
    np.testing.assert_allclose(out.data[0, 2], np.zeros(4))
    np.testing.assert_allclose(out.data[1], np.ones((3, 4)))
