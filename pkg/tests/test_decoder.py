import numpy as np
import pytest

from avsrkit.autodiff import Tensor, finite_difference_check
from avsrkit.decoder import TransformerDecoder, TransformerLM
from avsrkit.errors import ConfigurationError
from avsrkit.nn import lengths_to_mask


def tiny_decoder(seed, vocab=4, dual_memory=False):
    return TransformerDecoder(vocab_size=vocab, d_model=8, n_head=2, d_ffn=16,
                              num_layers=2, rng=np.random.default_rng(seed),
                              dual_memory=dual_memory)


def test_decoder_shapes_and_token_conventions():
    dec = tiny_decoder(0)
    assert dec.sos_id == 4 and dec.eos_id == 4
    memory = Tensor(np.random.default_rng(1).normal(size=(2, 6, 8)))
    ys_in = np.array([[4, 0, 1], [4, 2, 3]])   # sos-prefixed
    out = dec(ys_in, memory)
    assert out.shape == (2, 3, 5)              # vocab classes plus eos


def test_decoder_rejects_bad_inputs():
    dec = tiny_decoder(2)
    memory = Tensor(np.zeros((1, 4, 8)))
    with pytest.raises(ConfigurationError):
        dec(np.array([0, 1]), memory)          # needs batch dim
    with pytest.raises(ConfigurationError):
        dec(np.array([[5]]), memory)           # beyond the sos row
    with pytest.raises(ConfigurationError):
        dec(np.array([[-1]]), memory)


def test_decoder_is_causal():
    dec = tiny_decoder(3)
    rng = np.random.default_rng(4)
    memory = Tensor(rng.normal(size=(1, 5, 8)))
    ys = np.array([[4, 0, 1, 2]])
    base = dec(ys, memory).data
    tweaked = ys.copy()
    tweaked[0, -1] = 3                         # change the last input token
    out = dec(tweaked, memory).data
    np.testing.assert_allclose(out[:, :-1], base[:, :-1], atol=1e-12)
    assert np.abs(out[:, -1] - base[:, -1]).max() > 1e-8


def test_decoder_respects_memory_mask():
    dec = tiny_decoder(5)
    rng = np.random.default_rng(6)
    mem = rng.normal(size=(1, 4, 8))
    ys = np.array([[4, 0]])
    mem_pad = np.concatenate([mem, rng.normal(size=(1, 3, 8))], axis=1)
    base = dec(ys, Tensor(mem), memory_mask=lengths_to_mask([4], 4)).data
    padded = dec(ys, Tensor(mem_pad), memory_mask=lengths_to_mask([4], 7)).data
    np.testing.assert_allclose(padded, base, atol=1e-10)


def test_dual_memory_decoder():
    dec = tiny_decoder(7, dual_memory=True)
    rng = np.random.default_rng(8)
    a_mem = Tensor(rng.normal(size=(1, 5, 8)))
    v_mem = Tensor(rng.normal(size=(1, 5, 8)))
    out = dec(np.array([[4, 0]]), a_mem, memory2=v_mem)
    assert out.shape == (1, 2, 5)
    with pytest.raises(ConfigurationError):
        dec(np.array([[4, 0]]), a_mem)         # second memory is mandatory
    # the second stream is actually consulted
    v2 = Tensor(rng.normal(size=(1, 5, 8)))
    out2 = dec(np.array([[4, 0]]), a_mem, memory2=v2)
    assert np.abs(out2.data - out.data).max() > 1e-8


def test_single_memory_decoder_rejects_second_memory():
    dec = tiny_decoder(9)
    mem = Tensor(np.zeros((1, 4, 8)))
    with pytest.raises(ConfigurationError):
        dec(np.array([[4]]), mem, memory2=mem)


def test_decoder_gradients():
    dec = tiny_decoder(10)
    memory = Tensor(np.random.default_rng(11).normal(size=(1, 4, 8)))
    ys = np.array([[4, 0, 1]])
    err = finite_difference_check(lambda: (dec(ys, memory) ** 2).sum(),
                                  dec.named_parameters(),
                                  samples_per_param=1, rng=np.random.default_rng(12))
    assert err < 1e-4


def test_lm_shapes_and_causality():
    lm = TransformerLM(vocab_size=4, d_model=8, n_head=2, d_ffn=16, num_layers=2,
                       rng=np.random.default_rng(13))
    assert lm.sos_id == 4 and lm.eos_id == 4
    ys = np.array([[4, 0, 1, 2]])
    out = lm(ys)
    assert out.shape == (1, 4, 5)
    tweaked = ys.copy()
    tweaked[0, -1] = 3
    out2 = lm(tweaked).data
    np.testing.assert_allclose(out2[:, :-1], out.data[:, :-1], atol=1e-12)


def test_lm_gradients():
    lm = TransformerLM(vocab_size=3, d_model=8, n_head=2, d_ffn=16, num_layers=1,
                       rng=np.random.default_rng(14))
    ys = np.array([[3, 0, 1]])
    err = finite_difference_check(lambda: (lm(ys) ** 2).sum(), lm.named_parameters(),
                                  samples_per_param=2, rng=np.random.default_rng(15))
    assert err < 1e-4
