import numpy as np
import pytest

from avsrkit.autodiff import Tensor, finite_difference_check
from avsrkit.errors import ConfigurationError
from avsrkit.frontend import AudioFrontend, FrontendConfig, Upsampler4x, VisualFrontend
from avsrkit.nn import lengths_to_mask

CFG = FrontendConfig(d_model=16, feature_dim=8, audio_channels=8,
                     visual_channels=4, visual_blocks=1)


def test_visual_frontend_shape_and_determinism():
    rng = np.random.default_rng(0)
    front = VisualFrontend(CFG, rng)
    video = np.random.default_rng(1).uniform(0, 1, size=(2, 5, 8, 8))
    out1 = front(video)
    out2 = front(video)
    assert out1.shape == (2, 5, 16)
    np.testing.assert_array_equal(out1.data, out2.data)


def test_visual_frontend_zero_input_is_finite():
    front = VisualFrontend(CFG, np.random.default_rng(2))
    out = front(np.zeros((1, 3, 8, 8)))
    assert np.all(np.isfinite(out.data))


def test_visual_frontend_rejects_bad_rank():
    front = VisualFrontend(CFG, np.random.default_rng(3))
    with pytest.raises(ConfigurationError):
        front(np.zeros((3, 8, 8)))


def test_visual_frontend_gradients():
    front = VisualFrontend(CFG, np.random.default_rng(4))
    video = np.random.default_rng(5).uniform(0, 1, size=(1, 3, 8, 8))
    err = finite_difference_check(lambda: (front(video) ** 2).sum(),
                                  front.named_parameters(),
                                  samples_per_param=3, rng=np.random.default_rng(6))
    assert err < 1e-6


def test_visual_frontend_padding_invariance():
    rng = np.random.default_rng(7)
    front = VisualFrontend(CFG, rng)
    video = np.random.default_rng(8).uniform(0, 1, size=(1, 4, 8, 8))
    solo = front(video).data
    padded = np.concatenate([video, np.random.default_rng(9).uniform(0, 1, (1, 3, 8, 8))],
                            axis=1)
    mask = lengths_to_mask([4], t_max=7)
    batched = front(padded, mask=mask).data
    np.testing.assert_allclose(batched[:, :4], solo, atol=1e-10)
    np.testing.assert_allclose(batched[:, 4:], 0.0, atol=0.0)


def test_upsampler_exact_4x_over_range():
    up = Upsampler4x(6, np.random.default_rng(10))
    for tv in list(range(1, 20)) + [64, 256]:
        out = up(Tensor(np.random.default_rng(tv).normal(size=(1, tv, 6))))
        assert out.shape == (1, 4 * tv, 6)


def test_upsampler_gradients():
    up = Upsampler4x(6, np.random.default_rng(11))
    x = Tensor(np.random.default_rng(12).normal(size=(1, 5, 6)))
    err = finite_difference_check(lambda: (up(x) ** 2).sum(), up.named_parameters(),
                                  samples_per_param=4, rng=np.random.default_rng(13))
    assert err < 1e-6


def test_upsampler_padding_invariance():
    up = Upsampler4x(6, np.random.default_rng(14))
    x = np.random.default_rng(15).normal(size=(1, 3, 6))
    solo = up(Tensor(x)).data
    padded = np.concatenate([x, np.random.default_rng(16).normal(size=(1, 2, 6))], axis=1)
    mask = lengths_to_mask([3], t_max=5)
    batched = up(Tensor(padded), mask=mask).data
    np.testing.assert_allclose(batched[:, :12], solo, atol=1e-10)
    np.testing.assert_allclose(batched[:, 12:], 0.0, atol=0.0)


def test_audio_frontend_length_arithmetic():
    front = AudioFrontend(CFG, np.random.default_rng(17))
    for t, expect in [(48, 12), (100, 25), (4, 1), (7, 2)]:
        out = front(Tensor(np.random.default_rng(t).normal(size=(1, t, 8))))
        assert out.shape == (1, expect, 16), t
    np.testing.assert_array_equal(AudioFrontend.out_lengths([48, 100, 7]), [12, 25, 2])


def test_audio_frontend_rejects_wrong_dim():
    front = AudioFrontend(CFG, np.random.default_rng(18))
    with pytest.raises(ConfigurationError):
        front(Tensor(np.zeros((1, 8, 5))))


def test_audio_frontend_padding_invariance():
    front = AudioFrontend(CFG, np.random.default_rng(19))
    x = np.random.default_rng(20).normal(size=(1, 12, 8))
    solo = front(Tensor(x)).data
    padded = np.concatenate([x, np.random.default_rng(21).normal(size=(1, 8, 8))], axis=1)
    mask = lengths_to_mask([12], t_max=20)
    batched = front(Tensor(padded), mask=mask).data
    np.testing.assert_allclose(batched[:, :3], solo, atol=1e-10)
    np.testing.assert_allclose(batched[:, 3:], 0.0, atol=0.0)


def test_audio_frontend_gradients():
    front = AudioFrontend(CFG, np.random.default_rng(22))
    x = Tensor(np.random.default_rng(23).normal(size=(1, 8, 8)))
    err = finite_difference_check(lambda: (front(x) ** 2).sum(), front.named_parameters(),
                                  samples_per_param=3, rng=np.random.default_rng(24))
    assert err < 1e-6
