import numpy as np
import pytest

from avsrkit.autodiff import Tensor, finite_difference_check
from avsrkit.encoder import (ConformerBlock, ConformerConfig, ConformerStack,
                             FusionConfig, PaddedBatch, VisualMemoryProjection,
                             build_encoder)
from avsrkit.errors import ConfigurationError
from avsrkit.nn import lengths_to_mask

TINY = ConformerConfig(d_model=8, n_head=2, d_ffn=16, conv_kernel=5, num_blocks=2)


def test_padded_batch_mask():
    b = PaddedBatch(np.zeros((2, 6, 8)), [6, 4])
    np.testing.assert_array_equal(b.mask, [[1] * 6, [1] * 4 + [0] * 2])
    with pytest.raises(ConfigurationError):
        PaddedBatch(np.zeros((2, 3, 8)), [6, 4])


def test_conformer_stack_shape_and_mask():
    stack = ConformerStack(TINY, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).normal(size=(2, 6, 8)))
    mask = lengths_to_mask([6, 4], t_max=6)
    out = stack(x, mask)
    assert out.shape == (2, 6, 8)
    np.testing.assert_allclose(out.data[1, 4:], 0.0, atol=0.0)


def test_conformer_stack_padding_invariance():
    stack = ConformerStack(TINY, np.random.default_rng(2))
    x = np.random.default_rng(3).normal(size=(1, 5, 8))
    solo = stack(Tensor(x), lengths_to_mask([5], 5)).data
    padded = np.concatenate([x, np.random.default_rng(4).normal(size=(1, 3, 8))], axis=1)
    out = stack(Tensor(padded), lengths_to_mask([5], 8)).data
    np.testing.assert_allclose(out[:, :5], solo[:, :5], atol=1e-9)


def test_conformer_block_gradients():
    cfg = ConformerConfig(d_model=8, n_head=2, d_ffn=16, conv_kernel=5, num_blocks=1)
    block = ConformerBlock(cfg, np.random.default_rng(5))
    x = Tensor(np.random.default_rng(6).normal(size=(1, 4, 8)))
    mask = lengths_to_mask([4], 4)
    err = finite_difference_check(lambda: (block(x, mask) ** 2).sum(),
                                  block.named_parameters(),
                                  samples_per_param=2, rng=np.random.default_rng(7))
    assert err < 1e-4


def test_conformer_config_validation():
    with pytest.raises(ConfigurationError):
        ConformerConfig(d_model=10, n_head=4).validate()
    with pytest.raises(ConfigurationError):
        ConformerConfig(conv_kernel=4).validate()
    with pytest.raises(ConfigurationError):
        ConformerConfig(num_blocks=0).validate()


def test_fusion_config_validation():
    FusionConfig(variant="cmfe", num_early=2, num_late=2, insert="inner",
                 num_visual_blocks=2).validate()
    with pytest.raises(ConfigurationError):
        FusionConfig(variant="bogus").validate()
    with pytest.raises(ConfigurationError):
        FusionConfig(insert="middle").validate()
    with pytest.raises(ConfigurationError):
        FusionConfig(num_early=0).validate()
    with pytest.raises(ConfigurationError):
        # visual branch deeper than the early-fusion window
        FusionConfig(num_early=1, num_late=3, num_visual_blocks=2).validate()


def test_fusion_config_large_scale_window():
    FusionConfig(num_early=2, num_late=10, num_visual_blocks=2).validate(paper_scale=True)
    with pytest.raises(ConfigurationError):
        FusionConfig(num_early=4, num_late=8, num_visual_blocks=4).validate(paper_scale=True)
    with pytest.raises(ConfigurationError):
        FusionConfig(num_early=2, num_late=9, num_visual_blocks=2).validate(paper_scale=True)


def test_visual_memory_projection_width_and_identity():
    rng = np.random.default_rng(8)
    proj3 = VisualMemoryProjection(3, 8, rng)
    assert proj3.proj.w.shape == (24, 8)

    proj1 = VisualMemoryProjection(1, 8, rng)
    proj1.proj.w.data[:] = np.eye(8)
    proj1.proj.b.data[:] = 0.0
    x = Tensor(np.random.default_rng(9).normal(size=(2, 5, 8)))
    np.testing.assert_allclose(proj1([x]).data, x.data, atol=1e-12)


def test_visual_memory_projection_linearity():
    proj = VisualMemoryProjection(2, 8, np.random.default_rng(10))
    rng = np.random.default_rng(11)
    a = [Tensor(rng.normal(size=(1, 4, 8))) for _ in range(2)]
    b = [Tensor(rng.normal(size=(1, 4, 8))) for _ in range(2)]
    both = proj([Tensor(x.data + y.data) for x, y in zip(a, b)]).data
    zero = proj([Tensor(np.zeros((1, 4, 8))) for _ in range(2)]).data
    np.testing.assert_allclose(both, proj(a).data + proj(b).data - zero, atol=1e-9)


def test_visual_memory_projection_order_sensitivity():
    # concat order matters under a generic projection
    proj = VisualMemoryProjection(2, 8, np.random.default_rng(12))
    rng = np.random.default_rng(13)
    a, b = Tensor(rng.normal(size=(1, 4, 8))), Tensor(rng.normal(size=(1, 4, 8)))
    assert np.abs(proj([a, b]).data - proj([b, a]).data).max() > 1e-6


def test_visual_memory_projection_input_checks():
    proj = VisualMemoryProjection(2, 8, np.random.default_rng(14))
    x = Tensor(np.zeros((1, 4, 8)))
    with pytest.raises(ConfigurationError):
        proj([x])
    with pytest.raises(ConfigurationError):
        proj([x, Tensor(np.zeros((1, 5, 8)))])


def make_streams(seed, t=8, batch_size=2):
    rng = np.random.default_rng(seed)
    audio = Tensor(rng.normal(size=(batch_size, t, 8)))
    video = Tensor(rng.normal(size=(batch_size, t, 8)))
    return audio, video


def test_cmfe_output_shape_all_inserts():
    for insert in ("inner", "outer"):
        enc = build_encoder(TINY,
                            FusionConfig(num_early=1, num_late=1, insert=insert,
                                         num_visual_blocks=1),
                            np.random.default_rng(15))
        audio, video = make_streams(16)
        assert enc(audio, video).shape == (2, 8, 8)


def test_cmfe_inner_and_outer_differ():
    audio, video = make_streams(17)
    outs = []
    for insert in ("inner", "outer"):
        enc = build_encoder(TINY,
                            FusionConfig(num_early=1, num_late=1, insert=insert,
                                         num_visual_blocks=1),
                            np.random.default_rng(18))
        outs.append(enc(audio, video).data)
    assert outs[0].shape == outs[1].shape
    assert np.abs(outs[0] - outs[1]).max() > 1e-6


def test_cmfe_requires_matched_stream_lengths():
    enc = build_encoder(TINY, FusionConfig(num_early=1, num_late=1, num_visual_blocks=1),
                        np.random.default_rng(19))
    rng = np.random.default_rng(20)
    with pytest.raises(ConfigurationError):
        enc(Tensor(rng.normal(size=(1, 8, 8))), Tensor(rng.normal(size=(1, 4, 8))))


def test_cmfe_reuses_deepest_visual_memory():
    # visual branch shallower than the early window: deepest embedding stands in
    enc = build_encoder(TINY, FusionConfig(num_early=2, num_late=0, num_visual_blocks=1),
                        np.random.default_rng(21))
    audio, video = make_streams(22)
    assert enc(audio, video).shape == (2, 8, 8)
    assert enc.memory_proj.proj.w.shape == (16, 8)


ALL_VARIANTS = [
    ("cmfe", dict(num_early=1, num_late=1, num_visual_blocks=1)),
    ("baseline", dict(num_early=1, num_late=1, num_visual_blocks=1)),
    ("tm_ctc", dict(num_early=1, num_late=1, num_visual_blocks=1)),
    ("tm_seq", dict(num_early=1, num_late=1, num_visual_blocks=1)),
    ("audio_only", dict(num_early=1, num_late=1, num_visual_blocks=1)),
]


@pytest.mark.parametrize("variant,kwargs", ALL_VARIANTS)
def test_padding_invariance_all_variants(variant, kwargs):
    enc = build_encoder(TINY, FusionConfig(variant=variant, **kwargs),
                        np.random.default_rng(23))
    rng = np.random.default_rng(24)
    a = rng.normal(size=(1, 5, 8))
    v = rng.normal(size=(1, 5, 8))
    m5 = lengths_to_mask([5], 5)
    m8 = lengths_to_mask([5], 8)
    a_pad = np.concatenate([a, rng.normal(size=(1, 3, 8))], axis=1)
    v_pad = np.concatenate([v, rng.normal(size=(1, 3, 8))], axis=1)

    def run(audio, video, mask):
        out = enc(Tensor(audio), Tensor(video), audio_mask=mask, video_mask=mask)
        return out[0].data if isinstance(out, tuple) else out.data

    solo = run(a, v, m5)
    padded = run(a_pad, v_pad, m8)
    np.testing.assert_allclose(padded[:, :5], solo[:, :5], atol=1e-6)


def test_tm_seq_returns_both_streams():
    enc = build_encoder(TINY, FusionConfig(variant="tm_seq", num_early=1, num_late=1,
                                           num_visual_blocks=1),
                        np.random.default_rng(25))
    audio, video = make_streams(26)
    a_mem, v_mem = enc(audio, video)
    assert a_mem.shape == (2, 8, 8)
    assert v_mem.shape == (2, 8, 8)


def _share_audio_path(fusion_enc, plain_enc):
    plain = {name.replace("stack.", "", 1): p
             for name, p in plain_enc.named_parameters().items()}
    for name, p in fusion_enc.named_parameters().items():
        key = name.replace("audio_stack.", "", 1) if name.startswith("audio_stack.") \
            else name.replace("audio_", "", 1) if name.startswith("audio_blocks") else None
        if key in plain:
            p.data[:] = plain[key].data


def test_zeroed_cross_attention_reduces_to_audio_only():
    fusion = build_encoder(TINY, FusionConfig(num_early=1, num_late=1, num_visual_blocks=1),
                           np.random.default_rng(27))
    plain = build_encoder(TINY, FusionConfig(variant="audio_only", num_early=1, num_late=1,
                                             num_visual_blocks=1),
                          np.random.default_rng(28))
    _share_audio_path(fusion, plain)
    for name, p in fusion.named_parameters().items():
        if ".cross.wo." in name:
            p.data[:] = 0.0
    audio, video = make_streams(29)
    np.testing.assert_allclose(fusion(audio, video).data, plain(audio, video).data,
                               atol=1e-6)


def test_tm_ctc_zero_fuse_matches_audio_only():
    fusion = build_encoder(TINY, FusionConfig(variant="tm_ctc", num_early=1, num_late=1,
                                              num_visual_blocks=1),
                           np.random.default_rng(30))
    plain = build_encoder(TINY, FusionConfig(variant="audio_only", num_early=1, num_late=1,
                                             num_visual_blocks=1),
                          np.random.default_rng(31))
    _share_audio_path(fusion, plain)
    fusion.fuse.w.data[:] = 0.0
    audio, video = make_streams(32)
    np.testing.assert_allclose(fusion(audio, video).data, plain(audio, video).data,
                               atol=1e-6)


def test_visual_parameters_scale_with_block_count():
    shallow = build_encoder(TINY, FusionConfig(num_early=1, num_late=1, num_visual_blocks=1),
                            np.random.default_rng(33))
    cfg4 = ConformerConfig(d_model=8, n_head=2, d_ffn=16, conv_kernel=5, num_blocks=4)
    deep = build_encoder(cfg4, FusionConfig(variant="baseline", num_early=3, num_late=1,
                                            num_visual_blocks=3),
                         np.random.default_rng(34))
    assert shallow.num_visual_parameters() < deep.num_visual_parameters()
    assert build_encoder(TINY, FusionConfig(variant="audio_only"),
                         np.random.default_rng(35)).num_visual_parameters() == 0


def test_cmfe_gradients_end_to_end():
    enc = build_encoder(TINY, FusionConfig(num_early=1, num_late=1, num_visual_blocks=1),
                        np.random.default_rng(36))
    rng = np.random.default_rng(37)
    audio = Tensor(rng.normal(size=(1, 4, 8)))
    video = Tensor(rng.normal(size=(1, 4, 8)))
    err = finite_difference_check(lambda: (enc(audio, video) ** 2).sum(),
                                  enc.named_parameters(),
                                  samples_per_param=1, rng=np.random.default_rng(38))
    assert err < 1e-4
