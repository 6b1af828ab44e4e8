"""Conformer blocks and the four fusion encoders.

The fusion encoder of interest is audio-dominated: a single audio conformer
stack carries the utterance, and the visual branch exists only to be read
from.  In its first `num_early` layers a per-layer visual embedding X_V^n is
fused by cross-attention in which the VIDEO frames are the queries and the
audio stream at the insertion point is keys and values; the output is added
back to the audio stream (both run at 25 frames/sec, so lengths agree).  The
early-layer visual embeddings are then concatenated over channels and
projected once to an overall visual memory X_V^O, which the remaining
`num_late` layers consume with the roles reversed (audio queries, memory as
keys/values).  Cross-attention sits either between self-attention and the
conv module ("inner") or in front of the whole block ("outer").

The visual branch can be shallower than the early-fusion depth: with
num_visual_blocks < num_early the deepest visual embedding is reused for the
remaining early layers.

Comparison variants: `baseline` runs symmetric dual branches with mutual
cross-attention; `tm_ctc` encodes each modality independently and fuses once
with a bias-free linear map on the video side; `tm_seq` also encodes
independently but returns both memories for a decoder with two
cross-attention stages.  `audio_only` ignores video entirely.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat
from .errors import ConfigurationError
from .nn import (
    DepthwiseConv1d,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    apply_frame_mask,
    lengths_to_mask,
    sinusoidal_positions,
)

VARIANTS = ("cmfe", "baseline", "tm_ctc", "tm_seq", "audio_only")


@dataclass
class ConformerConfig:
    d_model: int = 64
    n_head: int = 4
    d_ffn: int = 256
    conv_kernel: int = 5
    num_blocks: int = 4

    def validate(self):
        if self.d_model % self.n_head != 0:
            raise ConfigurationError(
                f"d_model {self.d_model} not divisible by n_head {self.n_head}")
        if self.conv_kernel % 2 != 1:
            raise ConfigurationError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.num_blocks < 1:
            raise ConfigurationError("num_blocks must be >= 1")
        return self


@dataclass
class FusionConfig:
    variant: str = "cmfe"
    num_early: int = 2          # layers with a live visual branch
    num_late: int = 2           # layers fed the overall visual memory
    insert: str = "inner"       # cross-attention insertion point
    num_visual_blocks: int = 2  # visual-branch depth (<= num_early for cmfe)

    def validate(self, paper_scale=False):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if self.insert not in ("inner", "outer"):
            raise ConfigurationError(f"insert must be inner or outer, got {self.insert!r}")
        if self.num_early < 1 or self.num_late < 0:
            raise ConfigurationError("need num_early >= 1 and num_late >= 0")
        if self.num_visual_blocks < 1:
            raise ConfigurationError("need num_visual_blocks >= 1")
        if self.variant == "cmfe" and self.num_visual_blocks > self.num_early:
            raise ConfigurationError(
                f"visual branch deeper ({self.num_visual_blocks}) than early layers "
                f"({self.num_early})")
        if self.variant == "baseline" and self.num_visual_blocks > self.total_layers:
            raise ConfigurationError(
                "baseline symmetric depth exceeds total audio layers")
        if paper_scale:
            if self.num_early + self.num_late != 12:
                raise ConfigurationError(
                    f"paper-scale preset needs 12 total layers, got "
                    f"{self.num_early}+{self.num_late}")
            if not 1 <= self.num_early <= 3:
                raise ConfigurationError(
                    f"paper-scale preset needs 1..3 early layers, got {self.num_early}")
        return self

    @property
    def total_layers(self):
        return self.num_early + self.num_late


@dataclass
class PaddedBatch:
    """Stacked sequences plus per-item valid lengths and a float 1/0 mask."""

    data: np.ndarray
    lengths: np.ndarray

    def __post_init__(self):
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        if self.lengths.max() > self.data.shape[1]:
            raise ConfigurationError("lengths exceed padded time axis")
        self.mask = lengths_to_mask(self.lengths, self.data.shape[1])


class FeedForward(Module):
    def __init__(self, d_model, d_ffn, rng):
        self.norm = LayerNorm(d_model)
        self.up = Linear(d_model, d_ffn, rng)
        self.down = Linear(d_ffn, d_model, rng)

    def __call__(self, x):
        return self.down(self.up(self.norm(x)).swish())


class ConvModule(Module):
    """Pointwise-GLU, depthwise conv, norm, swish, pointwise."""

    def __init__(self, d_model, kernel, rng):
        self.norm = LayerNorm(d_model)
        self.pw_in = Linear(d_model, 2 * d_model, rng)
        self.dw = DepthwiseConv1d(d_model, kernel, rng, padding=kernel // 2)
        self.mid_norm = LayerNorm(d_model)
        self.pw_out = Linear(d_model, d_model, rng)
        self.d_model = d_model

    def __call__(self, x, mask):
        y = self.pw_in(self.norm(x))
        gated = y[:, :, :self.d_model] * y[:, :, self.d_model:].sigmoid()
        if mask is not None:
            gated = apply_frame_mask(gated, mask)   # depthwise conv must see
        y = self.dw(gated.transpose(0, 2, 1)).transpose(0, 2, 1)  # zeros in padding
        return self.pw_out(self.mid_norm(y).swish())


class ConformerBlock(Module):
    """Half-step FFN, self-attention, optional cross-attention, conv, FFN.

    `cross` is None or the insertion point: "inner" puts cross-attention
    between self-attention and the conv module, "outer" in front of the
    block.  The stream side of cross-attention is pre-normalized here; the
    memory side arrives normalized by whichever stack produced it.
    """

    def __init__(self, config, rng, cross=None):
        config.validate()
        if cross not in (None, "inner", "outer"):
            raise ConfigurationError(f"bad cross insertion {cross!r}")
        d = config.d_model
        self.ffn1 = FeedForward(d, config.d_ffn, rng)
        self.attn_norm = LayerNorm(d)
        self.attn = MultiHeadAttention(d, config.n_head, rng)
        self.insert = cross
        if cross is not None:
            self.cross_norm = LayerNorm(d)
            self.cross = MultiHeadAttention(d, config.n_head, rng)
        self.conv = ConvModule(d, config.conv_kernel, rng)
        self.ffn2 = FeedForward(d, config.d_ffn, rng)
        self.out_norm = LayerNorm(d)

    def _fuse(self, x, mask, memory, memory_mask, memory_is_query):
        normed = self.cross_norm(x)
        if memory_is_query:
            # video frames query the audio stream; output rows line up with
            # the stream because both run at the same frame rate
            if memory.shape[1] != x.shape[1]:
                raise ConfigurationError(
                    f"query memory length {memory.shape[1]} != stream {x.shape[1]}")
            return x + self.cross(memory, normed, normed, key_mask=mask)
        return x + self.cross(normed, memory, memory, key_mask=memory_mask)

    def __call__(self, x, mask, memory=None, memory_mask=None, memory_is_query=False):
        fuse = self.insert is not None and memory is not None
        if fuse and self.insert == "outer":
            x = self._fuse(x, mask, memory, memory_mask, memory_is_query)
        x = x + self.ffn1(x) * 0.5
        normed = self.attn_norm(x)
        x = x + self.attn(normed, normed, normed, key_mask=mask)
        if fuse and self.insert == "inner":
            x = self._fuse(x, mask, memory, memory_mask, memory_is_query)
        x = x + self.conv(x, mask)
        x = x + self.ffn2(x) * 0.5
        return self.out_norm(x)


class ConformerStack(Module):
    """Positional encoding plus a plain block stack; output is frame-masked."""

    def __init__(self, config, rng, num_blocks=None):
        config.validate()
        self.d_model = config.d_model
        n = num_blocks if num_blocks is not None else config.num_blocks
        self.blocks = [ConformerBlock(config, rng) for _ in range(n)]

    def __call__(self, x, mask=None):
        x = x + Tensor(sinusoidal_positions(x.shape[1], self.d_model)[None])
        if mask is not None:
            x = apply_frame_mask(x, mask)
        for block in self.blocks:
            x = block(x, mask)
        return apply_frame_mask(x, mask) if mask is not None else x


class VisualMemoryProjection(Module):
    """Concatenate N same-length sequences over channels, project to d_model."""

    def __init__(self, num_memories, d_model, rng):
        self.num_memories = num_memories
        self.proj = Linear(num_memories * d_model, d_model, rng)

    def __call__(self, memories):
        if len(memories) != self.num_memories:
            raise ConfigurationError(
                f"expected {self.num_memories} memories, got {len(memories)}")
        lengths = {m.shape[1] for m in memories}
        if len(lengths) != 1:
            raise ConfigurationError(f"ragged memory lengths {sorted(lengths)}")
        return self.proj(concat(memories, axis=2) if len(memories) > 1 else memories[0])


def _positions(x, d_model):
    return x + Tensor(sinusoidal_positions(x.shape[1], d_model)[None])


class CMFEEncoder(Module):
    """Audio-dominated fusion: early per-layer visual fusion, late overall memory."""

    def __init__(self, conformer, fusion, rng, paper_scale=False):
        conformer.validate()
        fusion.validate(paper_scale=paper_scale)
        if fusion.variant != "cmfe":
            raise ConfigurationError(f"CMFEEncoder got variant {fusion.variant!r}")
        self.d_model = conformer.d_model
        self.fusion = fusion
        self.audio_blocks = [ConformerBlock(conformer, rng, cross=fusion.insert)
                             for _ in range(fusion.total_layers)]
        self.visual_blocks = [ConformerBlock(conformer, rng)
                              for _ in range(fusion.num_visual_blocks)]
        self.memory_proj = VisualMemoryProjection(fusion.num_early, conformer.d_model, rng)

    def __call__(self, audio, video, audio_mask=None, video_mask=None):
        if audio.shape[1] != video.shape[1]:
            raise ConfigurationError(
                f"fusion needs matched frame rates, got T_a={audio.shape[1]} "
                f"T_v={video.shape[1]}")
        n_early = self.fusion.num_early
        x = _positions(audio, self.d_model)
        v = _positions(video, self.d_model)
        if audio_mask is not None:
            x = apply_frame_mask(x, audio_mask)
        if video_mask is not None:
            v = apply_frame_mask(v, video_mask)
        memories = []
        for n in range(n_early):
            if n < len(self.visual_blocks):
                v = self.visual_blocks[n](v, video_mask)
            memories.append(v)   # deepest embedding reused past the branch depth
        for n in range(n_early):
            x = self.audio_blocks[n](x, audio_mask, memory=memories[n],
                                     memory_mask=video_mask, memory_is_query=True)
        overall = self.memory_proj(memories)
        if video_mask is not None:
            overall = apply_frame_mask(overall, video_mask)
        for m in range(n_early, self.fusion.total_layers):
            x = self.audio_blocks[m](x, audio_mask, memory=overall,
                                     memory_mask=video_mask)
        return apply_frame_mask(x, audio_mask) if audio_mask is not None else x

    def num_visual_parameters(self):
        return int(sum(sum(p.size for p in b.parameters()) for b in self.visual_blocks))


class AudioOnlyEncoder(Module):
    def __init__(self, conformer, fusion, rng):
        self.stack = ConformerStack(conformer, rng, num_blocks=fusion.total_layers)

    def __call__(self, audio, video=None, audio_mask=None, video_mask=None):
        return self.stack(audio, audio_mask)

    def num_visual_parameters(self):
        return 0


class BaselineEncoder(Module):
    """Symmetric dual branches with mutual cross-attention, audio tail."""

    def __init__(self, conformer, fusion, rng):
        conformer.validate()
        fusion.validate()
        self.d_model = conformer.d_model
        self.fusion = fusion
        n_sym = fusion.num_visual_blocks
        self.audio_blocks = (
            [ConformerBlock(conformer, rng, cross=fusion.insert) for _ in range(n_sym)]
            + [ConformerBlock(conformer, rng)
               for _ in range(fusion.total_layers - n_sym)])
        self.visual_blocks = [ConformerBlock(conformer, rng, cross=fusion.insert)
                              for _ in range(n_sym)]

    def __call__(self, audio, video, audio_mask=None, video_mask=None):
        x = _positions(audio, self.d_model)
        v = _positions(video, self.d_model)
        if audio_mask is not None:
            x = apply_frame_mask(x, audio_mask)
        if video_mask is not None:
            v = apply_frame_mask(v, video_mask)
        for i in range(len(self.visual_blocks)):
            x_new = self.audio_blocks[i](x, audio_mask, memory=v, memory_mask=video_mask)
            v = self.visual_blocks[i](v, video_mask, memory=x, memory_mask=audio_mask)
            x = x_new
        for block in self.audio_blocks[len(self.visual_blocks):]:
            x = block(x, audio_mask)
        return apply_frame_mask(x, audio_mask) if audio_mask is not None else x

    def num_visual_parameters(self):
        return int(sum(sum(p.size for p in b.parameters()) for b in self.visual_blocks))


class TMCTCEncoder(Module):
    """Independent branches fused once, additively, after encoding.

    The video memory passes through a bias-free linear map; zeroing that map
    severs the video path exactly, leaving the audio-only encoder.
    """

    def __init__(self, conformer, fusion, rng):
        conformer.validate()
        fusion.validate()
        self.audio_stack = ConformerStack(conformer, rng, num_blocks=fusion.total_layers)
        self.visual_stack = ConformerStack(conformer, rng,
                                           num_blocks=fusion.num_visual_blocks)
        self.fuse = Linear(conformer.d_model, conformer.d_model, rng, bias=False)

    def __call__(self, audio, video, audio_mask=None, video_mask=None):
        x = self.audio_stack(audio, audio_mask)
        v = self.visual_stack(video, video_mask)
        if v.shape[1] != x.shape[1]:
            raise ConfigurationError(
                f"additive fusion needs matched lengths, got {x.shape[1]} vs {v.shape[1]}")
        out = x + self.fuse(v)
        return apply_frame_mask(out, audio_mask) if audio_mask is not None else out

    def num_visual_parameters(self):
        return int(sum(sum(p.size for p in b.parameters())
                       for b in self.visual_stack.blocks))


class TMSeqEncoder(Module):
    """Independent branches; both memories go to a dual-source decoder."""

    def __init__(self, conformer, fusion, rng):
        conformer.validate()
        fusion.validate()
        self.audio_stack = ConformerStack(conformer, rng, num_blocks=fusion.total_layers)
        self.visual_stack = ConformerStack(conformer, rng,
                                           num_blocks=fusion.num_visual_blocks)

    def __call__(self, audio, video, audio_mask=None, video_mask=None):
        return (self.audio_stack(audio, audio_mask),
                self.visual_stack(video, video_mask))

    def num_visual_parameters(self):
        return int(sum(sum(p.size for p in b.parameters())
                       for b in self.visual_stack.blocks))


def build_encoder(conformer, fusion, rng, paper_scale=False):
    fusion.validate(paper_scale=paper_scale)
    if fusion.variant == "cmfe":
        return CMFEEncoder(conformer, fusion, rng, paper_scale=paper_scale)
    if fusion.variant == "audio_only":
        return AudioOnlyEncoder(conformer, fusion, rng)
    if fusion.variant == "baseline":
        return BaselineEncoder(conformer, fusion, rng)
    if fusion.variant == "tm_ctc":
        return TMCTCEncoder(conformer, fusion, rng)
    if fusion.variant == "tm_seq":
        return TMSeqEncoder(conformer, fusion, rng)
    raise ConfigurationError(f"unknown variant {fusion.variant!r}")
