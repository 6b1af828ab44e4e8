"""End-to-end model assemblies for the three pipeline stages.

Each stage owns one model: an audio-only hybrid recognizer, a video-only
frame classifier, and the fusion recognizer.  Submodule attribute names are
part of the checkpoint contract: fine-tuning initialization copies arrays
between models by name, so the audio frontend is `audio_frontend` everywhere
it appears, pretraining conformer blocks live under `encoder.blocks{i}`, and
the fusion encoders keep their audio/visual split visible in the name.
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .encoder import (ConformerConfig, ConformerStack, FusionConfig,
                      build_encoder)
from .errors import ConfigurationError
from .frontend import AudioFrontend, FrontendConfig, Upsampler4x, VisualFrontend
from .decoder import TransformerDecoder, TransformerLM
from .nn import Linear, Module, lengths_to_mask


@dataclass
class ModelConfig:
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    conformer: ConformerConfig = field(default_factory=ConformerConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    decoder_layers: int = 2
    lm_layers: int = 2
    visual_pretrain_blocks: int = 3
    paper_scale: bool = False

    def validate(self):
        self.frontend.validate()
        self.conformer.validate()
        self.fusion.validate(paper_scale=self.paper_scale)
        if self.frontend.d_model != self.conformer.d_model:
            raise ConfigurationError(
                f"frontend d_model {self.frontend.d_model} != conformer "
                f"{self.conformer.d_model}")
        if self.decoder_layers < 1:
            raise ConfigurationError("decoder needs at least one layer")
        if self.lm_layers < 1:
            raise ConfigurationError("language model needs at least one layer")
        if self.visual_pretrain_blocks < self.fusion.num_visual_blocks:
            raise ConfigurationError(
                "visual pre-training must be at least as deep as the fusion "
                "visual branch it initializes")
        return self


class AudioModel(Module):
    """Audio-only recognizer: frontend, conformer stack, CTC and attention heads."""

    def __init__(self, config, vocab_size, rng):
        config.validate()
        self.vocab_size = vocab_size
        self.audio_frontend = AudioFrontend(config.frontend, rng)
        self.encoder = ConformerStack(config.conformer, rng,
                                      num_blocks=config.fusion.total_layers)
        self.ctc_head = Linear(config.conformer.d_model, vocab_size + 1, rng)
        self.decoder = TransformerDecoder(vocab_size, config.conformer.d_model,
                                          config.conformer.n_head,
                                          config.conformer.d_ffn,
                                          config.decoder_layers, rng)

    def encode(self, features, lengths):
        """(B, T, D) padded features -> (memory, memory_lengths)."""
        lengths = np.asarray(lengths, dtype=np.int64)
        mask = lengths_to_mask(lengths, features.shape[1])
        x = self.audio_frontend(Tensor(features), mask=mask)
        out_lengths = AudioFrontend.out_lengths(lengths)
        memory = self.encoder(x, lengths_to_mask(out_lengths, x.shape[1]))
        return memory, out_lengths


class VisualPretrainModel(Module):
    """Video-only frame classifier: frontend, 4x upsampler, conformer, senone head."""

    def __init__(self, config, num_senones, rng):
        config.validate()
        self.num_senones = num_senones
        self.visual_frontend = VisualFrontend(config.frontend, rng)
        self.upsampler = Upsampler4x(config.frontend.d_model, rng)
        self.encoder = ConformerStack(config.conformer, rng,
                                      num_blocks=config.visual_pretrain_blocks)
        self.senone_head = Linear(config.conformer.d_model, num_senones, rng)

    def __call__(self, video, video_lengths):
        """(B, T_v, H, W) padded video -> (frame logits at 4*T_v, logit lengths)."""
        video_lengths = np.asarray(video_lengths, dtype=np.int64)
        mask = lengths_to_mask(video_lengths, video.shape[1])
        v = self.visual_frontend(video, mask=mask)
        v = self.upsampler(v, mask=mask)
        up_lengths = 4 * video_lengths
        up_mask = lengths_to_mask(up_lengths, v.shape[1])
        v = self.encoder(v, up_mask)
        return self.senone_head(v), up_lengths


class FusionModel(Module):
    """Audio-visual recognizer around one of the fusion encoder variants."""

    def __init__(self, config, vocab_size, rng):
        config.validate()
        self.config = config
        self.vocab_size = vocab_size
        self.variant = config.fusion.variant
        self.audio_frontend = AudioFrontend(config.frontend, rng)
        if self.variant != "audio_only":
            self.visual_frontend = VisualFrontend(config.frontend, rng)
        self.encoder = build_encoder(config.conformer, config.fusion, rng,
                                     paper_scale=config.paper_scale)
        self.ctc_head = Linear(config.conformer.d_model, vocab_size + 1, rng)
        self.decoder = TransformerDecoder(vocab_size, config.conformer.d_model,
                                          config.conformer.n_head,
                                          config.conformer.d_ffn,
                                          config.decoder_layers, rng,
                                          dual_memory=(self.variant == "tm_seq"))

    def encode(self, features, feature_lengths, video, video_lengths):
        """Padded per-modality inputs -> (memory, memory_lengths).

        For tm_seq the memory is a (audio, visual) pair; every other variant
        returns a single fused sequence at the subsampled audio rate.
        """
        feature_lengths = np.asarray(feature_lengths, dtype=np.int64)
        a_mask = lengths_to_mask(feature_lengths, features.shape[1])
        x = self.audio_frontend(Tensor(features), mask=a_mask)
        out_lengths = AudioFrontend.out_lengths(feature_lengths)
        out_mask = lengths_to_mask(out_lengths, x.shape[1])

        if self.variant == "audio_only":
            return self.encoder(x, audio_mask=out_mask), out_lengths

        video_lengths = np.asarray(video_lengths, dtype=np.int64)
        v_mask = lengths_to_mask(video_lengths, video.shape[1])
        v = self.visual_frontend(video, mask=v_mask)
        if v.shape[1] != x.shape[1]:
            # both run at 25 frames/sec; padded batches are cut to one width
            width = max(v.shape[1], x.shape[1])
            v = v.pad(((0, 0), (0, width - v.shape[1]), (0, 0)))
            x = x.pad(((0, 0), (0, width - x.shape[1]), (0, 0)))
            out_mask = lengths_to_mask(out_lengths, width)
            v_mask = lengths_to_mask(video_lengths, width)
        memory = self.encoder(x, v, audio_mask=out_mask, video_mask=v_mask)
        return memory, out_lengths


def build_audio_model(config, vocab_size, seed):
    return AudioModel(config, vocab_size, np.random.default_rng(seed))


def build_visual_model(config, num_senones, seed):
    return VisualPretrainModel(config, num_senones, np.random.default_rng(seed))


def build_fusion_model(config, vocab_size, seed):
    return FusionModel(config, vocab_size, np.random.default_rng(seed))


def build_lm(config, vocab_size, seed):
    return TransformerLM(vocab_size, config.conformer.d_model,
                         config.conformer.n_head, config.conformer.d_ffn,
                         config.lm_layers, np.random.default_rng(seed))
