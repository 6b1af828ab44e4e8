"""Audio and visual frontends plus the 4x temporal upsampler.

The visual frontend maps grayscale video (B, T_v, H, W) to frame embeddings
at the video rate; a 3D-conv stem (stride 1 in time, 2 in space) feeds a
small residual 2D stack, spatial average pooling, and a linear map.  The
upsampler stretches those embeddings 4x in time with two stride-2 transposed
convolutions so they line up 1:1 with 100 frames/sec alignment labels.  The
audio frontend subsamples 100 frames/sec features 4x with two stride-2
convolutions so both modalities meet at 25 frames/sec.

Every forward takes an optional frame mask and re-zeroes padding around each
temporal convolution; that keeps a padded batch numerically identical to
per-utterance processing (the convolutions pad with zeros either way).
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import ConfigurationError
from .nn import (
    Conv1d,
    Conv2d,
    Conv3d,
    ConvTranspose1d,
    Linear,
    Module,
    apply_frame_mask,
)


@dataclass
class FrontendConfig:
    d_model: int = 64
    feature_dim: int = 80       # audio feature dim
    audio_channels: int = 64
    visual_channels: int = 16
    visual_blocks: int = 2
    stem_kernel: tuple = (3, 3, 3)

    def validate(self):
        if self.d_model < 1 or self.feature_dim < 1:
            raise ConfigurationError("d_model and feature_dim must be positive")
        if any(k < 1 for k in self.stem_kernel) or len(self.stem_kernel) != 3:
            raise ConfigurationError(f"bad stem kernel {self.stem_kernel}")
        return self


class ResidualBlock2d(Module):
    def __init__(self, channels, rng):
        self.conv1 = Conv2d(channels, channels, 3, rng, padding=1)
        self.conv2 = Conv2d(channels, channels, 3, rng, padding=1)

    def __call__(self, x):
        return x + self.conv2(self.conv1(x).swish())


class VisualFrontend(Module):
    """(B, T_v, H, W) pixels in [0, 1] -> (B, T_v, d_model)."""

    def __init__(self, config, rng):
        config.validate()
        c = config.visual_channels
        kt, kh, kw = config.stem_kernel
        self.stem = Conv3d(1, c, config.stem_kernel, rng,
                           stride=(1, 2, 2), padding=(kt // 2, kh // 2, kw // 2))
        self.blocks = [ResidualBlock2d(c, rng) for _ in range(config.visual_blocks)]
        self.proj = Linear(c, config.d_model, rng)

    def __call__(self, video, mask=None):
        if not isinstance(video, Tensor):
            video = Tensor(video)
        if video.ndim != 4:
            raise ConfigurationError(f"video must be (B, T_v, H, W), got {video.shape}")
        b, tv, h, w = video.shape
        x = video - 0.5
        if mask is not None:
            # zero padded frames AFTER centering, so the stem's temporal
            # receptive field sees the same zeros standalone padding gives
            x = x * Tensor(mask[:, :, None, None])
        x = x.reshape(b, 1, tv, h, w)
        x = self.stem(x).swish()                      # (B, C, T_v, H/2, W/2)
        c = x.shape[1]
        x = x.transpose(0, 2, 1, 3, 4).reshape(b * tv, c, x.shape[3], x.shape[4])
        for block in self.blocks:
            x = block(x)
        pooled = x.mean(axis=(2, 3))                  # (B*T_v, C)
        out = self.proj(pooled).reshape(b, tv, -1)
        if mask is not None:
            out = apply_frame_mask(out, mask)
        return out


class Upsampler4x(Module):
    """(B, T_v, d) -> (B, 4*T_v, d); each layer exactly doubles the length."""

    def __init__(self, d_model, rng):
        self.l1 = ConvTranspose1d(d_model, d_model, 4, rng, stride=2, padding=1)
        self.l2 = ConvTranspose1d(d_model, d_model, 4, rng, stride=2, padding=1)

    def __call__(self, x, mask=None):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        b, tv, d = x.shape
        if mask is not None:
            x = apply_frame_mask(x, mask)
        y = self.l1(x.transpose(0, 2, 1)).swish()
        if mask is not None:
            # re-zero between the layers: the second deconv must see zeros
            # past each utterance's end, as it would standalone
            y = y * Tensor(np.repeat(mask, 2, axis=1)[:, None, :])
        y = self.l2(y).swish().transpose(0, 2, 1)
        if y.shape[1] != 4 * tv:
            raise ConfigurationError(f"upsampler produced {y.shape[1]} != 4*{tv} frames")
        if mask is not None:
            y = apply_frame_mask(y, self.upsampled_mask(mask))
        return y

    @staticmethod
    def upsampled_mask(mask):
        return np.repeat(mask, 4, axis=1)


class AudioFrontend(Module):
    """(B, T, D) features at 100/sec -> (B, ~T/4, d_model) at 25/sec."""

    def __init__(self, config, rng):
        config.validate()
        c = config.audio_channels
        self.conv1 = Conv1d(config.feature_dim, c, 3, rng, stride=2, padding=1)
        self.conv2 = Conv1d(c, c, 3, rng, stride=2, padding=1)
        self.proj = Linear(c, config.d_model, rng)
        self.feature_dim = config.feature_dim

    def __call__(self, feats, mask=None):
        if not isinstance(feats, Tensor):
            feats = Tensor(feats)
        if feats.ndim != 3 or feats.shape[2] != self.feature_dim:
            raise ConfigurationError(
                f"audio features must be (B, T, {self.feature_dim}), got {feats.shape}")
        if mask is not None:
            feats = apply_frame_mask(feats, mask)
        x = self.conv1(feats.transpose(0, 2, 1)).swish()
        if mask is not None:
            x = x * Tensor(self.subsampled_mask(mask, 1)[:, None, :])
        x = self.conv2(x).swish().transpose(0, 2, 1)
        out = self.proj(x)
        if mask is not None:
            out = apply_frame_mask(out, self.subsampled_mask(mask, 2))
        return out

    @staticmethod
    def out_lengths(lengths, stages=2):
        lengths = np.asarray(lengths, dtype=np.int64)
        for _ in range(stages):
            lengths = (lengths + 1) // 2
        return lengths

    @staticmethod
    def subsampled_mask(mask, stages):
        lengths = AudioFrontend.out_lengths(mask.sum(axis=1).astype(np.int64), stages)
        t_out = mask.shape[1]
        for _ in range(stages):
            t_out = (t_out + 1) // 2
        return (np.arange(t_out)[None, :] < lengths[:, None]).astype(np.float64)
