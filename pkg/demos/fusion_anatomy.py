"""A guided tour of the fusion encoder's moving parts.

Builds the cross-modal encoder at toy size and pokes at the properties that
make it tick: where the visual stream enters the audio stack, how the early
layers' visual embeddings are collected into one overall memory, and why
zeroing the cross-attention output projections turns the whole thing back
into a plain audio encoder.

    python demos/fusion_anatomy.py
"""

import numpy as np

from avsrkit.autodiff import Tensor
from avsrkit.encoder import (CMFEEncoder, ConformerConfig, FusionConfig,
                             build_encoder)

rng = np.random.default_rng(0)
conformer = ConformerConfig(d_model=16, n_head=2, d_ffn=32, conv_kernel=5,
                            num_blocks=2)

# Two early layers (visual branch active, video queries the audio stream)
# followed by two late layers (a fixed overall visual memory is injected).
fusion = FusionConfig(variant="cmfe", num_early=2, num_late=2,
                      insert="inner", num_visual_blocks=2)
enc = CMFEEncoder(conformer, fusion, rng)

b, t = 2, 12
audio = Tensor(rng.normal(size=(b, t, 16)))
video = Tensor(rng.normal(size=(b, t, 16)))
out = enc(audio, video)
print(f"audio {audio.shape} + video {video.shape} -> fused {out.shape}")

# The overall visual memory concatenates one embedding per early layer and
# projects the stack back down to model width: (N * d_model) -> d_model.
w = enc.memory_proj.proj.w.data
print(f"visual memory projection: {w.shape[0]} -> {w.shape[1]} "
      f"({fusion.num_early} early layers x {conformer.d_model} dims)")

# Inner insertion places the fusion between a block's self-attention and its
# convolution; outer insertion runs it before the whole block.  Same
# parameter count, different arithmetic:
outer = CMFEEncoder(conformer,
                    FusionConfig(variant="cmfe", num_early=2, num_late=2,
                                 insert="outer", num_visual_blocks=2),
                    np.random.default_rng(0))
diff = np.max(np.abs(enc(audio, video).data - outer(audio, video).data))
print(f"inner vs outer insertion, max output difference: {diff:.4f}")

# Audio dominance, by construction: every cross-attention's contribution
# enters through an output projection.  Zero those projections and the
# visual stream is arithmetically disconnected.
audio_only = build_encoder(conformer,
                           FusionConfig(variant="audio_only", num_early=2,
                                        num_late=2),
                           np.random.default_rng(7))
cmfe = build_encoder(conformer, fusion, np.random.default_rng(8))
plain = {name.replace("stack.", "", 1): p
         for name, p in audio_only.named_parameters().items()}
for name, p in cmfe.named_parameters().items():
    # give the fused encoder the audio-only weights on its audio path so the
    # two outputs are directly comparable
    key = name.replace("audio_stack.", "", 1) if name.startswith("audio_stack.") \
        else name.replace("audio_", "", 1) if name.startswith("audio_blocks") else None
    if key in plain:
        p.data[:] = plain[key].data
    if ".cross.wo." in name:
        p.data[:] = 0.0
gap = np.max(np.abs(cmfe(audio, video).data - audio_only(audio, video).data))
print(f"zeroed cross-attention vs audio-only encoder: max gap {gap:.2e}")

# The visual branch is shallow on purpose: only the early window carries
# visual blocks, so the fusion encoder stays close to the audio stack's cost.
print(f"visual-side parameters: {cmfe.num_visual_parameters()} "
      f"(audio-only: {audio_only.num_visual_parameters()})")
