"""Run the whole pipeline, in miniature, through the library API.

Synthesizes a tiny paired audio/video corpus, trains the Gaussian aligner,
pre-trains both uni-modal networks, fine-tunes the fusion recognizer from
their weights, and decodes the test split.  Everything is seeded, so the
numbers printed here come out the same on every run.

    python demos/quickstart.py
"""

import dataclasses
import tempfile

import numpy as np

from avsrkit.config import desk_config
from avsrkit.corpus import generate_corpus, normalize_utterance
from avsrkit.decoding import decode_corpus, evaluate
from avsrkit.gmmhmm import align_corpus, boundary_accuracy, em_train, flat_start
from avsrkit.training import run_stage

# A miniature setup: 4 subword units, 8-dim features, 8x8 video.  The desk
# preset's model geometry is shrunk to match so the demo finishes in about a
# minute on a laptop.
cfg = desk_config()
cfg = dataclasses.replace(
    cfg,
    corpus=dataclasses.replace(cfg.corpus, num_units=4, feature_dim=8,
                               video_height=8, video_width=8,
                               utterance_length_range=(2, 4),
                               noise_std=0.3, visual_informativeness=0.5,
                               num_train=24, num_test=6))
cfg.model.frontend = dataclasses.replace(
    cfg.model.frontend, d_model=32, feature_dim=8, audio_channels=16,
    visual_channels=8, visual_blocks=1)
cfg.model.conformer = dataclasses.replace(
    cfg.model.conformer, d_model=32, n_head=2, d_ffn=64, num_blocks=2)
cfg.model.fusion = dataclasses.replace(
    cfg.model.fusion, num_early=1, num_late=1, num_visual_blocks=1)
cfg.model.decoder_layers = 1
cfg.model.visual_pretrain_blocks = 1
for name in ("audio", "video", "fusion"):
    setattr(cfg.train, name,
            dataclasses.replace(getattr(cfg.train, name), epochs=30,
                                batch_size=4, warmup_steps=15, peak_lr=2e-3))
cfg.validate()

print("== corpus ==")
corpus = generate_corpus(cfg.corpus)
print(f"{len(corpus.train)} train / {len(corpus.test)} test utterances, "
      f"{corpus.spec.num_units} units x 3 states = "
      f"{3 * corpus.spec.num_units} frame classes")

print("\n== alignment model ==")
hmm = flat_start(corpus, cfg.gmm.hmm)
hmm, history = em_train(hmm, corpus, iters=4,
                        rng=np.random.default_rng(cfg.gmm.seed))
for rec in history:
    print(f"  EM iter {rec['iteration']}: objective {rec['objective']:.1f}")
labels = align_corpus(hmm, corpus.train)
acc = float(np.mean([boundary_accuracy(u.gold_alignment, labels[u.id].labels)
                     for u in corpus.train]))
print(f"state boundaries within +/-2 frames of gold: {acc:.1%}")

with tempfile.TemporaryDirectory() as run_dir:
    print("\n== uni-modal pre-training ==")
    audio = run_stage("pretrain_audio", corpus, cfg.model, cfg.train.audio,
                      run_dir)
    print(f"audio recognizer: {audio.steps} steps, "
          f"final loss {audio.final_loss:.3f}")
    video = run_stage("pretrain_video", corpus, cfg.model, cfg.train.video,
                      run_dir, alignments={u: al.labels
                                           for u, al in labels.items()})
    print(f"video frame classifier: {video.steps} steps, "
          f"final loss {video.final_loss:.3f}")

    print("\n== fusion fine-tuning ==")
    fused = run_stage("finetune_fusion", corpus, cfg.model, cfg.train.fusion,
                      run_dir,
                      audio_init=str(audio.checkpoint_path),
                      video_init=str(video.checkpoint_path))
    print(f"fusion recognizer ({cfg.model.fusion.variant}): "
          f"{fused.steps} steps, final loss {fused.final_loss:.3f}")

model = fused.model


def encode(u):
    feats = normalize_utterance(u.audio).frames[None]
    memory, lengths = model.encode(feats, [u.audio.num_frames],
                                   u.video.frames[None], [u.video.num_frames])
    return memory, int(lengths[0])


print("\n== decoding ==")
entries = decode_corpus(corpus.test, encode, model.ctc_head, model.decoder,
                        cfg.decode)
refs = {u.id: [int(t) for t in u.transcript] for u in corpus.test}
for uid, score, tokens in entries[:3]:
    print(f"  {uid}: hyp {tokens}  ref {refs[uid]}")
report = evaluate(refs, {uid: toks for uid, _, toks in entries})
print(f"test CER: {report['overall_cer']:.3f}")
