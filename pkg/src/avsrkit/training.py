"""Optimizer, LR schedule, stage runners, and checkpoint initialization maps.

The pipeline is three stages: `pretrain_audio` (hybrid CTC/attention on
features alone), `pretrain_video` (frame-level subword-state classification
against forced-alignment labels), and `finetune_fusion` (the audio-visual
recognizer, optionally initialized from the first two).  A stage run is a
pure function of (corpus, configs, seed): batch order, parameter init, and
every update are driven by seeded generators, so reruns produce identical
metrics logs byte for byte.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .container import load_arrays, save_arrays
from .corpus import SpecAugmentPolicy, normalize_utterance, spec_augment
from .errors import ConfigurationError, StageError, TrainingError
from .losses import attention_nll, ctc_loss_batch, joint_loss, visual_pretrain_loss
from .models import (build_audio_model, build_fusion_model, build_lm,
                     build_visual_model)
from .nn import lengths_to_mask

STAGES = ("pretrain_audio", "pretrain_video", "finetune_fusion")


@dataclass
class TrainConfig:
    lambda_ctc: float = 0.3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    peak_lr: float = 6e-4
    warmup_steps: int = 6000
    epochs: int = 1
    batch_size: int = 4
    seed: int = 0
    label_smoothing: float = 0.1
    grad_clip: float = 5.0
    use_spec_augment: bool = False

    def validate(self):
        if not 0.0 <= self.lambda_ctc <= 1.0:
            raise ConfigurationError(f"lambda_ctc must be in [0, 1], got {self.lambda_ctc}")
        if self.warmup_steps < 1:
            raise ConfigurationError("warmup_steps must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("need epochs >= 0 and batch_size >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigurationError("label_smoothing must be in [0, 1)")
        return self


def lr_at(step, config):
    """Linear warmup to peak_lr, then inverse-sqrt decay."""
    if step < 1:
        raise ConfigurationError(f"step counting starts at 1, got {step}")
    if step <= config.warmup_steps:
        return config.peak_lr * step / config.warmup_steps
    return config.peak_lr * np.sqrt(config.warmup_steps / step)


class Adam(object):
    """Bias-corrected Adam over a fixed parameter dict."""

    def __init__(self, params, config):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = config.beta1, config.beta2, config.adam_eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self, lr):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0   # untouched this step
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_gradients(params, max_norm):
    """Scale all gradients so their global norm is at most max_norm."""
    live = [p for p in params.values() if p.grad is not None]
    total = np.sqrt(sum(float((p.grad ** 2).sum()) for p in live))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for p in live:
            p.grad *= scale
    return total


def make_batches(lengths, batch_size, rng=None):
    """Group indices into near-equal-length batches; shuffle only batch order."""
    order = np.argsort(np.asarray(lengths), kind="stable")
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def pad_stack(arrays, width=None):
    """Stack variable-length (T, ...) arrays into (B, maxT, ...) with zero pad."""
    width = width if width is not None else max(a.shape[0] for a in arrays)
    first = np.asarray(arrays[0])
    out = np.zeros((len(arrays), width) + first.shape[1:], dtype=np.float64)
    for i, a in enumerate(arrays):
        out[i, :a.shape[0]] = a
    return out


def pad_labels(seqs, pad_value=0, width=None):
    width = width if width is not None else max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad_value, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def teacher_forcing_arrays(transcripts, sos_id, eos_id):
    """(ys_in, ys_out, out_lengths) for a batch of unit sequences."""
    lengths = np.array([len(t) + 1 for t in transcripts])
    width = int(lengths.max())
    ys_in = np.full((len(transcripts), width), eos_id, dtype=np.int64)
    ys_out = np.zeros((len(transcripts), width), dtype=np.int64)
    for i, t in enumerate(transcripts):
        ys_in[i, 0] = sos_id
        ys_in[i, 1:len(t) + 1] = t
        ys_out[i, :len(t)] = t
        ys_out[i, len(t)] = eos_id
    return ys_in, ys_out, lengths


def save_checkpoint(path, model, meta):
    save_arrays(path, model.state_arrays(), meta=meta)


def load_checkpoint(path):
    """Returns (arrays, meta) for a checkpoint file."""
    return load_arrays(path, with_meta=True)


def _as_arrays(init):
    if init is None:
        return None
    if isinstance(init, (str, Path)):
        return load_arrays(init)
    return dict(init)


_AUDIO_BLOCKS = {
    "cmfe": "encoder.audio_blocks",
    "baseline": "encoder.audio_blocks",
    "tm_ctc": "encoder.audio_stack.blocks",
    "tm_seq": "encoder.audio_stack.blocks",
    "audio_only": "encoder.stack.blocks",
}

_VISUAL_BLOCKS = {
    "cmfe": "encoder.visual_blocks",
    "baseline": "encoder.visual_blocks",
    "tm_ctc": "encoder.visual_stack.blocks",
    "tm_seq": "encoder.visual_stack.blocks",
}


def _block_count(arrays, prefix):
    found = set()
    for name in arrays:
        if name.startswith(prefix):
            found.add(int(name[len(prefix):].split(".", 1)[0]))
    return len(found)


def initialize_fusion(model, audio_arrays=None, video_arrays=None):
    """Copy pretrained arrays into a fusion model; returns the mapping audit.

    From the audio recognizer: the frontend and the full conformer stack.
    From the video classifier: the frontend and its first blocks, as many as
    the fusion visual branch holds (the upsampler and classification head
    have no fusion counterpart).  Everything else stays at its random init,
    notably all cross-attention, the overall-visual-memory projection, the
    CTC head, and the decoder.
    """
    audio_arrays = _as_arrays(audio_arrays)
    video_arrays = _as_arrays(video_arrays)
    params = model.named_parameters()
    mapped = {}

    def copy(src_arrays, src_name, dst_name):
        if dst_name not in params:
            raise TrainingError(f"initialization gap: no fusion parameter {dst_name}")
        if params[dst_name].data.shape != src_arrays[src_name].shape:
            raise TrainingError(
                f"shape mismatch mapping {src_name} -> {dst_name}: "
                f"{src_arrays[src_name].shape} vs {params[dst_name].data.shape}")
        params[dst_name].data[:] = src_arrays[src_name]
        mapped[dst_name] = src_name

    if audio_arrays is not None:
        dst_blocks = _AUDIO_BLOCKS[model.variant]
        n_src = _block_count(audio_arrays, "encoder.blocks")
        n_dst = model.config.fusion.total_layers
        if n_src != n_dst:
            raise TrainingError(
                f"audio stack depth mismatch: checkpoint has {n_src} blocks, "
                f"fusion model has {n_dst}")
        for name, arr in audio_arrays.items():
            if name.startswith("audio_frontend."):
                copy(audio_arrays, name, name)
            elif name.startswith("encoder.blocks"):
                copy(audio_arrays, name, dst_blocks + name[len("encoder.blocks"):])

    if video_arrays is not None:
        if model.variant == "audio_only":
            raise TrainingError("audio_only fusion has no visual branch to initialize")
        dst_blocks = _VISUAL_BLOCKS[model.variant]
        n_src = _block_count(video_arrays, "encoder.blocks")
        n_dst = model.config.fusion.num_visual_blocks
        if n_src < n_dst:
            raise TrainingError(
                f"visual stack too shallow: checkpoint has {n_src} blocks, "
                f"fusion branch needs {n_dst}")
        for name, arr in video_arrays.items():
            if name.startswith("visual_frontend."):
                copy(video_arrays, name, name)
            elif name.startswith("encoder.blocks"):
                index = int(name[len("encoder.blocks"):].split(".", 1)[0])
                if index < n_dst:
                    copy(video_arrays, name, dst_blocks + name[len("encoder.blocks"):])

    fresh = sorted(set(params) - set(mapped))
    return {"mapped": mapped, "fresh": fresh}


@dataclass
class StageResult:
    model: object
    checkpoint_path: Path
    metrics_path: Path
    steps: int
    final_loss: float


class _MetricsLog(object):
    """JSON-lines metrics writer; float fields keep full 64-bit precision."""

    def __init__(self, path):
        self.path = Path(path)
        self.f = open(self.path, "w")

    def write(self, record):
        self.f.write(json.dumps(record) + "\n")
        self.f.flush()

    def close(self):
        self.f.close()


def run_stage(stage, corpus, model_config, train_config, run_dir, *,
              alignments=None, audio_init=None, video_init=None, config_hash=""):
    """Train one pipeline stage and write checkpoint plus metrics log.

    alignments: dict utt_id -> per-frame state labels, required for
    pretrain_video.  audio_init / video_init: checkpoint paths or array
    dicts consumed by finetune_fusion.
    """
    if stage not in STAGES:
        raise StageError(f"unknown stage {stage!r}; expected one of {STAGES}")
    train_config.validate()
    model_config.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    vocab = corpus.spec.num_units
    num_senones = 3 * vocab
    audit = None
    if stage == "pretrain_audio":
        model = build_audio_model(model_config, vocab, train_config.seed)
    elif stage == "pretrain_video":
        if alignments is None:
            raise StageError("pretrain_video needs forced-alignment labels")
        model = build_visual_model(model_config, num_senones, train_config.seed)
    else:
        model = build_fusion_model(model_config, vocab, train_config.seed)
        if audio_init is not None or video_init is not None:
            audit = initialize_fusion(model, audio_init, video_init)

    train_utts = corpus.train
    if stage == "pretrain_video":
        missing = [u.id for u in train_utts if u.id not in alignments]
        if missing:
            raise StageError(f"alignments missing for {missing[:3]} "
                             f"({len(missing)} of {len(train_utts)})")

    rng = np.random.default_rng(np.random.SeedSequence([train_config.seed, 17]))
    metrics = _MetricsLog(run_dir / f"{stage}.metrics.jsonl")
    metrics.write({"stage": stage, "config_hash": config_hash,
                   "seed": train_config.seed})
    params = model.named_parameters()
    optimizer = Adam(params, train_config)
    step = 0
    last_loss = float("nan")
    policy = SpecAugmentPolicy()
    try:
        for epoch in range(train_config.epochs):
            if stage == "pretrain_video":
                lengths = [u.video.num_frames for u in train_utts]
            else:
                lengths = [u.audio.num_frames for u in train_utts]
            for batch_ids in make_batches(lengths, train_config.batch_size, rng):
                batch = [train_utts[i] for i in batch_ids]
                step += 1
                lr = lr_at(step, train_config)
                model.zero_grad()
                loss, components = _stage_loss(stage, model, batch, train_config,
                                               alignments, rng, policy)
                loss.backward()
                clip_gradients(params, train_config.grad_clip)
                optimizer.step(lr)
                last_loss = float(loss.data)
                metrics.write({"step": step, "lr": lr, "loss": last_loss,
                               "components": components})
    finally:
        metrics.close()

    meta = {"stage": stage, "step": step, "config_hash": config_hash,
            "seed": train_config.seed}
    if audit is not None:
        meta["initialization"] = audit
    ckpt = run_dir / f"{stage}.ckpt"
    save_checkpoint(ckpt, model, meta)
    return StageResult(model, ckpt, metrics.path, step, last_loss)


def _stage_loss(stage, model, batch, train_config, alignments, rng, policy):
    if stage == "pretrain_video":
        video = pad_stack([u.video.frames for u in batch])
        video_lengths = [u.video.num_frames for u in batch]
        logits, up_lengths = model(video, video_lengths)
        labels = pad_labels([alignments[u.id] for u in batch], width=logits.shape[1])
        mask = lengths_to_mask(up_lengths, logits.shape[1])
        loss = visual_pretrain_loss(logits, labels, mask=mask) * (1.0 / len(batch))
        acc = _frame_accuracy(logits.data, labels, mask)
        return loss, {"frame_ce": float(loss.data), "frame_accuracy": acc}

    feats = [normalize_utterance(u.audio) for u in batch]
    if train_config.use_spec_augment:
        feats = [spec_augment(f, policy, rng) for f in feats]
    features = pad_stack([f.frames for f in feats])
    feature_lengths = [u.audio.num_frames for u in batch]
    transcripts = [u.transcript for u in batch]

    if stage == "pretrain_audio":
        memory, memory_lengths = model.encode(features, feature_lengths)
    else:
        video = pad_stack([u.video.frames for u in batch])
        video_lengths = [u.video.num_frames for u in batch]
        memory, memory_lengths = model.encode(features, feature_lengths,
                                              video, video_lengths)

    if isinstance(memory, tuple):      # dual-memory variant
        audio_mem, video_mem = memory
        ctc_total, ctc_items = ctc_loss_batch(model.ctc_head(audio_mem),
                                              memory_lengths, transcripts)
        ys_in, ys_out, out_lengths = teacher_forcing_arrays(
            transcripts, model.decoder.sos_id, model.decoder.eos_id)
        logits = model.decoder(ys_in, audio_mem,
                               memory_mask=lengths_to_mask(memory_lengths,
                                                           audio_mem.shape[1]),
                               memory2=video_mem,
                               memory2_mask=lengths_to_mask(memory_lengths,
                                                            video_mem.shape[1]))
    else:
        ctc_total, ctc_items = ctc_loss_batch(model.ctc_head(memory),
                                              memory_lengths, transcripts)
        ys_in, ys_out, out_lengths = teacher_forcing_arrays(
            transcripts, model.decoder.sos_id, model.decoder.eos_id)
        logits = model.decoder(ys_in, memory,
                               memory_mask=lengths_to_mask(memory_lengths,
                                                           memory.shape[1]))
    att_total = attention_nll(logits, ys_out, out_lengths,
                              label_smoothing=train_config.label_smoothing)
    scale = 1.0 / len(batch)
    loss = joint_loss(ctc_total * (-scale), att_total * (-scale),
                      train_config.lambda_ctc)
    return loss, {"ctc": float(ctc_total.data) * scale,
                  "att": float(att_total.data) * scale}


def train_lm(corpus, model_config, train_config, run_dir, *, config_hash=""):
    """Train the token language model on the training transcripts."""
    train_config.validate()
    model_config.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    lm = build_lm(model_config, corpus.spec.num_units, train_config.seed)
    rng = np.random.default_rng(np.random.SeedSequence([train_config.seed, 17]))
    metrics = _MetricsLog(run_dir / "train_lm.metrics.jsonl")
    metrics.write({"stage": "train_lm", "config_hash": config_hash,
                   "seed": train_config.seed})
    params = lm.named_parameters()
    optimizer = Adam(params, train_config)
    step = 0
    last_loss = float("nan")
    lengths = [len(u.transcript) for u in corpus.train]
    try:
        for _ in range(train_config.epochs):
            for batch_ids in make_batches(lengths, train_config.batch_size, rng):
                batch = [corpus.train[i] for i in batch_ids]
                step += 1
                lr = lr_at(step, train_config)
                lm.zero_grad()
                ys_in, ys_out, out_lengths = teacher_forcing_arrays(
                    [u.transcript for u in batch], lm.sos_id, lm.eos_id)
                nll = attention_nll(lm(ys_in), ys_out, out_lengths,
                                    label_smoothing=train_config.label_smoothing)
                loss = nll * (1.0 / len(batch))
                loss.backward()
                clip_gradients(params, train_config.grad_clip)
                optimizer.step(lr)
                last_loss = float(loss.data)
                metrics.write({"step": step, "lr": lr, "loss": last_loss,
                               "components": {"nll": last_loss}})
    finally:
        metrics.close()
    ckpt = run_dir / "train_lm.ckpt"
    save_checkpoint(ckpt, lm, {"stage": "train_lm", "step": step,
                               "config_hash": config_hash,
                               "seed": train_config.seed})
    return StageResult(lm, ckpt, metrics.path, step, last_loss)


def _frame_accuracy(logits, labels, mask):
    hits = (logits.argmax(axis=-1) == labels) * (mask > 0)
    return float(hits.sum() / max(mask.sum(), 1.0))
