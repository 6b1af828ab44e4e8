"""Synthetic audio-visual corpus with known transcripts and frame alignments.

Each subword unit owns two templates: a 3xD audio template (one row per HMM
state, emitted at 100 frames/sec) and an HxW visual template (emitted at
25 frames/sec).  Utterances are concatenations of unit templates plus
Gaussian noise, so ground-truth frame-level state boundaries are known
exactly and can serve as oracles for alignment and pre-training tests.

`visual_informativeness` controls how much of the unit inventory is
identifiable from audio alone: that fraction of units is grouped into pairs
sharing a single audio template while keeping distinct visual templates, so
only the video stream can tell pair members apart.
"""

from dataclasses import dataclass, field, asdict
import os

import numpy as np

from .container import save_arrays, load_arrays
from .errors import ConfigurationError, DegenerateInputError

AUDIO_FPS = 100
VIDEO_FPS = 25
STATES_PER_UNIT = 3
VARIANCE_FLOOR = 1e-8


@dataclass
class CorpusSpec:
    """Everything needed to deterministically generate a corpus."""

    num_units: int = 8
    feature_dim: int = 80
    video_height: int = 32
    video_width: int = 32
    audio_fps: int = AUDIO_FPS
    video_fps: int = VIDEO_FPS
    utterance_length_range: tuple = (3, 6)     # units per utterance
    duration_range: tuple = (12, 20)           # audio frames per unit, multiples of 4
    noise_std: float = 0.1                     # audio feature noise
    video_noise_std: float = 0.02              # pixel noise, clipped to [0, 1]
    visual_informativeness: float = 0.0
    num_train: int = 60
    num_test: int = 16
    seed: int = 0

    def validate(self):
        if self.num_units < 2:
            raise ConfigurationError("num_units must be >= 2")
        if self.feature_dim < 1:
            raise ConfigurationError("feature_dim must be >= 1")
        if self.video_height < 1 or self.video_width < 1:
            raise ConfigurationError("video frame size must be positive")
        if self.audio_fps != 4 * self.video_fps:
            raise ConfigurationError(
                f"audio_fps must be 4 x video_fps, got {self.audio_fps} vs {self.video_fps}")
        lo, hi = self.utterance_length_range
        if not (1 <= lo <= hi):
            raise ConfigurationError(f"bad utterance_length_range {self.utterance_length_range}")
        dlo, dhi = self.duration_range
        if dlo < 4 * STATES_PER_UNIT:
            raise ConfigurationError(
                f"duration minimum must be >= {4 * STATES_PER_UNIT} audio frames, got {dlo}")
        if not self._duration_choices():
            raise ConfigurationError(
                f"duration_range {self.duration_range} contains no multiple of 4")
        if not (0.0 <= self.visual_informativeness <= 1.0):
            raise ConfigurationError("visual_informativeness must be in [0, 1]")
        if self.noise_std < 0 or self.video_noise_std < 0:
            raise ConfigurationError("noise levels must be non-negative")
        if self.num_train < 1 or self.num_test < 0:
            raise ConfigurationError("need num_train >= 1 and num_test >= 0")
        return self

    def _duration_choices(self):
        lo, hi = self.duration_range
        start = ((lo + 3) // 4) * 4
        return list(range(start, hi + 1, 4))

    def to_dict(self):
        d = asdict(self)
        d["utterance_length_range"] = list(self.utterance_length_range)
        d["duration_range"] = list(self.duration_range)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["utterance_length_range"] = tuple(d["utterance_length_range"])
        d["duration_range"] = tuple(d["duration_range"])
        return cls(**d)


@dataclass
class FeatureSequence:
    """T x D acoustic feature frames at `frame_rate` frames/sec."""

    frames: np.ndarray
    frame_rate: int = AUDIO_FPS

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ConfigurationError(f"feature frames must be TxD with T>=1, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ConfigurationError("feature frames contain non-finite values")

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]


@dataclass
class VideoSequence:
    """T_v x H x W grayscale frames in [0, 1] at `frame_rate` frames/sec."""

    frames: np.ndarray
    frame_rate: int = VIDEO_FPS

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise ConfigurationError(f"video frames must be TxHxW with T>=1, got {self.frames.shape}")

    @property
    def num_frames(self):
        return self.frames.shape[0]


@dataclass
class Utterance:
    id: str
    audio: FeatureSequence
    video: VideoSequence
    transcript: np.ndarray          # unit ids, length L
    gold_alignment: np.ndarray      # per-audio-frame senone id (unit*3 + state)

    def __post_init__(self):
        self.transcript = np.asarray(self.transcript, dtype=np.int64)
        self.gold_alignment = np.asarray(self.gold_alignment, dtype=np.int64)
        if self.transcript.size == 0:
            raise ConfigurationError(f"{self.id}: transcript is empty")
        t, tv = self.audio.num_frames, self.video.num_frames
        if abs(t - 4 * tv) >= 4:
            raise ConfigurationError(f"{self.id}: audio/video rate mismatch T={t}, T_v={tv}")

    @property
    def gold_units(self):
        return self.gold_alignment // STATES_PER_UNIT

    @property
    def gold_states(self):
        return self.gold_alignment % STATES_PER_UNIT


@dataclass
class Corpus:
    spec: CorpusSpec
    train: list
    test: list
    audio_templates: np.ndarray     # (U, 3, D)
    visual_templates: np.ndarray    # (U, H, W)

    @property
    def utterances(self):
        return self.train + self.test

    def by_id(self, utt_id):
        for u in self.utterances:
            if u.id == utt_id:
                return u
        raise KeyError(utt_id)


def _paired_units(spec):
    """Unit-id pairs that share an audio template under visual_informativeness."""
    v = spec.visual_informativeness
    if v <= 0.0:
        return []
    n_amb = int(round(v * spec.num_units))
    n_amb = max(2, n_amb)
    n_amb -= n_amb % 2
    n_amb = min(n_amb, spec.num_units - spec.num_units % 2)
    return [(i, i + 1) for i in range(0, n_amb, 2)]


def _make_templates(spec, rng):
    d = spec.feature_dim
    audio = rng.normal(0.0, 1.0, size=(spec.num_units, STATES_PER_UNIT, d))
    for a, b in _paired_units(spec):
        audio[b] = audio[a]
    # blocky visual patterns: coarse grids upsampled, robust to spatial pooling
    coarse = rng.uniform(0.1, 0.9, size=(spec.num_units, 4, 4))
    reps_h = -(-spec.video_height // 4)
    reps_w = -(-spec.video_width // 4)
    visual = np.repeat(np.repeat(coarse, reps_h, axis=1), reps_w, axis=2)
    visual = visual[:, :spec.video_height, :spec.video_width]
    return audio, visual


def _state_occupancy(duration):
    """Split a unit's frame count over its 3 states (earlier states get the remainder)."""
    base = duration // STATES_PER_UNIT
    rem = duration % STATES_PER_UNIT
    return [base + (1 if s < rem else 0) for s in range(STATES_PER_UNIT)]


def _token_stream(rng, total, num_units):
    """A shuffled stream covering all units as evenly as possible."""
    reps = -(-total // num_units)
    pool = np.tile(np.arange(num_units, dtype=np.int64), reps)
    rng.shuffle(pool)
    return pool[:total]


def _synth_utterance(utt_id, transcript, durations, spec, audio_tpl, visual_tpl, rng):
    frames = []
    labels = []
    video = []
    for unit, dur in zip(transcript, durations):
        occ = _state_occupancy(dur)
        for state, n in enumerate(occ):
            frames.append(np.repeat(audio_tpl[unit, state][None, :], n, axis=0))
            labels.extend([unit * STATES_PER_UNIT + state] * n)
        video.append(np.repeat(visual_tpl[unit][None], dur // 4, axis=0))
    audio = np.concatenate(frames, axis=0)
    if spec.noise_std > 0:
        audio = audio + rng.normal(0.0, spec.noise_std, size=audio.shape)
    vid = np.concatenate(video, axis=0)
    if spec.video_noise_std > 0:
        vid = np.clip(vid + rng.normal(0.0, spec.video_noise_std, size=vid.shape), 0.0, 1.0)
    return Utterance(
        id=utt_id,
        audio=FeatureSequence(audio, spec.audio_fps),
        video=VideoSequence(vid, spec.video_fps),
        transcript=np.asarray(transcript, dtype=np.int64),
        gold_alignment=np.asarray(labels, dtype=np.int64),
    )


def generate_corpus(spec):
    """Deterministically generate a corpus from `spec` (pure function of spec)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    audio_tpl, visual_tpl = _make_templates(spec, rng)
    dur_choices = np.asarray(spec._duration_choices(), dtype=np.int64)
    lo, hi = spec.utterance_length_range

    def make_split(prefix, count):
        lengths = rng.integers(lo, hi + 1, size=count)
        stream = _token_stream(rng, int(lengths.sum()), spec.num_units)
        utts, pos = [], 0
        for i in range(count):
            n = int(lengths[i])
            transcript = stream[pos:pos + n]
            pos += n
            durations = dur_choices[rng.integers(0, len(dur_choices), size=n)]
            utts.append(_synth_utterance(f"{prefix}-{i:05d}", transcript, durations,
                                         spec, audio_tpl, visual_tpl, rng))
        return utts

    train = make_split("tr", spec.num_train)
    test = make_split("te", spec.num_test)
    return Corpus(spec=spec, train=train, test=test,
                  audio_templates=audio_tpl, visual_templates=visual_tpl)


def normalize_utterance(f):
    """Per-dimension zero-mean unit-variance over the utterance.

    Dimensions whose variance falls below the floor (constant dims) come out
    exactly zero.  Idempotent up to float rounding.
    """
    if f.num_frames < 2:
        raise DegenerateInputError(f"normalization needs T >= 2, got T={f.num_frames}")
    x = f.frames
    mean = x.mean(axis=0)
    var = x.var(axis=0)
    floored = var < VARIANCE_FLOOR
    std = np.sqrt(np.where(floored, 1.0, var))
    out = (x - mean) / std
    out[:, floored] = 0.0
    return FeatureSequence(out, f.frame_rate)


@dataclass
class SpecAugmentPolicy:
    """Zero-masking policy: exact mask widths, random placement.

    `time_width` may be an int (frames) or a float in (0, 1) meaning a
    fraction of the utterance length, floored.
    """

    freq_masks: int = 2
    freq_width: int = 10
    time_masks: int = 2
    time_width: float = 0.05

    def time_width_frames(self, num_frames):
        if isinstance(self.time_width, float) and 0 < self.time_width < 1:
            return int(self.time_width * num_frames)
        return int(self.time_width)


def spec_augment(f, policy, rng):
    """Apply frequency and time masking; returns a new FeatureSequence.

    Masked regions are set to 0 (inputs are assumed normalized).  Mask widths
    wider than the axis are clipped to cover it entirely.
    """
    x = f.frames.copy()
    t, d = x.shape
    for _ in range(policy.freq_masks):
        w = min(policy.freq_width, d)
        if w <= 0:
            continue
        start = int(rng.integers(0, d - w + 1))
        x[:, start:start + w] = 0.0
    tw = policy.time_width_frames(t)
    for _ in range(policy.time_masks):
        w = min(tw, t)
        if w <= 0:
            continue
        start = int(rng.integers(0, t - w + 1))
        x[start:start + w, :] = 0.0
    return FeatureSequence(x, f.frame_rate)


# ---------------------------------------------------------------------------
# persistence: manifest + per-utterance containers + alignment text files
# ---------------------------------------------------------------------------

def _meta_line(meta):
    parts = " ".join(f"{k}={v}" for k, v in sorted(meta.items()))
    return f"#meta {parts}\n"


def parse_meta_line(line):
    if not line.startswith("#meta"):
        return {}
    out = {}
    for part in line[len("#meta"):].split():
        if "=" in part:
            k, v = part.split("=", 1)
            out[k] = v
    return out


def write_alignments(path, alignments, meta=None):
    """Write `{utt_id: label array}` in the text format `<utt-id> <id>*T`."""
    with open(path, "w") as fh:
        if meta:
            fh.write(_meta_line(meta))
        for utt_id in alignments:
            labels = " ".join(str(int(v)) for v in alignments[utt_id])
            fh.write(f"{utt_id} {labels}\n")


def read_alignments(path):
    """Read an alignment text file; returns ({utt_id: int array}, meta dict)."""
    alignments, meta = {}, {}
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#meta"):
                meta = parse_meta_line(line)
                continue
            parts = line.split()
            alignments[parts[0]] = np.asarray([int(v) for v in parts[1:]], dtype=np.int64)
    return alignments, meta


def save_corpus(corpus, out_dir, config_hash=""):
    """Persist a corpus: per-split manifests, utterance containers, gold alignments."""
    utt_dir = os.path.join(out_dir, "utts")
    os.makedirs(utt_dir, exist_ok=True)
    meta = {"config_hash": config_hash}
    for split_name, utts in (("train", corpus.train), ("test", corpus.test)):
        manifest = os.path.join(out_dir, f"{split_name}.tsv")
        with open(manifest, "w") as fh:
            fh.write(_meta_line(meta))
            for u in utts:
                rel = os.path.join("utts", f"{u.id}.bin")
                save_arrays(os.path.join(out_dir, rel),
                            {"audio": u.audio.frames.astype(np.float32),
                             "video": u.video.frames.astype(np.float32)},
                            meta={"id": u.id, "config_hash": config_hash})
                tokens = " ".join(str(int(t)) for t in u.transcript)
                fh.write(f"{u.id}\t{rel}\t{tokens}\n")
    gold = {u.id: u.gold_alignment for u in corpus.utterances}
    write_alignments(os.path.join(out_dir, "gold_alignments.txt"), gold, meta=meta)
    save_arrays(os.path.join(out_dir, "templates.bin"),
                {"audio_templates": corpus.audio_templates,
                 "visual_templates": corpus.visual_templates},
                meta=meta)
    spec_meta = dict(meta)
    spec_meta["spec"] = corpus.spec.to_dict()
    save_arrays(os.path.join(out_dir, "spec.bin"), {}, meta=spec_meta)


def read_manifest(path):
    """Read a manifest; returns (records, meta) with records (id, relpath, tokens)."""
    records, meta = [], {}
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#meta"):
                meta = parse_meta_line(line)
                continue
            utt_id, rel, tokens = line.split("\t")
            ids = np.asarray([int(t) for t in tokens.split()], dtype=np.int64)
            records.append((utt_id, rel, ids))
    return records, meta


def load_corpus(corpus_dir):
    """Reload a saved corpus (including templates and gold alignments)."""
    _, spec_meta = load_arrays(os.path.join(corpus_dir, "spec.bin"), with_meta=True)
    spec = CorpusSpec.from_dict(spec_meta["spec"])
    templates = load_arrays(os.path.join(corpus_dir, "templates.bin"))
    gold, _ = read_alignments(os.path.join(corpus_dir, "gold_alignments.txt"))
    splits = {}
    for split_name in ("train", "test"):
        records, _ = read_manifest(os.path.join(corpus_dir, f"{split_name}.tsv"))
        utts = []
        for utt_id, rel, tokens in records:
            arrays = load_arrays(os.path.join(corpus_dir, rel))
            utts.append(Utterance(
                id=utt_id,
                audio=FeatureSequence(arrays["audio"].astype(np.float64), spec.audio_fps),
                video=VideoSequence(arrays["video"].astype(np.float64), spec.video_fps),
                transcript=tokens,
                gold_alignment=gold[utt_id],
            ))
        splits[split_name] = utts
    return Corpus(spec=spec, train=splits["train"], test=splits["test"],
                  audio_templates=templates["audio_templates"],
                  visual_templates=templates["visual_templates"])
