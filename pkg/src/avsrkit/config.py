"""Experiment configuration: presets, strict YAML loading, canonical hashing.

One ExperimentConfig describes an entire run: corpus synthesis, the
alignment model, the neural models, per-stage training, and decoding.  A
config file never has to be complete; it is deep-merged over a preset, and
any key the schema does not know is an error rather than a silent no-op
(typos in sweep scripts should fail loudly).  The canonical hash of the
resolved config is stamped into every artifact a run produces, which is how
downstream stages notice they are being fed files from a different
experiment.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml

from .corpus import CorpusSpec
from .decoding import DecodeConfig
from .encoder import ConformerConfig, FusionConfig
from .errors import ConfigurationError
from .frontend import FrontendConfig
from .gmmhmm import HMMConfig
from .models import ModelConfig
from .training import TrainConfig

PRESETS = ("desk", "paper-scale-validate")


@dataclass
class AlignerConfig:
    """Settings for the Gaussian-mixture alignment model and its EM run."""

    hmm: HMMConfig = field(default_factory=HMMConfig)
    iterations: int = 8
    mix_schedule: dict = field(default_factory=lambda: {4: 2})
    seed: int = 0

    def validate(self):
        if self.iterations < 1:
            raise ConfigurationError("aligner needs at least one EM iteration")
        for it, comps in self.mix_schedule.items():
            if int(it) < 0 or int(comps) < 1:
                raise ConfigurationError(
                    f"bad mix_schedule entry {it}: {comps}")
        if self.hmm.states_per_unit != 3:
            raise ConfigurationError("the senone inventory assumes 3 states per unit")
        return self


@dataclass
class StageTrainConfigs:
    """One TrainConfig per trainable stage."""

    audio: TrainConfig = field(default_factory=TrainConfig)
    video: TrainConfig = field(default_factory=TrainConfig)
    fusion: TrainConfig = field(default_factory=TrainConfig)
    lm: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        for name in ("audio", "video", "fusion", "lm"):
            getattr(self, name).validate()
        return self


@dataclass
class ExperimentConfig:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    gmm: AlignerConfig = field(default_factory=AlignerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: StageTrainConfigs = field(default_factory=StageTrainConfigs)
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    def validate(self):
        self.corpus.validate()
        self.gmm.validate()
        self.model.validate()
        self.train.validate()
        self.decode.validate()
        if self.model.frontend.feature_dim != self.corpus.feature_dim:
            raise ConfigurationError(
                f"frontend expects {self.model.frontend.feature_dim}-dim "
                f"features but the corpus produces {self.corpus.feature_dim}")
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["corpus"] = self.corpus.to_dict()
        d["model"]["frontend"]["stem_kernel"] = list(self.model.frontend.stem_kernel)
        d["gmm"]["mix_schedule"] = {str(k): int(v)
                                    for k, v in sorted(self.gmm.mix_schedule.items())}
        return d

    def hash(self):
        """Canonical content hash of the resolved configuration."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_seed(self, seed):
        """Copy with every stage seed (corpus, aligner, training) set to `seed`."""
        seed = int(seed)
        return dataclasses.replace(
            self,
            corpus=dataclasses.replace(self.corpus, seed=seed),
            gmm=dataclasses.replace(self.gmm, seed=seed),
            train=StageTrainConfigs(
                audio=dataclasses.replace(self.train.audio, seed=seed),
                video=dataclasses.replace(self.train.video, seed=seed),
                fusion=dataclasses.replace(self.train.fusion, seed=seed),
                lm=dataclasses.replace(self.train.lm, seed=seed)))


def desk_config():
    """Small setup that trains end to end on one machine in minutes."""
    # 16x16 video and batch 4 keep the video frontend's activation graph
    # small enough to train comfortably in a few GB of RAM
    stage = dict(peak_lr=2e-3, warmup_steps=40, batch_size=4,
                 label_smoothing=0.1, grad_clip=5.0)
    return ExperimentConfig(
        corpus=CorpusSpec(video_height=16, video_width=16),
        gmm=AlignerConfig(iterations=8, mix_schedule={4: 2}),
        model=ModelConfig(
            frontend=FrontendConfig(d_model=64, feature_dim=80,
                                    audio_channels=64, visual_channels=16,
                                    visual_blocks=2),
            conformer=ConformerConfig(d_model=64, n_head=4, d_ffn=256,
                                      conv_kernel=5, num_blocks=4),
            fusion=FusionConfig(variant="cmfe", num_early=2, num_late=2,
                                insert="inner", num_visual_blocks=2),
            decoder_layers=2, lm_layers=2, visual_pretrain_blocks=3),
        train=StageTrainConfigs(
            audio=TrainConfig(epochs=6, **stage),
            video=TrainConfig(epochs=6, **stage),
            fusion=TrainConfig(epochs=6, **stage),
            lm=TrainConfig(epochs=6, **stage)),
        decode=DecodeConfig(beam=4, w_ctc=0.3, w_lm=0.0))


def paper_scale_config():
    """Full-width geometry; exists to validate shapes and layer budgets.

    Construction at this width is expensive; the point of the preset is that
    loading it runs every structural check (insertion window, head split,
    stream widths) at the published dimensions.
    """
    cfg = desk_config()
    return dataclasses.replace(
        cfg,
        model=ModelConfig(
            frontend=FrontendConfig(d_model=512, feature_dim=80,
                                    audio_channels=64, visual_channels=64,
                                    visual_blocks=2),
            conformer=ConformerConfig(d_model=512, n_head=8, d_ffn=2048,
                                      conv_kernel=15, num_blocks=12),
            fusion=FusionConfig(variant="cmfe", num_early=2, num_late=10,
                                insert="inner", num_visual_blocks=2),
            decoder_layers=6, lm_layers=6, visual_pretrain_blocks=3,
            paper_scale=True))


_PRESET_BUILDERS = {"desk": desk_config, "paper-scale-validate": paper_scale_config}

# Section classes, used both to rebuild dataclasses from plain dicts and to
# reject unknown keys with a path that points at the offending line.
_SCHEMA = {
    ExperimentConfig: {"corpus": CorpusSpec, "gmm": AlignerConfig,
                       "model": ModelConfig, "train": StageTrainConfigs,
                       "decode": DecodeConfig},
    ModelConfig: {"frontend": FrontendConfig, "conformer": ConformerConfig,
                  "fusion": FusionConfig},
    StageTrainConfigs: {"audio": TrainConfig, "video": TrainConfig,
                        "fusion": TrainConfig, "lm": TrainConfig},
    AlignerConfig: {"hmm": HMMConfig},
}

_TUPLE_FIELDS = {"utterance_length_range", "duration_range", "stem_kernel"}


def _build_section(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path} must be a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(k for k in data if k not in names)
    if unknown:
        raise ConfigurationError(
            f"unknown config key(s) under {path}: {', '.join(unknown)}")
    nested = _SCHEMA.get(cls, {})
    kwargs = {}
    for key, value in data.items():
        here = f"{path}.{key}"
        if key in nested:
            kwargs[key] = _build_section(nested[key], value, here)
        elif key == "mix_schedule":
            if not isinstance(value, dict):
                raise ConfigurationError(f"{here} must be a mapping")
            kwargs[key] = {int(k): int(v) for k, v in value.items()}
        elif key in _TUPLE_FIELDS:
            kwargs[key] = tuple(value)
        elif isinstance(value, dict):
            raise ConfigurationError(f"{here} does not take a mapping")
        else:
            kwargs[key] = value
    return cls(**kwargs)


def _deep_merge(base, override, path):
    out = dict(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if (isinstance(value, dict) and isinstance(base.get(key), dict)
                and key != "mix_schedule"):     # schedules replace, not merge
            out[key] = _deep_merge(base[key], value, here)
        else:
            out[key] = value
    return out


def config_from_dict(data):
    """Build and validate an ExperimentConfig from a plain nested dict."""
    return _build_section(ExperimentConfig, data, "config").validate()


def load_config(path=None, preset="desk", seed=None):
    """Resolve a configuration: preset defaults, optional file, optional seed.

    The file only needs to mention what it changes; its sections are merged
    over the preset.  `seed` overrides every stage seed at once.
    """
    if preset not in _PRESET_BUILDERS:
        raise ConfigurationError(
            f"unknown preset {preset!r}; expected one of {sorted(_PRESET_BUILDERS)}")
    base = _PRESET_BUILDERS[preset]().to_dict()
    if path is not None:
        with open(path) as fh:
            overrides = yaml.safe_load(fh)
        if overrides is None:
            overrides = {}
        if not isinstance(overrides, dict):
            raise ConfigurationError(f"{path} must contain a mapping at top level")
        base = _deep_merge(base, overrides, "")
    cfg = config_from_dict(base)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg.validate()
