"""Command-line pipeline: corpus synthesis through decoding and reports.

Subcommands mirror the pipeline stages.  Each takes the same global flags
(--config, --run-dir, --seed, --preset) and reads or writes artifacts under
the run directory; every artifact embeds the hash of the resolved
configuration.  Stages that produce artifacts refuse to write into a run
directory created under a different config.  Stages that only consume
(decode, rover, inspect-embeddings) warn on hash mismatches; eval refuses
to score hypotheses against references from a different config unless
--force is given.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import PRESETS, load_config
from .corpus import (generate_corpus, load_corpus, normalize_utterance,
                     read_alignments, read_manifest, save_corpus,
                     write_alignments)
from .decoding import decode_corpus, evaluate, read_hypotheses, rover, write_hypotheses
from .errors import (AlignmentInfeasibleError, ConfigurationError,
                     DegenerateInputError, StageError, TrainingError)
from .gmmhmm import (align_corpus, boundary_accuracy, em_train, flat_start,
                     load_hmm, save_hmm)
from .models import (build_audio_model, build_fusion_model, build_lm,
                     build_visual_model)
from .training import load_checkpoint, run_stage, train_lm


def _warn(msg):
    print(f"warning: {msg}", file=sys.stderr)


def _env_int(name):
    value = os.environ.get(name)
    return None if value is None else int(value)


def _common_flags(p):
    p.add_argument("--config", metavar="PATH", default=None,
                   help="YAML file merged over the preset (partial files are fine)")
    p.add_argument("--run-dir", metavar="PATH",
                   default=os.environ.get("AVSRKIT_RUN_DIR", "runs/default"),
                   help="artifact directory (env: AVSRKIT_RUN_DIR)")
    p.add_argument("--seed", type=int, default=_env_int("AVSRKIT_SEED"),
                   help="override every stage seed at once (env: AVSRKIT_SEED)")
    p.add_argument("--preset", choices=PRESETS, default="desk",
                   help="base configuration (default: desk)")


def _resolve(args):
    cfg = load_config(args.config, preset=args.preset, seed=args.seed)
    return cfg, cfg.hash(), Path(args.run_dir)


def _check_run_dir(run_dir, cfg, chash, producer):
    """Pin a run directory to one config hash.

    Producers write the resolved config on first use and refuse to continue
    a run that was started under a different config; consumers only warn.
    """
    run_dir.mkdir(parents=True, exist_ok=True)
    marker = run_dir / "config.json"
    recorded = None
    if marker.exists():
        try:
            recorded = json.loads(marker.read_text()).get("config_hash")
        except json.JSONDecodeError:
            recorded = "<unreadable>"
    if recorded is not None and recorded != chash:
        msg = (f"run dir {run_dir} holds artifacts for config "
               f"{str(recorded)[:12]} but this invocation resolved to {chash[:12]}")
        if producer:
            raise StageError(msg + "; pick a fresh --run-dir or restore the config")
        _warn(msg)
        return
    if producer:
        marker.write_text(json.dumps({"config_hash": chash, "config": cfg.to_dict()},
                                     indent=2, sort_keys=True) + "\n")


def _expect_hash(found, chash, what):
    if found != chash:
        _warn(f"{what} carries config hash {str(found)[:12]}, "
              f"current config is {chash[:12]}")


def _load_run_corpus(run_dir):
    corpus_dir = run_dir / "corpus"
    if not (corpus_dir / "spec.bin").exists():
        raise StageError(f"no corpus under {corpus_dir}; run `avsrkit make-data` first")
    return load_corpus(corpus_dir)


def _cmd_make_data(args):
    cfg, chash, run_dir = _resolve(args)
    _check_run_dir(run_dir, cfg, chash, producer=True)
    corpus = generate_corpus(cfg.corpus)
    out = run_dir / "corpus"
    save_corpus(corpus, out, config_hash=chash)
    frames = sum(u.audio.num_frames for u in corpus.utterances)
    print(f"wrote {len(corpus.train)} train / {len(corpus.test)} test utterances "
          f"({frames} audio frames) under {out}")
    return 0


def _cmd_train_gmm(args):
    cfg, chash, run_dir = _resolve(args)
    _check_run_dir(run_dir, cfg, chash, producer=True)
    corpus = _load_run_corpus(run_dir)
    model = flat_start(corpus, cfg.gmm.hmm)
    model, history = em_train(model, corpus, cfg.gmm.iterations,
                              mix_schedule=cfg.gmm.mix_schedule,
                              rng=np.random.default_rng(cfg.gmm.seed))
    out = run_dir / "gmm.ckpt"
    save_hmm(out, model, meta={"config_hash": chash})
    with open(run_dir / "train_gmm.metrics.jsonl", "w") as f:
        f.write(json.dumps({"stage": "train_gmm", "config_hash": chash,
                            "seed": cfg.gmm.seed}) + "\n")
        for record in history:
            f.write(json.dumps(record) + "\n")
    print(f"EM objective {history[-1]['objective']:.3f} after "
          f"{len(history)} iterations "
          f"({history[-1]['num_components']} components/state) -> {out}")
    return 0


def _cmd_align(args):
    cfg, chash, run_dir = _resolve(args)
    _check_run_dir(run_dir, cfg, chash, producer=True)
    corpus = _load_run_corpus(run_dir)
    hmm_path = run_dir / "gmm.ckpt"
    if not hmm_path.exists():
        raise StageError(f"no alignment model at {hmm_path}; "
                         "run `avsrkit train-gmm` first")
    model, meta = load_hmm(hmm_path)
    _expect_hash(meta.get("config_hash"), chash, f"alignment model {hmm_path}")
    labels = align_corpus(model, corpus.utterances)
    out = run_dir / "alignments.txt"
    write_alignments(out, {uid: al.labels for uid, al in labels.items()},
                     meta={"config_hash": chash})
    accs = [boundary_accuracy(u.gold_alignment, labels[u.id].labels)
            for u in corpus.train]
    print(f"aligned {len(labels)} utterances "
          f"(train boundary accuracy {float(np.mean(accs)):.3f}) -> {out}")
    return 0


def _cmd_pretrain_audio(args):
    cfg, chash, run_dir = _resolve(args)
    _check_run_dir(run_dir, cfg, chash, producer=True)
    corpus = _load_run_corpus(run_dir)
    result = run_stage("pretrain_audio", corpus, cfg.model, cfg.train.audio,
                       run_dir, config_hash=chash)
    print(f"pretrain_audio: {result.steps} steps, final loss "
          f"{result.final_loss:.4f} -> {result.checkpoint_path}")
    return 0


def _cmd_pretrain_video(args):
    cfg, chash, run_dir = _resolve(args)
    _check_run_dir(run_dir, cfg, chash, producer=True)
    corpus = _load_run_corpus(run_dir)
    apath = Path(args.alignments) if args.alignments else run_dir / "alignments.txt"
    if not apath.exists():
        raise StageError(f"no alignments at {apath}; run `avsrkit align` first "
                         "(or point --alignments at a label file)")
    alignments, meta = read_alignments(apath)
    if meta.get("config_hash") != chash:
        raise StageError(f"alignments {apath} carry config hash "
                         f"{str(meta.get('config_hash'))[:12]} but this run is "
                         f"{chash[:12]}; re-run `avsrkit align`")
    result = run_stage("pretrain_video", corpus, cfg.model, cfg.train.video,
                       run_dir, alignments=alignments, config_hash=chash)
    print(f"pretrain_video: {result.steps} steps, final loss "
          f"{result.final_loss:.4f} -> {result.checkpoint_path}")
    return 0


def _load_init(path, expected_stage, chash):
    path = Path(path)
    if not path.exists():
        cmd = expected_stage.replace("_", "-")
        raise StageError(f"no checkpoint at {path}; run `avsrkit {cmd}` first")
    arrays, meta = load_checkpoint(path)
    if meta.get("stage") != expected_stage:
        raise StageError(f"{path} is a {meta.get('stage')!r} checkpoint; "
                         f"expected {expected_stage}")
    if meta.get("config_hash") != chash:
        raise StageError(f"checkpoint {path} carries config hash "
                         f"{str(meta.get('config_hash'))[:12]} but this run is "
                         f"{chash[:12]}")
    return arrays


def _cmd_train_fusion(args):
    cfg, chash, run_dir = _resolve(args)
    _check_run_dir(run_dir, cfg, chash, producer=True)
    corpus = _load_run_corpus(run_dir)
    audio_init = (_load_init(args.audio_init, "pretrain_audio", chash)
                  if args.audio_init else None)
    video_init = (_load_init(args.video_init, "pretrain_video", chash)
                  if args.video_init else None)
    result = run_stage("finetune_fusion", corpus, cfg.model, cfg.train.fusion,
                       run_dir, audio_init=audio_init, video_init=video_init,
                       config_hash=chash)
    inits = [name for name, used in
             (("audio", audio_init), ("video", video_init)) if used is not None]
    print(f"finetune_fusion ({cfg.model.fusion.variant}, "
          f"init: {'+'.join(inits) if inits else 'scratch'}): "
          f"{result.steps} steps, final loss {result.final_loss:.4f} "
          f"-> {result.checkpoint_path}")
    return 0


def _cmd_train_lm(args):
    cfg, chash, run_dir = _resolve(args)
    _check_run_dir(run_dir, cfg, chash, producer=True)
    corpus = _load_run_corpus(run_dir)
    result = train_lm(corpus, cfg.model, cfg.train.lm, run_dir,
                      config_hash=chash)
    print(f"train_lm: {result.steps} steps, final loss "
          f"{result.final_loss:.4f} -> {result.checkpoint_path}")
    return 0


def _cmd_decode(args):
    cfg, chash, run_dir = _resolve(args)
    _check_run_dir(run_dir, cfg, chash, producer=False)
    corpus = _load_run_corpus(run_dir)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else run_dir / "finetune_fusion.ckpt"
    if not ckpt_path.exists():
        raise StageError(f"no checkpoint at {ckpt_path}; run `avsrkit train-fusion` "
                         "first (or pass --checkpoint)")
    arrays, meta = load_checkpoint(ckpt_path)
    _expect_hash(meta.get("config_hash"), chash, f"checkpoint {ckpt_path}")
    stage = meta.get("stage")
    vocab = cfg.corpus.num_units
    if stage == "pretrain_audio":
        model = build_audio_model(cfg.model, vocab, 0)
    elif stage == "finetune_fusion":
        model = build_fusion_model(cfg.model, vocab, 0)
    else:
        raise StageError(f"cannot decode with a {stage!r} checkpoint")
    model.load_state_arrays(arrays)

    lm = None
    if args.lm:
        lm_arrays, lm_meta = load_checkpoint(args.lm)
        if lm_meta.get("stage") != "train_lm":
            raise StageError(f"{args.lm} is not a language-model checkpoint")
        _expect_hash(lm_meta.get("config_hash"), chash, f"checkpoint {args.lm}")
        lm = build_lm(cfg.model, vocab, 0)
        lm.load_state_arrays(lm_arrays)

    def encode_fn(u):
        feats = normalize_utterance(u.audio).frames[None]
        if stage == "pretrain_audio":
            memory, out_lengths = model.encode(feats, [u.audio.num_frames])
        else:
            memory, out_lengths = model.encode(feats, [u.audio.num_frames],
                                               u.video.frames[None],
                                               [u.video.num_frames])
        return memory, int(out_lengths[0])

    utts = corpus.test if args.split == "test" else corpus.train
    entries = decode_corpus(utts, encode_fn, model.ctc_head, model.decoder,
                            cfg.decode, lm=lm)
    tag = args.tag or ckpt_path.stem
    out = run_dir / f"hyps_{tag}.txt"
    write_hypotheses(out, entries, meta={"config_hash": chash,
                                         "checkpoint": ckpt_path.name,
                                         "split": args.split})
    print(f"decoded {len(entries)} {args.split} utterances "
          f"(beam {cfg.decode.beam}) -> {out}")
    return 0


def _cmd_rover(args):
    cfg, chash, run_dir = _resolve(args)
    _check_run_dir(run_dir, cfg, chash, producer=False)
    if len(args.inputs) < 2:
        raise StageError(f"rover needs at least 2 hypothesis files, "
                         f"got {len(args.inputs)}")
    systems = []
    for path in args.inputs:
        if not Path(path).exists():
            raise StageError(f"no hypothesis file at {path}")
        hyps, meta = read_hypotheses(path)
        _expect_hash(meta.get("config_hash"), chash, f"hypotheses {path}")
        systems.append(hyps)
    ids = list(systems[0])
    for path, hyps in zip(args.inputs[1:], systems[1:]):
        if set(hyps) != set(ids):
            raise StageError(f"{path} covers a different utterance set "
                             f"than {args.inputs[0]}")
    entries = [(uid, 0.0, rover([list(h[uid][1]) for h in systems]))
               for uid in ids]
    out = run_dir / f"hyps_{args.tag}.txt"
    write_hypotheses(out, entries, meta={"config_hash": chash,
                                         "systems": len(systems)})
    print(f"combined {len(systems)} systems over {len(entries)} utterances -> {out}")
    return 0


def _cmd_eval(args):
    cfg, chash, run_dir = _resolve(args)
    _check_run_dir(run_dir, cfg, chash, producer=False)
    hyp_path = Path(args.hyp)
    if not hyp_path.exists():
        raise StageError(f"no hypothesis file at {hyp_path}; run `avsrkit decode` first")
    hyps, hmeta = read_hypotheses(hyp_path)
    split = hmeta.get("split", "test")
    manifest = run_dir / "corpus" / f"{split}.tsv"
    if not manifest.exists():
        raise StageError(f"no corpus manifest at {manifest}; run `avsrkit make-data` first")
    records, cmeta = read_manifest(manifest)
    if hmeta.get("config_hash") != cmeta.get("config_hash") and not args.force:
        raise StageError(
            f"hypotheses {hyp_path} carry config hash "
            f"{str(hmeta.get('config_hash'))[:12]} but the reference corpus was "
            f"built under {str(cmeta.get('config_hash'))[:12]}; pass --force to "
            "score anyway")
    refs = {uid: list(tokens) for uid, _, tokens in records}
    report = evaluate(refs, {uid: toks for uid, (_, toks) in hyps.items()})
    tag = hyp_path.stem
    if tag.startswith("hyps_"):
        tag = tag[len("hyps_"):]
    out = run_dir / f"eval_{tag}.json"
    out.write_text(json.dumps({"config_hash": chash, "hypotheses": hyp_path.name,
                               "split": split,
                               "overall_cer": report["overall_cer"],
                               "per_utt": report["per_utt"]},
                              indent=2, sort_keys=True) + "\n")
    print(f"CER {report['overall_cer']:.4f} over {len(refs)} {split} "
          f"utterances -> {out}")
    return 0


def _pca_2d(x):
    """Deterministic 2-component projection (largest-|loading| sign fix)."""
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / max(1, len(centered) - 1)
    _, vecs = np.linalg.eigh(cov)
    w = vecs[:, [-1, -2]].copy()
    for j in range(w.shape[1]):
        k = int(np.argmax(np.abs(w[:, j])))
        if w[k, j] < 0:
            w[:, j] = -w[:, j]
    return centered @ w


def _cmd_inspect_embeddings(args):
    cfg, chash, run_dir = _resolve(args)
    _check_run_dir(run_dir, cfg, chash, producer=False)
    corpus = _load_run_corpus(run_dir)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else run_dir / "pretrain_video.ckpt"
    if not ckpt_path.exists():
        raise StageError(f"no checkpoint at {ckpt_path}; run `avsrkit pretrain-video` "
                         "first (or pass --checkpoint)")
    arrays, meta = load_checkpoint(ckpt_path)
    _expect_hash(meta.get("config_hash"), chash, f"checkpoint {ckpt_path}")
    stage = meta.get("stage")
    vocab = cfg.corpus.num_units
    if stage == "pretrain_video":
        model = build_visual_model(cfg.model, 3 * vocab, 0)
    elif stage == "finetune_fusion" and cfg.model.fusion.variant != "audio_only":
        model = build_fusion_model(cfg.model, vocab, 0)
    else:
        raise StageError(f"{ckpt_path} has no visual frontend to inspect")
    model.load_state_arrays(arrays)

    utts = (corpus.train if args.split == "train" else corpus.test)[:args.num_utts]
    embeddings, states = [], []
    for u in utts:
        e = model.visual_frontend(u.video.frames[None]).data[0]
        embeddings.append(e)
        states.append(u.gold_alignment[::4][:len(e)])
    x = np.concatenate(embeddings)
    senones = np.concatenate(states)
    projected = _pca_2d(x)

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    out = Path(args.out) if args.out else run_dir / "embeddings.png"
    fig, ax = plt.subplots(figsize=(6.0, 5.0))
    sc = ax.scatter(projected[:, 0], projected[:, 1], c=senones, s=12,
                    cmap="viridis", vmin=0, vmax=3 * vocab - 1)
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    ax.set_title(f"video frame embeddings ({len(x)} frames, "
                 f"{len(utts)} utterances)")
    fig.colorbar(sc, ax=ax, label="subword state")
    fig.tight_layout()
    fig.savefig(out, dpi=120, metadata={"Software": None})
    plt.close(fig)
    print(f"projected {len(x)} video frames -> {out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="avsrkit",
        description="audio-visual speech recognition pipeline on a synthetic corpus")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        _common_flags(p)
        p.set_defaults(func=fn)
        return p

    add("make-data", _cmd_make_data, "synthesize and save the paired corpus")
    add("train-gmm", _cmd_train_gmm, "EM-train the Gaussian alignment model")
    add("align", _cmd_align, "write forced alignments for all utterances")
    add("pretrain-audio", _cmd_pretrain_audio, "pre-train the audio recognizer")

    p = add("pretrain-video", _cmd_pretrain_video,
            "pre-train the video frame classifier on alignment labels")
    p.add_argument("--alignments", metavar="PATH", default=None,
                   help="label file (default: <run-dir>/alignments.txt)")

    p = add("train-fusion", _cmd_train_fusion, "train the audio-visual recognizer")
    p.add_argument("--audio-init", metavar="PATH", default=None,
                   help="audio pre-training checkpoint (omit to start that "
                        "branch from scratch)")
    p.add_argument("--video-init", metavar="PATH", default=None,
                   help="video pre-training checkpoint (omit to start that "
                        "branch from scratch)")

    add("train-lm", _cmd_train_lm, "train the token language model")

    p = add("decode", _cmd_decode, "beam-search decode a split")
    p.add_argument("--checkpoint", metavar="PATH", default=None,
                   help="model to decode with (default: <run-dir>/finetune_fusion.ckpt)")
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--lm", metavar="PATH", default=None,
                   help="language-model checkpoint for shallow fusion")
    p.add_argument("--tag", default=None,
                   help="output name: hyps_<tag>.txt (default: checkpoint stem)")

    p = add("rover", _cmd_rover, "majority-vote combination of hypothesis files")
    p.add_argument("--inputs", metavar="PATH", nargs="+", required=True)
    p.add_argument("--tag", default="rover", help="output name: hyps_<tag>.txt")

    p = add("eval", _cmd_eval, "score a hypothesis file against the corpus")
    p.add_argument("--hyp", metavar="PATH", required=True)
    p.add_argument("--force", action="store_true",
                   help="score even if config hashes disagree")

    p = add("inspect-embeddings", _cmd_inspect_embeddings,
            "scatter-plot video frame embeddings colored by subword state")
    p.add_argument("--checkpoint", metavar="PATH", default=None,
                   help="model with a visual frontend "
                        "(default: <run-dir>/pretrain_video.ckpt)")
    p.add_argument("--out", metavar="PATH", default=None,
                   help="image path (default: <run-dir>/embeddings.png)")
    p.add_argument("--num-utts", type=int, default=8)
    p.add_argument("--split", choices=("train", "test"), default="train")
    return parser


_FAILURES = (ConfigurationError, DegenerateInputError, TrainingError,
             AlignmentInfeasibleError, StageError, OSError)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _FAILURES as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
