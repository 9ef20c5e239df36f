"""Command-line entry point: gen-data, fit-codec, train, convert, eval, plot.

All commands share one working directory (``--out``)::

    <out>/corpus/           generated corpus (tokens/ filled by fit-codec)
    <out>/codec.bin         codebooks
    <out>/train/            log.jsonl, periodic checkpoints, final.pt
    <out>/convert/<pair>/   frames.npy, pitch.npy, tokens.npy, meta.json
    <out>/eval/             records.jsonl, summary.json
    <out>/plots/            speaker.png, style.png

Exit status is 0 on success, 2 on usage errors and 1 on runtime errors.
"""

import argparse
import json
import os
import shutil
import sys

import numpy as np

from . import codec, synth_data
from .config import ConfigError, load_config

ABLATION_FLAGS = {"no_bottleneck": "use_bottleneck", "no_umadain": "use_umadain",
                  "no_adversarial": "use_adversarial"}


class UsageError(Exception):
    pass


def positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def parse_set(items):
    """``KEY=VALUE`` pairs; values are read as JSON when possible."""
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def build_config(args):
    overrides = parse_set(args.set)
    overrides["seed"] = args.seed
    for flag, key in ABLATION_FLAGS.items():
        if getattr(args, flag, False):
            overrides[key] = False
    return load_config(args.preset, args.config, overrides)


def _paths(args):
    out = args.out
    return {
        "corpus": getattr(args, "corpus", None) or os.path.join(out, "corpus"),
        "codec": getattr(args, "codec", None) or os.path.join(out, "codec.bin"),
        "train": os.path.join(out, "train"),
        "convert": os.path.join(out, "convert"),
        "eval": os.path.join(out, "eval"),
        "plots": os.path.join(out, "plots"),
    }


def _emit(record):
    print(json.dumps(record, sort_keys=True), flush=True)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_gen_data(args):
    root = _paths(args)["corpus"]
    if os.path.isdir(root) and os.listdir(root):
        if not args.force:
            raise UsageError(f"{root} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(root)
    manifest = synth_data.generate_corpus(
        root, args.speakers, args.styles, args.utts, seed=args.seed,
        heldout_speakers=args.heldout_speakers, heldout_styles=args.heldout_styles,
        noise_std=args.noise)
    corpus = synth_data.Corpus(root)
    counts = {name: len(corpus.split(name)) for name in sorted({r["split"] for r in corpus.rows})}
    _emit({"event": "gen-data", "manifest": manifest, "records": len(corpus), "splits": counts})
    return 0


def cmd_fit_codec(args):
    cfg = build_config(args)
    paths = _paths(args)
    corpus = synth_data.Corpus(paths["corpus"])
    frames = np.concatenate([corpus.frames(r["id"]) for r in corpus.rows])
    books = codec.fit_codebooks(frames, cfg.codec_levels, cfg.codec_vocab, seed=cfg.seed)
    codec.save_codebooks(paths["codec"], books, corpus.meta["frame_rate"])
    for row in corpus.rows:
        codec.save_tokens(corpus.path(row, "tokens"), codec.encode(corpus.frames(row["id"]), books))
    errors = [float(codec.reconstruction_error(frames, books, t).mean())
              for t in range(1, books.levels + 1)]
    _emit({"event": "fit-codec", "codec": paths["codec"], "levels": books.levels,
           "vocab": books.vocab_size, "mse_by_levels": errors})
    return 0


def _require_tokens(corpus):
    if not corpus.has_tokens():
        raise FileNotFoundError(f"{corpus.root}: token files missing, run fit-codec first")


def cmd_train(args):
    from .training import Trainer, load_train_items

    paths = _paths(args)
    corpus = synth_data.Corpus(paths["corpus"])
    _require_tokens(corpus)
    books, _ = codec.load_codebooks(paths["codec"])
    os.makedirs(paths["train"], exist_ok=True)
    log_path = os.path.join(paths["train"], "log.jsonl")
    if args.resume:
        trainer = Trainer.load(args.resume)
        if not np.array_equal(trainer.books, books.books):
            raise ValueError("checkpoint codebooks differ from the codec file")
        cfg = trainer.cfg
    else:
        cfg = build_config(args)
        if cfg.codec_levels != books.levels or cfg.codec_vocab != books.vocab_size:
            raise ValueError("config codec_levels/codec_vocab do not match the codec file")
        trainer = Trainer(cfg, books.books)
        _write_json(os.path.join(paths["train"], "config.json"), cfg.to_dict())
        # A fresh run starts a fresh log so repeated commands give identical files.
        if os.path.exists(log_path):
            os.remove(log_path)
    total = args.steps if args.steps is not None else cfg.train_steps
    remaining = total - trainer.step
    if remaining < 0:
        raise UsageError(f"checkpoint is already at step {trainer.step} > --steps {total}")
    items = load_train_items(corpus, corpus.split("train"))
    every = max(1, args.log_every)

    def progress(rec):
        if rec["step"] % every == 0 or rec["step"] == total:
            _emit({"event": "train", **rec})

    trainer.fit(items, remaining, log_path=log_path,
                checkpoint_dir=paths["train"], progress=progress)
    final = os.path.join(paths["train"], "final.pt")
    trainer.save(final)
    _emit({"event": "train-done", "checkpoint": final, "step": trainer.step})
    return 0


def _pair_name(source, prompt):
    return f"{source}__{prompt}"


def cmd_convert(args):
    import torch

    from .experiment import heldout_pairs
    from .training import load_model

    paths = _paths(args)
    corpus = synth_data.Corpus(paths["corpus"])
    _require_tokens(corpus)
    books, _ = codec.load_codebooks(paths["codec"])
    checkpoint = args.checkpoint or os.path.join(paths["train"], "final.pt")
    model, cfg = load_model(checkpoint)
    if not np.array_equal(model.latent_encoder.embed.books.numpy(), books.books.astype(np.float32)):
        raise ValueError("checkpoint was trained with different codebooks than the codec file")
    if args.config or args.set:
        wanted = build_config(args).to_dict()
        have = cfg.to_dict()
        clash = sorted(k for k in wanted if k not in ("seed", "decode_steps", "sampling_temperature")
                       and wanted[k] != have[k])
        if clash:
            raise ValueError(f"config does not match checkpoint: {', '.join(clash)}")
    if args.source or args.prompt:
        if not (args.source and args.prompt):
            raise UsageError("--source and --prompt must be given together")
        for utt in (args.source, args.prompt):
            if utt not in corpus.by_id:
                raise KeyError(f"unknown utterance id {utt!r}")
        pairs = [(args.source, args.prompt)]
    else:
        pairs = heldout_pairs(corpus, args.pairs, seed=args.seed)
    os.makedirs(paths["convert"], exist_ok=True)
    for k, (src, prm) in enumerate(pairs):
        gen = torch.Generator().manual_seed(args.seed * 100003 + k)
        out = model.convert(corpus.tokens(src), corpus.durations(src), corpus.tokens(prm),
                            generator=gen, decode_steps=args.decode_steps)
        frames = codec.decode(out["tokens"], books)
        pitch = synth_data.extract_pitch(frames)
        target = os.path.join(paths["convert"], _pair_name(src, prm))
        os.makedirs(target, exist_ok=True)
        np.save(os.path.join(target, "frames.npy"), frames)
        np.save(os.path.join(target, "pitch.npy"), pitch)
        np.save(os.path.join(target, "tokens.npy"), out["tokens"].astype(np.int32))
        meta = {"source": src, "prompt": prm, "checkpoint": checkpoint,
                "n_frames": int(frames.shape[0]),
                "durations": [int(d) for d in out["durations"]],
                "source_speaker": corpus.by_id[src]["speaker"],
                "source_style": corpus.by_id[src]["style"],
                "prompt_speaker": corpus.by_id[prm]["speaker"],
                "prompt_style": corpus.by_id[prm]["style"]}
        _write_json(os.path.join(target, "meta.json"), meta)
        _emit({"event": "convert", "pair": _pair_name(src, prm), "n_frames": meta["n_frames"]})
    return 0


def _converted(paths, corpus):
    root = paths["convert"]
    if not os.path.isdir(root):
        raise FileNotFoundError(f"{root}: no converted outputs, run convert first")
    items = []
    for name in sorted(os.listdir(root)):
        meta_path = os.path.join(root, name, "meta.json")
        if not os.path.exists(meta_path):
            continue
        with open(meta_path) as fh:
            meta = json.load(fh)
        frames = np.load(os.path.join(root, name, "frames.npy"))
        items.append((meta, frames))
    if not items:
        raise FileNotFoundError(f"{root}: no converted outputs, run convert first")
    return items


def cmd_eval(args):
    from .experiment import score_pair
    from .metrics import aggregate

    paths = _paths(args)
    corpus = synth_data.Corpus(paths["corpus"])
    os.makedirs(paths["eval"], exist_ok=True)
    records = []
    with open(os.path.join(paths["eval"], "records.jsonl"), "w") as fh:
        for meta, frames in _converted(paths, corpus):
            rec = score_pair(corpus, meta["source"], meta["prompt"], frames)
            records.append(rec)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            _emit({"event": "eval", **rec})
    summary = aggregate(records)
    _write_json(os.path.join(paths["eval"], "summary.json"), summary)
    _emit({"event": "eval-summary", **summary})
    return 0


def cmd_plot(args):
    from . import plotting

    paths = _paths(args)
    corpus = synth_data.Corpus(paths["corpus"])
    items = _converted(paths, corpus)
    os.makedirs(paths["plots"], exist_ok=True)
    views = args.views.split(",") if args.views else list(plotting.VIEWS)
    bad = [v for v in views if v not in plotting.VIEWS]
    if bad:
        raise UsageError(f"unknown plot views {bad}; choose from {list(plotting.VIEWS)}")
    written = []
    for view in views:
        if view == "speaker":
            # Sources before conversion vs converted outputs, coloured by source speaker.
            before = [plotting.speaker_features(corpus.frames(m["source"])) for m, _ in items]
            after = [plotting.speaker_features(f) for _, f in items]
            lb = la = [m["source_speaker"] for m, _ in items]
            title = "speaker features (time-averaged frames)"
        else:
            # Sources coloured by their own style vs outputs coloured by the prompt style.
            before = [plotting.contour_features(corpus.pitch(m["source"])) for m, _ in items]
            after = [plotting.contour_features(synth_data.extract_pitch(f)) for _, f in items]
            lb = [m["source_style"] for m, _ in items]
            la = [m["prompt_style"] for m, _ in items]
            title = "style features (normalized pitch contour)"
        path = os.path.join(paths["plots"], f"{view}.png")
        plotting.scatter_before_after(np.array(before), np.array(after), lb, la, title, path)
        written.append(path)
        _emit({"event": "plot", "view": view, "path": path})
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="voxstyle", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON config file (overrides the preset)")
    parser.add_argument("--preset", choices=["desk", "full"], default="desk")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="run", help="working directory")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable; wins over --config)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--speakers", type=positive_int, default=5)
    p.add_argument("--styles", type=positive_int, default=4)
    p.add_argument("--utts", type=positive_int, default=10, help="utterances per speaker and style")
    p.add_argument("--heldout-speakers", type=int, default=1)
    p.add_argument("--heldout-styles", type=int, default=1)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("fit-codec", help="fit codebooks and tokenize the corpus")
    p.add_argument("--corpus")
    p.add_argument("--codec")
    p.set_defaults(func=cmd_fit_codec)

    p = sub.add_parser("train", help="train the conversion model")
    p.add_argument("--corpus")
    p.add_argument("--codec")
    p.add_argument("--steps", type=positive_int, help="total step count (default: train_steps)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--no-bottleneck", action="store_true")
    p.add_argument("--no-umadain", action="store_true")
    p.add_argument("--no-adversarial", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", help="zero-shot conversion of corpus utterances")
    p.add_argument("--corpus")
    p.add_argument("--codec")
    p.add_argument("--checkpoint")
    p.add_argument("--source", help="source utterance id")
    p.add_argument("--prompt", help="prompt utterance id")
    p.add_argument("--pairs", type=positive_int, default=60,
                   help="number of held-out pairs when no --source/--prompt is given")
    p.add_argument("--decode-steps", type=positive_int)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("eval", help="score converted outputs")
    p.add_argument("--corpus")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="2-D projections before/after conversion")
    p.add_argument("--corpus")
    p.add_argument("--views", help="comma list of: speaker, style")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"voxstyle {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"voxstyle {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
