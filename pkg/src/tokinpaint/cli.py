"""Command-line entry point: ``tokinpaint <command> ...``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
Every command writes its fully resolved configuration next to its output
(``<out>.config.ini`` for files, ``config.ini`` inside output directories).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from . import inpaint as inpaint_mod
from . import metrics, synth, token_codec, trainer
from .config import RunConfig
from .errors import DataError, TokinpaintError, UsageError
from .score_net import network_from_container, read_container

log = logging.getLogger("tokinpaint")


def _write_config(cfg, out, is_dir=False):
    out = Path(out)
    target = out / "config.ini" if is_dir else out.with_name(out.name + ".config.ini")
    target.write_text(cfg.resolved())
    log.info("resolved config:\n%s", cfg.resolved())


def _out(path):
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _require_dir(path):
    p = Path(path)
    if not p.is_dir():
        raise DataError(f"directory not found: {p}")
    return p


def _require_file(path):
    p = Path(path)
    if not p.is_file():
        raise DataError(f"file not found: {p}")
    return p


def _load_corpus_wavs(directory):
    files = sorted(_require_dir(directory).glob("*.wav"))
    if not files:
        raise DataError(f"no .wav files in {directory}")
    return [token_codec.read_wav(f) for f in files]


def load_model(path):
    header, tensors = read_container(_require_file(path))
    return network_from_container(header, tensors)


# -- commands --------------------------------------------------------------------


def cmd_synth(args, cfg):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    clips = synth.tone_corpus(args.clips, args.duration, cfg["codec"]["sample_rate"], seed=cfg.seed)
    for i, w in enumerate(clips):
        token_codec.write_wav(out / f"clip_{i:04d}.wav", w)
    _write_config(cfg, out, is_dir=True)


def cmd_train_codec(args, cfg):
    corpus = _load_corpus_wavs(args.corpus_dir)
    c = cfg["codec"]
    codec = token_codec.train_codebook(
        corpus, c["frame_length"], c["hop_length"], c["vocab_size"], seed=cfg.seed,
        iterations=c["iterations"], workers=args.threads,
    )
    token_codec.save_codec(codec, _out(args.out))
    token_codec.load_codec(args.out)
    _write_config(cfg, args.out)


def cmd_encode(args, cfg):
    codec = token_codec.load_codec(_require_file(args.codec))
    tokens = token_codec.encode(token_codec.read_wav(_require_file(args.wav)), codec)
    token_codec.export_tokens(tokens, _out(args.out))
    _write_config(cfg, args.out)


def cmd_decode(args, cfg):
    codec = token_codec.load_codec(_require_file(args.codec))
    tokens = token_codec.import_tokens(_require_file(args.tokens))
    token_codec.write_wav(_out(args.out), token_codec.decode(tokens, codec))
    _write_config(cfg, args.out)


def _token_corpus(directory, codec_path):
    d = _require_dir(directory)
    seqs = [token_codec.import_tokens(p) for p in sorted(d.glob("*.tok"))]
    if codec_path is not None:
        codec = token_codec.load_codec(_require_file(codec_path))
        seqs += [token_codec.encode(token_codec.read_wav(p), codec) for p in sorted(d.glob("*.wav"))]
    if not seqs:
        raise DataError(f"no token streams (*.tok) in {d}")
    vocab = {s.vocab_size for s in seqs}
    if len(vocab) != 1:
        raise DataError(f"token streams disagree on vocab size: {sorted(vocab)}")
    if any(s.has_mask for s in seqs):
        raise DataError("training token streams must not contain MASK")
    return seqs, vocab.pop()


def cmd_train(args, cfg):
    seqs, vocab = _token_corpus(args.corpus_dir, args.codec)
    out = Path(args.out_dir)
    if args.resume:
        state = trainer.resume(_require_file(args.resume))
        if args.steps is not None:
            state.config.total_steps = args.steps
    else:
        tc = cfg.train_config()
        if args.steps is not None:
            tc.total_steps = args.steps
        state = trainer.new_state(cfg.model_config(vocab), tc, cfg.schedule())
    out.mkdir(parents=True, exist_ok=True)
    _write_config(cfg, out, is_dir=True)
    trainer.train(state, seqs, out_dir=out)


def cmd_corrupt(args, cfg):
    w = token_codec.read_wav(_require_file(args.wav))
    corrupted, gaps = inpaint_mod.make_corrupted(w, args.gap_ms, args.n_gaps)
    token_codec.write_wav(_out(args.out), corrupted)
    gaps.save(_out(args.gaps_out or str(args.out) + ".gaps.json"))
    _write_config(cfg, args.out)


def cmd_inpaint(args, cfg):
    w = token_codec.read_wav(_require_file(args.wav))
    gaps = inpaint_mod.GapSpec.load(_require_file(args.gaps))
    codec = token_codec.load_codec(_require_file(args.codec))
    net = load_model(args.checkpoint)
    p = cfg["inpaint"]
    steps = args.steps if args.steps is not None else p["steps"]
    result = inpaint_mod.inpaint(
        w, gaps, codec, net, cfg.schedule(), steps=steps, seed=cfg.seed,
        context=p["context"], crossfade_ms=p["crossfade_ms"],
    )
    token_codec.write_wav(_out(args.out), result.waveform)
    _write_config(cfg, args.out)


def cmd_eval(args, cfg):
    gaps = [int(g) for g in args.gaps_ms.split(",")] if args.gaps_ms else cfg.gaps_ms()
    params = metrics.SpectrogramParams(cfg["metrics"]["window"], cfg["metrics"]["hop"])
    rows = metrics.evaluate_protocol(_require_dir(args.clean_dir), _require_dir(args.restored_dir), gaps, params=params)
    metrics.write_results(rows, _out(args.out))
    _write_config(cfg, args.out)


def cmd_config(args, cfg):
    sys.stdout.write(cfg.resolved())


# -- parser ----------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run-config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="config override")
    common.add_argument("--seed", type=int, help="root seed for every random stream (overrides run.seed)")
    common.add_argument("--threads", type=int, default=1, help="worker thread cap")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tokinpaint", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic tone-mixture corpus")
    s.add_argument("out_dir")
    s.add_argument("--clips", type=int, default=20)
    s.add_argument("--duration", type=float, default=4.17)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train-codec", parents=[common], help="fit the k-means frame codec")
    s.add_argument("corpus_dir")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_codec)

    s = sub.add_parser("encode", parents=[common], help="WAV -> token stream")
    s.add_argument("wav")
    s.add_argument("--codec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("decode", parents=[common], help="token stream -> WAV")
    s.add_argument("tokens")
    s.add_argument("--codec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("train", parents=[common], help="train the score network")
    s.add_argument("corpus_dir", help="directory of .tok streams (or .wav with --codec)")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--codec", help="encode .wav files in corpus_dir with this codec")
    s.add_argument("--resume", help="training checkpoint to continue from")
    s.add_argument("--steps", type=int, help="override trainer.total_steps")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("corrupt", parents=[common], help="silence evenly spaced gaps")
    s.add_argument("wav")
    s.add_argument("--gap-ms", type=float, required=True)
    s.add_argument("--n-gaps", type=int, default=4)
    s.add_argument("--out", required=True)
    s.add_argument("--gaps-out", help="GapSpec JSON path (default <out>.gaps.json)")
    s.set_defaults(func=cmd_corrupt)

    s = sub.add_parser("inpaint", parents=[common], help="restore gaps with the trained model")
    s.add_argument("wav")
    s.add_argument("--gaps", required=True)
    s.add_argument("--codec", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_inpaint)

    s = sub.add_parser("eval", parents=[common], help="LSD / Frechet table per gap length")
    s.add_argument("clean_dir")
    s.add_argument("restored_dir", help="contains <gap>ms/<name>.wav")
    s.add_argument("--gaps-ms", help="comma-separated gap lengths (default metrics.gaps_ms)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("config", parents=[common], help="print the resolved configuration")
    s.set_defaults(func=cmd_config)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"run.seed={args.seed}")
        cfg = RunConfig.load(args.config, overrides)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        torch.set_num_threads(args.threads)
        args.func(args, cfg)
    except TokinpaintError as e:
        print(f"tokinpaint {args.command}: {e}", file=sys.stderr)
        diag = getattr(e, "diagnostics", None)
        if diag:
            print(f"diagnostics: {diag}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"tokinpaint {args.command}: {e}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
