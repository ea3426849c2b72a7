"""Command-line entry point: ``cifvgs <command> ...``.

Exit codes: 0 success, 1 invalid input (nothing written), 2 failure at run time.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path


from . import checkpoint as ckpt
from .checks import TOLERANCE, gradient_suite
from .datagen import ManifestError, build_vocab, generate_corpus, load_vocab, write_corpus
from .encoders import ConfigurationError
from .evaluate import format_keyword_table, format_retrieval_table, json_lines
from .pipeline import (
    ClipConfig,
    embed_split,
    keyword_report,
    load_clip,
    load_run,
    load_splits,
    parse_config,
    pretrain_toy_clip,
    segment_table,
    speech_image_retrieval,
    train,
    word_report,
)


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _int_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("values must be positive integers")
    return values


def _need_dir(path, what):
    if not Path(path).is_dir():
        raise ValidationError(f"{what} not found: {path}")


def _need_file(path, what):
    if not Path(path).is_file():
        raise ValidationError(f"{what} not found: {path}")


def _out(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands -----------------------------------------------------------------------


def cmd_generate_data(args):
    if args.n_scenes < 10:
        raise ValidationError("--n-scenes must be at least 10")
    vocab = build_vocab(args.seed, n_words=args.n_words)
    splits = generate_corpus(vocab, args.seed, args.n_scenes)
    write_corpus(_out(args.out), vocab, splits)
    print(" ".join(f"{k}={len(v)}" for k, v in splits.items()))


def cmd_pretrain_clip(args):
    _need_dir(args.data, "data directory")
    cfg = ClipConfig(seed=args.seed, steps=args.steps)
    vocab = load_vocab(args.data)
    splits = load_splits(args.data, ("train", "dev"))
    clip, history = pretrain_toy_clip(vocab, splits["train"], splits["dev"], cfg)
    out = _out(args.out)
    ckpt.save_checkpoint(out / "clip.ckpt", clip.state_arrays())
    rows = ["step,loss,dev_r1"] + [f"{s},{l!r},{r!r}" for s, l, r in history]
    (out / "clip_history.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(f"dev text->image R@1 {history[-1][2]:.4f}")


def cmd_train(args):
    if args.config:
        _need_file(args.config, "config file")
    text = Path(args.config).read_text("utf-8") if args.config else ""
    try:
        cfg = parse_config(text)
    except (ConfigurationError, TypeError) as e:
        raise ValidationError(str(e)) from None
    # flags win over the file
    overrides = {"seed": args.seed}
    if args.variant:
        overrides["variant"] = args.variant
    if args.data:
        overrides["data_dir"] = args.data
    if args.clip:
        overrides["clip_checkpoint"] = args.clip
    try:
        cfg = dataclasses.replace(cfg, **overrides)
    except ConfigurationError as e:
        raise ValidationError(str(e)) from None
    if not cfg.data_dir or not cfg.clip_checkpoint:
        raise ValidationError("data_dir and clip_checkpoint must be set by config or flags")
    _need_dir(cfg.data_dir, "data directory")
    _need_file(cfg.clip_checkpoint, "CLIP checkpoint")
    cfg = dataclasses.replace(cfg, data_dir=str(Path(cfg.data_dir).resolve()),
                              clip_checkpoint=str(Path(cfg.clip_checkpoint).resolve()))
    vocab = load_vocab(cfg.data_dir)
    splits = load_splits(cfg.data_dir, ("train", "dev"))
    clip = load_clip(cfg.clip_checkpoint, vocab)
    result = train(cfg, clip, vocab, splits["train"], splits["dev"], out_dir=args.out)
    print(f"best dev metric {result.best_metric:.4f} at step {result.best_step}")


def _load_for_eval(args):
    _need_dir(args.ckpt, "run directory")
    _need_file(Path(args.ckpt) / "model.ckpt", "checkpoint")
    _need_file(Path(args.ckpt) / "config.cfg", "run config")
    model, cfg, _ = load_run(args.ckpt, load_vocab(args.data) if args.data else None)
    data_dir = args.data or cfg.data_dir
    _need_file(Path(data_dir) / f"{args.split}.manifest", "manifest")
    vocab = load_vocab(data_dir)
    split = load_splits(data_dir, (args.split,))[args.split]
    return model, vocab, split


def cmd_eval_keywords(args):
    model, vocab, split = _load_for_eval(args)
    if not model.config.has_cascade:
        raise ValidationError(f"variant '{model.config.variant}' has no cascaded branch")
    emb = embed_split(model, split, topk=max(args.topk))
    name = model.config.variant
    if args.unit == "bpe":
        rep = keyword_report(emb["positions"], split, model.codebook, args.topk)
        table = format_keyword_table({name: rep}, args.topk, unit="BPE")
    else:
        rep = word_report(emb["positions"], split, model.codebook, vocab, args.topk)
        table = format_keyword_table({name: rep}, args.topk, unit="Word")
    out = _out(args.out)
    (out / f"keywords_{args.unit}_{args.split}.txt").write_text(table, encoding="utf-8")
    (out / f"keywords_{args.unit}_{args.split}.jsonl").write_text(
        json_lines(rep.records(name, args.unit)), encoding="utf-8")
    print(table, end="")


def cmd_eval_retrieval(args):
    model, _, split = _load_for_eval(args)
    if not model.config.has_parallel:
        raise ValidationError(f"variant '{model.config.variant}' has no parallel branch")
    rep = speech_image_retrieval(model, split)
    name = model.config.variant
    table = format_retrieval_table({name: rep})
    records = [
        {"model": name, "direction": d, "k": k, "recall": v}
        for d in ("speech_to_image", "image_to_speech") for k, v in rep[d].items()
    ]
    out = _out(args.out)
    (out / f"retrieval_{args.split}.txt").write_text(table, encoding="utf-8")
    (out / f"retrieval_{args.split}.jsonl").write_text(json_lines(records), encoding="utf-8")
    print(table, end="")


def cmd_inspect_segments(args):
    model, vocab, split = _load_for_eval(args)
    if not model.config.uses_cif:
        raise ValidationError(f"variant '{model.config.variant}' does not segment with CIF")
    chosen = args.utterances or list(range(min(5, len(split.utterances))))
    if max(chosen) >= len(split.utterances):
        raise ValidationError(f"utterance index out of range (split has {len(split.utterances)})")
    out = _out(args.out)
    for i in chosen:
        utt = split.utterances[i]
        text, rows = segment_table(model, utt, vocab)
        (out / f"segments_{args.split}_{i:05d}.txt").write_text(text, encoding="utf-8")
        if args.plot:
            _plot(rows, utt, vocab, out / f"segments_{args.split}_{i:05d}.png")
    print(f"wrote {len(chosen)} alignment tables to {out}")


def _plot(rows, utt, vocab, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    t = [r["frame"] for r in rows]
    alpha = [r["alpha"] for r in rows]
    fig, ax = plt.subplots(figsize=(max(6, len(t) / 6), 3))
    ax.bar(t, alpha, color="0.6", width=0.9)
    for r in rows:
        if r["fire"]:
            ax.axvline(r["frame"], color="tab:red", lw=1)
            ax.text(r["frame"], 1.02, r["token"], rotation=90, ha="center", va="bottom", fontsize=7)
    for _, start, _ in utt.alignment:
        ax.axvline(start - 0.5, color="tab:blue", lw=0.5, ls=":")
    ax.set_ylim(0, 1.0)
    ax.set_xlabel("frame")
    ax.set_ylabel("alpha")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_grad_check(args):
    results = gradient_suite(args.seed)
    lines = [f"{name:<22} {err:.3e} {'ok' if err < TOLERANCE else 'FAIL'}" for name, err in results.items()]
    out = _out(args.out)
    (out / "grad_check.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    if any(err >= TOLERANCE for err in results.values()):
        raise RuntimeError("gradient check failed")


# -- wiring -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cifvgs", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-data", help="write a synthetic corpus")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--n-scenes", type=int, default=2000)
    g.add_argument("--n-words", type=int, default=60)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate_data)

    c = sub.add_parser("pretrain-clip", help="train and freeze the toy image/text encoders")
    c.add_argument("--data", required=True)
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--steps", type=int, default=ClipConfig.steps)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_pretrain_clip)

    t = sub.add_parser("train", help="train one speech variant")
    t.add_argument("--variant", choices=("parallel", "cascaded", "cascaded_plus", "hybrid", "hybrid_plus"))
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--clip")
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("eval-keywords", cmd_eval_keywords, "keyword extraction report"),
        ("eval-retrieval", cmd_eval_retrieval, "image-speech retrieval report"),
        ("inspect-segments", cmd_inspect_segments, "per-frame CIF alignment tables"),
    ):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--ckpt", required=True, help="training output directory")
        e.add_argument("--split", default="test", choices=("train", "dev", "test"))
        e.add_argument("--data", help="data directory (defaults to the one used in training)")
        e.add_argument("--out", required=True)
        e.set_defaults(func=func)
        if name == "eval-keywords":
            e.add_argument("--topk", type=_int_list, default=[1, 2, 3, 4, 5])
            e.add_argument("--unit", choices=("bpe", "word"), default="bpe")
        if name == "inspect-segments":
            e.add_argument("--utterances", type=_int_list_zero, help="comma-separated indices")
            e.add_argument("--plot", action="store_true")

    k = sub.add_parser("grad-check", help="finite-difference gradient suite")
    k.add_argument("--seed", type=int, required=True)
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_grad_check)
    return p


def _int_list_zero(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from None
    if not values or min(values) < 0:
        raise argparse.ArgumentTypeError("indices must be nonnegative")
    return values


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except (ValidationError, ConfigurationError, ManifestError, ckpt.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - every other failure is a run-time failure
        print(f"failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
