"""Batch command-line surface: dimo corpus|tokenizer|train|sample|grpo|eval|pareto."""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np
import torch

from . import corpus as corpus_mod
from . import pipeline
from .config import ConfigError, RunConfig, dump_config, load_config
from .corpus import CorpusRecord, build_vocab, load_corpus, save_corpus, save_vocab, tokenize_caption
from .decode import (DecodeConfig, NoOpError, make_caption_correct, make_m2m_continue,
                     make_m2m_inbetween, progressive_decode)
from .grpo import CaptionEmbedder, Prompt, finetune
from .model import ModelConfig, build_model, load_checkpoint, save_checkpoint, train_supervised
from .pipeline import latency_sweep, prepare_samples, sweep_csv
from .evaluator import fit_evaluator
from .rvq import (EmaConfig, MotionClip, RvqCodebooks, TokenGrid, decode as rvq_decode,
                  encode as rvq_encode, frame_stack, load_codebooks, save_codebooks,
                  token_rate, train_codebooks)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_MISSING_FILE = 3
EXIT_NUMERIC = 4

log = logging.getLogger("dimo")


def _setup_logging():
    level = os.environ.get("DIMO_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _echo_config(cfg: RunConfig, out_dir: str, command: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"{command}_config.ini"), "w") as f:
        f.write(dump_config(cfg))


def _require(path: str) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(f"input file not found: {path}")
    return path


def cmd_corpus(args) -> int:
    cfg = _resolve(args)
    _echo_config(cfg, args.out, "corpus")
    vocab = build_vocab()
    records = corpus_mod.generate_corpus(cfg.corpus.seed, cfg.corpus.count, cfg.corpus, vocab)
    save_corpus(records, os.path.join(args.out, "corpus.tsv"))
    save_vocab(vocab, os.path.join(args.out, "vocab.txt"))
    print(f"wrote {len(records)} records to {args.out}/corpus.tsv")
    return EXIT_OK


def cmd_tokenizer(args) -> int:
    cfg = _resolve(args)
    if args.rate:
        n = args.codebook or cfg.rvq.codebook
        books = RvqCodebooks(
            np.zeros((args.layers or cfg.rvq.layers, n, 1), dtype=np.float32),
            r=args.downsample or cfg.rvq.downsample,
        )
        tps, bps = token_rate(books, args.fps or cfg.corpus.fps)
        print(f"{tps:g} tokens/s, {bps:g} bits/s")
        return EXIT_OK
    _echo_config(cfg, args.out, "tokenizer")
    vocab = build_vocab()
    records = load_corpus(_require(args.corpus_file), vocab, cfg.corpus.max_caption_len)
    train_recs = [r for r in records if r.split == "train"]
    vectors = np.concatenate([frame_stack(r.clip, cfg.rvq.downsample) for r in train_recs])
    books = train_codebooks(
        vectors, cfg.rvq.layers, cfg.rvq.codebook, cfg.rvq.downsample,
        EmaConfig(iters=cfg.rvq.iters, decay=cfg.rvq.decay,
                  dead_threshold=cfg.rvq.dead_threshold, seed=cfg.rvq.seed),
    )
    path = os.path.join(args.out, "codebooks.bin")
    save_codebooks(books, path)
    print(f"trained R={books.R} N={books.N} dim={books.dim} codebooks -> {path}")
    return EXIT_OK


def _load_setup(args, cfg: RunConfig):
    vocab = build_vocab()
    records = load_corpus(_require(args.corpus_file), vocab, cfg.corpus.max_caption_len)
    books = load_codebooks(_require(args.codebooks))
    return vocab, records, books


def cmd_train(args) -> int:
    cfg = _resolve(args)
    _echo_config(cfg, args.out, "train")
    vocab, records, books = _load_setup(args, cfg)
    model_cfg = ModelConfig(**{**cfg.model.__dict__,
                               "text_vocab": len(vocab),
                               "levels": books.R, "codebook": books.N})
    model = build_model(model_cfg)
    train_recs = [r for r in records if r.split == "train"]
    samples = prepare_samples(train_recs, books, model_cfg.max_motion)
    losses = train_supervised(model, samples, cfg.train, log_every=100)
    ckpt = os.path.join(args.out, "model.ckpt")
    save_checkpoint(model, ckpt)
    with open(os.path.join(args.out, "loss.csv"), "w") as f:
        f.write("step,loss\n")
        for i, v in enumerate(losses):
            f.write(f"{i},{v:.6f}\n")
    print(f"final loss {losses[-1]:.4f} -> {ckpt}")
    return EXIT_OK


def _export_motion(clip: MotionClip, caption: str, vocab, cfg: RunConfig, path: str,
                   csv_path: str | None = None) -> None:
    rec = CorpusRecord(
        id="gen00000", clip=clip, caption_text=caption,
        caption_tokens=tokenize_caption(caption, vocab, cfg.corpus.max_caption_len),
        primitives=[], split="gen",
    )
    save_corpus([rec], path)
    if csv_path:
        np.savetxt(csv_path, clip.data, delimiter=",", fmt="%.9g")


def cmd_sample(args) -> int:
    cfg = _resolve(args)
    _echo_config(cfg, args.out, "sample")
    vocab, records, books = _load_setup(args, cfg)
    model, _ = load_checkpoint(_require(args.checkpoint))
    model.eval()
    rec = records[args.record]
    dc = cfg.decode
    if args.steps:
        dc = DecodeConfig(steps=args.steps, cfg_scale=dc.cfg_scale, pad_factor=dc.pad_factor,
                          schedule_shape=dc.schedule_shape, temperature=dc.temperature,
                          seed=dc.seed)
    kind = args.kind
    motion_path = os.path.join(args.out, "motion.tsv")
    csv_path = os.path.join(args.out, "motion.csv") if args.csv else None
    if kind == "t2m":
        caption = args.caption or rec.caption_text
        fake = CorpusRecord(rec.id, rec.clip, caption,
                            tokenize_caption(caption, vocab, cfg.corpus.max_caption_len),
                            rec.primitives, rec.split)
        _, clip = pipeline.generate_t2m(model, fake, books, dc)
        _export_motion(clip, caption, vocab, cfg, motion_path, csv_path)
        print(f"t2m: {caption!r} -> {motion_path}")
    elif kind == "m2t":
        tokens = pipeline.generate_m2t(model, rec, books, dc)
        caption = " ".join(pipeline.caption_words(tokens, vocab))
        print(f"m2t: {caption}")
        with open(os.path.join(args.out, "caption.txt"), "w") as f:
            f.write(caption + "\n")
    elif kind in ("m2m-inbetween", "m2m-continue", "caption-correct"):
        grid = rvq_encode(rec.clip, books).indices[: model.config.max_motion]
        if kind == "m2m-inbetween":
            keep = max(2, grid.shape[0] // 4)
            state = make_m2m_inbetween(grid, keep, keep, model.config.max_text)
        elif kind == "m2m-continue":
            caption = args.caption or rec.caption_text
            tokens = np.asarray(tokenize_caption(caption, vocab, cfg.corpus.max_caption_len))
            rows = min(args.append_rows, model.config.max_motion - grid.shape[0])
            state = make_m2m_continue(grid, tokens, rows, model.config.codebook)
        else:
            caption = args.caption or rec.caption_text
            tokens = np.asarray(tokenize_caption(caption, vocab, cfg.corpus.max_caption_len))
            state = make_caption_correct(model, tokens, grid, pad_factor=dc.pad_factor)
        final, _ = progressive_decode(model, state, dc)
        if kind == "caption-correct":
            caption = " ".join(pipeline.caption_words(final.text_ids, vocab))
            print(f"corrected caption: {caption}")
            with open(os.path.join(args.out, "caption.txt"), "w") as f:
                f.write(caption + "\n")
        else:
            clip = rvq_decode(TokenGrid(final.motion_ids), books, fps=rec.clip.fps)
            _export_motion(clip, rec.caption_text, vocab, cfg, motion_path, csv_path)
            print(f"{kind} -> {motion_path}")
    else:
        raise ConfigError(f"unknown sample kind {kind!r}")
    return EXIT_OK


def cmd_grpo(args) -> int:
    cfg = _resolve(args)
    _echo_config(cfg, args.out, "grpo")
    vocab, records, books = _load_setup(args, cfg)
    model, _ = load_checkpoint(_require(args.checkpoint))
    train_recs = [r for r in records if r.split == "train"]
    embedder = CaptionEmbedder([r.caption_text for r in train_recs])
    prompts = []
    for r in train_recs:
        grid = rvq_encode(r.clip, books).indices[: model.config.max_motion]
        tokens = np.asarray(r.caption_tokens)
        prompts.append(Prompt("t2m", r.caption_text, tokens, motion_len=grid.shape[0]))
        prompts.append(Prompt("m2t", r.caption_text, tokens, motion_grid=grid))
    diag_path = os.path.join(args.out, "grpo_diagnostics.csv")
    history = finetune(model, prompts, cfg.grpo, cfg.reward, embedder, vocab,
                       diagnostics_path=diag_path, log_every=10)
    ckpt = os.path.join(args.out, "model_grpo.ckpt")
    save_checkpoint(model, ckpt)
    print(f"grpo: mean reward {history[0].mean_reward:.4f} -> {history[-1].mean_reward:.4f}; "
          f"checkpoint {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    _echo_config(cfg, args.out, "eval")
    vocab, records, books = _load_setup(args, cfg)
    model, _ = load_checkpoint(_require(args.checkpoint))
    model.eval()
    train_recs = [r for r in records if r.split == "train"]
    eval_recs = [r for r in records if r.split == cfg.eval.split][: cfg.eval.limit]
    if not eval_recs:
        raise ConfigError(f"no records in split {cfg.eval.split!r}")
    fs = fit_evaluator(train_recs, seed=cfg.eval.seed)
    clips, captions = [], []
    for rec in eval_recs:
        _, clip = pipeline.generate_t2m(model, rec, books, cfg.decode)
        clips.append(clip)
        captions.append(pipeline.generate_m2t(model, rec, books, cfg.decode))
    report = pipeline.compute_report(eval_recs, clips, captions, fs, vocab,
                                     model.text_emb.weight.detach().numpy(),
                                     seed=cfg.eval.seed)
    out_csv = os.path.join(args.out, "metrics.csv")
    with open(out_csv, "w") as f:
        f.write(report.CSV_HEADER + "\n" + report.csv_row() + "\n")
    print(report.CSV_HEADER)
    print(report.csv_row())
    print("# config echo")
    for line in dump_config(cfg).splitlines():
        print("# " + line)
    return EXIT_OK


def cmd_pareto(args) -> int:
    cfg = _resolve(args)
    _echo_config(cfg, args.out, "pareto")
    vocab, records, books = _load_setup(args, cfg)
    model, _ = load_checkpoint(_require(args.checkpoint))
    model.eval()
    train_recs = [r for r in records if r.split == "train"]
    eval_recs = [r for r in records if r.split == cfg.eval.split][: cfg.eval.limit]
    fs = fit_evaluator(train_recs, seed=cfg.eval.seed)
    steps_list = [int(s) for s in args.steps_list.split(",")]
    rows = latency_sweep(model, eval_recs, books, vocab, fs, steps_list, cfg.decode)
    out_csv = os.path.join(args.out, "pareto.csv")
    with open(out_csv, "w") as f:
        f.write(sweep_csv(rows))
    print(sweep_csv(rows), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dimo", description="discrete-diffusion motion-text toolkit")
    p.add_argument("--config", default=None, help="INI configuration file")
    p.add_argument("--seed", type=int, default=None, help="override every section seed")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--threads", type=int, default=1, help="worker/thread cap")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config value")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("corpus", help="generate the synthetic corpus")
    sp.set_defaults(func=cmd_corpus)

    sp = sub.add_parser("tokenizer", help="train RVQ codebooks or print the token rate")
    sp.add_argument("--corpus-file", default="out/corpus.tsv")
    sp.add_argument("--rate", action="store_true", help="print tokens/s and bits/s")
    sp.add_argument("--fps", type=int, default=None)
    sp.add_argument("--layers", type=int, default=None)
    sp.add_argument("--downsample", type=int, default=None)
    sp.add_argument("--codebook", type=int, default=None)
    sp.set_defaults(func=cmd_tokenizer)

    sp = sub.add_parser("train", help="supervised masked-denoising training")
    sp.add_argument("--corpus-file", default="out/corpus.tsv")
    sp.add_argument("--codebooks", default="out/codebooks.bin")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sample", help="decode one sample for a task kind")
    sp.add_argument("kind", choices=["t2m", "m2t", "m2m-inbetween", "m2m-continue",
                                     "caption-correct"])
    sp.add_argument("--corpus-file", default="out/corpus.tsv")
    sp.add_argument("--codebooks", default="out/codebooks.bin")
    sp.add_argument("--checkpoint", default="out/model.ckpt")
    sp.add_argument("--record", type=int, default=0, help="corpus record index")
    sp.add_argument("--caption", default=None)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--append-rows", type=int, default=4)
    sp.add_argument("--csv", action="store_true", help="also write a per-clip CSV")
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("grpo", help="reward fine-tuning second stage")
    sp.add_argument("--corpus-file", default="out/corpus.tsv")
    sp.add_argument("--codebooks", default="out/codebooks.bin")
    sp.add_argument("--checkpoint", default="out/model.ckpt")
    sp.set_defaults(func=cmd_grpo)

    sp = sub.add_parser("eval", help="metric report on a split")
    sp.add_argument("--corpus-file", default="out/corpus.tsv")
    sp.add_argument("--codebooks", default="out/codebooks.bin")
    sp.add_argument("--checkpoint", default="out/model.ckpt")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("pareto", help="step-count quality/latency sweep")
    sp.add_argument("--corpus-file", default="out/corpus.tsv")
    sp.add_argument("--codebooks", default="out/codebooks.bin")
    sp.add_argument("--checkpoint", default="out/model.ckpt")
    sp.add_argument("--steps-list", default="1,5,20")
    sp.set_defaults(func=cmd_pareto)
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    torch.set_num_threads(max(args.threads, 1))
    try:
        return args.func(args)
    except (ConfigError, NoOpError, ValueError) as e:
        log.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except (FloatingPointError, ArithmeticError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
