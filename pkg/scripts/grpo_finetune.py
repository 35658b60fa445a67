#!/usr/bin/env python3
"""Reward fine-tuning of a trained checkpoint with group-relative policy updates.

Loads the artifacts written by train_smoke.py, runs the fine-tuning loop, and
reports held-out mean text-to-motion reward before and after. Diagnostics
(reward, clip fraction, KL) go to <run>/grpo_diag.csv.
"""

import argparse
import copy
import os

import numpy as np
import torch

from dimo.corpus import build_vocab, load_corpus
from dimo.decode import DecodeConfig, make_t2m, progressive_decode
from dimo.grpo import (CaptionEmbedder, GrpoConfig, Prompt, RewardConfig,
                       finetune, reward_t2m)
from dimo.model import load_checkpoint, save_checkpoint
from dimo.rvq import encode, load_codebooks


def heldout_reward(model, frozen, records, books, embedder, vocab):
    vals = []
    for i, rec in enumerate(records):
        rows = min(rec.clip.frames // books.r, model.config.max_motion)
        state = make_t2m(np.asarray(rec.caption_tokens), rows,
                         model.config.levels, model.config.codebook)
        final, _ = progressive_decode(
            model, state, DecodeConfig(steps=5, temperature=1.0, seed=i))
        vals.append(reward_t2m(final.motion_ids, rec.caption_text, frozen,
                               embedder, vocab))
    return float(np.mean(vals))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--run", default="runs/smoke")
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--group-size", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--prompt-pool", type=int, default=64)
    ap.add_argument("--heldout", type=int, default=16)
    args = ap.parse_args()
    torch.set_num_threads(1)

    vocab = build_vocab()
    records = load_corpus(os.path.join(args.run, "corpus.tsv"), vocab)
    books = load_codebooks(os.path.join(args.run, "codebooks.bin"))
    model, _ = load_checkpoint(os.path.join(args.run, "model.ckpt"))
    train = [r for r in records if r.split == "train"]
    heldout = [r for r in records if r.split == "test"][: args.heldout]

    frozen = copy.deepcopy(model)
    frozen.eval()
    embedder = CaptionEmbedder([r.caption_text for r in train])
    prompts = []
    for rec in train[: args.prompt_pool]:
        grid = encode(rec.clip, books).indices[: model.config.max_motion]
        tokens = np.asarray(rec.caption_tokens)
        prompts.append(Prompt("t2m", rec.caption_text, tokens, motion_len=grid.shape[0]))
        prompts.append(Prompt("m2t", rec.caption_text, tokens, motion_grid=grid))

    before = heldout_reward(model, frozen, heldout, books, embedder, vocab)
    print(f"held-out T2M reward before: {before:.4f}")
    cfg = GrpoConfig(steps=args.steps, group_size=args.group_size, seed=args.seed)
    finetune(model, prompts, cfg, RewardConfig(), embedder, vocab,
             diagnostics_path=os.path.join(args.run, "grpo_diag.csv"), log_every=20)
    after = heldout_reward(model, frozen, heldout, books, embedder, vocab)
    print(f"held-out T2M reward after:  {after:.4f}  (delta {after - before:+.4f})")
    save_checkpoint(model, os.path.join(args.run, "model_grpo.ckpt"))


if __name__ == "__main__":
    main()
