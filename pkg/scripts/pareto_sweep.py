#!/usr/bin/env python3
"""Quality-latency sweep over refinement step counts for a trained checkpoint.

Reads the artifacts written by train_smoke.py and emits one CSV row per step
count with median latency, FID against real motion features, and round-trip
verb recovery.
"""

import argparse
import os
import time

import numpy as np
import torch

from dimo import metrics
from dimo.corpus import build_vocab, load_corpus
from dimo.decode import DecodeConfig, make_m2t, progressive_decode
from dimo.evaluator import fit_evaluator
from dimo.grpo import verb_match
from dimo.model import load_checkpoint
from dimo.pipeline import generate_t2m
from dimo.rvq import load_codebooks


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--run", default="runs/smoke", help="directory from train_smoke.py")
    ap.add_argument("--steps-list", default="1,5,20")
    ap.add_argument("--prompts", type=int, default=32)
    ap.add_argument("--csv", default=None, help="defaults to <run>/pareto.csv")
    args = ap.parse_args()
    torch.set_num_threads(1)

    vocab = build_vocab()
    records = load_corpus(os.path.join(args.run, "corpus.tsv"), vocab)
    books = load_codebooks(os.path.join(args.run, "codebooks.bin"))
    model, _ = load_checkpoint(os.path.join(args.run, "model.ckpt"))
    model.eval()
    train = [r for r in records if r.split == "train"]
    prompts = [r for r in records if r.split == "test"][: args.prompts]

    space = fit_evaluator(train[:200], seed=0, steps=200)
    real = np.stack([space.embed_motion(r.clip) for r in prompts])

    rows = ["steps,median_latency_s,fid,verb_recovery"]
    for S in (int(s) for s in args.steps_list.split(",")):
        dconf = DecodeConfig(steps=S)
        lat, feats, verbs = [], [], []
        for rec in prompts:
            t0 = time.perf_counter()
            grid, clip = generate_t2m(model, rec, books, dconf)
            lat.append(time.perf_counter() - t0)
            feats.append(space.embed_motion(clip))
            cap, _ = progressive_decode(model, make_m2t(grid, model.config.max_text), dconf)
            verbs.append(verb_match(cap.text_ids, rec.caption_tokens, vocab))
        row = (f"{S},{np.median(lat):.4f},{metrics.fid(real, np.stack(feats)):.4f},"
               f"{np.mean(verbs):.4f}")
        print(row)
        rows.append(row)

    out = args.csv or os.path.join(args.run, "pareto.csv")
    with open(out, "w") as f:
        f.write("\n".join(rows) + "\n")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
