"""End-to-end glue: corpus -> tokens -> model samples -> metric reports."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import metrics
from .corpus import PAD, CorpusRecord, TextVocab, verb_set
from .decode import DecodeConfig, make_m2t, make_t2m, progressive_decode
from .evaluator import FeatureSpace
from .grpo import verb_match
from .model import Denoiser
from .rvq import MotionClip, RvqCodebooks, TokenGrid, decode as rvq_decode, encode as rvq_encode


def prepare_samples(
    records: list[CorpusRecord], books: RvqCodebooks, max_motion: int
) -> list[tuple[np.ndarray, np.ndarray]]:
    """(caption token ids, motion token grid) training pairs."""
    out = []
    for rec in records:
        grid = rvq_encode(rec.clip, books).indices[:max_motion]
        out.append((np.asarray(rec.caption_tokens, dtype=np.int64), grid))
    return out


def generate_t2m(model: Denoiser, rec: CorpusRecord, books: RvqCodebooks,
                 config: DecodeConfig) -> tuple[np.ndarray, MotionClip]:
    """Decode a motion grid for a caption at the record's ground-truth length."""
    rows = min(rec.clip.frames // books.r, model.config.max_motion)
    state = make_t2m(np.asarray(rec.caption_tokens), rows, model.config.levels,
                     model.config.codebook)
    final, _ = progressive_decode(model, state, config)
    clip = rvq_decode(TokenGrid(final.motion_ids), books, fps=rec.clip.fps)
    return final.motion_ids, clip


def generate_m2t(model: Denoiser, rec: CorpusRecord, books: RvqCodebooks,
                 config: DecodeConfig) -> np.ndarray:
    grid = rvq_encode(rec.clip, books).indices[: model.config.max_motion]
    state = make_m2t(grid, model.config.max_text)
    final, _ = progressive_decode(model, state, config)
    return final.text_ids


def caption_words(tokens, vocab: TextVocab) -> list[str]:
    return [vocab.tokens[t] for t in tokens if t >= 4]


def verb_recovery(cand_tokens, rec: CorpusRecord, vocab: TextVocab) -> float:
    return verb_match(cand_tokens, rec.caption_tokens, vocab)


@dataclass
class MetricReport:
    r1: float
    r2: float
    r3: float
    fid: float
    diversity: float
    multimodality: float
    mm_dist: float
    bleu1: float
    bleu4: float
    rouge_l: float
    cider: float
    soft_bertscore: float
    n_motion: int
    n_text: int

    CSV_HEADER = ("r1,r2,r3,fid,diversity,multimodality,mm_dist,"
                  "bleu1,bleu4,rouge_l,cider,soft_bertscore,n_motion,n_text")

    def csv_row(self) -> str:
        vals = [self.r1, self.r2, self.r3, self.fid, self.diversity, self.multimodality,
                self.mm_dist, self.bleu1, self.bleu4, self.rouge_l, self.cider,
                self.soft_bertscore]
        return ",".join(f"{v:.6f}" for v in vals) + f",{self.n_motion},{self.n_text}"


def compute_report(
    records: list[CorpusRecord],
    gen_clips: list[MotionClip],
    gen_captions: list[np.ndarray],
    fs: FeatureSpace,
    vocab: TextVocab,
    text_embeddings: np.ndarray,
    mm_groups: list[np.ndarray] | None = None,
    seed: int = 0,
) -> MetricReport:
    """Metrics for paired ground-truth records, generated motions, and captions."""
    real_f = np.stack([fs.embed_motion(r.clip) for r in records])
    gen_f = np.stack([fs.embed_motion(c) for c in gen_clips])
    text_f = np.stack([fs.embed_text(r.caption_text) for r in records])
    n = len(records)
    pool = min(32, n)
    rks = {R: (metrics.r_precision(text_f, gen_f, R, pool_size=pool, seed=seed)
               if R <= pool else float("nan"))
           for R in (1, 2, 3)}
    div = metrics.diversity(gen_f, m=min(30, n), seed=seed) if n >= 2 else 0.0
    mm = (metrics.multimodality(mm_groups, k=min(len(mm_groups[0]), 10), seed=seed)
          if mm_groups else 0.0)
    refs = [caption_words(r.caption_tokens, vocab) for r in records]
    cands = [caption_words(c, vocab) for c in gen_captions]
    df, n_docs = metrics.cider_df([[ref] for ref in refs])
    b1 = float(np.mean([metrics.bleu(c, [r], 1) for c, r in zip(cands, refs)]))
    b4 = float(np.mean([metrics.bleu(c, [r], 4) for c, r in zip(cands, refs)]))
    rl = float(np.mean([metrics.rouge_l(c, r) for c, r in zip(cands, refs)]))
    cd = float(np.mean([
        metrics.cider(c, [r], df=df, n_docs=n_docs) for c, r in zip(cands, refs)
    ]))
    sb = float(np.mean([
        metrics.soft_bertscore(list(c), list(r.caption_tokens), text_embeddings)
        for c, r in zip(gen_captions, records)
    ]))
    return MetricReport(
        r1=rks[1], r2=rks[2], r3=rks[3],
        fid=metrics.fid(real_f, gen_f),
        diversity=div, multimodality=mm,
        mm_dist=metrics.mm_dist(text_f, gen_f),
        bleu1=b1, bleu4=b4, rouge_l=rl, cider=cd, soft_bertscore=sb,
        n_motion=len(gen_clips), n_text=len(gen_captions),
    )


SWEEP_HEADER = "steps,latency_ms,fid,r1,r2,r3,bleu1,bleu4,rougeL,cider"


def latency_sweep(
    model: Denoiser,
    records: list[CorpusRecord],
    books: RvqCodebooks,
    vocab: TextVocab,
    fs: FeatureSpace,
    steps_list: list[int],
    base_config: DecodeConfig | None = None,
) -> list[dict]:
    """One row per step count: median per-sample T2M latency plus quality metrics."""
    if not records:
        raise ValueError("latency sweep needs a nonempty eval set")
    base = base_config or DecodeConfig()
    text_emb = model.text_emb.weight.detach().numpy()
    rows = []
    for S in steps_list:
        cfg_m = DecodeConfig(steps=S, cfg_scale=base.cfg_scale, pad_factor=base.pad_factor,
                             schedule_shape=base.schedule_shape,
                             temperature=base.temperature, seed=base.seed)
        latencies, clips, captions = [], [], []
        for rec in records:
            t0 = time.perf_counter()
            _, clip = generate_t2m(model, rec, books, cfg_m)
            latencies.append((time.perf_counter() - t0) * 1000)
            clips.append(clip)
            captions.append(generate_m2t(model, rec, books, cfg_m))
        report = compute_report(records, clips, captions, fs, vocab, text_emb,
                                seed=base.seed)
        rows.append({
            "steps": S,
            "latency_ms": float(np.median(latencies)),
            "fid": report.fid,
            "r1": report.r1, "r2": report.r2, "r3": report.r3,
            "bleu1": report.bleu1, "bleu4": report.bleu4,
            "rougeL": report.rouge_l, "cider": report.cider,
        })
    return rows


def sweep_csv(rows: list[dict]) -> str:
    lines = [SWEEP_HEADER]
    for r in rows:
        lines.append(
            f"{r['steps']},{r['latency_ms']:.3f},{r['fid']:.6f},"
            f"{r['r1']:.6f},{r['r2']:.6f},{r['r3']:.6f},"
            f"{r['bleu1']:.6f},{r['bleu4']:.6f},{r['rougeL']:.6f},{r['cider']:.6f}"
        )
    return "\n".join(lines) + "\n"
