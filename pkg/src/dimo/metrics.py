"""Sequence and distribution evaluation metrics, implemented from scratch.

Text metrics operate on token lists (ints or strings). Distribution metrics
operate on feature matrices produced by the trained evaluator.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter

import numpy as np


def ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate, references, max_n: int = 4) -> float:
    """BP * exp(mean_n log p_n) with clipped n-gram counts; 0 if any p_n is 0.

    The effective reference length is the one closest to the candidate length,
    ties resolved toward the shorter reference.
    """
    c = len(candidate)
    if c == 0:
        return 0.0
    log_ps = []
    for n in range(1, max_n + 1):
        cand_counts = ngrams(candidate, n)
        total = sum(cand_counts.values())
        if total == 0:
            return 0.0
        clipped = 0
        for g, cnt in cand_counts.items():
            ref_max = max((ngrams(ref, n)[g] for ref in references), default=0)
            clipped += min(cnt, ref_max)
        if clipped == 0:
            return 0.0
        log_ps.append(math.log(clipped / total))
    r = min((len(ref) for ref in references), key=lambda L: (abs(L - c), L))
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(sum(log_ps) / max_n)


def lcs_length(a, b) -> int:
    dp = [0] * (len(b) + 1)
    for x in a:
        prev = 0
        for j, y in enumerate(b, start=1):
            cur = dp[j]
            dp[j] = prev + 1 if x == y else max(dp[j], dp[j - 1])
            prev = cur
    return dp[len(b)]


def rouge_l(candidate, reference, beta: float = 1.0) -> float:
    if len(candidate) == 0 or len(reference) == 0:
        return 0.0
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return (1 + beta**2) * p * r / (r + beta**2 * p)


def cider_df(reference_sets, n_max: int = 4) -> tuple[dict, int]:
    """Document frequencies of n-grams over the reference corpus.

    Each element of reference_sets is the list of references for one item;
    an n-gram counts once per item in which it appears.
    """
    df: Counter = Counter()
    for refs in reference_sets:
        seen = set()
        for ref in refs:
            for n in range(1, n_max + 1):
                seen.update(ngrams(ref, n).keys())
        df.update(seen)
    return dict(df), len(reference_sets)


def _tfidf(tokens, n: int, df: dict, n_docs: int) -> dict:
    vec = {}
    for g, tf in ngrams(tokens, n).items():
        d = max(df.get(g, 1), 1)
        vec[g] = tf * math.log(n_docs / d)
    return vec


def _cosine_dict(a: dict, b: dict) -> float:
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0 or nb == 0:
        return 0.0
    dot = sum(v * b[g] for g, v in a.items() if g in b)
    return dot / (na * nb)


def cider(candidate, references, n_max: int = 4, df: dict | None = None,
          n_docs: int | None = None) -> float:
    """Mean over references of the TF-IDF n-gram cosine, averaged over n = 1..n_max.

    Reported in [0, 1]; the conventional x10 presentation is a display choice.
    """
    if not references:
        raise ValueError("cider needs at least one reference")
    if df is None:
        df, n_docs = cider_df([references], n_max)
    if n_docs is None or n_docs < 1:
        n_docs = 1
    score = 0.0
    for n in range(1, n_max + 1):
        gc = _tfidf(candidate, n, df, max(n_docs, 2))
        sims = [_cosine_dict(gc, _tfidf(ref, n, df, max(n_docs, 2))) for ref in references]
        score += sum(sims) / len(sims)
    return score / n_max


def soft_bertscore(cand_ids, ref_ids, token_embeddings: np.ndarray, pad_id: int = 0) -> float:
    """(1/|c|) sum_x max_y cos(e(x), e(y)) over non-PAD tokens."""
    cand = [t for t in cand_ids if t != pad_id]
    ref = [t for t in ref_ids if t != pad_id]
    if not cand or not ref:
        return 0.0
    e = token_embeddings
    ec = e[cand] / np.maximum(np.linalg.norm(e[cand], axis=1, keepdims=True), 1e-12)
    er = e[ref] / np.maximum(np.linalg.norm(e[ref], axis=1, keepdims=True), 1e-12)
    return float(np.mean(np.max(ec @ er.T, axis=1)))


# ---------------------------------------------------------------------------
# Distribution metrics

def fid_from_stats(mu_r: np.ndarray, cov_r: np.ndarray, mu_g: np.ndarray,
                   cov_g: np.ndarray) -> float:
    """||mu_r - mu_g||^2 + Tr(cov_r + cov_g - 2 (cov_r cov_g)^{1/2})."""
    mu_r, mu_g = np.atleast_1d(mu_r).astype(np.float64), np.atleast_1d(mu_g).astype(np.float64)
    cov_r, cov_g = np.atleast_2d(cov_r).astype(np.float64), np.atleast_2d(cov_g).astype(np.float64)
    # sqrtm(cov_r cov_g) has the trace of sqrtm(S cov_g S) with S = sqrtm(cov_r),
    # which is symmetric PSD, so an eigendecomposition suffices.
    w, v = np.linalg.eigh((cov_r + cov_r.T) / 2)
    w = np.clip(w, 0, None)
    s = (v * np.sqrt(w)) @ v.T
    m = s @ cov_g @ s
    w2 = np.linalg.eigvalsh((m + m.T) / 2)
    if w2.min() < -1e-6:
        warnings.warn(f"clamping negative eigenvalue {w2.min():.3e} in FID sqrt")
    trace_sqrt = np.sqrt(np.clip(w2, 0, None)).sum()
    diff = mu_r - mu_g
    return float(diff @ diff + np.trace(cov_r) + np.trace(cov_g) - 2 * trace_sqrt)


def fid(real_features: np.ndarray, gen_features: np.ndarray) -> float:
    real = np.asarray(real_features, dtype=np.float64)
    gen = np.asarray(gen_features, dtype=np.float64)
    if real.shape[0] < 2 or gen.shape[0] < 2:
        raise ValueError("need at least 2 samples per side")
    if not (np.all(np.isfinite(real)) and np.all(np.isfinite(gen))):
        raise FloatingPointError("non-finite features")
    mu_r, mu_g = real.mean(axis=0), gen.mean(axis=0)
    cov_r = np.cov(real, rowvar=False)
    cov_g = np.cov(gen, rowvar=False)
    return fid_from_stats(mu_r, cov_r, mu_g, cov_g)


def pairwise_mean_distance(features: np.ndarray) -> float:
    n = features.shape[0]
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            total += float(np.linalg.norm(features[i] - features[j]))
    return 2.0 * total / (n * (n - 1))


def diversity(features: np.ndarray, m: int, seed: int = 0) -> float:
    """Mean pairwise distance over a seeded random subset of size m."""
    if m < 2:
        raise ValueError("subset size must be >= 2")
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] < m:
        raise ValueError("not enough samples for the requested subset size")
    idx = np.random.default_rng(seed).choice(features.shape[0], size=m, replace=False)
    return pairwise_mean_distance(features[idx])


def multimodality(features_per_condition: list[np.ndarray], k: int, seed: int = 0) -> float:
    """Mean over conditions of the k-sample pairwise-distance statistic."""
    if k < 2:
        raise ValueError("k must be >= 2")
    rng = np.random.default_rng(seed)
    vals = []
    for feats in features_per_condition:
        feats = np.asarray(feats, dtype=np.float64)
        if feats.shape[0] < k:
            raise ValueError("a condition has fewer samples than k")
        idx = rng.choice(feats.shape[0], size=k, replace=False)
        vals.append(pairwise_mean_distance(feats[idx]))
    return float(np.mean(vals))


def mm_dist(text_features: np.ndarray, motion_features: np.ndarray) -> float:
    text = np.asarray(text_features, dtype=np.float64)
    motion = np.asarray(motion_features, dtype=np.float64)
    if text.shape != motion.shape:
        raise ValueError("paired feature lists must have equal shapes")
    return float(np.mean(np.linalg.norm(text - motion, axis=1)))


def r_precision(query_features: np.ndarray, gallery_features: np.ndarray, R: int,
                pool_size: int = 32, seed: int = 0) -> float:
    """Fraction of queries whose true match (same index) lands in the top-R of a
    pool of `pool_size` gallery items (the match plus random distractors),
    ranked by Euclidean distance."""
    q = np.asarray(query_features, dtype=np.float64)
    g = np.asarray(gallery_features, dtype=np.float64)
    n = q.shape[0]
    pool_size = min(pool_size, n)
    if R > pool_size:
        raise ValueError("R exceeds the pool size")
    rng = np.random.default_rng(seed)
    hits = 0
    for i in range(n):
        others = np.delete(np.arange(n), i)
        distractors = rng.choice(others, size=pool_size - 1, replace=False)
        pool = np.concatenate([[i], distractors])
        dists = np.linalg.norm(g[pool] - q[i], axis=1)
        rank = int(np.sum(dists < dists[0]))  # ties count in the query's favor
        hits += rank < R
    return hits / n
