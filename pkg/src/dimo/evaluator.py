"""Corpus-trained text-motion feature space for retrieval and FID metrics.

Motion features are deterministic per-channel statistics; text features are
TF-IDF caption embeddings. Two linear maps, fitted with a symmetric
contrastive objective on matched pairs from the training split, project both
into a shared space where Euclidean distance ranks retrieval.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .corpus import CorpusRecord
from .grpo import CaptionEmbedder
from .rvq import MotionClip


def motion_features(clip: MotionClip) -> np.ndarray:
    """Per channel: mean, std, mean absolute velocity, dominant FFT magnitude."""
    x = clip.data.astype(np.float64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    vel = np.abs(np.diff(x, axis=0)).mean(axis=0) if x.shape[0] > 1 else np.zeros_like(mean)
    centered = x - mean
    spec = np.abs(np.fft.rfft(centered, axis=0))
    dom = spec[1:].max(axis=0) / x.shape[0] if spec.shape[0] > 1 else np.zeros_like(mean)
    return np.concatenate([mean, std, vel, dom])


@dataclass
class FeatureSpace:
    embedder: CaptionEmbedder
    gram_index: dict            # n-gram -> column in the dense text vector
    w_text: np.ndarray          # (d_f, n_grams)
    w_motion: np.ndarray        # (d_f, n_motion_feats)
    motion_mean: np.ndarray
    motion_std: np.ndarray

    @property
    def dim(self) -> int:
        return self.w_text.shape[0]

    def _text_dense(self, caption: str) -> np.ndarray:
        v = np.zeros(len(self.gram_index))
        for g, w in self.embedder.vector(caption).items():
            j = self.gram_index.get(g)
            if j is not None:
                v[j] = w
        return v

    def embed_text(self, caption: str) -> np.ndarray:
        z = self.w_text @ self._text_dense(caption)
        return z / max(np.linalg.norm(z), 1e-12)

    def embed_motion(self, clip: MotionClip) -> np.ndarray:
        f = (motion_features(clip) - self.motion_mean) / self.motion_std
        z = self.w_motion @ f
        return z / max(np.linalg.norm(z), 1e-12)


def fit_evaluator(records: list[CorpusRecord], seed: int = 0, d_f: int = 32,
                  steps: int = 400, lr: float = 3e-2, tau: float = 0.07) -> FeatureSpace:
    """Fit the two projection maps with a symmetric InfoNCE loss on matched pairs."""
    if not records:
        raise ValueError("cannot fit the evaluator on an empty split")
    embedder = CaptionEmbedder([r.caption_text for r in records])
    grams = sorted(embedder.df.keys())
    gram_index = {g: j for j, g in enumerate(grams)}

    def text_dense(caption: str) -> np.ndarray:
        v = np.zeros(len(grams))
        for g, w in embedder.vector(caption).items():
            j = gram_index.get(g)
            if j is not None:
                v[j] = w
        return v

    T = np.stack([text_dense(r.caption_text) for r in records])
    M = np.stack([motion_features(r.clip) for r in records])
    m_mean = M.mean(axis=0)
    m_std = np.maximum(M.std(axis=0), 1e-8)
    M = (M - m_mean) / m_std

    torch.manual_seed(seed)
    wt = torch.randn(d_f, T.shape[1], dtype=torch.float64) * 0.05
    wm = torch.randn(d_f, M.shape[1], dtype=torch.float64) * 0.05
    wt.requires_grad_(True)
    wm.requires_grad_(True)
    Tt = torch.from_numpy(T)
    Mt = torch.from_numpy(M)
    opt = torch.optim.Adam([wt, wm], lr=lr)
    rng = np.random.default_rng(seed)
    n = len(records)
    batch = min(128, n)
    for _ in range(steps):
        idx = rng.choice(n, size=batch, replace=False)
        it = torch.from_numpy(idx)
        zt = torch.nn.functional.normalize(Tt[it] @ wt.T, dim=1)
        zm = torch.nn.functional.normalize(Mt[it] @ wm.T, dim=1)
        logits = zt @ zm.T / tau
        labels = torch.arange(batch)
        loss = 0.5 * (
            torch.nn.functional.cross_entropy(logits, labels)
            + torch.nn.functional.cross_entropy(logits.T, labels)
        )
        opt.zero_grad()
        loss.backward()
        opt.step()
    return FeatureSpace(
        embedder=embedder,
        gram_index=gram_index,
        w_text=wt.detach().numpy(),
        w_motion=wm.detach().numpy(),
        motion_mean=m_mean,
        motion_std=m_std,
    )
