"""Group-relative policy optimization on top of the supervised denoiser.

Candidates are sampled with the progressive decoder at temperature > 0; the
sequence likelihood of a candidate is defined by trajectory replay (the
product of commit-time conditional probabilities), so the importance ratio
compares current and sampling-time parameters on the same trajectory.
Rewards: caption-side verb overlap + TF-IDF cosine with a length penalty;
motion-side cosine between the frozen model's pseudo caption and the prompt.
"""

from __future__ import annotations

import copy
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import torch

from .corpus import PAD, TextVocab, verb_set
from .decode import DecodeConfig, DecodeTrace, make_m2t, make_t2m, progressive_decode, replay
from .model import Denoiser


@dataclass
class RewardConfig:
    lambda_verb: float = 0.3
    lambda_sim: float = 0.7
    gamma: float = 1.0
    reward_kind: str = "self_m2t"  # "external_extractor" is interface-only

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")


@dataclass
class GrpoConfig:
    group_size: int = 8
    clip_eps: float = 0.1
    kl_beta: float = 0.004
    temperature: float = 1.0
    steps: int = 200
    lr: float = 1e-5
    seed: int = 0
    prompts_per_step: int = 2
    decode_steps: int = 5        # refinement steps for candidate sampling
    reward_decode_steps: int = 10  # frozen M2T steps for the pseudo caption
    t2m_fraction: float = 8 / 9    # supervised t2m:m2t ratio, renormalized

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group size must be >= 2")
        if not (0 < self.clip_eps < 1):
            raise ValueError("clip range must be in (0, 1)")
        if self.kl_beta < 0:
            raise ValueError("KL coefficient must be >= 0")


class CaptionEmbedder:
    """L2-normalized TF-IDF embedding over caption 1- and 2-grams.

    Stands in for a pretrained text encoder: deterministic from the training
    split, cosine of identical captions is exactly 1.
    """

    def __init__(self, captions: list[str]):
        df: Counter = Counter()
        for cap in captions:
            df.update(set(self._grams(cap.lower().split())))
        self.df = dict(df)
        self.n_docs = max(len(captions), 2)

    @staticmethod
    def _grams(tokens):
        out = [(t,) for t in tokens]
        out.extend(zip(tokens, tokens[1:]))
        return out

    def vector(self, caption: str) -> dict:
        vec: dict = {}
        for g, tf in Counter(self._grams(caption.lower().split())).items():
            vec[g] = tf * math.log(self.n_docs / max(self.df.get(g, 1), 1))
        norm = math.sqrt(sum(v * v for v in vec.values()))
        if norm > 0:
            vec = {g: v / norm for g, v in vec.items()}
        return vec

    def cosine(self, a: str, b: str) -> float:
        va, vb = self.vector(a), self.vector(b)
        return sum(v * vb[g] for g, v in va.items() if g in vb)


def length_penalty(cand_len: int, ref_len: int, gamma: float = 1.0) -> float:
    """exp(-gamma * |1 - cand/max(ref, 1)|), lengths counted over non-PAD tokens."""
    return math.exp(-gamma * abs(1.0 - cand_len / max(ref_len, 1)))


def verb_match(cand_tokens, ref_tokens, vocab: TextVocab) -> float:
    """|verbs(cand) ∩ verbs(ref)| / max(|verbs(ref)|, 1)."""
    cv = verb_set(list(cand_tokens), vocab)
    rv = verb_set(list(ref_tokens), vocab)
    return len(cv & rv) / max(len(rv), 1)


def tokens_to_text(tokens, vocab: TextVocab) -> str:
    return " ".join(vocab.tokens[t] for t in tokens if t >= 4)


def reward_m2t(cand_tokens, ref_tokens, embedder: CaptionEmbedder,
               config: RewardConfig, vocab: TextVocab) -> float:
    """lambda_verb * VerbMatch + lambda_sim * cosine * LP (LP scales only the
    similarity term)."""
    cand_text = tokens_to_text(cand_tokens, vocab)
    ref_text = tokens_to_text(ref_tokens, vocab)
    cand_len = sum(1 for t in cand_tokens if t != PAD)
    ref_len = sum(1 for t in ref_tokens if t != PAD)
    lp = length_penalty(cand_len, ref_len, config.gamma)
    return (
        config.lambda_verb * verb_match(cand_tokens, ref_tokens, vocab)
        + config.lambda_sim * embedder.cosine(cand_text, ref_text) * lp
    )


def pseudo_caption(grid: np.ndarray, frozen_model: Denoiser, steps: int = 10) -> np.ndarray:
    """Infer a caption for a motion grid with the frozen M2T branch at temperature 0."""
    state = make_m2t(grid, frozen_model.config.max_text)
    out, _ = progressive_decode(frozen_model, state, DecodeConfig(steps=steps, temperature=0.0))
    return out.text_ids


def reward_t2m(generated_grid: np.ndarray, ref_caption: str, frozen_model: Denoiser,
               embedder: CaptionEmbedder, vocab: TextVocab, steps: int = 10) -> float:
    """Cosine between the frozen model's pseudo caption of the motion and the prompt."""
    cap = pseudo_caption(generated_grid, frozen_model, steps)
    return embedder.cosine(tokens_to_text(cap, vocab), ref_caption)


def group_advantages(rewards, sigma_guard: float = 1e-8) -> np.ndarray:
    """(r - mean) / max(population std, guard); all zeros for degenerate groups."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.shape[0] < 2:
        raise ValueError("group size must be >= 2")
    mu = r.mean()
    sigma = r.std()
    if sigma < sigma_guard:
        return np.zeros_like(r)
    return (r - mu) / sigma


def sequence_logprob(model: Denoiser, trace: DecodeTrace) -> torch.Tensor:
    """Sum of log commit-time probabilities of the trace under current parameters."""
    lp, _ = replay(model, trace)
    return lp


@dataclass
class Prompt:
    kind: str                         # "t2m" | "m2t"
    caption_text: str
    caption_tokens: np.ndarray
    motion_grid: np.ndarray | None = None  # conditioning grid for m2t
    motion_len: int = 0                    # target rows for t2m


@dataclass
class StepDiagnostics:
    step: int
    mean_reward: float
    std_reward: float
    clip_frac: float
    kl: float
    loss: float

    def csv_row(self) -> str:
        return (f"{self.step},{self.mean_reward:.6f},{self.std_reward:.6f},"
                f"{self.clip_frac:.6f},{self.kl:.6f},{self.loss:.6f}")


DIAG_HEADER = "step,mean_reward,std_reward,clip_frac,kl,loss"


def sample_candidates(old_model: Denoiser, prompt: Prompt, cfg: GrpoConfig,
                      base_seed: int) -> list[tuple[np.ndarray, DecodeTrace]]:
    """G independent decodes from the old policy; seeds derived from base_seed."""
    out = []
    for i in range(cfg.group_size):
        dc = DecodeConfig(
            steps=cfg.decode_steps, temperature=cfg.temperature, seed=base_seed + i
        )
        if prompt.kind == "t2m":
            state = make_t2m(
                prompt.caption_tokens, prompt.motion_len,
                old_model.config.levels, old_model.config.codebook,
            )
        else:
            state = make_m2t(prompt.motion_grid, old_model.config.max_text)
        final, trace = progressive_decode(old_model, state, dc)
        payload = final.motion_ids if prompt.kind == "t2m" else final.text_ids
        out.append((payload, trace))
    return out


def candidate_reward(payload: np.ndarray, prompt: Prompt, frozen_model: Denoiser,
                     embedder: CaptionEmbedder, vocab: TextVocab,
                     reward_cfg: RewardConfig, grpo_cfg: GrpoConfig) -> float:
    if prompt.kind == "t2m":
        return reward_t2m(payload, prompt.caption_text, frozen_model, embedder, vocab,
                          steps=grpo_cfg.reward_decode_steps)
    return reward_m2t(payload, prompt.caption_tokens, embedder, reward_cfg, vocab)


def grpo_step(
    model: Denoiser,
    ref_model: Denoiser,
    old_model: Denoiser,
    prompts: list[Prompt],
    grpo_cfg: GrpoConfig,
    reward_cfg: RewardConfig,
    embedder: CaptionEmbedder,
    vocab: TextVocab,
    opt: torch.optim.Optimizer,
    step: int,
) -> StepDiagnostics:
    """One clipped-surrogate update over a batch of prompt groups."""
    all_rewards, clip_hits, total_terms = [], 0, 0
    surrogates, kl_terms = [], []
    for p_idx, prompt in enumerate(prompts):
        base_seed = (grpo_cfg.seed * 1_000_003 + step * 131 + p_idx) * grpo_cfg.group_size
        with torch.no_grad():
            cands = sample_candidates(old_model, prompt, grpo_cfg, base_seed)
        rewards = [
            candidate_reward(payload, prompt, ref_model, embedder, vocab, reward_cfg, grpo_cfg)
            for payload, _ in cands
        ]
        all_rewards.extend(rewards)
        advantages = group_advantages(rewards)
        group_terms = []
        for (payload, trace), adv in zip(cands, advantages):
            lp_new, kl = replay(model, trace, ref_model)
            lp_old = trace.logprob_recorded()
            ratio = torch.exp(lp_new - lp_old)
            a = float(adv)
            clipped = torch.clamp(ratio, 1 - grpo_cfg.clip_eps, 1 + grpo_cfg.clip_eps)
            term = torch.minimum(ratio * a, clipped * a)
            group_terms.append(term)
            kl_terms.append(kl)
            total_terms += 1
            if abs(float(ratio.item()) - 1.0) > grpo_cfg.clip_eps:
                clip_hits += 1
        surrogates.append(torch.stack(group_terms).mean())
    surrogate = torch.stack(surrogates).mean()
    kl_mean = torch.stack(kl_terms).mean()
    loss = -(surrogate - grpo_cfg.kl_beta * kl_mean)
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite GRPO objective")
    opt.zero_grad()
    loss.backward()
    opt.step()
    r = np.asarray(all_rewards)
    return StepDiagnostics(
        step=step,
        mean_reward=float(r.mean()),
        std_reward=float(r.std()),
        clip_frac=clip_hits / max(total_terms, 1),
        kl=float(kl_mean.item()),
        loss=float(loss.item()),
    )


class RewardCollapseError(RuntimeError):
    pass


def finetune(
    model: Denoiser,
    prompts: list[Prompt],
    grpo_cfg: GrpoConfig,
    reward_cfg: RewardConfig,
    embedder: CaptionEmbedder,
    vocab: TextVocab,
    diagnostics_path: str | None = None,
    log_every: int = 0,
) -> list[StepDiagnostics]:
    """Second-stage reward fine-tuning; ref_model is a frozen pre-finetune snapshot."""
    if reward_cfg.reward_kind not in ("self_m2t", "external_extractor"):
        raise ValueError(f"unknown reward kind {reward_cfg.reward_kind!r}")
    if reward_cfg.reward_kind == "external_extractor":
        raise NotImplementedError(
            "external-extractor reward is interface-only; no extractor model is shipped"
        )
    ref_model = copy.deepcopy(model)
    ref_model.eval()
    for p in ref_model.parameters():
        p.requires_grad_(False)
    opt = torch.optim.Adam(model.parameters(), lr=grpo_cfg.lr)
    rng = np.random.default_rng(grpo_cfg.seed)
    t2m_prompts = [p for p in prompts if p.kind == "t2m"]
    m2t_prompts = [p for p in prompts if p.kind == "m2t"]
    history: list[StepDiagnostics] = []
    diag_f = open(diagnostics_path, "w") if diagnostics_path else None
    if diag_f:
        diag_f.write(DIAG_HEADER + "\n")
    try:
        for step in range(grpo_cfg.steps):
            old_model = copy.deepcopy(model)
            old_model.eval()
            batch = []
            for _ in range(grpo_cfg.prompts_per_step):
                use_t2m = rng.random() < grpo_cfg.t2m_fraction
                pool = t2m_prompts if (use_t2m and t2m_prompts) else (m2t_prompts or t2m_prompts)
                batch.append(pool[rng.integers(0, len(pool))])
            diag = grpo_step(model, ref_model, old_model, batch, grpo_cfg, reward_cfg,
                             embedder, vocab, opt, step)
            history.append(diag)
            if diag_f:
                diag_f.write(diag.csv_row() + "\n")
            if log_every and step % log_every == 0:
                print(f"grpo step {step:4d}  reward {diag.mean_reward:.4f}  "
                      f"kl {diag.kl:.5f}  clip {diag.clip_frac:.2f}")
            start = np.mean([d.mean_reward for d in history[:20]]) if len(history) >= 20 else None
            if start is not None and len(history) >= 40:
                recent = np.mean([d.mean_reward for d in history[-20:]])
                if start > 0 and recent < 0.8 * start:
                    raise RewardCollapseError(
                        f"mean reward dropped {recent:.3f} < 80% of start {start:.3f}"
                    )
    finally:
        if diag_f:
            diag_f.close()
    return history
