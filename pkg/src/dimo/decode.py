"""Confidence-guided progressive inference.

Starting from a partially masked joint sequence, the model repeatedly predicts
all masked positions, ranks them by confidence (max probability), and commits
the top k_s per step according to a predefined schedule. Motion commits whole
grid timesteps (all RVQ levels jointly); text commits individual tokens.
Classifier-free guidance combines the conditional pass with a text-free pass
on pre-softmax logits. Every run yields a replayable trace of commit-time
probabilities, which defines the sequence likelihood used by reward
fine-tuning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .corpus import MASK, NULL, PAD
from .model import Denoiser, JointSequence, ContractViolationError


class NoOpError(ValueError):
    """Raised when a task mask construction leaves nothing to decode."""


@dataclass
class DecodeConfig:
    steps: int = 20
    cfg_scale: float = 3.0
    pad_factor: float = 0.8
    schedule_shape: str = "cosine"
    temperature: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")
        if not (0 < self.pad_factor <= 1):
            raise ValueError("pad_factor must be in (0, 1]")


@dataclass
class Commit:
    side: str          # "text" | "motion"
    pos: int           # text position or motion timestep
    level: int         # RVQ level for motion, -1 for text
    value: int
    prob: float        # probability of the value under the commit-time distribution


@dataclass
class TraceStep:
    commits: list[Commit] = field(default_factory=list)


@dataclass
class DecodeTrace:
    task: str
    config: DecodeConfig
    init_text: np.ndarray
    init_motion: np.ndarray
    text_masked: np.ndarray    # bool, positions masked at the start
    motion_masked: np.ndarray  # bool, timesteps masked at the start
    steps: list[TraceStep] = field(default_factory=list)

    def committed_positions(self) -> list[tuple[str, int]]:
        out = []
        for st in self.steps:
            seen = set()
            for c in st.commits:
                key = (c.side, c.pos)
                if key not in seen:
                    seen.add(key)
                    out.append(key)
        return out

    def logprob_recorded(self) -> float:
        return sum(math.log(max(c.prob, 1e-300)) for st in self.steps for c in st.commits)


def unmask_schedule(total_masked: int, S: int, shape: str = "cosine") -> list[int]:
    """Per-step commit counts k_1..k_S, summing exactly to total_masked."""
    if S < 1:
        raise ValueError("S must be >= 1")
    if total_masked < 0:
        raise ValueError("total_masked must be >= 0")
    if shape == "linear":
        base, rem = divmod(total_masked, S)
        return [base + 1] * rem + [base] * (S - rem)
    if shape == "cosine":
        remaining = [int(round(total_masked * math.cos(math.pi * s / (2 * S)))) for s in range(S)]
        remaining.append(0)
        return [remaining[s] - remaining[s + 1] for s in range(S)]
    raise ValueError(f"unknown schedule shape {shape!r}")


def guided_logits(cond: torch.Tensor, uncond: torch.Tensor, scale: float) -> torch.Tensor:
    """out = uncond + scale * (cond - uncond), elementwise on pre-softmax logits."""
    if cond.shape != uncond.shape:
        raise ContractViolationError("guided_logits shape mismatch")
    return uncond + scale * (cond - uncond)


def pad_adjust(probs: torch.Tensor, pad_factor: float) -> torch.Tensor:
    """Down-weight the [PAD] entry multiplicatively, then renormalize."""
    if pad_factor >= 1.0:
        return probs
    adj = probs.clone()
    adj[..., PAD] = adj[..., PAD] * pad_factor
    return adj / adj.sum(dim=-1, keepdim=True)


def confidence(probs: torch.Tensor) -> torch.Tensor:
    """Per-position score: maximum probability over the vocabulary."""
    if not torch.isfinite(probs).all():
        raise FloatingPointError("non-finite probabilities")
    return probs.max(dim=-1).values


def commit_distribution(probs: torch.Tensor, temperature: float) -> torch.Tensor:
    """The distribution values are actually drawn from (identity at temperature <= 0 or 1)."""
    if temperature <= 0 or temperature == 1.0:
        return probs
    q = probs ** (1.0 / temperature)
    return q / q.sum(dim=-1, keepdim=True)


def _pick(dist: torch.Tensor, temperature: float, gen: torch.Generator) -> int:
    if temperature <= 0:
        return int(dist.argmax().item())
    return int(torch.multinomial(dist, 1, generator=gen).item())


def _masked_probs(model: Denoiser, state: JointSequence, config: DecodeConfig):
    """One (optionally guided) forward pass; returns per-position distributions.

    Motion tasks: (Tm, R, N) probabilities. Text task: (Tt, V) probabilities
    with [PAD] down-weighted.
    """
    mask_code = model.config.codebook
    text = state.text_ids.copy()
    text[state.text_mask] = MASK
    motion = state.motion_ids.copy()
    motion[state.motion_mask] = mask_code
    t = torch.from_numpy(text.astype(np.int64))[None]
    m = torch.from_numpy(motion.astype(np.int64))[None]
    mlen = torch.tensor([state.motion_len])
    text_logits, motion_logits = model(t, m, mlen)
    if state.task in ("t2m", "m2m"):
        logits = motion_logits[0]
        if state.task == "t2m" and config.cfg_scale != 1.0:
            t_null = torch.full_like(t, NULL)
            _, uncond_logits = model(t_null, m, mlen)
            logits = guided_logits(logits, uncond_logits[0], config.cfg_scale)
        return torch.softmax(logits, dim=-1)
    probs = torch.softmax(text_logits[0], dim=-1)
    return pad_adjust(probs, config.pad_factor)


@torch.no_grad()
def progressive_decode(
    model: Denoiser, state: JointSequence, config: DecodeConfig
) -> tuple[JointSequence, DecodeTrace]:
    side = "motion" if state.task in ("t2m", "m2m") else "text"
    mask = (state.motion_mask if side == "motion" else state.text_mask).copy()
    if not mask.any():
        raise NoOpError("initial mask is empty")
    if side == "motion" and state.text_mask.any():
        raise ContractViolationError("mask must cover exactly one modality")
    if side == "text" and state.motion_mask.any():
        raise ContractViolationError("mask must cover exactly one modality")
    trace = DecodeTrace(
        task=state.task,
        config=config,
        init_text=state.text_ids.copy(),
        init_motion=state.motion_ids.copy(),
        text_masked=state.text_mask.copy(),
        motion_masked=state.motion_mask.copy(),
    )
    gen = torch.Generator().manual_seed(config.seed)
    cur = replace(
        state,
        text_ids=state.text_ids.copy(),
        motion_ids=state.motion_ids.copy(),
        text_mask=state.text_mask.copy(),
        motion_mask=state.motion_mask.copy(),
    )
    ks = unmask_schedule(int(mask.sum()), config.steps, config.schedule_shape)
    for k in ks:
        step = TraceStep()
        if k > 0:
            probs = _masked_probs(model, cur, config)
            masked_pos = np.flatnonzero(mask)
            if side == "motion":
                conf = confidence(probs[masked_pos]).mean(dim=-1)  # mean over levels
            else:
                conf = confidence(probs[masked_pos])
            # rank by confidence descending; ties break toward the lower position
            order = sorted(range(len(masked_pos)), key=lambda i: (-float(conf[i]), masked_pos[i]))
            for i in order[:k]:
                pos = int(masked_pos[i])
                if side == "motion":
                    # all R levels of a timestep commit together; batch the
                    # per-level draws into single tensor ops
                    dists = commit_distribution(probs[pos], config.temperature)
                    if config.temperature <= 0:
                        vals = dists.argmax(dim=-1)
                    else:
                        vals = torch.multinomial(dists, 1, generator=gen).squeeze(1)
                    picked = dists.gather(1, vals[:, None]).squeeze(1).tolist()
                    for lvl, (v, p) in enumerate(zip(vals.tolist(), picked)):
                        cur.motion_ids[pos, lvl] = v
                        step.commits.append(Commit("motion", pos, lvl, v, p))
                    cur.motion_mask[pos] = False
                else:
                    dist = commit_distribution(probs[pos], config.temperature)
                    v = _pick(dist, config.temperature, gen)
                    cur.text_ids[pos] = v
                    cur.text_mask[pos] = False
                    step.commits.append(Commit("text", pos, -1, v, float(dist[v])))
                mask[pos] = False
        trace.steps.append(step)
    return cur, trace


def replay(
    model: Denoiser, trace: DecodeTrace, ref_model: Denoiser | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Re-run the trace's per-step states under current parameters.

    Returns (sum of log commit probabilities, mean per-position KL(p_model || p_ref)).
    Differentiable w.r.t. model parameters. KL is 0 when ref_model is None.
    """
    cur = JointSequence(
        trace.init_text.copy(),
        trace.init_motion.copy(),
        trace.text_masked.copy(),
        trace.motion_masked.copy(),
        trace.task,
    )
    # float64 accumulation so the sum bit-matches logprob_recorded()
    logprob = torch.zeros((), dtype=torch.float64)
    kls = []
    for st in trace.steps:
        if not st.commits:
            continue
        probs = _masked_probs(model, cur, trace.config)
        ref_probs = None
        if ref_model is not None:
            with torch.no_grad():
                ref_probs = _masked_probs(ref_model, cur, trace.config)
        for c in st.commits:
            if c.side == "motion":
                p = commit_distribution(probs[c.pos, c.level], trace.config.temperature)
                rp = None if ref_probs is None else commit_distribution(
                    ref_probs[c.pos, c.level], trace.config.temperature)
            else:
                p = commit_distribution(probs[c.pos], trace.config.temperature)
                rp = None if ref_probs is None else commit_distribution(
                    ref_probs[c.pos], trace.config.temperature)
            logprob = logprob + torch.log(p[c.value].double().clamp_min(1e-300))
            if rp is not None:
                kls.append((p * (torch.log(p.clamp_min(1e-30)) - torch.log(rp.clamp_min(1e-30)))).sum())
        for c in st.commits:
            if c.side == "motion":
                cur.motion_ids[c.pos, c.level] = c.value
                cur.motion_mask[c.pos] = False
            else:
                cur.text_ids[c.pos] = c.value
                cur.text_mask[c.pos] = False
    kl = torch.stack(kls).mean() if kls else torch.zeros(())
    return logprob, kl


def make_t2m(caption_tokens: np.ndarray, motion_len: int, levels: int, mask_code: int) -> JointSequence:
    """All motion masked, text kept."""
    if motion_len < 1:
        raise NoOpError("target motion length must be >= 1")
    return JointSequence(
        np.asarray(caption_tokens, dtype=np.int64),
        np.full((motion_len, levels), mask_code, dtype=np.int64),
        np.zeros(len(caption_tokens), dtype=bool),
        np.ones(motion_len, dtype=bool),
        "t2m",
    )


def make_m2t(motion_grid: np.ndarray, max_text: int) -> JointSequence:
    """All text masked, motion kept."""
    return JointSequence(
        np.full(max_text, MASK, dtype=np.int64),
        np.asarray(motion_grid, dtype=np.int64),
        np.ones(max_text, dtype=bool),
        np.zeros(motion_grid.shape[0], dtype=bool),
        "m2t",
    )


def make_m2m_inbetween(motion_grid: np.ndarray, keep_prefix: int, keep_suffix: int,
                       max_text: int) -> JointSequence:
    """Middle rows masked, both ends kept, text all [NULL]."""
    Tm = motion_grid.shape[0]
    if keep_prefix + keep_suffix >= Tm:
        raise NoOpError("no rows left to inbetween")
    mask = np.zeros(Tm, dtype=bool)
    mask[keep_prefix: Tm - keep_suffix] = True
    return JointSequence(
        np.full(max_text, NULL, dtype=np.int64),
        np.asarray(motion_grid, dtype=np.int64),
        np.zeros(max_text, dtype=bool),
        mask,
        "m2m",
    )


def make_m2m_continue(motion_grid: np.ndarray, extended_caption: np.ndarray,
                      append_rows: int, mask_code: int) -> JointSequence:
    """Appended rows masked; prefix rows and the extended caption kept."""
    if append_rows < 1:
        raise NoOpError("nothing to continue: 0 appended rows")
    Tm, R = motion_grid.shape
    grid = np.concatenate(
        [motion_grid, np.full((append_rows, R), mask_code, dtype=np.int64)], axis=0
    )
    mask = np.zeros(Tm + append_rows, dtype=bool)
    mask[Tm:] = True
    return JointSequence(
        np.asarray(extended_caption, dtype=np.int64),
        grid,
        np.zeros(len(extended_caption), dtype=bool),
        mask,
        "t2m",
    )


@torch.no_grad()
def make_caption_correct(model: Denoiser, caption_tokens: np.ndarray, motion_grid: np.ndarray,
                         threshold: float = 0.2, pad_factor: float = 0.8) -> JointSequence:
    """Mask text positions whose current token falls below `threshold` probability
    under the model conditioned on the motion; motion is kept."""
    caption = np.asarray(caption_tokens, dtype=np.int64)
    state = JointSequence(
        caption.copy(),
        np.asarray(motion_grid, dtype=np.int64),
        np.zeros(len(caption), dtype=bool),
        np.zeros(motion_grid.shape[0], dtype=bool),
        "m2t",
    )
    probs = _masked_probs(model, state, DecodeConfig(steps=1, pad_factor=pad_factor))
    tok_prob = probs[np.arange(len(caption)), caption]
    mask = (tok_prob < threshold).numpy()
    if not mask.any():
        raise NoOpError("caption already agrees with the motion everywhere")
    state.text_mask = mask
    return state


# ---------------------------------------------------------------------------
# Trace serialization (line-delimited text, replayable for fine-tuning)

def trace_to_lines(trace: DecodeTrace) -> list[str]:
    c = trace.config
    lines = [
        f"task={trace.task} steps={c.steps} cfg_scale={c.cfg_scale!r} "
        f"pad_factor={c.pad_factor!r} schedule_shape={c.schedule_shape} "
        f"temperature={c.temperature!r} seed={c.seed}",
        "init_text " + " ".join(map(str, trace.init_text.tolist())),
        f"init_motion {trace.init_motion.shape[0]}x{trace.init_motion.shape[1]} "
        + " ".join(map(str, trace.init_motion.reshape(-1).tolist())),
        "text_masked " + " ".join(map(str, np.flatnonzero(trace.text_masked).tolist())),
        "motion_masked " + " ".join(map(str, np.flatnonzero(trace.motion_masked).tolist())),
    ]
    for s, st in enumerate(trace.steps):
        entries = " ".join(
            f"{c_.side}:{c_.pos}:{c_.level}:{c_.value}:{c_.prob!r}" for c_ in st.commits
        )
        lines.append(f"step {s} {entries}".rstrip())
    return lines


def trace_from_lines(lines: list[str]) -> DecodeTrace:
    head = dict(kv.split("=", 1) for kv in lines[0].split())
    config = DecodeConfig(
        steps=int(head["steps"]),
        cfg_scale=float(head["cfg_scale"]),
        pad_factor=float(head["pad_factor"]),
        schedule_shape=head["schedule_shape"],
        temperature=float(head["temperature"]),
        seed=int(head["seed"]),
    )
    init_text = np.array(lines[1].split()[1:], dtype=np.int64)
    m_head = lines[2].split()
    tm, r = map(int, m_head[1].split("x"))
    init_motion = np.array(m_head[2:], dtype=np.int64).reshape(tm, r)
    text_masked = np.zeros(len(init_text), dtype=bool)
    text_masked[[int(x) for x in lines[3].split()[1:]]] = True
    motion_masked = np.zeros(tm, dtype=bool)
    motion_masked[[int(x) for x in lines[4].split()[1:]]] = True
    trace = DecodeTrace(head["task"], config, init_text, init_motion, text_masked, motion_masked)
    for line in lines[5:]:
        parts = line.split()
        st = TraceStep()
        for entry in parts[2:]:
            side, pos, level, value, prob = entry.split(":")
            st.commits.append(Commit(side, int(pos), int(level), int(value), float(prob)))
        trace.steps.append(st)
    return trace


def save_traces(traces: list[DecodeTrace], path: str) -> None:
    with open(path, "w") as f:
        for tr in traces:
            lines = trace_to_lines(tr)
            f.write(f"trace {len(lines)}\n")
            for line in lines:
                f.write(line + "\n")


def load_traces(path: str) -> list[DecodeTrace]:
    traces = []
    with open(path) as f:
        lines = [line.rstrip("\n") for line in f]
    i = 0
    while i < len(lines):
        n = int(lines[i].split()[1])
        traces.append(trace_from_lines(lines[i + 1: i + 1 + n]))
        i += 1 + n
    return traces
