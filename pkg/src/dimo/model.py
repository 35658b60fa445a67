"""Bidirectional masked denoiser over joint text+motion token sequences.

The sequence layout is [text tokens][SEP][motion grid rows]. Each motion grid
cell holds one codebook index per RVQ level; a cell embedding is the
fusion-weighted sum of per-level embedding tables (index N is the motion mask
code). Training corrupts one modality per task and minimizes masked
cross-entropy over the corrupted positions only.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn

from .corpus import MASK, NULL

MAGIC_CKPT = b"DIMOCKPT"

TASKS = ("t2m", "m2m", "m2t")


class ContractViolationError(ValueError):
    pass


class CorruptInputError(ValueError):
    pass


class UndefinedLossError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 64
    layers: int = 2
    heads: int = 4
    ffn_mult: int = 4
    max_text: int = 12
    max_motion: int = 40
    text_vocab: int = 34
    levels: int = 4        # RVQ layers R
    codebook: int = 64     # codewords per layer N; index N is the mask code
    per_level_depth: int = 0
    seed: int = 0


@dataclass
class TrainConfig:
    t2m: float = 0.8
    m2m: float = 0.1
    m2t: float = 0.1
    # Desk-scale defaults; full-scale training uses lr 5e-5 with 5k warmup.
    lr: float = 3e-3
    weight_decay: float = 0.01
    warmup_steps: int = 100
    batch_size: int = 32
    steps: int = 2000
    seed: int = 0
    mask_schedule: str = "linear"

    def ratios(self) -> tuple[float, float, float]:
        r = (self.t2m, self.m2m, self.m2t)
        if any(x < 0 for x in r) or abs(sum(r) - 1.0) > 1e-9:
            raise ValueError("task ratios must be non-negative and sum to 1")
        return r


@dataclass
class JointSequence:
    """One training/inference sample. Masks flag positions to be predicted."""

    text_ids: np.ndarray            # (max_text,) int
    motion_ids: np.ndarray          # (Tm, R) int
    text_mask: np.ndarray           # (max_text,) bool
    motion_mask: np.ndarray         # (Tm,) bool, timestep-level
    task: str

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")

    @property
    def motion_len(self) -> int:
        return self.motion_ids.shape[0]


def sample_mask(seq_len: int, rng: np.random.Generator, schedule: str = "linear") -> np.ndarray:
    """Bernoulli mask with a per-sample rate u.

    linear: u ~ U(0,1); cosine: u = cos(pi*s/2), s ~ U(0,1).
    """
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    s = rng.random()
    if schedule == "linear":
        u = s
    elif schedule == "cosine":
        u = float(np.cos(np.pi * s / 2))
    else:
        raise ValueError(f"unknown schedule {schedule!r}")
    return rng.random(seq_len) < u


def assign_task(rng: np.random.Generator, ratios: tuple[float, float, float]) -> str:
    """Categorical draw over (t2m, m2m, m2t)."""
    u = rng.random()
    if u < ratios[0]:
        return "t2m"
    if u < ratios[0] + ratios[1]:
        return "m2m"
    return "m2t"


def corrupt(seq: JointSequence, mask: np.ndarray, mask_code: int) -> JointSequence:
    """Apply a task mask: replace masked tokens by the modality's mask code.

    For motion tasks the mask is per timestep and masks all R levels jointly.
    """
    if seq.task in ("t2m", "m2m"):
        if mask.shape != seq.motion_mask.shape:
            raise ContractViolationError("motion mask shape mismatch")
        motion = seq.motion_ids.copy()
        motion[mask] = mask_code
        text = seq.text_ids.copy()
        if seq.task == "m2m":
            text[:] = NULL
        return JointSequence(text, motion, np.zeros_like(seq.text_mask), mask.copy(), seq.task)
    # m2t: mask applies to text, motion is conditioning
    if mask.shape != seq.text_mask.shape:
        raise ContractViolationError("text mask shape mismatch")
    text = seq.text_ids.copy()
    text[mask] = MASK
    return JointSequence(text, seq.motion_ids.copy(), mask.copy(), np.zeros_like(seq.motion_mask), seq.task)


class Block(nn.Module):
    """Pre-LN bidirectional transformer block."""

    def __init__(self, d: int, heads: int, ffn_mult: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, ffn_mult * d), nn.GELU(), nn.Linear(ffn_mult * d, d))

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor | None = None) -> torch.Tensor:
        B, T, d = x.shape
        h = self.heads
        q, k, v = self.qkv(self.ln1(x)).chunk(3, dim=-1)
        q = q.view(B, T, h, d // h).transpose(1, 2)
        k = k.view(B, T, h, d // h).transpose(1, 2)
        v = v.view(B, T, h, d // h).transpose(1, 2)
        att = q @ k.transpose(-2, -1) / (d // h) ** 0.5
        if pad_mask is not None:  # True = position is padding, never attended to
            att = att.masked_fill(pad_mask[:, None, None, :], float("-inf"))
        att = att.softmax(dim=-1)
        out = (att @ v).transpose(1, 2).reshape(B, T, d)
        x = x + self.proj(out)
        return x + self.ff(self.ln2(x))


class Denoiser(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.text_emb = nn.Embedding(c.text_vocab, c.d_model)
        self.motion_embs = nn.ModuleList(
            nn.Embedding(c.codebook + 1, c.d_model) for _ in range(c.levels)
        )
        self.fusion_w = nn.Parameter(torch.zeros(c.levels))
        self.pos_emb = nn.Embedding(c.max_text + 1 + c.max_motion, c.d_model)
        if c.per_level_depth > 0:
            self.level_blocks = nn.ModuleList(
                Block(c.d_model, c.heads, c.ffn_mult) for _ in range(c.levels)
            )
        else:
            self.level_blocks = None
        self.blocks = nn.ModuleList(Block(c.d_model, c.heads, c.ffn_mult) for _ in range(c.layers))
        self.ln_f = nn.LayerNorm(c.d_model)
        self.text_head = nn.Linear(c.d_model, c.text_vocab)
        self.motion_heads = nn.ModuleList(
            nn.Linear(c.d_model, c.codebook) for _ in range(c.levels)
        )

    def fusion_weights(self) -> torch.Tensor:
        return torch.softmax(self.fusion_w, dim=0)

    def forward(
        self,
        text_ids: torch.Tensor,     # (B, Tt) long
        motion_ids: torch.Tensor,   # (B, Tm, R) long; value N = mask code
        motion_len: torch.Tensor,   # (B,) long
    ) -> tuple[torch.Tensor, torch.Tensor]:
        c = self.config
        B, Tt = text_ids.shape
        Tm = motion_ids.shape[1]
        if text_ids.max() >= c.text_vocab or text_ids.min() < 0:
            raise CorruptInputError("text token id out of vocabulary range")
        if motion_ids.max() > c.codebook or motion_ids.min() < 0:
            raise CorruptInputError("motion index out of codebook range")
        w = self.fusion_weights()
        level_feats = []
        for lvl in range(c.levels):
            e = self.motion_embs[lvl](motion_ids[:, :, lvl])
            if self.level_blocks is not None:
                e = self.level_blocks[lvl](e)
            level_feats.append(w[lvl] * e)
        motion_x = torch.stack(level_feats, dim=0).sum(dim=0)
        sep = self.text_emb.weight[2][None, None, :].expand(B, 1, -1)  # SEP id = 2
        x = torch.cat([self.text_emb(text_ids), sep, motion_x], dim=1)
        pos = torch.arange(x.shape[1], device=x.device)
        x = x + self.pos_emb(pos)[None]
        steps = torch.arange(Tm, device=x.device)[None, :]
        motion_pad = steps >= motion_len[:, None]
        pad_mask = torch.cat(
            [torch.zeros(B, Tt + 1, dtype=torch.bool, device=x.device), motion_pad], dim=1
        )
        for blk in self.blocks:
            x = blk(x, pad_mask)
        x = self.ln_f(x)
        text_logits = self.text_head(x[:, :Tt])
        motion_h = x[:, Tt + 1:]
        motion_logits = torch.stack([head(motion_h) for head in self.motion_heads], dim=2)
        return text_logits, motion_logits  # (B,Tt,V), (B,Tm,R,N)


def build_model(config: ModelConfig) -> Denoiser:
    torch.manual_seed(config.seed)
    return Denoiser(config)


def collate(seqs: list[JointSequence], mask_code: int, device="cpu"):
    """Pad a batch of sequences to the longest motion length."""
    B = len(seqs)
    Tt = seqs[0].text_ids.shape[0]
    R = seqs[0].motion_ids.shape[1]
    Tm = max(s.motion_len for s in seqs)
    text = torch.zeros(B, Tt, dtype=torch.long, device=device)
    motion = torch.full((B, Tm, R), mask_code, dtype=torch.long, device=device)
    mlen = torch.zeros(B, dtype=torch.long, device=device)
    tmask = torch.zeros(B, Tt, dtype=torch.bool, device=device)
    mmask = torch.zeros(B, Tm, dtype=torch.bool, device=device)
    for i, s in enumerate(seqs):
        text[i] = torch.from_numpy(np.asarray(s.text_ids, dtype=np.int64))
        motion[i, : s.motion_len] = torch.from_numpy(np.asarray(s.motion_ids, dtype=np.int64))
        mlen[i] = s.motion_len
        tmask[i] = torch.from_numpy(np.asarray(s.text_mask, dtype=bool))
        mmask[i, : s.motion_len] = torch.from_numpy(np.asarray(s.motion_mask, dtype=bool))
    return text, motion, mlen, tmask, mmask


def masked_ce_loss(
    text_logits: torch.Tensor,
    motion_logits: torch.Tensor,
    text_targets: torch.Tensor,
    motion_targets: torch.Tensor,
    text_mask: torch.Tensor,
    motion_mask: torch.Tensor,
) -> torch.Tensor:
    """Mean negative log-likelihood over masked positions only.

    A masked motion timestep contributes one term per RVQ level.
    """
    terms = []
    if text_mask.any():
        lp = torch.log_softmax(text_logits[text_mask], dim=-1)
        terms.append(-lp.gather(-1, text_targets[text_mask][:, None]).squeeze(-1))
    if motion_mask.any():
        logits = motion_logits[motion_mask]            # (M, R, N)
        lp = torch.log_softmax(logits, dim=-1)
        tgt = motion_targets[motion_mask]              # (M, R)
        terms.append(-lp.gather(-1, tgt[:, :, None]).squeeze(-1).reshape(-1))
    if not terms:
        raise UndefinedLossError("no masked positions in batch")
    return torch.cat(terms).mean()


def make_training_sample(
    text_ids: np.ndarray,
    motion_ids: np.ndarray,
    rng: np.random.Generator,
    cfg: TrainConfig,
    mask_code: int,
) -> JointSequence | None:
    """Assign a task, draw a mask, and corrupt. None if the mask came up empty."""
    task = assign_task(rng, cfg.ratios())
    Tt = text_ids.shape[0]
    Tm = motion_ids.shape[0]
    base = JointSequence(
        text_ids.copy(), motion_ids.copy(),
        np.zeros(Tt, dtype=bool), np.zeros(Tm, dtype=bool), task,
    )
    if task == "m2t":
        mask = sample_mask(Tt, rng, cfg.mask_schedule)
    else:
        mask = sample_mask(Tm, rng, cfg.mask_schedule)
    if not mask.any():
        return None
    return corrupt(base, mask, mask_code)


def linear_warmup(step: int, warmup: int) -> float:
    return min(1.0, (step + 1) / max(warmup, 1))


def train_supervised(
    model: Denoiser,
    samples: list[tuple[np.ndarray, np.ndarray]],  # (text_ids, motion_grid) pairs
    cfg: TrainConfig,
    log_every: int = 0,
) -> list[float]:
    """Masked-denoising training loop; returns the per-step loss curve."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    mask_code = model.config.codebook
    losses = []
    for step in range(cfg.steps):
        idx = rng.integers(0, len(samples), size=cfg.batch_size)
        batch, targets = [], []
        for i in idx:
            text_ids, grid = samples[i]
            seq = make_training_sample(text_ids, grid, rng, cfg, mask_code)
            if seq is None:
                continue
            batch.append(seq)
            targets.append((text_ids, grid))
        if not batch:
            losses.append(float("nan"))
            continue
        text, motion, mlen, tmask, mmask = collate(batch, mask_code)
        Tm = motion.shape[1]
        t_tgt = torch.stack([torch.from_numpy(np.asarray(t, dtype=np.int64)) for t, _ in targets])
        m_tgt = torch.zeros_like(motion)
        for i, (_, g) in enumerate(targets):
            m_tgt[i, : g.shape[0]] = torch.from_numpy(np.asarray(g, dtype=np.int64))
        text_logits, motion_logits = model(text, motion, mlen)
        loss = masked_ce_loss(text_logits, motion_logits, t_tgt, m_tgt, tmask, mmask)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step}")
        opt.zero_grad()
        loss.backward()
        for g in opt.param_groups:
            g["lr"] = cfg.lr * linear_warmup(step, cfg.warmup_steps)
        opt.step()
        losses.append(float(loss.item()))
        if log_every and step % log_every == 0:
            print(f"step {step:5d}  loss {losses[-1]:.4f}")
    return losses


def save_checkpoint(model: Denoiser, path: str, extra: dict | None = None) -> None:
    """Binary checkpoint: magic, text config block, then named float32 tensors (LE)."""
    cfg = asdict(model.config)
    if extra:
        cfg.update(extra)
    cfg_text = "".join(f"{k}={v}\n" for k, v in sorted(cfg.items())).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC_CKPT)
    buf.write(struct.pack("<I", len(cfg_text)))
    buf.write(cfg_text)
    state = model.state_dict()
    names = sorted(state.keys())
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        t = state[name].detach().cpu().to(torch.float32).numpy()
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", t.ndim))
        for d in t.shape:
            buf.write(struct.pack("<I", d))
        buf.write(t.astype("<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path: str) -> tuple[Denoiser, dict]:
    with open(path, "rb") as f:
        if f.read(8) != MAGIC_CKPT:
            raise CorruptInputError("bad checkpoint magic")
        (clen,) = struct.unpack("<I", f.read(4))
        cfg_lines = f.read(clen).decode("utf-8").splitlines()
        kv = dict(line.split("=", 1) for line in cfg_lines)
        fields = {f_.name: f_.type for f_ in ModelConfig.__dataclass_fields__.values()}
        cfg_kwargs = {k: int(v) for k, v in kv.items() if k in fields}
        config = ModelConfig(**cfg_kwargs)
        model = Denoiser(config)
        (count,) = struct.unpack("<I", f.read(4))
        state = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape)
            state[name] = torch.from_numpy(data.copy())
        model.load_state_dict(state)
        extra = {k: v for k, v in kv.items() if k not in fields}
    return model, extra
