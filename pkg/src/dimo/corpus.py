"""Procedural motion-caption corpus with known ground-truth action labels.

Each record composes 1-3 motion primitives from a closed action set. Motion
channels are analytic functions of time plus Gaussian noise; captions come
from templates over a closed vocabulary whose verb tokens map bijectively
(through the synonym table) onto primitive names.

Channels (fixed order): root x, root y, heading sin, heading cos,
vertical offset, left-limb phase, right-limb phase, arm amplitude.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import Xoshiro256, hash_str, hash64
from .rvq import MotionClip

PAD, MASK, SEP, NULL = 0, 1, 2, 3
SPECIALS = ["[PAD]", "[MASK]", "[SEP]", "[NULL]"]

PRIMITIVE_NAMES = ["walk", "run", "jump", "turn_left", "turn_right", "wave", "squat", "stand"]

# primitive -> caption verb synonyms, ordered by intensity tier; each verb
# belongs to exactly one primitive, and the tier index selects the motion
# parameter band (so the verb is recoverable from the motion itself)
VERB_TABLE = {
    "walk": ["strolls", "walks", "paces"],
    "run": ["jogs", "runs", "sprints"],
    "jump": ["hops", "jumps", "leaps"],
    "turn_left": ["veers", "pivots"],
    "turn_right": ["wheels", "spins"],
    "wave": ["beckons", "waves", "gestures"],
    "squat": ["crouches", "squats"],
    "stand": ["pauses", "stands", "rests"],
}
VERB_TO_PRIMITIVE = {v: p for p, vs in VERB_TABLE.items() for v in vs}

OPENERS = [["a", "person"], ["someone"], ["the", "person"]]
ADVERBS = ["slowly", "quickly", "briefly", "gently", "steadily", "smoothly"]
FUNCTION_WORDS = ["a", "person", "someone", "the", "then", "and"]


class VocabularyError(KeyError):
    pass


@dataclass
class TextVocab:
    tokens: list[str]
    token_to_id: dict[str, int] = field(init=False)
    verb_ids: frozenset[int] = field(init=False)

    def __post_init__(self):
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        self.verb_ids = frozenset(
            i for i, t in enumerate(self.tokens) if t in VERB_TO_PRIMITIVE
        )

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        try:
            return self.token_to_id[token]
        except KeyError:
            raise VocabularyError(f"token {token!r} not in vocabulary") from None

    def is_verb(self, token_id: int) -> bool:
        return token_id in self.verb_ids


def build_vocab() -> TextVocab:
    """The closed corpus vocabulary; token order is fixed, specials first."""
    words = list(FUNCTION_WORDS) + list(ADVERBS)
    for p in PRIMITIVE_NAMES:
        words.extend(VERB_TABLE[p])
    return TextVocab(SPECIALS + words)


@dataclass
class Primitive:
    name: str
    duration: int  # frames
    params: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in PRIMITIVE_NAMES:
            raise ValueError(f"unknown primitive {self.name!r}")
        if self.duration < 4:
            raise ValueError("primitive duration must be >= 4 frames")


@dataclass
class CorpusConfig:
    channels: int = 8
    fps: int = 20
    noise_sigma: float = 0.01
    max_frames: int = 160
    max_caption_len: int = 12
    min_primitives: int = 1
    max_primitives: int = 3
    min_duration: int = 20
    max_duration: int = 48


@dataclass
class CorpusRecord:
    id: str
    clip: MotionClip
    caption_text: str
    caption_tokens: list[int]
    primitives: list[str]  # ordered ground-truth action names
    split: str


def _synth_primitive(prim: Primitive, state: dict, fps: int) -> np.ndarray:
    """Analytic channel values for one primitive; mutates the kinematic state."""
    n = prim.duration
    dt = 1.0 / fps
    out = np.zeros((n, 8))
    p = prim.params
    for i in range(n):
        s = i / max(n - 1, 1)
        t = i * dt
        if prim.name in ("walk", "run"):
            speed = p["speed"]
            freq = p["freq"]
            state["phase"] += 2 * np.pi * freq * dt
            state["x"] += speed * dt * np.cos(state["heading"])
            state["y"] += speed * dt * np.sin(state["heading"])
            vert = p["bob"] * abs(np.sin(state["phase"]))
            limb_l = np.sin(state["phase"])
            limb_r = -np.sin(state["phase"])
            arm = p["arm"] * np.sin(state["phase"])
        elif prim.name == "jump":
            vert = p["height"] * 4.0 * s * (1.0 - s)
            limb_l = limb_r = 0.0
            arm = 0.0
        elif prim.name in ("turn_left", "turn_right"):
            sign = 1.0 if prim.name == "turn_left" else -1.0
            state["heading"] += sign * p["rate"] * dt
            vert = 0.0
            limb_l = limb_r = 0.0
            arm = 0.0
        elif prim.name == "wave":
            vert = 0.0
            limb_l = limb_r = 0.0
            arm = p["amp"] * np.sin(2 * np.pi * p["freq"] * t)
        elif prim.name == "squat":
            vert = -p["depth"] * 4.0 * s * (1.0 - s)
            limb_l = limb_r = 0.0
            arm = 0.0
        else:  # stand
            vert = 0.0
            limb_l = limb_r = 0.0
            arm = 0.0
        out[i] = [
            state["x"],
            state["y"],
            np.sin(state["heading"]),
            np.cos(state["heading"]),
            vert,
            limb_l,
            limb_r,
            arm,
        ]
    return out


def _stand_tier(duration: int) -> int:
    if duration < 29:
        return 0
    if duration < 39:
        return 1
    return 2


def _draw_params(name: str, duration: int, rng: Xoshiro256) -> dict[str, float]:
    """Sample an intensity tier, then parameters from the tier's band.

    Bands are separated by margins so the tier (and hence the caption verb)
    is recoverable from the motion. Translation speeds are kept small so root
    position stays O(1) and the quantizer's distance budget is not spent on
    absolute location.
    """
    n_tiers = len(VERB_TABLE[name])
    t = rng.randint(n_tiers)
    if name == "walk":
        return {"tier": t, "speed": 0.05 + 0.03 * t + rng.uniform(0.0, 0.01),
                "freq": 1.1 + 0.4 * t, "bob": 0.05, "arm": 0.2}
    if name == "run":
        return {"tier": t, "speed": 0.18 + 0.05 * t + rng.uniform(0.0, 0.02),
                "freq": 2.3 + 0.5 * t, "bob": 0.08 + 0.03 * t, "arm": 0.5}
    if name == "jump":
        return {"tier": t, "height": 0.25 + 0.15 * t + rng.uniform(0.0, 0.05)}
    if name in ("turn_left", "turn_right"):
        return {"tier": t, "rate": 0.7 + 0.6 * t + rng.uniform(0.0, 0.15)}
    if name == "wave":
        return {"tier": t, "amp": 0.4 + 0.25 * t + rng.uniform(0.0, 0.08),
                "freq": 1.5 + 0.5 * t}
    if name == "squat":
        return {"tier": t, "depth": 0.15 + 0.15 * t + rng.uniform(0.0, 0.05)}
    # stand: the tier is its duration band (short pause / stand / long rest)
    return {"tier": _stand_tier(duration)}


def _make_caption(prims: list[Primitive], rng: Xoshiro256, max_len: int) -> list[str]:
    words = list(rng.choice(OPENERS))
    for k, prim in enumerate(prims):
        if k > 0:
            words.append("then")
        words.append(VERB_TABLE[prim.name][int(prim.params["tier"])])
        if rng.random() < 0.3 and len(words) < max_len - 2 * (len(prims) - 1 - k) - 1:
            words.append(rng.choice(ADVERBS))
    return words[:max_len]


def split_of(record_id: str) -> str:
    """80/10/10 train/val/test assignment by hash of id."""
    u = hash64(hash_str(record_id)) / 2**64
    if u < 0.8:
        return "train"
    if u < 0.9:
        return "val"
    return "test"


def generate_record(seed: int, index: int, config: CorpusConfig, vocab: TextVocab) -> CorpusRecord:
    rng = Xoshiro256(hash64(seed, index))
    rid = f"rec{index:05d}"
    n_prims = config.min_primitives + rng.randint(config.max_primitives - config.min_primitives + 1)
    prims = []
    budget = config.max_frames
    for k in range(n_prims):
        remaining_slots = n_prims - k - 1
        hi = min(config.max_duration, budget - remaining_slots * config.min_duration)
        dur = config.min_duration + rng.randint(max(hi - config.min_duration + 1, 1))
        name = rng.choice(PRIMITIVE_NAMES)
        prims.append(Primitive(name, dur, _draw_params(name, dur, rng)))
        budget -= dur
    state = {"x": 0.0, "y": 0.0, "heading": 0.0, "phase": 0.0}
    segments = [_synth_primitive(p, state, config.fps) for p in prims]
    data = np.concatenate(segments, axis=0)
    if config.noise_sigma > 0:
        noise = np.array(
            [rng.gauss() for _ in range(data.size)], dtype=np.float64
        ).reshape(data.shape)
        data = data + config.noise_sigma * noise
    caption_words = _make_caption(prims, rng, config.max_caption_len)
    caption_text = " ".join(caption_words)
    return CorpusRecord(
        id=rid,
        clip=MotionClip(data.astype(np.float32), fps=config.fps),
        caption_text=caption_text,
        caption_tokens=tokenize_caption(caption_text, vocab, config.max_caption_len),
        primitives=[p.name for p in prims],
        split=split_of(rid),
    )


def generate_corpus(seed: int, count: int, config: CorpusConfig | None = None,
                    vocab: TextVocab | None = None) -> list[CorpusRecord]:
    """Deterministic corpus of `count` records. Per-record RNG is derived from
    (seed, index), so generation is order-independent and parallel-safe."""
    if count < 1:
        raise ValueError("count must be >= 1")
    config = config or CorpusConfig()
    vocab = vocab or build_vocab()
    return [generate_record(seed, i, config, vocab) for i in range(count)]


def tokenize_caption(text: str, vocab: TextVocab, max_len: int) -> list[int]:
    """Whitespace split, lowercase, right-pad with [PAD] to max_len; truncate if longer."""
    ids = [vocab.id_of(w) for w in text.lower().split()]
    ids = ids[:max_len]
    return ids + [PAD] * (max_len - len(ids))


def verb_set(tokens: list[int], vocab: TextVocab) -> set[int]:
    """Distinct verb token ids occurring in a token sequence."""
    return {t for t in tokens if vocab.is_verb(t)}


def save_corpus(records: list[CorpusRecord], path: str) -> None:
    """Line-delimited TSV: id, split, caption, primitive names, fps, frames, motion values."""
    with open(path, "w") as f:
        for rec in records:
            fields = [
                rec.id,
                rec.split,
                rec.caption_text,
                " ".join(rec.primitives),
                str(rec.clip.fps),
                str(rec.clip.frames),
            ]
            fields.extend(f"{v:.9g}" for v in rec.clip.data.reshape(-1))
            f.write("\t".join(fields) + "\n")


def load_corpus(path: str, vocab: TextVocab, max_caption_len: int = 12) -> list[CorpusRecord]:
    records = []
    with open(path) as f:
        for line in f:
            parts = line.rstrip("\n").split("\t")
            rid, split, caption, prims, fps, frames = parts[:6]
            frames = int(frames)
            values = np.array(parts[6:], dtype=np.float32)
            data = values.reshape(frames, -1)
            records.append(
                CorpusRecord(
                    id=rid,
                    clip=MotionClip(data, fps=int(fps)),
                    caption_text=caption,
                    caption_tokens=tokenize_caption(caption, vocab, max_caption_len),
                    primitives=prims.split(),
                    split=split,
                )
            )
    return records


def save_vocab(vocab: TextVocab, path: str) -> None:
    with open(path, "w") as f:
        for t in vocab.tokens:
            f.write(t + "\n")


def load_vocab(path: str) -> TextVocab:
    with open(path) as f:
        return TextVocab([line.rstrip("\n") for line in f if line.strip()])
