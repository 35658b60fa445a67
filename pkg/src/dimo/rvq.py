"""Residual vector quantization of continuous motion channels.

A motion clip is cut into non-overlapping windows of `r` frames, each window
flattened (frame-major) into one vector, and the vector quantized by a stack
of `R` codebooks where layer l encodes the residual left by layers < l.
Reconstruction sums the selected codewords and unstacks back to frames.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC_CODEBOOK = b"DIMORVQ1"


class EmptyInputError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class CorruptGridError(ValueError):
    pass


@dataclass
class MotionClip:
    """Continuous multichannel motion: (frames, channels) float32 matrix."""

    data: np.ndarray
    fps: int = 20

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise ValueError("motion data must be a non-empty (frames, channels) matrix")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("motion data must be finite")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]


@dataclass
class TokenGrid:
    """Discretized motion: (length, R) codebook indices."""

    indices: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 2 or self.indices.shape[0] < 1:
            raise ValueError("token grid must be a non-empty (length, R) matrix")

    @property
    def length(self) -> int:
        return self.indices.shape[0]

    @property
    def layers(self) -> int:
        return self.indices.shape[1]


@dataclass
class EmaConfig:
    iters: int = 60
    decay: float = 0.99
    dead_threshold: float = 1e-3  # fraction of mean usage below which a code is reseeded
    seed: int = 0


@dataclass
class RvqCodebooks:
    codewords: np.ndarray  # (R, N, dim) float32
    r: int  # temporal downsample ratio
    ema_counts: np.ndarray = field(default=None)  # (R, N)

    def __post_init__(self):
        self.codewords = np.asarray(self.codewords, dtype=np.float32)
        if self.codewords.ndim != 3:
            raise ValueError("codewords must be (R, N, dim)")
        if self.codewords.shape[1] < 2:
            raise ValueError("need at least 2 codewords per layer")
        if not np.all(np.isfinite(self.codewords)):
            raise ValueError("codewords must be finite")
        if self.ema_counts is None:
            self.ema_counts = np.zeros(self.codewords.shape[:2], dtype=np.float64)

    @property
    def R(self) -> int:
        return self.codewords.shape[0]

    @property
    def N(self) -> int:
        return self.codewords.shape[1]

    @property
    def dim(self) -> int:
        return self.codewords.shape[2]


def frame_stack(clip: MotionClip, r: int) -> np.ndarray:
    """Stack non-overlapping windows of r frames into (floor(frames/r), channels*r) vectors.

    Trailing frames that do not fill a window are dropped. Concatenation is
    frame-major: [frame0_ch0..frame0_chC, frame1_ch0..].
    """
    if r < 1:
        raise ConfigurationError("downsample ratio must be >= 1")
    n = clip.frames // r
    if n == 0:
        raise EmptyInputError(f"clip has {clip.frames} frames, need at least r={r}")
    return clip.data[: n * r].reshape(n, r * clip.channels)


def frame_unstack(vectors: np.ndarray, channels: int, fps: int = 20) -> MotionClip:
    """Inverse of frame_stack."""
    n, dim = vectors.shape
    r = dim // channels
    return MotionClip(vectors.reshape(n * r, channels), fps=fps)


def _nearest(vectors: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    # Squared Euclidean distance; argmin ties resolve to the lowest index.
    d2 = (
        np.sum(vectors.astype(np.float64) ** 2, axis=1, keepdims=True)
        - 2.0 * vectors.astype(np.float64) @ codebook.astype(np.float64).T
        + np.sum(codebook.astype(np.float64) ** 2, axis=1)[None, :]
    )
    return np.argmin(d2, axis=1)


def train_codebooks(vectors: np.ndarray, R: int, N: int, r: int, config: EmaConfig | None = None) -> RvqCodebooks:
    """Train R residual codebook layers with EMA k-means.

    Layer l is fit on the residuals left by layers < l. Dead codewords
    (EMA usage below threshold * mean usage) are reseeded from random residuals.
    Deterministic given config.seed.
    """
    config = config or EmaConfig()
    vectors = np.asarray(vectors, dtype=np.float64)
    if R < 1:
        raise ConfigurationError("R must be >= 1")
    if vectors.shape[0] < N:
        raise InsufficientDataError(f"{vectors.shape[0]} training vectors < N={N}")
    rng = np.random.default_rng(config.seed)
    dim = vectors.shape[1]
    books = np.zeros((R, N, dim), dtype=np.float64)
    counts_all = np.zeros((R, N), dtype=np.float64)
    residual = vectors.copy()
    for layer in range(R):
        init_idx = rng.choice(residual.shape[0], size=N, replace=False)
        cb = residual[init_idx].copy()
        ema_counts = np.ones(N)
        ema_sums = cb.copy()
        for _ in range(config.iters):
            assign = _nearest(residual, cb)
            counts = np.bincount(assign, minlength=N).astype(np.float64)
            sums = np.zeros_like(cb)
            np.add.at(sums, assign, residual)
            ema_counts = config.decay * ema_counts + (1 - config.decay) * counts
            ema_sums = config.decay * ema_sums + (1 - config.decay) * sums
            live = ema_counts > 1e-12
            cb[live] = ema_sums[live] / ema_counts[live][:, None]
            dead = ema_counts < config.dead_threshold * ema_counts.mean()
            n_dead = int(dead.sum())
            if n_dead:
                reseed = residual[rng.integers(0, residual.shape[0], size=n_dead)]
                cb[dead] = reseed
                ema_sums[dead] = reseed
                ema_counts[dead] = ema_counts.mean()
        books[layer] = cb
        counts_all[layer] = ema_counts
        assign = _nearest(residual, cb)
        residual = residual - cb[assign]
    return RvqCodebooks(books.astype(np.float32), r=r, ema_counts=counts_all)


def encode(clip: MotionClip, books: RvqCodebooks) -> TokenGrid:
    """Quantize a clip: per window, per layer, nearest codeword to the running residual."""
    if clip.channels * books.r != books.dim:
        raise ConfigurationError(
            f"channels*r = {clip.channels * books.r} does not match codebook dim {books.dim}"
        )
    vectors = frame_stack(clip, books.r).astype(np.float64)
    indices = np.zeros((vectors.shape[0], books.R), dtype=np.int64)
    residual = vectors
    for layer in range(books.R):
        cb = books.codewords[layer].astype(np.float64)
        idx = _nearest(residual, cb)
        indices[:, layer] = idx
        residual = residual - cb[idx]
    return TokenGrid(indices)


def decode(grid: TokenGrid, books: RvqCodebooks, channels: int | None = None, fps: int = 20) -> MotionClip:
    """Reconstruct motion by summing selected codewords over layers and unstacking."""
    if grid.layers != books.R:
        raise CorruptGridError(f"grid has {grid.layers} layers, codebooks have {books.R}")
    if grid.indices.min() < 0 or grid.indices.max() >= books.N:
        raise CorruptGridError("grid index out of codebook range")
    if channels is None:
        channels = books.dim // books.r
    recon = np.zeros((grid.length, books.dim), dtype=np.float64)
    for layer in range(books.R):
        recon += books.codewords[layer][grid.indices[:, layer]].astype(np.float64)
    return frame_unstack(recon.astype(np.float32), channels, fps=fps)


def token_rate(books: RvqCodebooks, fps: int) -> tuple[float, float]:
    """(tokens per second, bits per second) = (fps*R/r, tokens/s * log2 N)."""
    n = books.N
    if n & (n - 1) != 0:
        raise ConfigurationError("codebook size must be a power of two for exact bit accounting")
    tokens_per_s = fps * books.R / books.r
    return tokens_per_s, tokens_per_s * math.log2(n)


def reconstruction_mse(clips: list[MotionClip], books: RvqCodebooks) -> float:
    """Mean per-element squared round-trip error over the windowed portion of each clip."""
    total, count = 0.0, 0
    for clip in clips:
        n = (clip.frames // books.r) * books.r
        recon = decode(encode(clip, books), books, channels=clip.channels, fps=clip.fps)
        err = clip.data[:n].astype(np.float64) - recon.data.astype(np.float64)
        total += float(np.sum(err**2))
        count += err.size
    return total / count


def save_codebooks(books: RvqCodebooks, path: str) -> None:
    """Binary codebook file: magic, u32 R/N/dim/r, then float32 codewords (LE)."""
    with open(path, "wb") as f:
        f.write(MAGIC_CODEBOOK)
        f.write(struct.pack("<4I", books.R, books.N, books.dim, books.r))
        f.write(books.codewords.astype("<f4").tobytes())


def load_codebooks(path: str) -> RvqCodebooks:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC_CODEBOOK:
            raise CorruptGridError(f"bad codebook magic {magic!r}")
        R, N, dim, r = struct.unpack("<4I", f.read(16))
        data = np.frombuffer(f.read(R * N * dim * 4), dtype="<f4").reshape(R, N, dim)
        return RvqCodebooks(data.copy(), r=r)
