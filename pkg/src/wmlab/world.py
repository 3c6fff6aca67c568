"""Deterministic action-conditioned token world.

Stands in for a real video dataset plus tokenizer pair. Dynamics are an exact
function of (seed, actions): a static hashed background with a 2x2 sprite that
moves by the rounded first two action components each latent frame, with
wraparound. Because the rule is closed-form, the world doubles as the
ground-truth oracle for training targets and evaluation.

Token layout: background ids live in [0, s/2); sprite ids in [s/2, s). The id
`s` is reserved as the MASK token and never appears in generated grids.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .rng import substream


@dataclass(frozen=True)
class WorldConfig:
    grid: int = 8           # G: tokens per spatial side
    vocab: int = 64         # s: token vocabulary (MASK = s is reserved on top)
    action_dim: int = 4     # z
    past_frames: int = 2    # latent frames of context
    future_frames: int = 1  # latent frames to predict
    channels: int = 8       # continuous latent channels for embed_tokens
    jitter: float = 0.01    # Gaussian noise scale in embed_tokens

    def validate(self):
        if self.grid < 4:
            raise ValueError(f"grid must be >= 4, got {self.grid}")
        if self.vocab < 8:
            raise ValueError(f"vocab must be >= 8, got {self.vocab}")
        if self.action_dim < 2:
            raise ValueError("action_dim must be >= 2 (first two move the sprite)")
        if self.past_frames < 1 or self.future_frames < 1:
            raise ValueError("need at least one past and one future frame")

    @property
    def mask_id(self) -> int:
        return self.vocab

    @property
    def total_frames(self) -> int:
        return self.past_frames + self.future_frames


@dataclass
class ActionSequence:
    values: np.ndarray  # (T, z) float32 in [-1, 1]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError("actions must be (T, z)")
        if np.abs(self.values).max(initial=0.0) > 1.0 + 1e-6:
            raise ValueError("action components must lie in [-1, 1]")


@dataclass
class TokenGrid:
    tokens: np.ndarray  # (T, G, G) int32 in [0, vocab)
    vocab: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int32)
        if self.tokens.ndim != 3:
            raise ValueError("token grid must be (T, G, G)")

    @property
    def frames(self) -> int:
        return self.tokens.shape[0]

    @property
    def grid(self) -> int:
        return self.tokens.shape[1]

    def copy(self) -> "TokenGrid":
        return TokenGrid(self.tokens.copy(), self.vocab)


@dataclass
class LatentClip:
    values: np.ndarray  # (T, C, G, G) float32

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 4:
            raise ValueError("latent clip must be (T, C, G, G)")


@dataclass
class EpisodeBatch:
    past_tokens: TokenGrid
    future_tokens: TokenGrid
    past_latents: LatentClip
    future_latents: LatentClip
    past_actions: ActionSequence
    future_actions: ActionSequence
    seed: int


def _mix_hash(x: np.ndarray, y: np.ndarray, seed: int) -> np.ndarray:
    """Stable integer mix of cell coordinates and seed (splitmix64 finalizer)."""
    v = (np.uint64(seed) ^ (x.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15))
         ^ (y.astype(np.uint64) * np.uint64(0xBF58476D1CE4E5B9)))
    with np.errstate(over="ignore"):
        v = (v ^ (v >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        v = (v ^ (v >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        v = v ^ (v >> np.uint64(31))
    return v


def _background(cfg: WorldConfig, seed: int) -> np.ndarray:
    ys, xs = np.mgrid[0:cfg.grid, 0:cfg.grid]
    return (_mix_hash(xs, ys, seed) % np.uint64(cfg.vocab // 2)).astype(np.int32)


def _sprite_step(action: np.ndarray) -> tuple[int, int]:
    a = np.clip(action[:2], -1.0, 1.0)
    return int(np.rint(a[0])), int(np.rint(a[1]))


def _sprite_id(cfg: WorldConfig, action: np.ndarray) -> int:
    half = cfg.vocab // 2
    norm = float(np.linalg.norm(np.clip(action, -1.0, 1.0)))
    bucket = int(norm / np.sqrt(cfg.action_dim) * half)
    return half + min(bucket, half - 1)


def _paint(frame: np.ndarray, pos: tuple[int, int], token: int, grid: int):
    x, y = pos
    for dy in (0, 1):
        for dx in (0, 1):
            frame[(y + dy) % grid, (x + dx) % grid] = token


def _rollout(cfg: WorldConfig, background: np.ndarray, start: tuple[int, int],
             actions: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
    """Frames produced by applying each action in turn from `start`."""
    frames = np.empty((len(actions), cfg.grid, cfg.grid), dtype=np.int32)
    pos = start
    for t, act in enumerate(actions):
        dx, dy = _sprite_step(act)
        pos = ((pos[0] + dx) % cfg.grid, (pos[1] + dy) % cfg.grid)
        frames[t] = background
        _paint(frames[t], pos, _sprite_id(cfg, act), cfg.grid)
    return frames, pos


def gen_episode(seed: int, cfg: WorldConfig) -> EpisodeBatch:
    """Deterministic episode: same (seed, cfg) gives bit-identical batches."""
    cfg.validate()
    rng = substream(seed, "world")
    background = _background(cfg, seed)
    start = (int(rng.integers(cfg.grid)), int(rng.integers(cfg.grid)))
    actions = rng.uniform(-1.0, 1.0, size=(cfg.total_frames, cfg.action_dim)).astype(np.float32)

    frames, _ = _rollout(cfg, background, start, actions)
    p = cfg.past_frames
    past = TokenGrid(frames[:p], cfg.vocab)
    future = TokenGrid(frames[p:], cfg.vocab)
    codebook = world_codebook(cfg)
    return EpisodeBatch(
        past_tokens=past,
        future_tokens=future,
        past_latents=embed_tokens(past, codebook, jitter=cfg.jitter,
                                  seed=seed, cfg=cfg),
        future_latents=embed_tokens(future, codebook, jitter=cfg.jitter,
                                    seed=seed + 1, cfg=cfg),
        past_actions=ActionSequence(actions[:p]),
        future_actions=ActionSequence(actions[p:]),
        seed=seed,
    )


def _find_sprite(cfg: WorldConfig, frame: np.ndarray) -> tuple[int, int]:
    """Top-left corner of the 2x2 sprite (ids >= s/2) with wraparound."""
    half = cfg.vocab // 2
    ys, xs = np.nonzero(frame >= half)
    if len(ys) == 0:
        raise ValueError("frame contains no sprite cells")
    for y, x in zip(ys, xs):
        covered = {((y + dy) % cfg.grid, (x + dx) % cfg.grid)
                   for dy in (0, 1) for dx in (0, 1)}
        if all(frame[cy, cx] >= half for cy, cx in covered):
            return int(x), int(y)
    # wholly overlapped by background hash collisions cannot happen: sprite ids
    # are disjoint from background ids by construction
    raise ValueError("sprite footprint not found")


def oracle_future(past: TokenGrid, actions: ActionSequence, cfg: WorldConfig,
                  seed: int) -> TokenGrid:
    """Exact ground-truth future tokens from the last past frame and actions.

    The sprite position is read off the visible frame; the background cells it
    hides are a pure function of (cell, seed), so the episode seed is required
    (EpisodeBatch carries it for this purpose).
    """
    pos = _find_sprite(cfg, past.tokens[-1])
    background = _background(cfg, seed)
    frames, _ = _rollout(cfg, background, pos, actions.values)
    return TokenGrid(frames, cfg.vocab)


def world_codebook(cfg: WorldConfig) -> np.ndarray:
    """Fixed seeded codebook (s, C); rows pairwise >= 1 apart, not learned."""
    for attempt in range(64):
        rng = substream(0xC0DEB00C, cfg.vocab, cfg.channels, attempt)
        rows = rng.standard_normal((cfg.vocab, cfg.channels))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        rows *= np.sqrt(cfg.channels)
        diff = rows[:, None, :] - rows[None, :, :]
        dist = np.linalg.norm(diff, axis=-1)
        np.fill_diagonal(dist, np.inf)
        if dist.min() >= 1.0:
            return rows.astype(np.float32)
    raise RuntimeError("could not construct a codebook with min distance >= 1")


def embed_tokens(grid: TokenGrid, codebook: np.ndarray, jitter: float = 0.01,
                 seed: int = 0, cfg: WorldConfig | None = None) -> LatentClip:
    """Map token ids to codebook rows, optionally adding seeded Gaussian jitter."""
    if grid.tokens.max(initial=0) >= codebook.shape[0] or grid.tokens.min(initial=0) < 0:
        raise ValueError("token id out of codebook range")
    latents = codebook[grid.tokens]            # (T, G, G, C)
    latents = np.moveaxis(latents, -1, 1)      # (T, C, G, G)
    if jitter > 0:
        rng = substream(seed, "jitter")
        latents = latents + jitter * rng.standard_normal(latents.shape)
    return LatentClip(latents.astype(np.float32))


def quantize_latents(clip: LatentClip, codebook: np.ndarray) -> TokenGrid:
    """Nearest-codebook-row token decode (the inverse of embed_tokens)."""
    t, c, g, _ = clip.values.shape
    flat = np.moveaxis(clip.values, 1, -1).reshape(-1, c)   # (T*G*G, C)
    d2 = (flat * flat).sum(axis=1, keepdims=True) \
        - 2.0 * flat @ codebook.T + (codebook * codebook).sum(axis=1)
    ids = d2.argmin(axis=1).astype(np.int32)
    return TokenGrid(ids.reshape(t, g, g), codebook.shape[0])


# -- binary episode format -----------------------------------------------------
# magic "HWM1", then G, s, z, p, f as little-endian int32, then token payload
# (p+f frames of int32, frame-major raster order), then action payload
# ((p+f) * z float32, frame-major).

EPISODE_MAGIC = b"HWM1"


def save_episode(path, episode: EpisodeBatch, cfg: WorldConfig):
    tokens = np.concatenate([episode.past_tokens.tokens,
                             episode.future_tokens.tokens], axis=0)
    actions = np.concatenate([episode.past_actions.values,
                              episode.future_actions.values], axis=0)
    with open(path, "wb") as fh:
        fh.write(EPISODE_MAGIC)
        fh.write(struct.pack("<5i", cfg.grid, cfg.vocab, cfg.action_dim,
                             cfg.past_frames, cfg.future_frames))
        fh.write(tokens.astype("<i4").tobytes())
        fh.write(actions.astype("<f4").tobytes())


def load_episode(path) -> tuple[EpisodeBatch, WorldConfig]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != EPISODE_MAGIC:
            raise ValueError(f"not an episode file (magic {magic!r})")
        g, s, z, p, f = struct.unpack("<5i", fh.read(20))
        cfg = WorldConfig(grid=g, vocab=s, action_dim=z,
                          past_frames=p, future_frames=f)
        n_tok = (p + f) * g * g
        tokens = np.frombuffer(fh.read(4 * n_tok), dtype="<i4").reshape(p + f, g, g)
        actions = np.frombuffer(fh.read(4 * (p + f) * z), dtype="<f4").reshape(p + f, z)
    codebook = world_codebook(cfg)
    past = TokenGrid(tokens[:p].copy(), s)
    future = TokenGrid(tokens[p:].copy(), s)
    episode = EpisodeBatch(
        past_tokens=past, future_tokens=future,
        past_latents=embed_tokens(past, codebook, jitter=0.0),
        future_latents=embed_tokens(future, codebook, jitter=0.0),
        past_actions=ActionSequence(actions[:p].copy()),
        future_actions=ActionSequence(actions[p:].copy()),
        seed=-1,
    )
    return episode, cfg


def save_token_png(path, grid: TokenGrid):
    """Debug colormap: frames side by side, token id mapped to hue."""
    from PIL import Image

    toks = grid.tokens
    t, g, _ = toks.shape
    hue = (toks.astype(np.float32) / max(grid.vocab, 1)) * 6.0
    k = np.floor(hue).astype(int) % 6
    f = hue - np.floor(hue)
    v, p_, q, s_ = 1.0, 0.15, 1.0 - 0.85 * f, 0.15 + 0.85 * f
    channels = np.select(
        [k == 0, k == 1, k == 2, k == 3, k == 4, k == 5],
        [np.stack([np.full_like(f, v), s_, np.full_like(f, p_)], -1),
         np.stack([q, np.full_like(f, v), np.full_like(f, p_)], -1),
         np.stack([np.full_like(f, p_), np.full_like(f, v), s_], -1),
         np.stack([np.full_like(f, p_), q, np.full_like(f, v)], -1),
         np.stack([s_, np.full_like(f, p_), np.full_like(f, v)], -1),
         np.stack([np.full_like(f, v), np.full_like(f, p_), q], -1)])
    img = (channels.transpose(1, 0, 2, 3).reshape(g, t * g, 3) * 255).astype(np.uint8)
    scale = max(1, 256 // (t * g))
    Image.fromarray(img).resize((t * g * scale, g * scale), Image.NEAREST).save(path)
