"""Masked video modelling: corruption, per-frame masking, masked cross-entropy,
and frame-by-frame parallel iterative decoding.

Training input is the concatenated past+future token sequence, corrupted by
random token replacements at a rate drawn from U(0, rho_max), after which the
future frames are masked per-frame: draw r ~ U(0,1), threshold gamma(r), mask
each token independently with that probability. Loss is the mean NLL over
masked positions only; unmasked positions contribute nothing, not even via the
corrupted values (the mask gates the loss).

Decoding fills one future frame at a time: start fully masked, predict all
masked tokens in parallel, then re-mask a random fraction gamma(k/K) and
re-predict, K passes total; the final pass is argmax.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import substream
from .world import TokenGrid, WorldConfig


@dataclass(frozen=True)
class MaskSchedule:
    """Cosine schedule gamma(r) = cos(pi * r / 2): 1 at r=0, 0 at r=1."""
    kind: str = "cosine"

    def gamma(self, r):
        if self.kind != "cosine":
            raise ValueError(f"unknown schedule {self.kind!r}")
        return np.cos(np.asarray(r) * math.pi / 2.0)


@dataclass
class MaskState:
    work_tokens: np.ndarray       # (..., f, G, G) with mask ids allowed
    mask: np.ndarray              # same shape, bool, true where masked
    corruption_rate: float
    frame_rates: np.ndarray | None = None  # gamma(r) actually used per frame


def corrupt_tokens(tokens: np.ndarray, vocab: int, rho_max: float,
                   seed: int) -> tuple[np.ndarray, float]:
    """Replace each token with prob rate ~ U(0, rho_max) by a different
    non-mask vocabulary id. Returns (corrupted copy, drawn rate)."""
    if not 0.0 <= rho_max < 1.0:
        raise ValueError("rho_max must lie in [0, 1)")
    out = np.array(tokens, copy=True)
    if rho_max == 0.0:
        return out, 0.0
    rng = substream(seed, "corrupt")
    rate = float(rng.uniform(0.0, rho_max))
    flip = rng.random(out.shape) < rate
    # draw from the vocabulary minus the current value; never the mask id
    repl = rng.integers(0, vocab - 1, size=out.shape)
    repl = repl + (repl >= out)
    out[flip] = repl[flip]
    return out, rate


def mask_future(future: np.ndarray, vocab: int, schedule: MaskSchedule,
                seed: int, forced_r: float | None = None) -> MaskState:
    """Per-frame threshold masking of future tokens; masked cells become the
    mask id (= vocab)."""
    rng = substream(seed, "mask")
    work = np.array(future, copy=True)
    mask = np.zeros(work.shape, dtype=bool)
    frames = work.shape[-3]
    lead = work.shape[:-3]
    rates = np.empty(lead + (frames,), dtype=np.float64)
    for idx in np.ndindex(lead or (1,)):
        key = idx if lead else ()
        for f in range(frames):
            r = forced_r if forced_r is not None else float(rng.uniform())
            g = float(schedule.gamma(r))
            rates[key + (f,)] = g
            m = rng.random(work.shape[-2:]) < g
            mask[key + (f,)] = m
    work[mask] = vocab
    return MaskState(work_tokens=work, mask=mask, corruption_rate=0.0,
                     frame_rates=rates)


def masked_ce_loss(logits: T.Tensor, targets: np.ndarray,
                   mask: np.ndarray) -> T.Tensor:
    """Mean negative log-likelihood over masked positions.

    logits (..., s) cover the future positions; targets/mask share the leading
    shape. An empty mask yields a detached zero with a warning.
    """
    vocab = logits.shape[-1]
    n_masked = int(mask.sum())
    if n_masked == 0:
        warnings.warn("masked_ce_loss: empty mask, loss defined as 0")
        return T.Tensor(np.zeros((), dtype=logits.dtype))
    flat_logits = logits.reshape(-1, vocab)
    flat_t = np.asarray(targets).reshape(-1, 1)
    flat_m = np.asarray(mask, dtype=logits.dtype).reshape(-1)
    lp = T.log_softmax(flat_logits, axis=-1)
    picked = T.take_along(lp, flat_t, axis=-1).reshape(-1)
    return -(picked * flat_m).sum() / n_masked


def training_batch(episodes, cfg: WorldConfig, rho_max: float,
                   schedule: MaskSchedule, seed: int):
    """Corrupt + mask a list of episodes into model-ready arrays.

    Returns (input tokens (B,T,G,G), actions (B,T,z), targets (B,f,G,G),
    mask (B,f,G,G)). Past frames are corrupted but never masked; targets are
    the original, uncorrupted future tokens.
    """
    toks = np.stack([np.concatenate([e.past_tokens.tokens, e.future_tokens.tokens])
                     for e in episodes])
    acts = np.stack([np.concatenate([e.past_actions.values, e.future_actions.values])
                     for e in episodes])
    targets = np.stack([e.future_tokens.tokens for e in episodes])
    corrupted, _ = corrupt_tokens(toks, cfg.vocab, rho_max, seed)
    state = mask_future(corrupted[:, cfg.past_frames:], cfg.vocab, schedule,
                        seed)
    inputs = np.concatenate([corrupted[:, :cfg.past_frames], state.work_tokens], axis=1)
    return inputs, acts, targets, state.mask


def decode_iterative(model, past: np.ndarray, actions: np.ndarray, k_steps: int,
                     seed: int, temperature: float = 1.0,
                     schedule: MaskSchedule = MaskSchedule(),
                     confidence_remask: bool = False) -> np.ndarray:
    """Frame-by-frame parallel decoding with K refinement passes per frame.

    past (B, p, G, G) clean context tokens; actions (B, p+f, z). Re-masking
    picks a uniformly random subset of fraction gamma(k/K) of the frame's
    tokens (confidence_remask instead keeps the least-confident ones masked).
    Returns future tokens (B, f, G, G) with no mask ids.
    """
    if k_steps < 1:
        raise ValueError("need at least one refinement step")
    w = model.world
    b = past.shape[0]
    n_sp = w.grid * w.grid
    rng = substream(seed, "decode")
    work = np.concatenate(
        [past, np.full((b, w.future_frames, w.grid, w.grid), w.mask_id, dtype=past.dtype)],
        axis=1)

    for frame in range(w.future_frames):
        fslice = work[:, w.past_frames + frame]
        for k in range(1, k_steps + 1):
            with T.no_grad():
                try:
                    logits = model.forward(work, actions)
                except T.NumericsError as exc:
                    raise T.NumericsError(
                        f"decode aborted at frame {frame}, pass {k}: {exc}") from exc
            frame_logits = logits.data[:, frame].reshape(b, n_sp, w.vocab)
            flat = fslice.reshape(b, n_sp)
            masked = flat == w.mask_id

            if k == k_steps or temperature <= 0:
                picks = frame_logits.argmax(axis=-1)
            else:
                z = frame_logits / temperature
                z = z - z.max(axis=-1, keepdims=True)
                p = np.exp(z)
                p /= p.sum(axis=-1, keepdims=True)
                cum = p.cumsum(axis=-1)
                u = rng.random((b, n_sp, 1))
                picks = (u < cum).argmax(axis=-1)
            flat[masked] = picks[masked]

            if k < k_steps:
                n_remask = int(math.floor(float(schedule.gamma(k / k_steps)) * n_sp))
                if n_remask > 0:
                    for i in range(b):
                        if confidence_remask:
                            conf = np.take_along_axis(
                                frame_logits[i], flat[i][:, None], axis=-1)[:, 0]
                            order = np.argsort(conf)
                            sel = order[:n_remask]
                        else:
                            sel = rng.choice(n_sp, size=n_remask, replace=False)
                        flat[i, sel] = w.mask_id
            fslice[...] = flat.reshape(b, w.grid, w.grid)

    future = work[:, w.past_frames:]
    if (future == w.mask_id).any():
        raise RuntimeError("decoding left mask ids behind")
    return future
