"""Flow matching: interpolant construction, velocity regression, classifier-free
guidance, and first-order Euler sampling.

The interpolant is x_t = t*x1 + (1 - (1-sigma_min)*t)*x0 with constant
velocity v_t = x1 - (1-sigma_min)*x0 along each path, so a single Euler step
with the true velocity lands on x1 + sigma_min*x0 and more steps change
nothing beyond float round-off.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .models import FlowModel, patchify_array, unpatchify_array
from .rng import substream

SIGMA_MIN_DEFAULT = 1e-4


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 3.0
    cond_drop_prob: float = 0.1

    def validate(self):
        if self.scale < 0:
            raise ValueError("guidance scale must be >= 0")
        if not 0.0 <= self.cond_drop_prob < 1.0:
            raise ValueError("cond_drop_prob must lie in [0, 1)")


@dataclass
class FlowSample:
    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    xt: np.ndarray
    vt: np.ndarray
    sigma_min: float


def patchify(latents: np.ndarray, p_lw: int, p_t: int,
             proj: np.ndarray | None = None) -> np.ndarray:
    """Non-overlapping patch tokens, optionally projected by `proj` (pd, h)."""
    tokens = patchify_array(latents, p_lw, p_t)
    return tokens if proj is None else tokens @ proj


def unpatchify(tokens: np.ndarray, p_lw: int, p_t: int, frames: int,
               channels: int, grid: int) -> np.ndarray:
    return unpatchify_array(tokens, p_lw, p_t, frames, channels, grid)


def interpolate(x0: np.ndarray, x1: np.ndarray, t,
                sigma_min: float = SIGMA_MIN_DEFAULT) -> tuple[np.ndarray, np.ndarray]:
    """Point on the noise->data path and its (constant) time derivative."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    t_arr = np.asarray(t, dtype=np.float64)
    if t_arr.ndim == 1:
        t_arr = t_arr.reshape((-1,) + (1,) * (x1.ndim - 1))
    xt = t_arr * x1 + (1.0 - (1.0 - sigma_min) * t_arr) * x0
    vt = x1 - (1.0 - sigma_min) * x0
    if np.isscalar(t) or np.asarray(t).ndim == 0:
        vt = np.broadcast_to(vt, xt.shape).copy()
    return xt, vt


def draw_flow_sample(x1: np.ndarray, seed: int,
                     sigma_min: float = SIGMA_MIN_DEFAULT) -> FlowSample:
    rng = substream(seed, "flow")
    x1 = np.asarray(x1)
    t = rng.uniform(0.0, 1.0, size=x1.shape[0])
    x0 = rng.standard_normal(x1.shape)
    xt, vt = interpolate(x0, x1, t, sigma_min)
    return FlowSample(x0=x0, x1=x1, t=t, xt=xt, vt=vt, sigma_min=sigma_min)


def fm_loss(model: FlowModel, episodes, guidance: GuidanceConfig, seed: int,
            sigma_min: float = SIGMA_MIN_DEFAULT) -> T.Tensor:
    """Velocity-matching MSE with joint conditioning dropout.

    One t ~ U(0,1) and one Gaussian x0 per batch item; with probability
    cond_drop_prob all three conditioning streams of an item are swapped for
    the learned null embeddings.
    """
    guidance.validate()
    x1 = np.stack([e.future_latents.values for e in episodes])
    past = np.stack([e.past_latents.values for e in episodes])
    acts = np.stack([np.concatenate([e.past_actions.values, e.future_actions.values])
                     for e in episodes])
    sample = draw_flow_sample(x1, seed, sigma_min)
    drop = None
    if guidance.cond_drop_prob > 0:
        drop = substream(seed, "drop").random(x1.shape[0]) < guidance.cond_drop_prob
    u = model.forward(sample.xt, past, acts, sample.t, drop=drop)
    target = T.Tensor(sample.vt, dtype=u.dtype)
    diff = u - target
    return (diff * diff).mean()


def cfg_combine(u_cond: np.ndarray, u_uncond: np.ndarray, scale: float) -> np.ndarray:
    """u_uncond + scale * (u_cond - u_uncond); scale 1 returns u_cond bit-exactly."""
    if u_cond.shape != u_uncond.shape:
        raise ValueError("guidance operands must share a shape")
    if scale == 1.0:
        return u_cond
    return u_uncond + scale * (u_cond - u_uncond)


def euler_sample(model: FlowModel, past_latents: np.ndarray, actions: np.ndarray,
                 steps: int, guidance: GuidanceConfig, seed: int,
                 velocity_fn=None) -> np.ndarray:
    """Integrate the learned field from t=0 to t=1 starting at Gaussian noise.

    `velocity_fn(x, t) -> v` overrides the model (used by integrator tests).
    Returns future latents (B, f, C, G, G).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    guidance.validate()
    w = model.world
    b = past_latents.shape[0]
    shape = (b, w.future_frames, w.channels, w.grid, w.grid)
    rng = substream(seed, "euler")
    x = rng.standard_normal(shape)
    dt = 1.0 / steps
    all_drop = np.ones(b, dtype=bool)
    for k in range(steps):
        t = np.full(b, k / steps)
        try:
            if velocity_fn is not None:
                u = velocity_fn(x, t)
            else:
                with T.no_grad():
                    u_cond = model.forward(x.astype(np.float32), past_latents,
                                           actions, t).data
                    if guidance.scale == 1.0:
                        u = u_cond
                    else:
                        u_uncond = model.forward(x.astype(np.float32), past_latents,
                                                 actions, t, drop=all_drop).data
                        u = cfg_combine(u_cond, u_uncond, guidance.scale)
        except T.NumericsError as exc:
            raise T.NumericsError(f"euler integration aborted at step {k}: {exc}") from exc
        x = x + dt * np.asarray(u, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise T.NumericsError(f"euler integration produced non-finite state at step {k}")
    return x
