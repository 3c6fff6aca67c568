"""Model assemblies for the two paradigms.

MaskedModel: discrete tokens in, per-token vocabulary logits out. The token
embedding table carries one extra row for the mask token.

FlowModel: noisy future latents + conditioning in, velocity field out. Latents
are patch-tokenized, the timestep enters through sinusoidal features and a
learned MLP, and the conditioning streams can be swapped for learned null
embeddings (classifier-free guidance training).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import (ACTION_STREAMS, BlockConfig, RopeCache, StreamBundle,
                     block_param_specs, block_stack_forward, count_param_specs,
                     declare_params, make_sharing_plan)
from .params import ParamStore
from .rope import StreamLayout
from .world import WorldConfig

TIME_FREQ_DIM = 256
TIME_SCALE = 1000.0


def _action_mlp_specs(z: int, h: int) -> list[tuple[str, tuple]]:
    specs = []
    for name in ACTION_STREAMS:
        specs.extend([(f"act_embed.{name}.w1", (z, h)), (f"act_embed.{name}.b1", (h,)),
                      (f"act_embed.{name}.w2", (h, h)), (f"act_embed.{name}.b2", (h,))])
    return specs


def masked_param_specs(block_cfg: BlockConfig, world: WorldConfig) -> list[tuple[str, tuple]]:
    h, s = block_cfg.dim, world.vocab
    specs = [("token_embed.table", (s + 1, h))]
    specs += _action_mlp_specs(world.action_dim, h)
    specs += block_param_specs(block_cfg)
    specs += [("final_norm.g", (h,)), ("final_norm.b", (h,)),
              ("head.w", (h, s)), ("head.b", (s,))]
    return specs


def flow_param_specs(block_cfg: BlockConfig, world: WorldConfig,
                     patch: "PatchSpec") -> list[tuple[str, tuple]]:
    h = block_cfg.dim
    pd = patch.dim(world.channels)
    specs = []
    for name in ("v_p", "v_f"):
        specs.extend([(f"patch_embed.{name}.w", (pd, h)), (f"patch_embed.{name}.b", (h,))])
    specs += _action_mlp_specs(world.action_dim, h)
    specs += [("t_embed.w1", (TIME_FREQ_DIM, h)), ("t_embed.b1", (h,)),
              ("t_embed.w2", (h, h)), ("t_embed.b2", (h,))]
    specs += [(f"null.{name}", (h,)) for name in ("v_p", "a_p", "a_f")]
    specs += block_param_specs(block_cfg)
    specs += [("final.mod.w", (h, 2 * h)), ("final.mod.b", (2 * h,)),
              ("final.proj.w", (h, pd)), ("final.proj.b", (pd,))]
    return specs


def count_for_config(paradigm: str, block_cfg: BlockConfig, world: WorldConfig,
                     patch: "PatchSpec | None" = None) -> int:
    """Unique parameter count for a model configuration without building it."""
    if paradigm == "masked":
        cfg = BlockConfig(**{**block_cfg.__dict__, "with_time_modulation": False})
        specs = masked_param_specs(cfg, world)
    elif paradigm == "flow":
        cfg = BlockConfig(**{**block_cfg.__dict__, "with_time_modulation": True})
        specs = flow_param_specs(cfg, world, patch or PatchSpec())
    else:
        raise ValueError(f"unknown paradigm {paradigm!r}")
    return count_param_specs(specs, dict(make_sharing_plan(cfg)))


def _act_mlp(store: ParamStore, prefix: str, x: T.Tensor) -> T.Tensor:
    y = T.gelu(T.matmul(x, store[prefix + ".w1"]) + store[prefix + ".b1"])
    return T.matmul(y, store[prefix + ".w2"]) + store[prefix + ".b2"]


def sinusoidal_features(t: np.ndarray, dim: int = TIME_FREQ_DIM,
                        max_period: float = 10000.0) -> np.ndarray:
    """DDPM-style sin/cos features for scalar times (flow times scaled by 1e3)."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    ang = np.asarray(t, dtype=np.float64)[:, None] * TIME_SCALE * freqs[None, :]
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=-1)


class MaskedModel:
    """Bidirectional token transformer over the four streams."""

    def __init__(self, block_cfg: BlockConfig, world_cfg: WorldConfig,
                 dtype=np.float32):
        block_cfg = BlockConfig(**{**block_cfg.__dict__, "with_time_modulation": False})
        block_cfg.validate()
        world_cfg.validate()
        self.cfg = block_cfg
        self.world = world_cfg
        self.layout = StreamLayout(past_frames=world_cfg.past_frames,
                                   future_frames=world_cfg.future_frames,
                                   rows=world_cfg.grid, cols=world_cfg.grid)
        self._ropec: RopeCache | None = None
        store = ParamStore(dtype)
        declare_params(store, masked_param_specs(block_cfg, world_cfg),
                       dict(make_sharing_plan(block_cfg)))
        self.store = store

    @property
    def rope_cache(self) -> RopeCache:
        if self._ropec is None:
            self._ropec = RopeCache(self.layout, self.cfg.head_dim)
        return self._ropec

    def forward(self, tokens: np.ndarray, actions: np.ndarray,
                collect: list | None = None) -> T.Tensor:
        """tokens (B, T, G, G) int with mask ids allowed; actions (B, T, z).

        Returns future-token logits (B, f, G, G, s).
        """
        w = self.world
        b, t_total = tokens.shape[0], tokens.shape[1]
        if t_total != w.total_frames:
            raise ValueError(f"expected {w.total_frames} frames, got {t_total}")
        n_sp = w.grid * w.grid
        dtype = self.store.dtype

        emb = T.embedding(self.store["token_embed.table"],
                          tokens.reshape(b, t_total * n_sp))
        v_p = emb[:, :w.past_frames * n_sp]
        v_f = emb[:, w.past_frames * n_sp:]
        acts = T.Tensor(actions, dtype=dtype)
        a_p = _act_mlp(self.store, "act_embed.a_p", acts[:, :w.past_frames])
        a_f = _act_mlp(self.store, "act_embed.a_f", acts[:, w.past_frames:])

        bundle = StreamBundle(v_p=v_p, v_f=v_f, a_p=a_p, a_f=a_f, layout=self.layout)
        bundle = block_stack_forward(self.store, self.cfg, bundle, None,
                                     self.rope_cache, collect)
        y = T.layer_norm(bundle.v_f, self.store["final_norm.g"], self.store["final_norm.b"])
        logits = T.matmul(y, self.store["head.w"]) + self.store["head.b"]
        return logits.reshape(b, w.future_frames, w.grid, w.grid, w.vocab)


@dataclass(frozen=True)
class PatchSpec:
    p_lw: int = 2
    p_t: int = 1

    def validate(self, world: WorldConfig):
        if world.grid % self.p_lw:
            raise ValueError(f"grid {world.grid} not divisible by p_lw {self.p_lw}")
        if world.past_frames % self.p_t or world.future_frames % self.p_t:
            raise ValueError("frame counts must be divisible by p_t")

    def dim(self, channels: int) -> int:
        return self.p_t * channels * self.p_lw * self.p_lw


def patchify_array(latents: np.ndarray, p_lw: int, p_t: int) -> np.ndarray:
    """(B, T, C, G, G) -> (B, n_tokens, p_t*C*p_lw*p_lw), slot-major raster order."""
    b, t, c, g, _ = latents.shape
    if g % p_lw or t % p_t:
        raise ValueError("latents not divisible by patch sizes")
    ts, ny = t // p_t, g // p_lw
    x = latents.reshape(b, ts, p_t, c, ny, p_lw, ny, p_lw)
    x = x.transpose(0, 1, 4, 6, 2, 3, 5, 7)          # (B, ts, ny, nx, p_t, C, p, p)
    return x.reshape(b, ts * ny * ny, p_t * c * p_lw * p_lw)


def unpatchify_array(tokens: np.ndarray, p_lw: int, p_t: int, frames: int,
                     channels: int, grid: int) -> np.ndarray:
    b = tokens.shape[0]
    ts, ny = frames // p_t, grid // p_lw
    x = tokens.reshape(b, ts, ny, ny, p_t, channels, p_lw, p_lw)
    x = x.transpose(0, 1, 4, 5, 2, 6, 3, 7)
    return x.reshape(b, frames, channels, grid, grid)


def unpatchify_tensor(tokens: T.Tensor, p_lw: int, p_t: int, frames: int,
                      channels: int, grid: int) -> T.Tensor:
    b = tokens.shape[0]
    ts, ny = frames // p_t, grid // p_lw
    x = tokens.reshape(b, ts, ny, ny, p_t, channels, p_lw, p_lw)
    x = x.transpose(0, 1, 4, 5, 2, 6, 3, 7)
    return x.reshape(b, frames, channels, grid, grid)


class FlowModel:
    """Velocity-field transformer over patch tokens of the four streams."""

    def __init__(self, block_cfg: BlockConfig, world_cfg: WorldConfig,
                 patch: PatchSpec = PatchSpec(), dtype=np.float32):
        block_cfg = BlockConfig(**{**block_cfg.__dict__, "with_time_modulation": True})
        block_cfg.validate()
        world_cfg.validate()
        patch.validate(world_cfg)
        self.cfg = block_cfg
        self.world = world_cfg
        self.patch = patch
        self.layout = StreamLayout(past_frames=world_cfg.past_frames,
                                   future_frames=world_cfg.future_frames,
                                   rows=world_cfg.grid // patch.p_lw,
                                   cols=world_cfg.grid // patch.p_lw,
                                   t_step=patch.p_t)
        self._ropec: RopeCache | None = None
        store = ParamStore(dtype)
        declare_params(store, flow_param_specs(block_cfg, world_cfg, patch),
                       dict(make_sharing_plan(block_cfg)))
        self.store = store

    @property
    def rope_cache(self) -> RopeCache:
        if self._ropec is None:
            self._ropec = RopeCache(self.layout, self.cfg.head_dim)
        return self._ropec

    def _null_mix(self, tokens: T.Tensor, name: str, drop: np.ndarray | None) -> T.Tensor:
        if drop is None or not drop.any():
            return tokens
        dtype = self.store.dtype
        m = T.Tensor(drop.astype(dtype).reshape(-1, 1, 1))
        null = self.store[f"null.{name}"].reshape(1, 1, self.cfg.dim)
        return tokens * (1.0 - m) + null * m

    def time_embedding(self, t: np.ndarray) -> T.Tensor:
        feats = T.Tensor(sinusoidal_features(t), dtype=self.store.dtype)
        y = T.gelu(T.matmul(feats, self.store["t_embed.w1"]) + self.store["t_embed.b1"])
        return T.matmul(y, self.store["t_embed.w2"]) + self.store["t_embed.b2"]

    def forward(self, xt: np.ndarray, past_latents: np.ndarray, actions: np.ndarray,
                t: np.ndarray, drop: np.ndarray | None = None,
                collect: list | None = None) -> T.Tensor:
        """Predict the velocity field.

        xt (B, f, C, G, G) noisy future latents; past_latents (B, p, C, G, G);
        actions (B, p+f, z); t (B,) in [0, 1]; drop marks batch items whose
        conditioning is replaced by the learned null embeddings.
        """
        w, patch = self.world, self.patch
        b = xt.shape[0]
        dtype = self.store.dtype

        v_f = T.Tensor(patchify_array(xt, patch.p_lw, patch.p_t), dtype=dtype)
        v_f = T.matmul(v_f, self.store["patch_embed.v_f.w"]) + self.store["patch_embed.v_f.b"]
        v_p = T.Tensor(patchify_array(past_latents, patch.p_lw, patch.p_t), dtype=dtype)
        v_p = T.matmul(v_p, self.store["patch_embed.v_p.w"]) + self.store["patch_embed.v_p.b"]
        acts = T.Tensor(actions, dtype=dtype)
        a_p = _act_mlp(self.store, "act_embed.a_p", acts[:, :w.past_frames])
        a_f = _act_mlp(self.store, "act_embed.a_f", acts[:, w.past_frames:])

        v_p = self._null_mix(v_p, "v_p", drop)
        a_p = self._null_mix(a_p, "a_p", drop)
        a_f = self._null_mix(a_f, "a_f", drop)

        t_embed = self.time_embedding(np.asarray(t, dtype=np.float64))
        t_act = T.gelu(t_embed)
        bundle = StreamBundle(v_p=v_p, v_f=v_f, a_p=a_p, a_f=a_f, layout=self.layout)
        bundle = block_stack_forward(self.store, self.cfg, bundle, t_act,
                                     self.rope_cache, collect)

        y = T.layer_norm(bundle.v_f, None, None)
        mod = T.matmul(t_act, self.store["final.mod.w"]) + self.store["final.mod.b"]
        h = self.cfg.dim
        alpha = mod[:, :h].reshape(b, 1, h)
        beta = mod[:, h:].reshape(b, 1, h)
        y = y * (alpha + 1.0) + beta
        y = T.matmul(y, self.store["final.proj.w"]) + self.store["final.proj.b"]
        return unpatchify_tensor(y, patch.p_lw, patch.p_t, w.future_frames,
                                 w.channels, w.grid)
