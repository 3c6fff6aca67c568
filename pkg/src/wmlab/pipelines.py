"""Paradigm pipelines: batch assembly, loss computation, sampling, evaluation.

Training batches are generated on the fly from the synthetic world; episode
seeds derive from the step seed, validation episodes from a disjoint "val"
sub-stream, so held-out data never overlaps training data.
"""

from __future__ import annotations

import time

import numpy as np

from . import masked as M
from . import flow as F
from . import tensor as T
from .config import RunConfig
from .evalbench import EvalReport, frechet_gaussian_proxy, psnr, token_accuracy
from .models import FlowModel, MaskedModel
from .rng import derive_seed
from .train import default_policy, init_weights
from .world import (EpisodeBatch, embed_tokens, gen_episode, oracle_future,
                    quantize_latents, world_codebook)


def _episodes(world_cfg, seed: int, count: int, namespace: str) -> list[EpisodeBatch]:
    return [gen_episode(derive_seed(seed, namespace, i), world_cfg)
            for i in range(count)]


def stack_episode_arrays(episodes):
    tokens = np.stack([np.concatenate([e.past_tokens.tokens, e.future_tokens.tokens])
                       for e in episodes])
    actions = np.stack([np.concatenate([e.past_actions.values, e.future_actions.values])
                        for e in episodes])
    return tokens, actions


class MaskedPipeline:
    paradigm = "masked"

    def __init__(self, cfg: RunConfig, dtype=np.float32, initialize: bool = True):
        cfg.validate()
        self.cfg = cfg
        self.model = MaskedModel(cfg.block_config(), cfg.world, dtype=dtype)
        self.schedule = M.MaskSchedule()
        if initialize:
            init_weights(self.model.store, default_policy("masked"),
                         derive_seed(cfg.seed, "init"), mask_token_row=True)

    def loss_for_step(self, step_seed: int, batch_size: int) -> T.Tensor:
        episodes = _episodes(self.cfg.world, step_seed, batch_size, "train")
        inputs, acts, targets, mask = M.training_batch(
            episodes, self.cfg.world, self.cfg.masked.rho_max, self.schedule,
            step_seed)
        logits = self.model.forward(inputs, acts)
        return M.masked_ce_loss(logits, targets, mask)

    def decode_episodes(self, episodes, seed: int) -> np.ndarray:
        past = np.stack([e.past_tokens.tokens for e in episodes])
        _, actions = stack_episode_arrays(episodes)
        return M.decode_iterative(
            self.model, past, actions, self.cfg.masked.decode_steps, seed,
            temperature=self.cfg.masked.temperature,
            confidence_remask=self.cfg.masked.confidence_remask)

    def evaluate(self, n_episodes: int | None = None, seed: int | None = None,
                 use_oracle: bool = False) -> EvalReport:
        cfg = self.cfg
        n = n_episodes or cfg.eval_episodes
        seed = cfg.seed if seed is None else seed
        episodes = _episodes(cfg.world, seed, n, "val")
        truth = np.stack([e.future_tokens.tokens for e in episodes])
        t0 = time.perf_counter()
        if use_oracle:
            decoded = np.stack([
                oracle_future(e.past_tokens, e.future_actions, cfg.world,
                              e.seed).tokens
                for e in episodes])
        else:
            decoded = self.decode_episodes(episodes, derive_seed(seed, "decode"))
        elapsed = time.perf_counter() - t0

        codebook = world_codebook(cfg.world)
        from .world import TokenGrid
        dec_lat = np.stack([
            embed_tokens(TokenGrid(d, cfg.world.vocab), codebook, jitter=0.0).values
            for d in decoded])
        true_lat = np.stack([
            embed_tokens(e.future_tokens, codebook, jitter=0.0).values
            for e in episodes])
        c = cfg.world.channels
        return EvalReport(
            psnr_db=psnr(dec_lat, true_lat),
            token_accuracy=token_accuracy(decoded, truth),
            frechet_proxy=frechet_gaussian_proxy(
                np.moveaxis(dec_lat, 2, -1).reshape(-1, c),
                np.moveaxis(true_lat, 2, -1).reshape(-1, c)),
            params_billions=round(self.model.store.count() / 1e9, 3),
            samples_per_second=n / elapsed if elapsed > 0 else None,
            peak_param_bytes=self.model.store.nbytes(),
        )


class FlowPipeline:
    paradigm = "flow"

    def __init__(self, cfg: RunConfig, dtype=np.float32, initialize: bool = True):
        cfg.validate()
        self.cfg = cfg
        self.model = FlowModel(cfg.block_config(), cfg.world,
                               patch=cfg.model.patch_spec(), dtype=dtype)
        if initialize:
            init_weights(self.model.store, default_policy("flow"),
                         derive_seed(cfg.seed, "init"))

    def guidance(self) -> F.GuidanceConfig:
        return F.GuidanceConfig(scale=self.cfg.flow.guidance_scale,
                                cond_drop_prob=self.cfg.flow.cond_drop_prob)

    def loss_for_step(self, step_seed: int, batch_size: int) -> T.Tensor:
        episodes = _episodes(self.cfg.world, step_seed, batch_size, "train")
        return F.fm_loss(self.model, episodes, self.guidance(), step_seed,
                         sigma_min=self.cfg.flow.sigma_min)

    def sample_episodes(self, episodes, seed: int, steps: int | None = None) -> np.ndarray:
        past = np.stack([e.past_latents.values for e in episodes])
        _, actions = stack_episode_arrays(episodes)
        return F.euler_sample(self.model, past, actions,
                              steps or self.cfg.flow.sample_steps,
                              self.guidance(), seed)

    def validation_mse(self, n_episodes: int, seed: int) -> tuple[float, float]:
        """(velocity MSE, predict-zero baseline E||vt||^2) on held-out episodes."""
        episodes = _episodes(self.cfg.world, seed, n_episodes, "val")
        with T.no_grad():
            loss = F.fm_loss(self.model, episodes,
                             F.GuidanceConfig(scale=1.0, cond_drop_prob=0.0),
                             derive_seed(seed, "valnoise"),
                             sigma_min=self.cfg.flow.sigma_min)
        x1 = np.stack([e.future_latents.values for e in episodes])
        sample = F.draw_flow_sample(x1, derive_seed(seed, "valnoise"),
                                    self.cfg.flow.sigma_min)
        baseline = float((sample.vt ** 2).mean())
        return float(loss.data), baseline

    def evaluate(self, n_episodes: int | None = None, seed: int | None = None,
                 use_oracle: bool = False) -> EvalReport:
        cfg = self.cfg
        n = n_episodes or cfg.eval_episodes
        seed = cfg.seed if seed is None else seed
        episodes = _episodes(cfg.world, seed, n, "val")
        truth_tokens = np.stack([e.future_tokens.tokens for e in episodes])
        true_lat = np.stack([e.future_latents.values for e in episodes])
        codebook = world_codebook(cfg.world)

        t0 = time.perf_counter()
        if use_oracle:
            sampled = true_lat.astype(np.float64)
        else:
            sampled = self.sample_episodes(episodes, derive_seed(seed, "sample"))
        elapsed = time.perf_counter() - t0

        from .world import LatentClip
        decoded = np.stack([
            quantize_latents(LatentClip(s.astype(np.float32)), codebook).tokens
            for s in sampled])
        c = cfg.world.channels
        return EvalReport(
            psnr_db=psnr(sampled, true_lat.astype(np.float64)),
            token_accuracy=token_accuracy(decoded, truth_tokens),
            frechet_proxy=frechet_gaussian_proxy(
                np.moveaxis(sampled, 2, -1).reshape(-1, c),
                np.moveaxis(true_lat, 2, -1).reshape(-1, c)),
            params_billions=round(self.model.store.count() / 1e9, 3),
            samples_per_second=n / elapsed if elapsed > 0 else None,
            peak_param_bytes=self.model.store.nbytes(),
        )


def build_pipeline(cfg: RunConfig, dtype=np.float32, initialize: bool = True):
    if cfg.paradigm == "masked":
        return MaskedPipeline(cfg, dtype=dtype, initialize=initialize)
    return FlowPipeline(cfg, dtype=dtype, initialize=initialize)
