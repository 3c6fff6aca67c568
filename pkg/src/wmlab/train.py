"""Optimization harness: AdamW with decoupled weight decay, learning-rate
schedules, seeded initialization policies, binary checkpoints, and the
deterministic training loop.

Determinism contract: the whole run is a pure function of (configs, seed).
Every random draw comes from a named sub-stream of the root seed, so two runs
of the same command produce byte-identical checkpoints and metrics logs. The
metrics log's wall_ms column is 0 unless timing capture is switched on, which
would otherwise break that contract.
"""

from __future__ import annotations

import fnmatch
import json
import math
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .params import ParamStore
from .rng import derive_seed, substream

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

SCHEDULES = ("linear_warmup_decay", "cosine", "constant")


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    schedule: str = "linear_warmup_decay"
    warmup_steps: int = 100
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    checkpoint_every: int = 0        # 0: only final
    resample_data: bool = True       # False reuses the step-0 batch every step
    record_timings: bool = False
    val_episodes: int = 32

    def validate(self):
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.warmup_steps >= self.steps and self.schedule == "linear_warmup_decay":
            raise ValueError("warmup_steps must be < steps")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")


def lr_at(step: int, cfg: TrainConfig) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    if cfg.schedule == "constant":
        return cfg.lr
    if cfg.schedule == "cosine":
        frac = min(step / cfg.steps, 1.0)
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    span = cfg.steps - cfg.warmup_steps
    frac = min((step - cfg.warmup_steps) / span, 1.0)
    return cfg.lr * (1.0 - frac)


# -- initialization ---------------------------------------------------------

def _xavier_uniform(rng, shape):
    if len(shape) >= 2:
        fan_in, fan_out = shape[0], shape[1]
    else:
        fan_in = fan_out = shape[0]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


INITIALIZERS = {
    "normal02": lambda rng, shape: 0.02 * rng.standard_normal(shape),
    "xavier_uniform": _xavier_uniform,
    "zeros": lambda rng, shape: np.zeros(shape),
    "ones": lambda rng, shape: np.ones(shape),
}


def default_policy(paradigm: str) -> list[tuple[str, str]]:
    """(glob pattern, initializer) pairs, first match wins.

    Both paradigms: sigma 0.02 normals, zero biases, unit norm gains. Masked:
    Xavier for the output head (the mask-token embedding row is handled in
    init_weights). Flow: Xavier for the final projection.
    """
    shared = [
        ("*norm*.g", "ones"), ("*norm*.b", "zeros"),
        ("*.b", "zeros"), ("*.b1", "zeros"), ("*.b2", "zeros"),
    ]
    if paradigm == "masked":
        return [("head.w", "xavier_uniform")] + shared + [("*", "normal02")]
    return [("final.proj.w", "xavier_uniform")] + shared + [("*", "normal02")]


def init_weights(store: ParamStore, policy: list[tuple[str, str]], seed: int,
                 mask_token_row: bool = False):
    """Apply the policy to every unique parameter, deterministically in seed.

    Per-parameter RNG streams are derived from (seed, name), so initialization
    does not depend on declaration order. With `mask_token_row`, the last row
    of token_embed.table (the mask token) is re-drawn Xavier-uniform.
    """
    for name, t in store.unique():
        kind = None
        for pattern, k in policy:
            if fnmatch.fnmatch(name, pattern):
                kind = k
                break
        if kind is None:
            raise ValueError(f"no initialization rule matches parameter {name!r}")
        rng = substream(seed, "init", name)
        t.data[...] = INITIALIZERS[kind](rng, t.shape).astype(t.dtype)
    if mask_token_row and "token_embed.table" in store:
        t = store["token_embed.table"]
        rng = substream(seed, "init", "token_embed.table", "mask_row")
        t.data[-1] = _xavier_uniform(rng, (t.shape[1],)).astype(t.dtype)


# -- AdamW -------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    skipped_steps: int = 0


def _decays(name: str, tensor: T.Tensor) -> bool:
    if tensor.ndim < 2:
        return False
    return ".mod" not in name and "norm" not in name


def optimizer_step(store: ParamStore, state: AdamState, lr: float,
                   cfg: TrainConfig) -> bool:
    """One AdamW step over unique storage; aliased parameters update once.

    Returns False (and counts a skip) if any gradient is non-finite.
    """
    items = store.unique()
    grads = {}
    for name, t in items:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            state.skipped_steps += 1
            return False
        grads[name] = g

    if cfg.grad_clip > 0:
        total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if total > cfg.grad_clip:
            scale = cfg.grad_clip / total
            grads = {k: g * scale for k, g in grads.items()}

    state.step += 1
    bc1 = 1.0 - ADAM_BETA1 ** state.step
    bc2 = 1.0 - ADAM_BETA2 ** state.step
    for name, t in items:
        g = grads[name].astype(np.float32)
        if name not in state.m:
            state.m[name] = np.zeros_like(t.data, dtype=np.float32)
            state.v[name] = np.zeros_like(t.data, dtype=np.float32)
        m, v = state.m[name], state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        t.data -= (lr * update).astype(t.dtype)
        if cfg.weight_decay > 0 and _decays(name, t):
            t.data -= (lr * cfg.weight_decay) * t.data
    return True


# -- checkpoints ---------------------------------------------------------------
# magic "HWMC", u32 version, u32 json length + UTF-8 config document,
# u64 step, u64 root seed, then parameter records (u16 name length, name,
# u8 ndim, u32 dims..., float32 payload), then the same record layout twice
# for the Adam first/second moments, prefixed by u64 adam step count.

CHECKPOINT_MAGIC = b"HWMC"
CHECKPOINT_VERSION = 1


def _write_records(fh, arrays: dict[str, np.ndarray]):
    fh.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        nb = name.encode()
        fh.write(struct.pack("<H", len(nb)))
        fh.write(nb)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_records(fh) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", fh.read(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", fh.read(2))
        name = fh.read(nlen).decode()
        (ndim,) = struct.unpack("<B", fh.read(1))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(shape).copy()
    return out


def save_checkpoint(path, config: dict, store: ParamStore, adam: AdamState,
                    step: int, root_seed: int):
    cfg_bytes = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(struct.pack("<QQ", step, root_seed))
        _write_records(fh, store.state())
        fh.write(struct.pack("<Q", adam.step))
        _write_records(fh, adam.m)
        _write_records(fh, adam.v)


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError("not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", fh.read(4))
        config = json.loads(fh.read(cfg_len).decode())
        step, root_seed = struct.unpack("<QQ", fh.read(16))
        params = _read_records(fh)
        (adam_step,) = struct.unpack("<Q", fh.read(8))
        m = _read_records(fh)
        v = _read_records(fh)
    adam = AdamState(step=adam_step, m=m, v=v)
    return {"config": config, "step": step, "root_seed": root_seed,
            "params": params, "adam": adam}


# -- training loop ---------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint_path: str
    metrics_path: str
    final_loss: float
    steps_done: int
    aborted: bool = False


def train_loop(pipeline, cfg: TrainConfig, seed: int, out_dir,
               config_dict: dict | None = None) -> TrainResult:
    """Generic loop: `pipeline` supplies the model store and a loss function.

    pipeline.loss_for_step(step_seed, batch_size) must build a fresh batch and
    return the scalar loss Tensor. Emits metrics.tsv (step, loss, lr, wall_ms)
    and checkpoint files under out_dir.
    """
    import pathlib

    cfg.validate()
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.tsv"
    ckpt_path = out_dir / "checkpoint.hwmc"
    config_dict = config_dict or {}

    adam = AdamState()
    store: ParamStore = pipeline.model.store
    aborted = False
    last_loss = float("nan")
    done = 0

    with open(metrics_path, "w") as log:
        log.write("step\tloss\tlr\twall_ms\n")
        for step in range(cfg.steps):
            t0 = time.perf_counter()
            data_step = step if cfg.resample_data else 0
            step_seed = derive_seed(seed, "step", data_step)
            store.zero_grad()
            try:
                loss = pipeline.loss_for_step(step_seed, cfg.batch_size)
                loss.backward()
            except T.NumericsError:
                aborted = True
                break
            lr = lr_at(step, cfg)
            optimizer_step(store, adam, lr, cfg)
            last_loss = float(loss.data)
            done = step + 1
            wall_ms = (time.perf_counter() - t0) * 1000.0 if cfg.record_timings else 0.0
            log.write(f"{step}\t{last_loss:.6f}\t{lr:.8e}\t{wall_ms:.3f}\n")
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                save_checkpoint(ckpt_path, config_dict, store, adam, done, seed)

    if not aborted or not ckpt_path.exists():
        save_checkpoint(ckpt_path, config_dict, store, adam, done, seed)
    return TrainResult(str(ckpt_path), str(metrics_path), last_loss, done,
                       aborted=aborted)
