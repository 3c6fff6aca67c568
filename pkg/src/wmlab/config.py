"""Run configuration: nested dataclasses, JSON round-trip, dotted-path
overrides, and the eight presets (two paradigms x four block variants).

Toy presets are sized to train in minutes on one CPU core; `paper_dims()`
rewrites a preset to the published model geometry for parameter accounting
(the toy world settings are retained since tokenizers are out of scope).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .blocks import BlockConfig, VARIANTS
from .models import PatchSpec
from .train import TrainConfig
from .world import WorldConfig

PARADIGMS = ("masked", "flow")


@dataclass
class MaskedParams:
    rho_max: float = 0.2
    decode_steps: int = 2          # K refinement passes per frame
    temperature: float = 1.0
    confidence_remask: bool = False


@dataclass
class FlowParams:
    sigma_min: float = 1e-4
    guidance_scale: float = 3.0
    cond_drop_prob: float = 0.1
    sample_steps: int = 50


@dataclass
class ModelDims:
    layers: int = 4
    dim: int = 128
    heads: int = 8
    mlp_hidden: int = 512
    share_boundary: int = 1
    p_lw: int = 2
    p_t: int = 1

    def block_config(self, variant: str, paradigm: str) -> BlockConfig:
        return BlockConfig(variant=variant, layers=self.layers, dim=self.dim,
                           heads=self.heads, mlp_hidden=self.mlp_hidden,
                           share_boundary=self.share_boundary,
                           with_time_modulation=(paradigm == "flow"))

    def patch_spec(self) -> PatchSpec:
        return PatchSpec(p_lw=self.p_lw, p_t=self.p_t)


@dataclass
class RunConfig:
    paradigm: str = "masked"
    variant: str = "base"
    seed: int = 0
    out_dir: str = "runs/latest"
    eval_episodes: int = 64
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelDims = field(default_factory=ModelDims)
    train: TrainConfig = field(default_factory=TrainConfig)
    masked: MaskedParams = field(default_factory=MaskedParams)
    flow: FlowParams = field(default_factory=FlowParams)

    def validate(self):
        if self.paradigm not in PARADIGMS:
            raise ValueError(f"unknown paradigm {self.paradigm!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        self.world.validate()
        self.train.validate()
        self.model.block_config(self.variant, self.paradigm).validate()

    def block_config(self) -> BlockConfig:
        return self.model.block_config(self.variant, self.paradigm)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def config_from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    sections = {"world": WorldConfig, "model": ModelDims, "train": TrainConfig,
                "masked": MaskedParams, "flow": FlowParams}
    for key, value in data.items():
        if key in sections:
            base = dataclasses.asdict(getattr(cfg, key))
            unknown = set(value) - set(base)
            if unknown:
                raise KeyError(f"unknown keys in '{key}': {sorted(unknown)}")
            base.update(value)
            setattr(cfg, key, sections[key](**base))
        elif hasattr(cfg, key):
            setattr(cfg, key, value)
        else:
            raise KeyError(f"unknown config key: {key}")
    return cfg


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))


def _coerce(current, text: str):
    if isinstance(current, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"cannot parse boolean from {text!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(text)
    if isinstance(current, float):
        return float(text)
    return text


def apply_override(cfg: RunConfig, assignment: str) -> RunConfig:
    """Apply one `dotted.path=value` override in place."""
    if "=" not in assignment:
        raise KeyError(f"override must look like key=value, got {assignment!r}")
    path, text = assignment.split("=", 1)
    parts = path.strip().split(".")
    target = cfg
    for part in parts[:-1]:
        if not hasattr(target, part):
            raise KeyError(f"unknown config key: {path!r}")
        target = getattr(target, part)
    leaf = parts[-1]
    if not hasattr(target, leaf):
        raise KeyError(f"unknown config key: {path!r}")
    current = getattr(target, leaf)
    if dataclasses.is_dataclass(current):
        raise KeyError(f"{path!r} is a section, not a value")
    if dataclasses.is_dataclass(target) and getattr(type(target), "__dataclass_params__").frozen:
        object.__setattr__(target, leaf, _coerce(current, text))
    else:
        setattr(target, leaf, _coerce(current, text))
    return cfg


# -- presets -------------------------------------------------------------------

def preset_names() -> list[str]:
    short = {"base": "base", "split": "split", "modshare": "modshare",
             "fullshare": "fullshare"}
    return [f"{p}-{short[v]}" for p in PARADIGMS for v in VARIANTS]


def make_preset(name: str) -> RunConfig:
    try:
        paradigm, variant = name.split("-", 1)
    except ValueError:
        raise KeyError(f"invalid preset {name!r}; options: {preset_names()}")
    if paradigm not in PARADIGMS or variant not in VARIANTS:
        raise KeyError(f"invalid preset {name!r}; options: {preset_names()}")

    world = WorldConfig()
    if paradigm == "masked":
        model = ModelDims(layers=4, dim=128, heads=8, mlp_hidden=512,
                          share_boundary=1)
        train = TrainConfig(steps=2000, batch_size=32, lr=8e-4,
                            schedule="linear_warmup_decay", warmup_steps=100)
    else:
        model = ModelDims(layers=4, dim=192, heads=8, mlp_hidden=384,
                          share_boundary=1, p_lw=2, p_t=1)
        train = TrainConfig(steps=5000, batch_size=32, lr=1e-3,
                            schedule="cosine", warmup_steps=0)
    return RunConfig(paradigm=paradigm, variant=variant, world=world,
                     model=model, train=train,
                     out_dir=f"runs/{name}")


def paper_dims(cfg: RunConfig) -> RunConfig:
    """Rewrite model geometry to the published configuration.

    Masked: 24 layers, 8 heads, 512-dim tokens, MLP 2048, 32x32 token grid,
    sharing beyond layer 4. Flow: 17 layers, 1172-dim tokens (4 heads for the
    293-dim head split), MLP 2x dim, 16x16 latents with 16 channels, patch 2/1.
    Action vectors are 25-dimensional. Only used for parameter accounting; the
    toy vocabulary stands in for the out-of-scope tokenizers.
    """
    cfg = config_from_dict(cfg.to_dict())
    if cfg.paradigm == "masked":
        cfg.model = ModelDims(layers=24, dim=512, heads=8, mlp_hidden=2048,
                              share_boundary=4)
        cfg.world = WorldConfig(grid=32, vocab=64, action_dim=25,
                                past_frames=2, future_frames=1)
        cfg.train = dataclasses.replace(cfg.train, steps=60000, batch_size=16,
                                        lr=3e-5, schedule="linear_warmup_decay",
                                        warmup_steps=100)
    else:
        cfg.model = ModelDims(layers=17, dim=1172, heads=4, mlp_hidden=2344,
                              share_boundary=4, p_lw=2, p_t=1)
        cfg.world = WorldConfig(grid=16, vocab=64, action_dim=25,
                                past_frames=2, future_frames=1, channels=16)
        cfg.train = dataclasses.replace(cfg.train, steps=150000, batch_size=128,
                                        lr=1e-4, schedule="cosine", warmup_steps=0)
    return cfg
