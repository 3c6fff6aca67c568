"""Transformer block design space over four token streams.

Two block families:

* joint family (flow side): per-stream timestep modulation, per-stream QKV,
  one joint attention over the concatenation of all four streams, per-stream
  MLP. RoPE is 3D for video tokens and 1D for action tokens.
* factorized family (masked side): spatial attention over video tokens per
  time slot (2D RoPE, one parameter set for both video streams), then joint
  temporal attention where each spatial site's tokens and the action tokens
  attend along time (1D RoPE), then per-stream MLPs.

The split variant replaces joint mixing with per-stream self-attention
followed by cross-attention where future-video tokens query the remaining
streams; only the future-video stream is updated by stage 2 and only it has a
feedforward stage.

Sharing plans alias parameter storage beyond `share_boundary` layers: the
joint family shares modulation maps, QKV projections and MLPs (attention
output projections stay per stream); the factorized family shares the MLPs.
Parameter enumeration counts aliased storage once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .params import ParamStore
from .rope import RopeSpec, StreamLayout, build_positions, rope_apply, rope_tables

STREAMS = ("v_p", "v_f", "a_p", "a_f")
VIDEO_STREAMS = ("v_p", "v_f")
ACTION_STREAMS = ("a_p", "a_f")
VARIANTS = ("base", "split", "modshare", "fullshare")


@dataclass(frozen=True)
class BlockConfig:
    variant: str
    layers: int
    dim: int
    heads: int
    mlp_hidden: int
    share_boundary: int = 4
    with_time_modulation: bool = False

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, pick one of {VARIANTS}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.share_boundary > self.layers:
            raise ValueError("share_boundary must be <= layers")
        if self.layers < 1:
            raise ValueError("need at least one layer")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def shared_layers(self) -> range:
        if self.variant in ("modshare", "fullshare"):
            return range(self.share_boundary, self.layers)
        return range(0)


@dataclass
class StreamBundle:
    v_p: T.Tensor
    v_f: T.Tensor
    a_p: T.Tensor
    a_f: T.Tensor
    layout: StreamLayout

    def get(self, name: str) -> T.Tensor:
        return getattr(self, name)

    def with_stream(self, name: str, value: T.Tensor) -> "StreamBundle":
        return replace(self, **{name: value})

    def lengths(self) -> dict[str, int]:
        return {s: self.get(s).shape[1] for s in STREAMS}


class RopeCache:
    """Precomputed per-stream rotation tables for one layout and head size."""

    def __init__(self, layout: StreamLayout, head_dim: int):
        self.layout = layout
        pos = build_positions(layout)
        self.spec3 = RopeSpec(head_dim, 3)
        self.spec2 = RopeSpec(head_dim, 2)
        self.spec1 = RopeSpec(head_dim, 1)
        # joint attention: 3D for video, 1D (time) for actions
        self.joint = {
            "v_p": (self.spec3, rope_tables(pos["v_p"], self.spec3)),
            "v_f": (self.spec3, rope_tables(pos["v_f"], self.spec3)),
            "a_p": (self.spec1, rope_tables(pos["a_p"], self.spec1)),
            "a_f": (self.spec1, rope_tables(pos["a_f"], self.spec1)),
        }
        # factorized spatial stage: 2D over (y, x), same for every time slot
        self.spatial = {
            s: (self.spec2, rope_tables(pos[s][:, 1:], self.spec2))
            for s in VIDEO_STREAMS
        }
        # factorized temporal stage: 1D over the shared time axis
        self.temporal = {
            s: (self.spec1, rope_tables(pos[s][:, :1], self.spec1))
            for s in STREAMS
        }

    def apply(self, table_map, stream: str, x: T.Tensor) -> T.Tensor:
        spec, tables = table_map[stream]
        return rope_apply(x, None, spec, tables=tables)


# -- small building blocks ----------------------------------------------------

def _linear(x, w, b=None):
    y = T.matmul(x, w)
    return y if b is None else y + b


def _grouped_linear(parts: list[T.Tensor], weights: list[tuple]) -> list[T.Tensor]:
    """Apply per-part linear maps, fusing parts whose weight storage is shared."""
    out: list[T.Tensor | None] = [None] * len(parts)
    groups: dict[int, list[int]] = {}
    for i, (w, _) in enumerate(weights):
        groups.setdefault(id(w), []).append(i)
    for idxs in groups.values():
        w, b = weights[idxs[0]]
        if len(idxs) == 1:
            i = idxs[0]
            out[i] = _linear(parts[i], w, b)
        else:
            cat = T.concat([parts[i] for i in idxs], axis=1)
            y = _linear(cat, w, b)
            off = 0
            for i in idxs:
                n = parts[i].shape[1]
                out[i] = y[:, off:off + n]
                off += n
    return out


def _to_heads(x: T.Tensor, heads: int) -> T.Tensor:
    b, n, h = x.shape
    return x.reshape(b, n, heads, h // heads).transpose(0, 2, 1, 3)


def _from_heads(x: T.Tensor) -> T.Tensor:
    b, hh, n, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, hh * hd)


def _attend(q: T.Tensor, k: T.Tensor, v: T.Tensor) -> T.Tensor:
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * scale
    return T.matmul(T.softmax(scores, -1), v)


def _split_qkv(qkv: T.Tensor, h: int):
    return qkv[..., :h], qkv[..., h:2 * h], qkv[..., 2 * h:]


def _ln(x, store: ParamStore, name: str | None = None):
    """Pre-attention norm; affine only when the named gain/bias exist."""
    if name is None:
        return T.layer_norm(x, None, None)
    return T.layer_norm(x, store[name + ".g"], store[name + ".b"])


def _mod_parts(t_act: T.Tensor, w: T.Tensor, b: T.Tensor, n_parts: int):
    """Per-stream modulation vectors (alpha, beta, gamma, ...) from the timestep."""
    h = w.shape[0]
    m = _linear(t_act, w, b)
    return [m[:, i * h:(i + 1) * h].reshape(m.shape[0], 1, h) for i in range(n_parts)]


def _modulate(x, alpha, beta):
    return x * (alpha + 1.0) + beta


def _mlp(x, store, prefix):
    y = T.gelu(_linear(x, store[prefix + ".w1"], store[prefix + ".b1"]))
    return _linear(y, store[prefix + ".w2"], store[prefix + ".b2"])


def _grouped_mlp(parts: list[T.Tensor], store, prefixes: list[str]) -> list[T.Tensor]:
    w1 = [(store[p + ".w1"], store[p + ".b1"]) for p in prefixes]
    hidden = _grouped_linear(parts, w1)
    hidden = [T.gelu(hh) for hh in hidden]
    w2 = [(store[p + ".w2"], store[p + ".b2"]) for p in prefixes]
    return _grouped_linear(hidden, w2)


# -- parameter declaration ------------------------------------------------------

def _layer_param_specs(cfg: BlockConfig, i: int) -> list[tuple[str, tuple]]:
    h, m = cfg.dim, cfg.mlp_hidden
    L = f"layers.{i}."
    specs: list[tuple[str, tuple]] = []

    def mlp_specs(prefix):
        specs.extend([(prefix + ".w1", (h, m)), (prefix + ".b1", (m,)),
                      (prefix + ".w2", (m, h)), (prefix + ".b2", (h,))])

    def attn_specs(prefix, out_name="out"):
        specs.extend([(prefix + ".qkv.w", (h, 3 * h)), (prefix + ".qkv.b", (3 * h,)),
                      (prefix + f".{out_name}.w", (h, h)), (prefix + f".{out_name}.b", (h,))])

    def norm_specs(prefix):
        specs.extend([(prefix + ".g", (h,)), (prefix + ".b", (h,))])

    if cfg.with_time_modulation:
        if cfg.variant == "split":
            for s in STREAMS:
                specs.extend([(L + s + ".self_mod.w", (h, 3 * h)), (L + s + ".self_mod.b", (3 * h,))])
                attn_specs(L + s + ".self", out_name="out")
            specs.extend([(L + "v_f.cross_mod.w", (h, 3 * h)), (L + "v_f.cross_mod.b", (3 * h,)),
                          (L + "v_f.cross.q.w", (h, h)), (L + "v_f.cross.q.b", (h,)),
                          (L + "v_f.cross.kv.w", (h, 2 * h)), (L + "v_f.cross.kv.b", (2 * h,)),
                          (L + "v_f.cross.out.w", (h, h)), (L + "v_f.cross.out.b", (h,)),
                          (L + "v_f.mlp_mod.w", (h, 3 * h)), (L + "v_f.mlp_mod.b", (3 * h,))])
            mlp_specs(L + "v_f.mlp")
        else:
            for s in STREAMS:
                specs.extend([(L + s + ".mod.w", (h, 6 * h)), (L + s + ".mod.b", (6 * h,))])
                attn_specs(L + s, out_name="attn_out")
                mlp_specs(L + s + ".mlp")
    else:
        if cfg.variant == "split":
            for s in VIDEO_STREAMS:
                attn_specs(L + s + ".spatial")
                norm_specs(L + s + ".norm_sp")
            for s in STREAMS:
                attn_specs(L + s + ".temporal")
                norm_specs(L + s + ".norm_t")
            specs.extend([(L + "v_f.cross.q.w", (h, h)), (L + "v_f.cross.q.b", (h,)),
                          (L + "v_f.cross.kv.w", (h, 2 * h)), (L + "v_f.cross.kv.b", (2 * h,)),
                          (L + "v_f.cross.out.w", (h, h)), (L + "v_f.cross.out.b", (h,))])
            norm_specs(L + "v_f.norm_cross")
            mlp_specs(L + "v_f.mlp")
            norm_specs(L + "v_f.norm_mlp")
        else:
            attn_specs(L + "video.spatial")
            norm_specs(L + "video.norm_sp")
            for s in STREAMS:
                attn_specs(L + s + ".temporal")
                norm_specs(L + s + ".norm_t")
                mlp_specs(L + s + ".mlp")
                norm_specs(L + s + ".norm_mlp")
    return specs


def _shareable_keys(cfg: BlockConfig) -> list[str]:
    if cfg.with_time_modulation:
        return ["mod.w", "mod.b", "qkv.w", "qkv.b",
                "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"]
    return ["mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"]


def make_sharing_plan(cfg: BlockConfig) -> list[tuple[str, str]]:
    """(alias, canonical) parameter name pairs realizing the sharing variant.

    Base and split variants share nothing. Beyond `share_boundary`, full
    sharing collapses the shareable set of all four streams onto the past-video
    stream's storage; modality sharing collapses future onto past within each
    modality.
    """
    cfg.validate()
    keys = _shareable_keys(cfg)
    pairs: list[tuple[str, str]] = []
    for i in cfg.shared_layers():
        L = f"layers.{i}."
        if cfg.variant == "fullshare":
            links = [(s, "v_p") for s in ("v_f", "a_p", "a_f")]
        else:
            links = [("v_f", "v_p"), ("a_f", "a_p")]
        for s, canon in links:
            for key in keys:
                pairs.append((L + s + "." + key, L + canon + "." + key))
    return pairs


def block_param_specs(cfg: BlockConfig) -> list[tuple[str, tuple]]:
    cfg.validate()
    return [spec for i in range(cfg.layers) for spec in _layer_param_specs(cfg, i)]


def declare_params(store: ParamStore, specs: list[tuple[str, tuple]],
                   plan: dict[str, str]):
    """Create parameters for `specs`, realizing `plan` aliases instead of
    fresh storage. Canonical targets must precede their aliases in `specs`."""
    for name, shape in specs:
        if name in plan:
            continue
        store.create(name, shape)
    for name, _ in specs:
        if name in plan:
            store.alias(name, plan[name])


def count_param_specs(specs: list[tuple[str, tuple]], plan: dict[str, str]) -> int:
    """Unique parameter count implied by specs and a sharing plan, without
    allocating any storage (paper-dims models do not fit in memory)."""
    total = 0
    for name, shape in specs:
        if name in plan:
            continue
        total += int(np.prod(shape)) if shape else 1
    return total


# -- block forwards -------------------------------------------------------------

def base_block_forward(store: ParamStore, prefix: str, cfg: BlockConfig,
                       bundle: StreamBundle, t_act: T.Tensor | None,
                       ropec: RopeCache) -> StreamBundle:
    """Joint-attention block: per-stream QKV and MLP, one attention over all
    four streams. With time modulation each stage is scaled/shifted per stream
    and residual updates are gated by the learned gamma vectors."""
    h, heads = cfg.dim, cfg.heads
    states = [bundle.get(s) for s in STREAMS]
    mods = None
    if cfg.with_time_modulation:
        mod_w = {s: store[prefix + s + ".mod.w"] for s in STREAMS}
        seen: dict[int, list] = {}
        mods = {}
        for s in STREAMS:
            key = id(mod_w[s])
            if key not in seen:
                seen[key] = _mod_parts(t_act, mod_w[s], store[prefix + s + ".mod.b"], 6)
            mods[s] = seen[key]

    normed = []
    for s, x in zip(STREAMS, states):
        y = _ln(x, store)
        if mods is not None:
            y = _modulate(y, mods[s][0], mods[s][1])
        normed.append(y)

    qkv_params = [(store[prefix + s + ".qkv.w"], store[prefix + s + ".qkv.b"]) for s in STREAMS]
    qkvs = _grouped_linear(normed, qkv_params)

    qs, ks, vs = [], [], []
    for s, qkv in zip(STREAMS, qkvs):
        q, k, v = _split_qkv(qkv, h)
        q = ropec.apply(ropec.joint, s, _to_heads(q, heads))
        k = ropec.apply(ropec.joint, s, _to_heads(k, heads))
        qs.append(q)
        ks.append(k)
        vs.append(_to_heads(v, heads))

    lengths = [bundle.get(s).shape[1] for s in STREAMS]
    attn = _attend(T.concat(qs, axis=2), T.concat(ks, axis=2), T.concat(vs, axis=2))
    off = 0
    out_states = []
    for s, x, n in zip(STREAMS, states, lengths):
        part = _from_heads(attn[:, :, off:off + n])
        off += n
        upd = _linear(part, store[prefix + s + ".attn_out.w"], store[prefix + s + ".attn_out.b"])
        if mods is not None:
            upd = upd * mods[s][2]
        out_states.append(x + upd)

    normed2 = []
    for s, x in zip(STREAMS, out_states):
        y = _ln(x, store)
        if mods is not None:
            y = _modulate(y, mods[s][3], mods[s][4])
        normed2.append(y)
    mlp_out = _grouped_mlp(normed2, store, [prefix + s + ".mlp" for s in STREAMS])
    final = []
    for s, x, upd in zip(STREAMS, out_states, mlp_out):
        if mods is not None:
            upd = upd * mods[s][5]
        final.append(x + upd)
    return replace(bundle, **dict(zip(STREAMS, final)))


def _spatial_attention(store, cfg, bundle, ropec, weight_prefixes, norm_names):
    """Per-time-slot attention over video tokens with 2D RoPE.

    `weight_prefixes`/`norm_names` map video stream -> parameter prefix; the
    base family points both streams at one shared set, the split variant at
    per-stream sets. Returns residual updates for (v_p, v_f)."""
    heads = cfg.heads
    layout = bundle.layout
    n_sp = layout.tokens_per_slot()
    updates = {}
    by_weight: dict[int, list[str]] = {}
    for s in VIDEO_STREAMS:
        by_weight.setdefault(id(store[weight_prefixes[s] + ".qkv.w"]), []).append(s)

    for streams in by_weight.values():
        prefix = weight_prefixes[streams[0]]
        parts, slot_counts = [], []
        for s in streams:
            x = _ln(bundle.get(s), store, norm_names[s])
            parts.append(x)
            slot_counts.append(bundle.get(s).shape[1] // n_sp)
        x = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
        qkv = _linear(x, store[prefix + ".qkv.w"], store[prefix + ".qkv.b"])
        q, k, v = _split_qkv(qkv, cfg.dim)
        q, k, v = (_to_heads(t, heads) for t in (q, k, v))
        # identical 2D tables repeat per slot; rope them per stream segment
        off = 0
        qr, kr = [], []
        for s, slots in zip(streams, slot_counts):
            n = slots * n_sp
            qr.append(ropec.apply(ropec.spatial, s, q[:, :, off:off + n]))
            kr.append(ropec.apply(ropec.spatial, s, k[:, :, off:off + n]))
            off += n
        q = qr[0] if len(qr) == 1 else T.concat(qr, axis=2)
        k = kr[0] if len(kr) == 1 else T.concat(kr, axis=2)

        b, hh, n_tot, hd = q.shape
        slots_tot = n_tot // n_sp

        def per_slot(t):
            return (t.reshape(b, hh, slots_tot, n_sp, hd)
                     .transpose(0, 2, 1, 3, 4)
                     .reshape(b * slots_tot, hh, n_sp, hd))

        attn = _attend(per_slot(q), per_slot(k), per_slot(v))
        attn = (attn.reshape(b, slots_tot, hh, n_sp, hd)
                    .transpose(0, 2, 1, 3, 4)
                    .reshape(b, hh, n_tot, hd))
        out = _linear(_from_heads(attn), store[prefix + ".out.w"], store[prefix + ".out.b"])
        off = 0
        for s, slots in zip(streams, slot_counts):
            n = slots * n_sp
            updates[s] = out[:, off:off + n]
            off += n
    return updates


def _site_major(x: T.Tensor, n_sp: int) -> T.Tensor:
    """(B, H, slots*n_sp, hd) -> (B*n_sp, H, slots, hd) grouping by spatial site."""
    b, hh, n, hd = x.shape
    return (x.reshape(b, hh, n // n_sp, n_sp, hd)
             .transpose(0, 3, 1, 2, 4)
             .reshape(b * n_sp, hh, n // n_sp, hd))


def _site_major_inverse(x: T.Tensor, b: int, n_sp: int) -> T.Tensor:
    bn, hh, slots, hd = x.shape
    return (x.reshape(b, n_sp, hh, slots, hd)
             .transpose(0, 2, 3, 1, 4)
             .reshape(b, hh, slots * n_sp, hd))


def _broadcast_sites(x: T.Tensor, n_sp: int) -> T.Tensor:
    """(B, H, n, hd) action tokens replicated to every spatial site."""
    b, hh, n, hd = x.shape
    x = x.reshape(b, 1, hh, n, hd)
    x = T.expand(x, (b, n_sp, hh, n, hd))
    return x.reshape(b * n_sp, hh, n, hd)


def factorized_st_block_forward(store: ParamStore, prefix: str, cfg: BlockConfig,
                                bundle: StreamBundle,
                                ropec: RopeCache) -> StreamBundle:
    """Masked-family block: spatial attention (video only, one parameter set),
    joint temporal attention across all streams at each spatial site, then
    per-stream MLPs. Action tokens ride along every site's temporal sequence;
    their update is the mean over sites."""
    h, heads = cfg.dim, cfg.heads
    layout = bundle.layout
    n_sp = layout.tokens_per_slot()
    b = bundle.v_p.shape[0]

    sp_prefix = {s: prefix + "video.spatial" for s in VIDEO_STREAMS}
    sp_norm = {s: prefix + "video.norm_sp" for s in VIDEO_STREAMS}
    sp_updates = _spatial_attention(store, cfg, bundle, ropec, sp_prefix, sp_norm)
    state = {s: bundle.get(s) + sp_updates[s] for s in VIDEO_STREAMS}
    state.update({s: bundle.get(s) for s in ACTION_STREAMS})

    # temporal stage: per-stream QKV with 1D RoPE along the shared time axis
    normed = [_ln(state[s], store, prefix + s + ".norm_t") for s in STREAMS]
    qkv_params = [(store[prefix + s + ".temporal.qkv.w"], store[prefix + s + ".temporal.qkv.b"])
                  for s in STREAMS]
    qkvs = _grouped_linear(normed, qkv_params)
    seq_q, seq_k, seq_v, kinds = [], [], [], []
    for s, qkv in zip(STREAMS, qkvs):
        q, k, v = _split_qkv(qkv, h)
        q = ropec.apply(ropec.temporal, s, _to_heads(q, heads))
        k = ropec.apply(ropec.temporal, s, _to_heads(k, heads))
        v = _to_heads(v, heads)
        if s in VIDEO_STREAMS:
            q, k, v = _site_major(q, n_sp), _site_major(k, n_sp), _site_major(v, n_sp)
            kinds.append(("video", q.shape[2]))
        else:
            q, k, v = (_broadcast_sites(t, n_sp) for t in (q, k, v))
            kinds.append(("action", q.shape[2]))
        seq_q.append(q)
        seq_k.append(k)
        seq_v.append(v)

    attn = _attend(T.concat(seq_q, axis=2), T.concat(seq_k, axis=2), T.concat(seq_v, axis=2))
    off = 0
    for s, (kind, n) in zip(STREAMS, kinds):
        part = attn[:, :, off:off + n]
        off += n
        if kind == "video":
            part = _site_major_inverse(part, b, n_sp)
        else:
            hh, hd = part.shape[1], part.shape[3]
            part = part.reshape(b, n_sp, hh, n, hd).mean(axis=1)
        upd = _linear(_from_heads(part),
                      store[prefix + s + ".temporal.out.w"],
                      store[prefix + s + ".temporal.out.b"])
        state[s] = state[s] + upd

    normed = [_ln(state[s], store, prefix + s + ".norm_mlp") for s in STREAMS]
    mlp_out = _grouped_mlp(normed, store, [prefix + s + ".mlp" for s in STREAMS])
    for s, upd in zip(STREAMS, mlp_out):
        state[s] = state[s] + upd
    return replace(bundle, **state)


def _rope_mixed_context(ropec: RopeCache, k: T.Tensor, lengths: dict[str, int],
                        order=("v_p", "a_p", "a_f")) -> T.Tensor:
    """RoPE for cross-attention keys over mixed streams: 3D video, 1D actions."""
    parts = []
    off = 0
    for s in order:
        n = lengths[s]
        parts.append(ropec.apply(ropec.joint, s, k[:, :, off:off + n]))
        off += n
    return T.concat(parts, axis=2)


def split_block_forward(store: ParamStore, prefix: str, cfg: BlockConfig,
                        bundle: StreamBundle, t_act: T.Tensor | None,
                        ropec: RopeCache) -> StreamBundle:
    """Split-attention block: stage 1 is self-attention within each stream
    (factorized spatial+temporal for video streams in the masked family),
    stage 2 is cross-attention with future-video queries over the other three
    streams. Context streams never read future-video content. The feedforward
    stage exists for the future-video stream only."""
    h, heads = cfg.dim, cfg.heads
    layout = bundle.layout
    n_sp = layout.tokens_per_slot()
    b = bundle.v_p.shape[0]
    state: dict[str, T.Tensor] = {s: bundle.get(s) for s in STREAMS}

    if cfg.with_time_modulation:
        mods = {s: _mod_parts(t_act, store[prefix + s + ".self_mod.w"],
                              store[prefix + s + ".self_mod.b"], 3) for s in STREAMS}
        for s in STREAMS:
            x = state[s]
            y = _modulate(_ln(x, store), mods[s][0], mods[s][1])
            qkv = _linear(y, store[prefix + s + ".self.qkv.w"], store[prefix + s + ".self.qkv.b"])
            q, k, v = _split_qkv(qkv, h)
            q = ropec.apply(ropec.joint, s, _to_heads(q, heads))
            k = ropec.apply(ropec.joint, s, _to_heads(k, heads))
            attn = _attend(q, k, _to_heads(v, heads))
            upd = _linear(_from_heads(attn),
                          store[prefix + s + ".self.out.w"], store[prefix + s + ".self.out.b"])
            state[s] = x + upd * mods[s][2]
    else:
        sp_prefix = {s: prefix + s + ".spatial" for s in VIDEO_STREAMS}
        sp_norm = {s: prefix + s + ".norm_sp" for s in VIDEO_STREAMS}
        sp_updates = _spatial_attention(store, cfg, bundle, ropec, sp_prefix, sp_norm)
        for s in VIDEO_STREAMS:
            state[s] = state[s] + sp_updates[s]
        for s in STREAMS:
            x = state[s]
            y = _ln(x, store, prefix + s + ".norm_t")
            qkv = _linear(y, store[prefix + s + ".temporal.qkv.w"],
                          store[prefix + s + ".temporal.qkv.b"])
            q, k, v = _split_qkv(qkv, h)
            q = ropec.apply(ropec.temporal, s, _to_heads(q, heads))
            k = ropec.apply(ropec.temporal, s, _to_heads(k, heads))
            v = _to_heads(v, heads)
            if s in VIDEO_STREAMS:
                q, k, v = _site_major(q, n_sp), _site_major(k, n_sp), _site_major(v, n_sp)
                attn = _site_major_inverse(_attend(q, k, v), b, n_sp)
            else:
                attn = _attend(q, k, v)
            upd = _linear(_from_heads(attn),
                          store[prefix + s + ".temporal.out.w"],
                          store[prefix + s + ".temporal.out.b"])
            state[s] = x + upd

    # stage 2: future-video queries attend over (v_p, a_p, a_f)
    x_f = state["v_f"]
    if cfg.with_time_modulation:
        cm = _mod_parts(t_act, store[prefix + "v_f.cross_mod.w"],
                        store[prefix + "v_f.cross_mod.b"], 3)
        y = _modulate(_ln(x_f, store), cm[0], cm[1])
    else:
        y = _ln(x_f, store, prefix + "v_f.norm_cross")
    q = ropec.apply(ropec.joint, "v_f",
                    _to_heads(_linear(y, store[prefix + "v_f.cross.q.w"],
                                      store[prefix + "v_f.cross.q.b"]), heads))
    ctx_order = ("v_p", "a_p", "a_f")
    ctx = T.concat([_ln(state[s], store) for s in ctx_order], axis=1)
    kv = _linear(ctx, store[prefix + "v_f.cross.kv.w"], store[prefix + "v_f.cross.kv.b"])
    k, v = kv[..., :h], kv[..., h:]
    lengths = {s: state[s].shape[1] for s in ctx_order}
    k = _rope_mixed_context(ropec, _to_heads(k, heads), lengths, ctx_order)
    attn = _attend(q, k, _to_heads(v, heads))
    upd = _linear(_from_heads(attn),
                  store[prefix + "v_f.cross.out.w"], store[prefix + "v_f.cross.out.b"])
    x_f = x_f + (upd * cm[2] if cfg.with_time_modulation else upd)

    if cfg.with_time_modulation:
        mm = _mod_parts(t_act, store[prefix + "v_f.mlp_mod.w"],
                        store[prefix + "v_f.mlp_mod.b"], 3)
        y = _modulate(_ln(x_f, store), mm[0], mm[1])
        x_f = x_f + _mlp(y, store, prefix + "v_f.mlp") * mm[2]
    else:
        y = _ln(x_f, store, prefix + "v_f.norm_mlp")
        x_f = x_f + _mlp(y, store, prefix + "v_f.mlp")

    state["v_f"] = x_f
    return replace(bundle, **state)


def block_stack_forward(store: ParamStore, cfg: BlockConfig, bundle: StreamBundle,
                        t_act: T.Tensor | None, ropec: RopeCache,
                        collect: list | None = None) -> StreamBundle:
    for i in range(cfg.layers):
        prefix = f"layers.{i}."
        if cfg.variant == "split":
            bundle = split_block_forward(store, prefix, cfg, bundle, t_act, ropec)
        elif cfg.with_time_modulation:
            bundle = base_block_forward(store, prefix, cfg, bundle, t_act, ropec)
        else:
            bundle = factorized_st_block_forward(store, prefix, cfg, bundle, ropec)
        if collect is not None:
            collect.append({s: bundle.get(s).data.copy() for s in STREAMS})
    return bundle


def count_parameters(model) -> int:
    """Unique parameter storage of a model (aliases counted once)."""
    store = model.store if hasattr(model, "store") else model
    return store.count()


def params_in_billions(model) -> float:
    return round(count_parameters(model) / 1e9, 3)
