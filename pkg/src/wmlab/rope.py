"""Rotary position embeddings in 1, 2, and 3 axes.

The head dimension is partitioned across axes (time gets half, each spatial
axis a quarter in the 3D case); each partition is rotated by angles
position * base^(-2i/d_axis) using the half-split pairing. Rotations are
isometries and encode relative offsets: attention logits depend only on
per-axis position differences.

Applied to queries and keys only, never to values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T


def split_head_dim(head_dim: int, axes: int) -> tuple[int, ...]:
    """Partition head_dim across axes: (t: 1/2, y: 1/4, x: 1/4), rounded even."""
    if head_dim % 2:
        raise ValueError(f"head_dim must be even, got {head_dim}")
    if axes == 1:
        return (head_dim,)
    if axes == 2:
        half = (head_dim // 2) // 2 * 2
        return (half, head_dim - half)
    if axes == 3:
        quarter = (head_dim // 4) // 2 * 2
        quarter = max(quarter, 2)
        t_dim = head_dim - 2 * quarter
        return (t_dim, quarter, quarter)
    raise ValueError(f"axes must be 1, 2, or 3, got {axes}")


@dataclass(frozen=True)
class RopeSpec:
    head_dim: int
    axes: int
    dim_split: tuple[int, ...] = field(default=None)
    base: float = 10000.0

    def __post_init__(self):
        if self.dim_split is None:
            object.__setattr__(self, "dim_split", split_head_dim(self.head_dim, self.axes))
        if len(self.dim_split) != self.axes:
            raise ValueError("dim_split length must equal axes")
        if sum(self.dim_split) != self.head_dim:
            raise ValueError(f"dim_split {self.dim_split} does not sum to head_dim {self.head_dim}")
        for d in self.dim_split:
            if d < 2 or d % 2:
                raise ValueError(f"per-axis sub-dimension must be even and >= 2, got {d}")


def rope_tables(positions: np.ndarray, spec: RopeSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-axis (cos, sin) tables of shape (n, d_axis/2) for integer positions."""
    positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    if positions.shape[1] != spec.axes:
        raise ValueError(f"positions are (n, {positions.shape[1]}) but spec has {spec.axes} axes")
    tables = []
    for axis, d_axis in enumerate(spec.dim_split):
        freqs = spec.base ** (-np.arange(0, d_axis, 2, dtype=np.float64) / d_axis)
        angles = positions[:, axis, None] * freqs[None, :]
        tables.append((np.cos(angles), np.sin(angles)))
    return tables


def rope_apply(q_or_k, positions: np.ndarray, spec: RopeSpec,
               tables=None, dtype=None):
    """Rotate the trailing head_dim of (..., n, head_dim) by token positions.

    Accepts a Tensor (differentiable) or a bare ndarray. Precomputed `tables`
    from rope_tables() avoid recomputing trig per call.
    """
    is_tensor = isinstance(q_or_k, T.Tensor)
    x = q_or_k if is_tensor else T.Tensor(q_or_k, dtype=dtype)
    if x.shape[-1] != spec.head_dim:
        raise ValueError(f"trailing dim {x.shape[-1]} != head_dim {spec.head_dim}")
    if tables is None:
        tables = rope_tables(positions, spec)
    out_dtype = x.dtype
    pieces = []
    offset = 0
    for (cos, sin), d_axis in zip(tables, spec.dim_split):
        part = x[..., offset:offset + d_axis]
        pieces.append(T.rope_rotate(part, cos.astype(out_dtype), sin.astype(out_dtype)))
        offset += d_axis
    out = pieces[0] if len(pieces) == 1 else T.concat(pieces, axis=-1)
    return out if is_tensor else out.data


@dataclass(frozen=True)
class StreamLayout:
    """Token geometry of the four streams on a shared time axis (frame units).

    Video tokens occupy a rows x cols grid per time slot; past frames come
    first on the time axis, future frames directly after. Action tokens sit at
    their latent frame index on the same axis. `t_step` is the number of raw
    latent frames a video time slot spans (temporal patch size).
    """
    past_frames: int
    future_frames: int
    rows: int
    cols: int
    t_step: int = 1
    action_past: int = None
    action_future: int = None

    def __post_init__(self):
        if self.past_frames % self.t_step or self.future_frames % self.t_step:
            raise ValueError("frame counts must be divisible by t_step")
        if self.action_past is None:
            object.__setattr__(self, "action_past", self.past_frames)
        if self.action_future is None:
            object.__setattr__(self, "action_future", self.future_frames)

    @property
    def video_past_slots(self) -> int:
        return self.past_frames // self.t_step

    @property
    def video_future_slots(self) -> int:
        return self.future_frames // self.t_step

    def tokens_per_slot(self) -> int:
        return self.rows * self.cols


def build_positions(layout: StreamLayout) -> dict[str, np.ndarray]:
    """Integer positions per stream: video (t, y, x); actions scalar t.

    Past and future share one time axis: past video slots start at t=0,
    future slots continue at t=past_frames; action tokens carry their latent
    frame index. All time values are in raw frame units so that video and
    action offsets stay mutually consistent for any t_step.
    """
    n_spatial = layout.tokens_per_slot()
    ys, xs = np.divmod(np.arange(n_spatial), layout.cols)

    def video_pos(n_slots: int, t0_frames: int) -> np.ndarray:
        pos = np.empty((n_slots * n_spatial, 3), dtype=np.int64)
        for s in range(n_slots):
            rows = slice(s * n_spatial, (s + 1) * n_spatial)
            pos[rows, 0] = t0_frames + s * layout.t_step
            pos[rows, 1] = ys
            pos[rows, 2] = xs
        return pos

    v_p = video_pos(layout.video_past_slots, 0)
    v_f = video_pos(layout.video_future_slots, layout.past_frames)
    a_p = np.arange(layout.action_past, dtype=np.int64)[:, None]
    a_f = (layout.past_frames + np.arange(layout.action_future, dtype=np.int64))[:, None]

    times = set(v_p[:, 0]) | set(v_f[:, 0])
    if len(set(v_p[:, 0]) & set(v_f[:, 0])):
        raise ValueError("past and future video slots overlap on the time axis")
    del times
    return {"v_p": v_p, "v_f": v_f, "a_p": a_p, "a_f": a_f}
