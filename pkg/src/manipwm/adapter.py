"""Temporal replication, the spatial-temporal adapter and guidance injection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core.nn import Attention, Conv2d, LayerNorm, Module, Parameter
from .core.tensor import ShapeError, Tensor, pad, repeat, reshape, transpose


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class InjectionSchedule:
    decoder_layer_count: int = 12
    inject_every: int = 3
    mode: str = "additive"  # or "cross_attention"
    layer_set_override: tuple[int, ...] | None = None


SPLITS = ("upper", "lower")


def split_layers(decoder_layer_count: int, which: str) -> tuple[int, ...]:
    """Two injection points inside one half of the decoder.

    The upper half is the first ``n/2`` layers (next to the middle block),
    the lower half the rest; each gets the points at its 1/2 and end mark,
    so a 12-layer decoder yields (2, 5) and (8, 11).
    """
    half = decoder_layer_count // 2
    if half < 2:
        raise ScheduleError(f"cannot split {decoder_layer_count} layers into halves of two points")
    offset = {"upper": 0, "lower": half}.get(which)
    if offset is None:
        raise ScheduleError(f"split must be one of {SPLITS}, got {which!r}")
    return (offset + half // 2 - 1, offset + half - 1)


def schedule_layers(schedule: InjectionSchedule) -> list[int]:
    n = schedule.decoder_layer_count
    if n < 1 or schedule.inject_every < 1:
        raise ScheduleError(f"invalid schedule {schedule}")
    if schedule.mode not in ("additive", "cross_attention"):
        raise ScheduleError(f"unknown fusion mode {schedule.mode!r}")
    if schedule.layer_set_override is not None:
        layers = sorted(set(schedule.layer_set_override))
        bad = [i for i in layers if not 0 <= i < n]
        if bad:
            raise ScheduleError(f"override layers {bad} outside [0, {n})")
        return layers
    k = schedule.inject_every
    return list(range(k - 1, n, k))


def replicate_temporal(fused: Tensor, frames: int) -> Tensor:
    """``[C,h,w]`` -> ``[T,C,h,w]`` (or ``[B,C,h,w]`` -> ``[B,T,C,h,w]``)."""
    if frames < 1:
        raise ValueError(f"frame count must be positive, got {frames}")
    return repeat(fused, frames, axis=0 if fused.ndim == 3 else 1)


def _frames_to_batch(x: Tensor) -> tuple[Tensor, tuple[int, ...]]:
    b, t, c, h, w = x.dims
    return reshape(x, (b * t, c, h, w)), (b, t, c, h, w)


class Adapter(Module):
    """Spatial conv, temporal conv, spatial attention, temporal attention.

    Input and output are ``[B, T, C, h, w]``. Attention stages are residual;
    temporal attention sees its input plus a learned per-frame embedding.
    The temporal convolution replicates edge frames, so a constant-in-time
    input stays constant without the embedding.
    """

    STAGES = ("spatial_conv", "temporal_conv", "spatial_attn", "temporal_attn")

    def __init__(self, c_in: int, c_out: int, frames: int, rng: np.random.Generator,
                 heads: int = 4, use_pos: bool = True, dtype=np.float32):
        self.frames = frames
        self.spatial = Conv2d(c_in, c_out, 3, rng, padding=1, dtype=dtype)
        self.temporal = Conv2d(c_out, c_out, 1, rng, padding=0, kernel=(3, 1), dtype=dtype)
        self.norm_s = LayerNorm(c_out, dtype=dtype)
        self.attn_s = Attention(c_out, rng, heads=heads, dtype=dtype)
        self.norm_t = LayerNorm(c_out, dtype=dtype)
        self.attn_t = Attention(c_out, rng, heads=heads, dtype=dtype)
        self.pos = Parameter((rng.standard_normal((frames, c_out)) * 0.5).astype(dtype))
        self.use_pos = use_pos

    def spatial_conv(self, x: Tensor) -> Tensor:
        flat, (b, t, _, h, w) = _frames_to_batch(x)
        y = self.spatial(flat)
        return reshape(y, (b, t) + y.dims[1:])

    def temporal_conv(self, x: Tensor) -> Tensor:
        b, t, c, h, w = x.dims
        seq = reshape(transpose(x, (0, 2, 1, 3, 4)), (b, c, t, h * w))
        seq = pad(seq, ((0, 0), (0, 0), (1, 1), (0, 0)), mode="edge")
        y = self.temporal(seq)  # [b, c, t, hw]
        return transpose(reshape(y, (b, c, t, h, w)), (0, 2, 1, 3, 4))

    def spatial_attn(self, x: Tensor) -> Tensor:
        b, t, c, h, w = x.dims
        tok = reshape(transpose(x, (0, 1, 3, 4, 2)), (b * t, h * w, c))
        tok = tok + self.attn_s(self.norm_s(tok))
        return transpose(reshape(tok, (b, t, h, w, c)), (0, 1, 4, 2, 3))

    def temporal_attn(self, x: Tensor) -> Tensor:
        b, t, c, h, w = x.dims
        tok = reshape(transpose(x, (0, 3, 4, 1, 2)), (b * h * w, t, c))
        q = tok + self.pos if self.use_pos else tok
        tok = tok + self.attn_t(self.norm_t(q))
        return transpose(reshape(tok, (b, h, w, t, c)), (0, 3, 4, 1, 2))

    def adapt(self, replicated: Tensor, capture: list | None = None) -> Tensor:
        if replicated.ndim != 5:
            raise ShapeError(f"adapter expects [B,T,C,h,w], got dims {replicated.dims}")
        if replicated.dims[1] != self.frames:
            raise ShapeError(f"adapter built for {self.frames} frames, got {replicated.dims[1]}")
        x = replicated
        for name in self.STAGES:
            x = getattr(self, name)(x)
            if capture is not None:
                capture.append(x)
        return x

    forward = adapt


def inject_additive(hidden: Tensor, g: Tensor, residual, project: Conv2d) -> Tensor:
    """``hidden + residual + project(g)`` over ``[N, C, h, w]`` tensors."""
    if g.dims[0] != hidden.dims[0] or g.dims[2:] != hidden.dims[2:]:
        raise ShapeError(f"guidance dims {g.dims} do not align with decoder dims {hidden.dims}")
    out = hidden + project(g)
    return out + residual if residual is not None else out


class CrossAttentionInjector(Module):
    """Decoder tokens attend to guidance tokens of the same injection point."""

    def __init__(self, dim: int, g_dim: int, rng: np.random.Generator, heads: int = 4, dtype=np.float32):
        self.project = Conv2d(g_dim, dim, 1, rng, zero_init=True, dtype=dtype)
        self.norm = LayerNorm(dim, dtype=dtype)
        self.attn = Attention(dim, rng, heads=heads, dtype=dtype)

    def forward(self, hidden: Tensor, g: Tensor, frames: int) -> Tensor:
        return inject_cross_attention(hidden, g, frames, self.project, self.attn, self.norm)


def inject_cross_attention(hidden: Tensor, g: Tensor, frames: int, project: Conv2d,
                           attn: Attention, norm: LayerNorm | None = None) -> Tensor:
    """``hidden + CrossAttn(Q=hidden tokens, K=V=project(g) tokens)``.

    ``hidden`` and ``g`` are ``[B*T, C, h, w]``; each sample's T*h*w decoder
    tokens attend over its T*h*w guidance tokens.
    """
    n, c, h, w = hidden.dims
    if g.dims[0] != n:
        raise ShapeError(f"guidance batch {g.dims[0]} != decoder batch {n}")
    gp = project(g)
    if gp.dims[1:] != hidden.dims[1:]:
        raise ShapeError(f"projected guidance dims {gp.dims} != decoder dims {hidden.dims}")
    b = n // frames

    def tokens(x):
        return reshape(transpose(reshape(x, (b, frames, c, h, w)), (0, 1, 3, 4, 2)), (b, frames * h * w, c))

    q = tokens(hidden)
    ctx = tokens(gp)
    out = attn(norm(q) if norm is not None else q, ctx)
    out = transpose(reshape(out, (b, frames, h, w, c)), (0, 1, 4, 2, 3))
    return hidden + reshape(out, (n, c, h, w))
