"""Toy video UNet and the conditional world model around it.

Tensors inside the UNet are ``[N, C, h, w]`` with ``N = B * T`` frames;
temporal layers fold space into the batch and attend across ``T``.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import adapter as A
from .action_tree import Lexicon
from .config import ModelConfig
from .core import functional as F
from .core.nn import (
    MLP, Attention, Conv2d, GroupNorm, LayerNorm, Linear, Module, Parameter, timestep_embedding,
)
from .core.tensor import Tensor, concat, repeat, reshape, silu, transpose
from .guidance import Guidance

COND_CHANNELS = {"depth": 1, "semantic": 9, "rgb": 3, "mask": 1}


def _betas(cfg: ModelConfig) -> np.ndarray:
    from .diffusion import NoiseSchedule

    return NoiseSchedule(cfg.steps, cfg.beta_start, cfg.beta_end, cfg.beta_rescale).betas


class ResBlock(Module):
    def __init__(self, c_in: int, c_out: int, temb: int, rng, dtype=np.float32):
        self.norm1 = GroupNorm(c_in, dtype=dtype)
        self.conv1 = Conv2d(c_in, c_out, 3, rng, dtype=dtype)
        self.temb = Linear(temb, c_out, rng, dtype=dtype)
        self.norm2 = GroupNorm(c_out, dtype=dtype)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, dtype=dtype)
        self.skip = Conv2d(c_in, c_out, 1, rng, dtype=dtype) if c_in != c_out else None

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(silu(self.norm1(x)))
        t = self.temb(temb)
        h = h + reshape(t, t.dims + (1, 1))
        h = self.conv2(silu(self.norm2(h)))
        return (self.skip(x) if self.skip is not None else x) + h


def to_tokens(x: Tensor) -> Tensor:
    n, c, h, w = x.dims
    return reshape(transpose(x, (0, 2, 3, 1)), (n, h * w, c))


def from_tokens(tok: Tensor, h: int, w: int) -> Tensor:
    n, _, c = tok.dims
    return transpose(reshape(tok, (n, h, w, c)), (0, 3, 1, 2))


class SpatialAttention(Module):
    def __init__(self, dim: int, rng, heads: int, dtype=np.float32):
        self.norm = LayerNorm(dim, dtype=dtype)
        self.attn = Attention(dim, rng, heads=heads, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        tok = to_tokens(x)
        return from_tokens(tok + self.attn(self.norm(tok)), *x.dims[2:])


class TemporalAttention(Module):
    def __init__(self, dim: int, rng, heads: int, dtype=np.float32):
        self.norm = LayerNorm(dim, dtype=dtype)
        self.attn = Attention(dim, rng, heads=heads, dtype=dtype)

    def forward(self, x: Tensor, frames: int) -> Tensor:
        n, c, h, w = x.dims
        b = n // frames
        tok = reshape(transpose(reshape(x, (b, frames, c, h, w)), (0, 3, 4, 1, 2)), (b * h * w, frames, c))
        tok = tok + self.attn(self.norm(tok))
        return reshape(transpose(reshape(tok, (b, h, w, frames, c)), (0, 3, 4, 1, 2)), (n, c, h, w))


class CrossAttention(Module):
    def __init__(self, dim: int, context_dim: int, rng, heads: int, dtype=np.float32):
        self.norm = LayerNorm(dim, dtype=dtype)
        self.attn = Attention(dim, rng, context_dim=context_dim, heads=heads, dtype=dtype)

    def forward(self, x: Tensor, context: Tensor) -> Tensor:
        tok = to_tokens(x)
        return from_tokens(tok + self.attn(self.norm(tok), context), *x.dims[2:])


class VideoUNet(Module):
    """Encoder (two blocks, downsample, two blocks), middle block, decoder.

    Decoder layer ``i`` is a residual block, plus temporal and text
    attention when ``i % attn_every == attn_every - 1``; its output then
    receives the encoder skip of matching resolution. The first half of
    the decoder runs at the low resolution, the second half after the
    upsample.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        c0, c1, cz = cfg.c0, cfg.c1, cfg.latent_channels
        temb = 4 * c0
        self.frames = cfg.frames
        self.c0 = c0
        self.in_conv = Conv2d(2 * cz, c0, 3, rng, dtype=dtype)
        self.frame_emb = Parameter((rng.standard_normal((cfg.frames, c0)) * 0.1).astype(dtype))
        self.time_mlp = MLP(c0, temb, temb, rng, dtype=dtype)
        self.enc_hi = [ResBlock(c0, c0, temb, rng, dtype), ResBlock(c0, c0, temb, rng, dtype)]
        self.down = Conv2d(c0, c1, 3, rng, stride=2, padding=1, dtype=dtype)
        self.enc_lo = [ResBlock(c1, c1, temb, rng, dtype), ResBlock(c1, c1, temb, rng, dtype)]
        self.mid1 = ResBlock(c1, c1, temb, rng, dtype)
        self.mid_spatial = SpatialAttention(c1, rng, cfg.heads, dtype)
        self.mid_temporal = TemporalAttention(c1, rng, cfg.heads, dtype)
        self.mid_cross = CrossAttention(c1, cfg.text_dim, rng, cfg.heads, dtype)
        self.mid2 = ResBlock(c1, c1, temb, rng, dtype)
        n = cfg.decoder_layers
        self.split = n // 2
        self.up = Conv2d(c1, c0, 3, rng, dtype=dtype)
        self.dec = []
        self.attn_every = cfg.attn_every
        for i in range(n):
            c = c1 if i < self.split else c0
            layer = {"block": ResBlock(c, c, temb, rng, dtype)}
            if self.has_attention(i):
                layer["temporal"] = TemporalAttention(c, rng, cfg.heads, dtype)
                layer["cross"] = CrossAttention(c, cfg.text_dim, rng, cfg.heads, dtype)
            self.dec.append(layer)
        self.out_norm = GroupNorm(c0, dtype=dtype)
        self.out_conv = Conv2d(c0, cz, 3, rng, zero_init=True, dtype=dtype)

    def has_attention(self, i: int) -> bool:
        return i % self.attn_every == self.attn_every - 1

    def layer_channels(self, i: int) -> int:
        return self.dec[i]["block"].conv2.weight.dims[0]

    def layer_low_res(self, i: int) -> bool:
        return i < self.split

    def forward(self, z: Tensor, t: np.ndarray, first: Tensor, context: Tensor, inject=None) -> Tensor:
        """``z`` [B,T,Cz,h,w], ``first`` [B,Cz,h,w], ``context`` [B,L,d] -> eps like ``z``.

        ``inject(i, hidden)`` may rewrite the output of decoder layer ``i``.
        """
        b, frames, cz, hh, ww = z.dims
        n = b * frames
        x = concat([z, repeat(first, frames, axis=1)], axis=2)
        h = self.in_conv(reshape(x, (n, 2 * cz, hh, ww)))
        fe = reshape(repeat(self.frame_emb, b, axis=0), (n, self.c0, 1, 1))
        h = h + fe
        temb = self.time_mlp(Tensor(timestep_embedding(t, self.c0, h.dtype)))
        temb = reshape(repeat(temb, frames, axis=1), (n, temb.dims[-1]))
        ctx = reshape(repeat(context, frames, axis=1), (n,) + context.dims[1:])

        for blk in self.enc_hi:
            h = blk(h, temb)
        skip_hi = h
        h = self.down(h)
        for blk in self.enc_lo:
            h = blk(h, temb)
        skip_lo = h

        h = self.mid1(h, temb)
        h = self.mid_spatial(h)
        h = self.mid_temporal(h, frames)
        h = self.mid_cross(h, ctx)
        h = self.mid2(h, temb)

        for i, layer in enumerate(self.dec):
            if i == self.split:
                h = self.up(F.upsample_nearest(h, 2))
            h = layer["block"](h, temb)
            if "temporal" in layer:
                h = layer["temporal"](h, frames)
                h = layer["cross"](h, ctx)
            residual = skip_lo if i < self.split else skip_hi
            h = inject(i, h, residual) if inject is not None else h + residual
        out = self.out_conv(silu(self.out_norm(h)))
        return reshape(out, (b, frames, cz, hh, ww))


PARAMETERIZATIONS = ("eps", "wiener", "x0")


def precondition_coefficients(alpha_bar: np.ndarray, sigma_data: float) -> tuple[np.ndarray, ...]:
    """``c_in, c_skip, c_out`` for noise prediction from ``z_t = a z0 + b eps``.

    ``c_skip * z_t`` is the least-squares noise estimate when ``z0`` has std
    ``sigma_data``, ``c_out`` the std of what it misses and ``c_in`` scales
    ``z_t`` to unit variance.
    """
    a2 = np.asarray(alpha_bar, np.float64)
    b2 = 1.0 - a2
    var = a2 * sigma_data ** 2 + b2
    return 1.0 / np.sqrt(var), np.sqrt(b2) / var, np.sqrt(a2) * sigma_data / np.sqrt(var)


class WorldModel(Module):
    """Text conditioner, UNet and optional visual guidance with injection.

    ``forward`` always returns predicted noise. ``cfg.parameterization``
    says what the UNet output means:

    * ``eps``: the noise itself.
    * ``wiener``: ``c_skip * z_t + c_out * unet(c_in * z_t)``.
    * ``x0``: the clean latent in units of ``sigma_data``, converted to noise.
      A fresh model then predicts an unchanged scene.

    The last two keep the clean-latent estimate bounded at high noise, where
    raw noise prediction is ill-conditioned. ``forward_count`` counts
    per-sample UNet evaluations.
    """

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        from .text import TextConditioner

        if cfg.parameterization not in PARAMETERIZATIONS:
            raise ValueError(f"parameterization must be one of {PARAMETERIZATIONS}, got {cfg.parameterization!r}")
        self.cfg = cfg
        self.dtype = dtype
        seed = cfg.seed
        self.text = TextConditioner(cfg.vocab, Lexicon(tuple(cfg.verbs), tuple(cfg.prepositions)),
                                    cfg.tree_corpus, cfg.text_dim, cfg.max_words, cfg.n_max, cfg.tree,
                                    np.random.default_rng([seed, 2]), seed=seed, dtype=dtype)
        self.unet = VideoUNet(cfg, np.random.default_rng([seed, 0]), dtype)
        self.forward_count = 0
        self._alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - _betas(cfg))])
        self.guidance = None
        self.layers: list[int] = []
        self.layer_levels: dict[int, int] = {}
        self.adapters: dict[str, A.Adapter] = {}
        self.injectors: dict[str, Module] = {}
        self.fusion = cfg.schedule.mode
        if cfg.modalities:
            self._build_guidance(cfg, np.random.default_rng([seed, 1]), dtype)

    def _build_guidance(self, cfg: ModelConfig, rng, dtype):
        self.layers = A.schedule_layers(cfg.schedule)
        lat = cfg.latent_size
        for i in self.layers:
            res = lat // 2 if self.unet.layer_low_res(i) else lat
            level = int(np.log2(cfg.image_size // res))
            if level >= len(cfg.pyramid):
                raise ValueError(f"pyramid has no level at {res}x{res} for decoder layer {i}")
            self.layer_levels[i] = level
        self.guidance = Guidance(cfg.modalities, COND_CHANNELS, cfg.pyramid, self.layer_levels.values(),
                                 rng, cfg.router_hidden, cfg.router_patch, cfg.shared_router, dtype)
        for i in self.layers:
            c_g = cfg.pyramid[self.layer_levels[i]]
            c_dec = self.unet.layer_channels(i)
            self.adapters[str(i)] = A.Adapter(c_g, c_dec, cfg.frames, rng, cfg.heads, dtype=dtype)
            if self.fusion == "additive":
                self.injectors[str(i)] = Conv2d(c_dec, c_dec, 1, rng, zero_init=True, dtype=dtype)
            else:
                self.injectors[str(i)] = A.CrossAttentionInjector(c_dec, c_dec, rng, cfg.heads, dtype)

    # -- conditioning ------------------------------------------------------
    def encode_text(self, instructions: Sequence[str], use_tree: bool | None = None) -> Tensor:
        return self.text(instructions, use_tree)

    def encode_guidance(self, conditions: dict[str, Tensor] | None) -> dict[int, Tensor] | None:
        """Adapter output per injected layer, flattened to ``[B*T, C, h, w]``."""
        if self.guidance is None or conditions is None:
            return None
        fused, _ = self.guidance(conditions)
        out = {}
        for i in self.layers:
            g = fused.levels[self.layer_levels[i]]
            adapted = self.adapters[str(i)](A.replicate_temporal(g, self.cfg.frames))
            b, t = adapted.dims[:2]
            out[i] = reshape(adapted, (b * t,) + adapted.dims[2:])
        return out

    def _injector(self, feats: dict[int, Tensor] | None):
        if not feats:
            return None
        frames = self.cfg.frames

        def inject(i, hidden, residual):
            g = feats.get(i)
            if g is None:
                return hidden + residual
            if self.fusion == "additive":
                return A.inject_additive(hidden, g, residual, self.injectors[str(i)])
            return self.injectors[str(i)](hidden + residual, g, frames)

        return inject

    def forward(self, z: Tensor, t, first: Tensor, context: Tensor,
                guidance: dict[int, Tensor] | None = None) -> Tensor:
        t = np.broadcast_to(np.asarray(t), (z.dims[0],))
        self.forward_count += z.dims[0]
        inject = self._injector(guidance)
        kind = self.cfg.parameterization
        if kind == "eps":
            return self.unet(z, t, first, context, inject)
        ab = self._alpha_bar[t]
        c_in, c_skip, c_out = (c.astype(self.dtype).reshape(-1, 1, 1, 1, 1)
                               for c in precondition_coefficients(ab, self.cfg.sigma_data))
        out = self.unet(z * c_in, t, first, context, inject)
        if kind == "wiener":
            return out * c_out + Tensor(z.data * c_skip)
        # x0: out * sigma_data is the clean latent; convert to noise
        a = np.sqrt(ab).astype(self.dtype).reshape(-1, 1, 1, 1, 1)
        b = np.sqrt(1.0 - ab).astype(self.dtype).reshape(-1, 1, 1, 1, 1)
        return out * (-a * self.cfg.sigma_data / b) + Tensor(z.data / b)
