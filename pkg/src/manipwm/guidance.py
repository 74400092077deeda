"""Per-modality control branches, the patch router and score-weighted fusion."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import functional as F
from .core.nn import Conv2d, GroupNorm, Linear, Module, Parameter
from .core.tensor import ShapeError, Tensor, concat, matmul, reshape, silu, transpose

MODALITIES = ("depth", "semantic", "rgb", "mask")


class ControlBranch(Module):
    """2-D encoder over one first-frame condition.

    Stage ``l`` runs conv (stride 2 for ``l > 0``), group norm and SiLU, then a
    zero-initialized 1x1 ``out_proj``; every level is exactly zero until
    training moves those projections.
    """

    def __init__(self, modality: str, in_channels: int, channels: Sequence[int],
                 rng: np.random.Generator, dtype=np.float32):
        self.modality = modality
        self.in_channels = in_channels
        self.in_proj = Conv2d(in_channels, channels[0], 1, rng, dtype=dtype)
        self.stages = []
        self.out_proj = []
        prev = channels[0]
        for level, c in enumerate(channels):
            self.stages.append({
                "conv": Conv2d(prev, c, 3, rng, stride=1 if level == 0 else 2, padding=1, dtype=dtype),
                "norm": GroupNorm(c, dtype=dtype),
            })
            self.out_proj.append(Conv2d(c, c, 1, rng, zero_init=True, dtype=dtype))
            prev = c

    def forward(self, condition: Tensor) -> list[Tensor]:
        if condition.dims[-3] != self.in_channels:
            raise ShapeError(f"{self.modality} branch expects {self.in_channels} channels, "
                             f"got dims {condition.dims}")
        single = condition.ndim == 3
        h = self.in_proj(reshape(condition, (1,) + condition.dims) if single else condition)
        levels = []
        for stage, proj in zip(self.stages, self.out_proj):
            h = silu(stage["norm"](stage["conv"](h)))
            out = proj(h)
            levels.append(reshape(out, out.dims[1:]) if single else out)
        return levels


def level_dims(channels: Sequence[int], size: int) -> list[tuple[int, int, int]]:
    return [(c, size >> l, size >> l) for l, c in enumerate(channels)]


@dataclass
class GuidancePyramid:
    levels: list  # Tensor per level, [B, C_l, h_l, w_l]

    def __len__(self) -> int:
        return len(self.levels)


class PatchRouter(Module):
    """Scores modalities per ``patch x patch`` cell of one pyramid level.

    Concatenated modality features pass through a per-patch two-layer
    network; the hidden vector is matched against one learned query per
    modality and a softmax over modalities gives the scores. Queries and
    the logit bias start at zero, so a fresh router is uniform.
    """

    def __init__(self, channels: int, n_modalities: int, rng: np.random.Generator,
                 hidden: int = 32, patch: int = 1, dtype=np.float32):
        self.n = n_modalities
        self.patch = patch
        self.fc1 = Linear(channels * n_modalities, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, hidden, rng, dtype=dtype)
        self.queries = Parameter(np.zeros((hidden, n_modalities), dtype))
        self.bias = Parameter(np.zeros(n_modalities, dtype))

    def logits(self, feats: Sequence[Tensor]) -> Tensor:
        dims = {f.dims for f in feats}
        if len(dims) != 1 or len(feats) != self.n:
            raise ShapeError(f"router needs {self.n} aligned pyramids, got dims {sorted(dims)}")
        x = F.avg_pool(concat(list(feats), axis=1), self.patch)  # [B, n*C, h', w']
        b, c, h, w = x.dims
        tokens = reshape(transpose(x, (0, 2, 3, 1)), (b, h * w, c))
        hid = silu(self.fc2(silu(self.fc1(tokens))))
        logit = matmul(hid, self.queries) + self.bias  # [B, hw, n]
        return reshape(transpose(logit, (0, 2, 1)), (b, self.n, h, w))

    def forward(self, feats: Sequence[Tensor]) -> Tensor:
        """Scores ``[B, n, h, w]`` at the level's own resolution."""
        scores = F.softmax(self.logits(feats), axis=1)
        return F.upsample_nearest(scores, self.patch) if self.patch > 1 else scores


def route(router: PatchRouter, pyramids: Sequence[GuidancePyramid], level: int) -> Tensor:
    return router([p.levels[level] for p in pyramids])


def fuse_level(feats: Sequence[Tensor], scores: Tensor) -> Tensor:
    """Sum over modalities of score times feature, per patch."""
    out = None
    for m, feat in enumerate(feats):
        term = scores[:, m:m + 1] * feat
        out = term if out is None else out + term
    return out


def fuse(pyramids: Sequence[GuidancePyramid], scores: dict[int, Tensor]) -> GuidancePyramid:
    """Fuse the levels named in ``scores``; other levels are left as ``None``."""
    n_levels = {len(p) for p in pyramids}
    if len(n_levels) != 1:
        raise ShapeError(f"pyramids differ in level count: {sorted(n_levels)}")
    levels: list = [None] * n_levels.pop()
    for level, s in scores.items():
        levels[level] = fuse_level([p.levels[level] for p in pyramids], s)
    return GuidancePyramid(levels)


class Guidance(Module):
    """All control branches plus per-level routers for a modality subset."""

    def __init__(self, modalities: Sequence[str], cond_channels: dict[str, int],
                 channels: Sequence[int], levels: Sequence[int], rng: np.random.Generator,
                 router_hidden: int = 32, patch: int = 1, shared_router: bool = False,
                 dtype=np.float32):
        unknown = [m for m in modalities if m not in MODALITIES]
        if unknown or not modalities:
            raise ValueError(f"modalities must be a non-empty subset of {MODALITIES}, got {modalities}")
        self.modalities = tuple(modalities)
        self.channels = tuple(channels)
        self.levels = tuple(sorted(set(levels)))
        self.branches = {m: ControlBranch(m, cond_channels[m], channels, rng, dtype) for m in self.modalities}
        if shared_router:
            if len({channels[l] for l in self.levels}) != 1:
                raise ValueError("a shared router needs equal channel counts on routed levels")
            shared = PatchRouter(channels[self.levels[0]], len(self.modalities), rng, router_hidden, patch, dtype)
            self.routers = {str(l): shared for l in self.levels}
        else:
            self.routers = {str(l): PatchRouter(channels[l], len(self.modalities), rng, router_hidden,
                                                patch, dtype) for l in self.levels}
        self.log_scores = False
        self.score_log: list[dict[int, np.ndarray]] = []

    def pyramids(self, conditions: dict[str, Tensor]) -> list[GuidancePyramid]:
        return [GuidancePyramid(self.branches[m](conditions[m])) for m in self.modalities]

    def forward(self, conditions: dict[str, Tensor]) -> tuple[GuidancePyramid, dict[int, Tensor]]:
        pyrs = self.pyramids(conditions)
        scores = {l: route(self.routers[str(l)], pyrs, l) for l in self.levels}
        if self.log_scores:
            # patch-mean per sample, one entry per forward pass
            self.score_log.append({l: s.data.mean(axis=(2, 3)) for l, s in scores.items()})
        return fuse(pyrs, scores), scores


def stack_conditions(observations, modalities: Sequence[str] = MODALITIES, dtype=np.float32
                     ) -> dict[str, Tensor]:
    """Batch the named conditions of several SceneObservations."""
    return {m: Tensor(np.stack([np.asarray(o.condition(m), dtype) for o in observations]))
            for m in modalities}


def weight_report(model, observations) -> dict[str, list[float]]:
    """Mean router score per modality at each injected decoder layer.

    One guidance pass per observation; every pass is logged on
    ``model.guidance.score_log`` and the report averages those entries.
    ``model.layer_levels`` maps injected layer index to pyramid level.
    """
    guidance: Guidance = model.guidance
    if guidance is None:
        raise ValueError("model has no guidance branches")
    from .core.tensor import no_grad

    start = len(guidance.score_log)
    prev = guidance.log_scores
    guidance.log_scores = True
    try:
        with no_grad():
            for obs in observations:
                guidance(stack_conditions([obs], guidance.modalities, model.dtype))
    finally:
        guidance.log_scores = prev
    passes = guidance.score_log[start:]
    report = {}
    for layer, level in sorted(model.layer_levels.items()):
        per_pass = np.stack([p[level][0] for p in passes])  # [N, n_modalities]
        report[f"layer_{layer}"] = [float(v) for v in per_pass.mean(axis=0)]
    report["modalities"] = list(guidance.modalities)
    return report
