"""Model and training configuration, serialized as JSON."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .adapter import InjectionSchedule


@dataclass
class ModelConfig:
    image_size: int = 32
    frames: int = 8  # generated frames; frame 0 is the observation
    patch: int = 4  # latent = patchified pixels
    residual: bool = True  # diffuse each frame's change from frame 0
    c0: int = 64  # channels at the latent resolution; below 48 it bottlenecks the latent
    c1: int = 64  # channels after the single downsample
    decoder_layers: int = 12
    attn_every: int = 3  # decoder layers with temporal + text attention
    heads: int = 4
    text_dim: int = 64
    max_words: int = 16
    tree: bool = False  # append action-tree tokens to the text context
    modalities: tuple[str, ...] = ()  # empty = unguided base model
    pyramid: tuple[int, ...] = (8, 16, 32, 64)
    router_hidden: int = 32
    router_patch: int = 1
    shared_router: bool = False
    fusion: str = "additive"  # or "xattn"
    inject_every: int = 3
    layer_override: tuple[int, ...] | None = None
    steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    beta_rescale: bool = True  # stretch the linear betas to the step count
    parameterization: str = "x0"  # eps | wiener | x0: what the network output stands for
    sigma_data: float = 0.2  # std of clean latents assumed by the wiener and x0 forms
    seed: int = 0
    vocab: tuple[str, ...] = ()
    verbs: tuple[str, ...] = ()
    prepositions: tuple[str, ...] = ()
    tree_corpus: tuple[str, ...] = ()
    n_max: int = 2

    @property
    def latent_channels(self) -> int:
        return 3 * self.patch * self.patch

    @property
    def latent_size(self) -> int:
        return self.image_size // self.patch

    @property
    def schedule(self) -> InjectionSchedule:
        mode = {"additive": "additive", "xattn": "cross_attention",
                "cross_attention": "cross_attention"}[self.fusion]
        override = tuple(self.layer_override) if self.layer_override is not None else None
        return InjectionSchedule(self.decoder_layers, self.inject_every, mode, override)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for k, v in doc.items():
            if k not in known:
                raise KeyError(f"unknown config key {k!r}")
            if isinstance(v, list):
                v = tuple(v)
            kwargs[k] = v
        return cls(**kwargs)


@dataclass
class TrainConfig:
    steps: int = 800
    batch: int = 8
    lr: float = 2e-3
    warmup: int = 50
    weight_decay: float = 0.0
    clip_norm: float = 0.05  # low-t batches have ~1000x the gradient of the rest
    ema: float = 0.99  # weight average written back after training; 0 keeps the last iterate
    seed: int = 0
    log_every: int = 50
    extra: dict = field(default_factory=dict)


def load_json_config(path) -> tuple[ModelConfig, TrainConfig, dict]:
    """``{"model": {...}, "train": {...}, ...}``; other sections pass through."""
    doc = json.loads(Path(path).read_text())
    model = ModelConfig.from_dict(doc.get("model", {}))
    train = TrainConfig(**doc.get("train", {}))
    return model, train, doc
