"""Training loop, sprite-world defaults and checkpoints."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .action_tree import build_lexicon, corpus_n_max
from .config import ModelConfig, TrainConfig
from .core import mdtn
from .core.optim import Adam, WeightAverage
from .core.tensor import backward, no_grad
from .diffusion import NoiseSchedule, episode_latents, make_conditioning, training_loss
from .modalities import SceneObservation, SyntheticExtractor, observe_episode
from .spriteworld import PREPOSITIONS, VERBS, instruction_corpus
from .text import build_vocab
from .unet import WorldModel

log = logging.getLogger(__name__)


def sprite_model_config(**overrides) -> ModelConfig:
    """Model config whose vocabulary and lexicon cover the sprite-world grammar."""
    corpus = instruction_corpus()
    lex = build_lexicon(corpus, VERBS, PREPOSITIONS)
    base = ModelConfig(vocab=build_vocab(corpus), verbs=lex.verbs, prepositions=lex.prepositions,
                       tree_corpus=tuple(sorted(set(corpus))), n_max=corpus_n_max(corpus, lex))
    return replace(base, **overrides)


def schedule_for(cfg: ModelConfig) -> NoiseSchedule:
    return NoiseSchedule(cfg.steps, cfg.beta_start, cfg.beta_end, cfg.beta_rescale)


@dataclass
class EpisodeSet:
    """Episodes with their observations and target latents precomputed."""

    episodes: list
    observations: list[SceneObservation]
    latents: np.ndarray
    residual: bool = False

    @classmethod
    def build(cls, episodes: Sequence, cfg: ModelConfig, extractor=None) -> "EpisodeSet":
        extractor = extractor or SyntheticExtractor()
        obs = [observe_episode(ep, extractor) for ep in episodes]
        return cls(list(episodes), obs, episode_latents(episodes, cfg.patch, cfg.residual), cfg.residual)

    def __len__(self) -> int:
        return len(self.episodes)

    def batch(self, idx: np.ndarray):
        return ([self.episodes[i].instruction for i in idx], [self.observations[i] for i in idx],
                self.latents[idx])


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    seconds: float = 0.0
    steps: int = 0


def lr_at(step: int, tc: TrainConfig) -> float:
    """Linear warmup then cosine decay to 10% of the peak."""
    if step < tc.warmup:
        return tc.lr * (step + 1) / tc.warmup
    frac = (step - tc.warmup) / max(tc.steps - tc.warmup, 1)
    return tc.lr * (0.1 + 0.9 * 0.5 * (1.0 + np.cos(np.pi * min(frac, 1.0))))


def train(model: WorldModel, data: EpisodeSet, tc: TrainConfig, callback=None,
          time_limit: float | None = None) -> TrainResult:
    if data.residual != model.cfg.residual:
        raise ValueError(f"latents built with residual={data.residual}, model expects {model.cfg.residual}")
    schedule = schedule_for(model.cfg)
    opt = Adam(model.parameters(), lr=tc.lr, weight_decay=tc.weight_decay, clip_norm=tc.clip_norm)
    average = WeightAverage(model.parameters(), tc.ema) if tc.ema else None
    rng = np.random.default_rng([tc.seed, 17])
    result = TrainResult()
    start = time.perf_counter()
    n = len(data)
    order = rng.permutation(n)
    cursor = 0
    for step in range(tc.steps):
        if cursor + tc.batch > n:
            order, cursor = rng.permutation(n), 0
        idx = order[cursor:cursor + min(tc.batch, n)]
        cursor += len(idx)
        instr, obs, z0 = data.batch(idx)
        opt.lr = lr_at(step, tc)
        cond = make_conditioning(model, obs, instr)
        loss = training_loss(model, schedule, z0, cond, rng, step=step)
        model.zero_grad()
        backward(loss)
        opt.step()
        if average is not None:
            average.update()
        result.losses.append(float(loss.data))
        result.steps = step + 1
        if tc.log_every and step % tc.log_every == 0:
            log.info("step %d loss %.4f lr %.2e", step, result.losses[-1], opt.lr)
        if callback is not None:
            callback(step, result.losses[-1])
        if time_limit is not None and time.perf_counter() - start > time_limit:
            log.warning("time limit reached after %d steps", step + 1)
            break
    if average is not None:
        average.copy_to()
    result.seconds = time.perf_counter() - start
    return result


def probe_loss(model: WorldModel, data: EpisodeSet, draws: int = 4, seed: int = 0, batch: int = 8) -> float:
    """Training loss on a fixed set of ``(episode, t, noise)`` draws.

    Each episode is scored at ``draws`` timesteps. The draws depend only on
    ``seed``, so values before and after training are comparable.
    """
    schedule = schedule_for(model.cfg)
    rng = np.random.default_rng([seed, 23])
    idx = np.repeat(np.arange(len(data)), draws)
    t = rng.integers(1, schedule.steps + 1, size=len(idx))
    total = 0.0
    with no_grad():
        for lo in range(0, len(idx), batch):
            sel = idx[lo:lo + batch]
            instr, obs, z0 = data.batch(sel)
            cond = make_conditioning(model, obs, instr)
            loss = training_loss(model, schedule, z0, cond, np.random.default_rng([seed, 29, lo]), t[lo:lo + batch])
            total += float(loss.data) * len(sel)
    return total / len(idx)


def save_checkpoint(directory, model: WorldModel, extra: dict | None = None) -> None:
    doc = {"config": model.cfg.to_dict()}
    if extra:
        doc.update(extra)
    mdtn.save_state(Path(directory), model.state_dict(), doc)


def load_checkpoint(directory) -> WorldModel:
    directory = Path(directory)
    if not (directory / "manifest.json").exists():
        raise FileNotFoundError(f"no checkpoint at {directory}")
    state, doc = mdtn.load_state(directory)
    model = WorldModel(ModelConfig.from_dict(doc["config"]))
    model.load_state_dict(state)
    return model
