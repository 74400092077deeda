"""First-frame visual conditions: depth, semantic features, RGB, dynamic mask."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .core import mdtn
from .spriteworld import NUM_CLASSES, PALETTE


class ModalityError(ValueError):
    pass


@dataclass
class SceneObservation:
    rgb: np.ndarray  # [3, H, W] in [0, 1]
    depth: np.ndarray  # [1, H, W] in [0, 1]
    semantic: np.ndarray  # [C_sam, H, W]
    dyn_mask: np.ndarray  # [1, H, W] in [0, 1]

    def __post_init__(self):
        hw = {a.shape[-2:] for a in (self.rgb, self.depth, self.semantic, self.dyn_mask)}
        if len(hw) != 1:
            raise ModalityError(f"conditions disagree on spatial dims: {sorted(hw)}")

    def condition(self, name: str) -> np.ndarray:
        return {"depth": self.depth, "semantic": self.semantic, "rgb": self.rgb,
                "mask": self.dyn_mask}[name]


class FeatureExtractor(Protocol):
    channels: int

    def __call__(self, frame: np.ndarray) -> np.ndarray: ...


def box_blur3(x: np.ndarray) -> np.ndarray:
    """3x3 mean filter with edge replication, per channel."""
    p = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
    h, w = x.shape[1:]
    acc = np.zeros_like(x, dtype=np.float64)
    for dy in range(3):
        for dx in range(3):
            acc += p[:, dy:dy + h, dx:dx + w]
    return acc / 9.0


class SyntheticExtractor:
    """Decodes sprite-world pixels to their palette class, one-hot, blurred."""

    channels = NUM_CLASSES

    def __init__(self, palette: np.ndarray = PALETTE, blur: bool = True):
        self.palette = np.asarray(palette, dtype=np.float64)
        self.channels = len(self.palette)
        self.blur = blur

    def classify(self, frame: np.ndarray) -> np.ndarray:
        px = frame.reshape(3, -1).T.astype(np.float64)
        d = ((px[:, None, :] - self.palette[None]) ** 2).sum(-1)
        return d.argmin(1).reshape(frame.shape[1:])

    def __call__(self, frame: np.ndarray) -> np.ndarray:
        if frame.ndim != 3 or frame.shape[0] != 3:
            raise ModalityError(f"expected a [3,H,W] frame, got {frame.shape}")
        onehot = np.eye(self.channels)[self.classify(frame)].transpose(2, 0, 1)
        return box_blur3(onehot) if self.blur else onehot


def _frame_key(frame: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(frame, dtype=np.float32).tobytes()).hexdigest()


class FileExtractor:
    """Serves precomputed features; ``features/frame_XXXX.mdtn`` pairs with
    ``frames/frame_XXXX.mdtn``, frames are matched by content."""

    def __init__(self, features_dir, frames_dir):
        self._table: dict[str, np.ndarray] = {}
        for fpath in sorted(Path(frames_dir).glob("frame_*.mdtn")):
            feat = Path(features_dir) / fpath.name
            if not feat.exists():
                raise ModalityError(f"missing feature file {feat}")
            self._table[_frame_key(mdtn.load(fpath))] = mdtn.load(feat)
        if not self._table:
            raise ModalityError(f"no frames found in {frames_dir}")
        self.channels = next(iter(self._table.values())).shape[0]

    def __call__(self, frame: np.ndarray) -> np.ndarray:
        try:
            return self._table[_frame_key(frame)]
        except KeyError:
            raise ModalityError("frame has no precomputed features") from None


def normalize_depth(raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if not np.isfinite(raw).all():
        raise ModalityError("depth contains NaN or Inf")
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.full_like(raw, 0.5)
    return (raw - lo) / (hi - lo)


def clamped_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-pixel cosine similarity of ``[C,H,W]`` features, clamped to [0, 1].

    A pixel whose feature vector has zero norm in either input counts as
    unchanged (similarity 1), as does a bit-identical pair.
    """
    na = np.sqrt((a * a).sum(0))
    nb = np.sqrt((b * b).sum(0))
    dot = (a * b).sum(0)
    degenerate = (na == 0) | (nb == 0) | (a == b).all(0)
    sim = np.where(degenerate, 1.0, dot / np.where(degenerate, 1.0, na * nb))
    return np.clip(sim, 0.0, 1.0)


def dynamic_mask(frames: Sequence[np.ndarray], extractor: FeatureExtractor) -> np.ndarray:
    """Mean over t >= 1 of one minus the feature similarity to frame 0."""
    frames = list(frames)
    if len(frames) < 2:
        raise ModalityError("dynamic mask needs frame 0 plus at least one later frame")
    dims = {np.shape(f) for f in frames}
    if len(dims) != 1:
        raise ModalityError(f"frames differ in dims: {sorted(dims)}")
    f0 = extractor(frames[0])
    acc = np.zeros(f0.shape[1:])
    for frame in frames[1:]:
        acc += 1.0 - clamped_cosine(f0, extractor(frame))
    return (acc / (len(frames) - 1))[None]


def observe(frames: Sequence[np.ndarray], raw_depth: np.ndarray,
            extractor: FeatureExtractor) -> SceneObservation:
    frames = list(frames)
    if raw_depth.shape[-2:] != frames[0].shape[-2:]:
        raise ModalityError(f"depth dims {raw_depth.shape} do not match frame dims {frames[0].shape}")
    return SceneObservation(
        rgb=np.asarray(frames[0], dtype=np.float64),
        depth=normalize_depth(raw_depth).reshape(1, *frames[0].shape[-2:]),
        semantic=extractor(frames[0]),
        dyn_mask=dynamic_mask(frames, extractor),
    )


def observe_episode(episode, extractor: FeatureExtractor | None = None) -> SceneObservation:
    return observe(list(episode.frames), episode.depth_gt, extractor or SyntheticExtractor())


def prior_observation(frame0: np.ndarray, raw_depth: np.ndarray, extractor: FeatureExtractor,
                      mask_prior: np.ndarray | None = None) -> SceneObservation:
    """Observation when only frame 0 exists: the mask comes from a prior."""
    h, w = frame0.shape[-2:]
    mask = np.zeros((1, h, w)) if mask_prior is None else np.broadcast_to(mask_prior, (1, h, w)).copy()
    return SceneObservation(np.asarray(frame0, np.float64), normalize_depth(raw_depth).reshape(1, h, w),
                            extractor(frame0), mask)


def binarize(mask: np.ndarray, threshold: float) -> np.ndarray:
    return np.asarray(mask) > threshold


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = (a | b).sum()
    return 1.0 if union == 0 else float((a & b).sum() / union)
