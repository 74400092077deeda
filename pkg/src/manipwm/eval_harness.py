"""Video metrics, experiment grids and comparison reports."""
from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

PSNR_CAP = 99.0
LUMA = np.array([0.299, 0.587, 0.114])


class MetricError(ValueError):
    pass


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"videos differ in dims: {a.shape} vs {b.shape}")
    return a, b


# -- PSNR -------------------------------------------------------------------

def psnr_frames(generated, reference) -> np.ndarray:
    """Per-frame PSNR in dB of ``[T, 3, H, W]`` videos in [0, 1]."""
    a, b = _check_pair(generated, reference)
    mse = ((a - b) ** 2).reshape(a.shape[0], -1).mean(axis=1)
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(1.0 / mse)
    return np.minimum(np.where(mse == 0, PSNR_CAP, db), PSNR_CAP)


def psnr(generated, reference) -> float:
    return float(psnr_frames(generated, reference).mean())


# -- SSIM -------------------------------------------------------------------

def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def luma(frames: np.ndarray) -> np.ndarray:
    return np.tensordot(np.asarray(frames, dtype=np.float64), LUMA, axes=([-3], [0]))


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Weighted window sums over every fully contained ``k x k`` window."""
    k = win.shape[0]
    h, w = img.shape[-2:]
    out = np.zeros(img.shape[:-2] + (h - k + 1, w - k + 1))
    for i in range(k):
        for j in range(k):
            out += win[i, j] * img[..., i:i + h - k + 1, j:j + w - k + 1]
    return out


def ssim_map(x: np.ndarray, y: np.ndarray, window: int = 11, sigma: float = 1.5,
             k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> np.ndarray:
    if min(x.shape[-2:]) < window:
        raise MetricError(f"frame {x.shape[-2:]} smaller than the {window}x{window} window")
    win = gaussian_window(window, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mx, my = _filter_valid(x, win), _filter_valid(y, win)
    sxx = _filter_valid(x * x, win) - mx * mx
    syy = _filter_valid(y * y, win) - my * my
    sxy = _filter_valid(x * y, win) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim_frames(generated, reference) -> np.ndarray:
    a, b = _check_pair(generated, reference)
    return ssim_map(luma(a), luma(b)).reshape(a.shape[0], -1).mean(axis=1)


def ssim(generated, reference) -> float:
    return float(ssim_frames(generated, reference).mean())


# -- flow -------------------------------------------------------------------

def _candidates(radius: int) -> list[tuple[int, int]]:
    """Displacements (dy, dx) ordered so earlier wins ties."""
    cand = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    return sorted(cand, key=lambda d: (d[0] ** 2 + d[1] ** 2, d[0], d[1]))


def block_flow(a: np.ndarray, b: np.ndarray, block: int = 4, radius: int = 4) -> np.ndarray:
    """Per-block (dx, dy) that best moves block of ``a`` onto ``b`` (SSD).

    Frames are ``[C, H, W]``; returns ``[2, H//block, W//block]``.
    Displacements that leave the frame are not considered.
    """
    c, h, w = a.shape
    nby, nbx = h // block, w // block
    best = np.full((nby, nbx), np.inf)
    flow = np.zeros((2, nby, nbx))
    pad = np.pad(b, ((0, 0), (radius, radius), (radius, radius)), constant_values=np.nan)
    blocks = a[:, :nby * block, :nbx * block].reshape(c, nby, block, nbx, block)
    for dy, dx in _candidates(radius):
        shifted = pad[:, radius + dy:radius + dy + nby * block, radius + dx:radius + dx + nbx * block]
        diff = (shifted.reshape(c, nby, block, nbx, block) - blocks) ** 2
        ssd = diff.sum(axis=(0, 2, 4))
        better = ssd < best  # NaN (out of frame) never wins; strict keeps the earlier tie
        best = np.where(better, ssd, best)
        flow[0][better] = dx
        flow[1][better] = dy
    return flow


def video_flow(video: np.ndarray, block: int = 4, radius: int = 4) -> np.ndarray:
    video = np.asarray(video, dtype=np.float64)
    if video.shape[0] < 2:
        raise MetricError("flow needs at least two frames")
    return np.stack([block_flow(video[t], video[t + 1], block, radius) for t in range(video.shape[0] - 1)])


def flow_error(generated, reference, block: int = 4, radius: int = 4) -> float:
    """Mean endpoint distance between block-matched flows of two videos."""
    a, b = _check_pair(generated, reference)
    if a.shape[0] < 2:
        raise MetricError("flow needs at least two frames")
    fa, fb = video_flow(a, block, radius), video_flow(b, block, radius)
    return float(np.sqrt(((fa - fb) ** 2).sum(axis=1)).mean())


# -- reports ----------------------------------------------------------------

def fingerprint(doc) -> str:
    return hashlib.sha1(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()[:12]


@dataclass
class MetricsReport:
    variant: str
    split: str
    per_episode: list[dict] = field(default_factory=list)
    config_fingerprint: str = ""
    forward_passes: int = 0

    @property
    def aggregate(self) -> dict:
        out = {}
        for key in ("psnr", "ssim", "flow_error"):
            vals = [e[key] for e in self.per_episode]
            out[key] = float(np.mean(vals)) if vals else float("nan")
        out["fid"] = None
        out["lpips"] = None
        return out

    def to_dict(self) -> dict:
        return {"variant": self.variant, "split": self.split, "config": self.config_fingerprint,
                "forward_passes": self.forward_passes, "aggregate": self.aggregate,
                "episodes": self.per_episode}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def score_video(generated: np.ndarray, episode) -> dict:
    """Metrics of generated frames 1..F against the episode.

    Flow is measured on the clip with the shared frame 0 prepended, so the
    first transition counts too.
    """
    ref = np.asarray(episode.frames[1:], np.float64)
    gen = np.asarray(generated, np.float64)
    f0 = np.asarray(episode.frames[:1], np.float64)
    return {
        "task_id": episode.task_id, "seed": int(episode.seed),
        "psnr": psnr(gen, ref), "ssim": ssim(gen, ref),
        "flow_error": flow_error(np.concatenate([f0, gen]), np.concatenate([f0, ref])),
    }


def evaluate(model, episodes, observations, mode: str = "tree", seed: int = 0,
             sample_steps: int = 50, eta: float = 0.0, batch: int = 16, variant: str = "",
             split: str = "") -> MetricsReport:
    """Sample every episode once and score it; ``mode`` is tree, vanilla or decomposed."""
    from .diffusion import sample_decomposed, sample_video
    from .train import schedule_for

    schedule = schedule_for(model.cfg)
    report = MetricsReport(variant or mode, split, config_fingerprint=fingerprint(model.cfg.to_dict()))
    start = model.forward_count
    for lo in range(0, len(episodes), batch):
        eps = episodes[lo:lo + batch]
        obs = observations[lo:lo + batch]
        instr = [e.instruction for e in eps]
        if mode == "decomposed":
            videos = sample_decomposed(model, schedule, obs, instr, seed + lo, sample_steps, eta)
        elif mode in ("tree", "vanilla"):
            videos = sample_video(model, schedule, obs, instr, seed + lo, sample_steps, eta,
                                  use_tree=(mode == "tree"))
        else:
            raise ValueError(f"unknown sampling mode {mode!r}")
        for ep, vid in zip(eps, videos):
            report.per_episode.append(score_video(vid, ep))
    report.forward_passes = model.forward_count - start
    return report


def static_baseline(episodes) -> MetricsReport:
    """Repeat frame 0 for every generated frame."""
    report = MetricsReport("static", "")
    for ep in episodes:
        gen = np.repeat(np.asarray(ep.frames[:1]), ep.frames.shape[0] - 1, axis=0)
        report.per_episode.append(score_video(gen, ep))
    return report


# -- experiment grids -------------------------------------------------------

@dataclass
class Variant:
    name: str
    checkpoint: str | None = None
    mode: str = "tree"
    model: object = None  # an in-memory model instead of a checkpoint


def expand_grid(grid: dict[str, Sequence]) -> list[dict]:
    """Cartesian product of named option lists, in key order."""
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def run_experiment(variants: Sequence[Variant], splits: dict[str, tuple[list, list]], seed: int = 0,
                   sample_steps: int = 50, eta: float = 0.0,
                   loader: Callable | None = None) -> list[MetricsReport]:
    """Evaluate each variant on each split; ``splits`` maps name -> (episodes, observations)."""
    from .train import load_checkpoint

    loader = loader or load_checkpoint
    reports = []
    for v in variants:
        model = v.model
        if model is None:
            if v.checkpoint is None or not (Path(v.checkpoint) / "manifest.json").exists():
                raise FileNotFoundError(f"variant {v.name!r}: checkpoint {v.checkpoint!r} not found")
            model = loader(v.checkpoint)
        for split, (eps, obs) in splits.items():
            reports.append(evaluate(model, eps, obs, v.mode, seed, sample_steps, eta, variant=v.name,
                                    split=split))
    return reports


def comparison_table(reports: Sequence[MetricsReport]) -> str:
    """Tab-separated table: one row per variant, metric x split columns."""
    splits = sorted({r.split for r in reports})
    metrics = ("psnr", "ssim", "flow_error")
    rows: dict[str, dict] = {}
    for r in reports:
        agg = r.aggregate
        row = rows.setdefault(r.variant, {})
        for m in metrics:
            row[f"{m}_{r.split}"] = agg[m]
    cols = [f"{m}_{s}" for s in splits for m in metrics]
    lines = ["variant\t" + "\t".join(cols)]
    for name, row in rows.items():
        lines.append(name + "\t" + "\t".join(f"{row.get(c, float('nan')):.4f}" for c in cols))
    return "\n".join(lines) + "\n"


def write_reports(directory, reports: Sequence[MetricsReport]) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for r in reports:
        (d / f"{r.variant}_{r.split}.json").write_text(r.to_json())
    (d / "comparison.tsv").write_text(comparison_table(reports))
