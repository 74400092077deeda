"""Synthetic manipulation videos with analytic ground truth.

A 32x32 tabletop holds three places (mat, box, tray), a lid above each
place and two 5x5 sprites. Each task template moves one object along an
integer-pixel path, so depth, semantics, motion masks and optical flow are
known exactly.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import mdtn

VERBS = ("pick", "place", "push", "close")
PREPOSITIONS = ("from", "in", "on", "toward")
COLORS = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.20, 0.70, 0.25),
    "yellow": (0.95, 0.85, 0.20),
    "purple": (0.60, 0.30, 0.75),
}
SHAPES = ("square", "cross", "diamond")
PLACES = {"mat": (0.55, 0.35, 0.20), "box": (0.20, 0.35, 0.80), "tray": (0.20, 0.60, 0.60)}
PLACE_PHRASE = {"mat": "mat", "box": "blue box", "tray": "tray"}
BACKGROUND = (0.85, 0.80, 0.70)
LID = (0.50, 0.50, 0.50)

# semantic classes, also the palette the synthetic extractor decodes
CLASSES = ("background", "mat", "box", "tray", "lid") + tuple(COLORS)
PALETTE = np.array([BACKGROUND, *PLACES.values(), LID, *COLORS.values()])
NUM_CLASSES = len(CLASSES)

STRUCTURES = {
    # name: (instruction pattern, action words, uses sprite, number of places)
    "pick_from": ("pick the {obj} from the {p0}", [("pick", "from")], True, 1),
    "pick_place": ("pick the {obj} from the {p0} and place it in the {p1}",
                   [("pick", "from"), ("place", "in")], True, 2),
    "place_on": ("place the {obj} on the {p0}", [("place", "on")], True, 1),
    "push_toward": ("push the {obj} toward the {p0}", [("push", "toward")], True, 1),
    "close": ("close the {p0}", [("close", None)], False, 1),
    "place_close": ("place the {obj} in the {p0} and close the {p0}",
                    [("place", "in"), ("close", None)], True, 1),
}

SIZE = 32
SPRITE = 7
PLACE_W = 9
PLACE_Y = 21
LID_H = 3
LID_REST_Y = 16
LID_CLOSED_Y = 24
SETTLE = 1  # frames the moved object rests at its goal before the clip ends
SLOTS_X = (1, 11, 21)
DEPTH = {"place": 0.02, "sprite": 0.06, "lid": 0.12}


class TemplateRejected(ValueError):
    pass


class SplitConfigError(ValueError):
    pass


def _shape_mask(shape: str) -> np.ndarray:
    i, j = np.mgrid[0:SPRITE, 0:SPRITE]
    c = SPRITE // 2
    if shape == "square":
        return np.ones((SPRITE, SPRITE), bool)
    if shape == "cross":
        return (np.abs(i - c) <= c // 2) | (np.abs(j - c) <= c // 2)
    if shape == "diamond":
        return np.abs(i - c) + np.abs(j - c) <= c
    raise ValueError(f"unknown shape {shape!r}")


@dataclass(frozen=True)
class TaskTemplate:
    structure: str
    color: str | None = None
    shape: str | None = None
    places: tuple[str, ...] = ()
    motion_scale: float = 1.0

    def __post_init__(self):
        if self.structure not in STRUCTURES:
            raise TemplateRejected(f"unknown structure {self.structure!r}")
        _, _, uses_sprite, n_places = STRUCTURES[self.structure]
        if uses_sprite and (self.color not in COLORS or self.shape not in SHAPES):
            raise TemplateRejected(f"{self.structure} needs a sprite color and shape")
        if len(self.places) != n_places or any(p not in PLACES for p in self.places):
            raise TemplateRejected(f"{self.structure} needs {n_places} known places, got {self.places}")
        if len(set(self.places)) != len(self.places):
            raise TemplateRejected("places must differ")

    @property
    def object_name(self) -> str:
        if STRUCTURES[self.structure][2]:
            return f"{self.color} {self.shape}"
        return f"{self.places[0]} lid"

    @property
    def instruction(self) -> str:
        pattern = STRUCTURES[self.structure][0]
        phrases = {f"p{i}": PLACE_PHRASE[p] for i, p in enumerate(self.places)}
        return pattern.format(obj=self.object_name, **phrases)

    @property
    def action_pairs(self) -> list[tuple[str, str | None]]:
        return list(STRUCTURES[self.structure][1])

    @property
    def task_id(self) -> str:
        parts = [self.structure]
        if self.color:
            parts += [self.color, self.shape]
        parts += list(self.places)
        if self.motion_scale != 1.0:
            parts.append(f"m{self.motion_scale:g}")
        return "-".join(parts)

    @property
    def combos(self) -> set[tuple[str, str]]:
        """Verb-object and verb-preposition combinations."""
        out = set()
        for verb, prep in self.action_pairs:
            obj = f"{self.places[0]} lid" if verb == "close" else self.object_name
            out.add((verb, obj))
            if prep is not None:
                out.add((verb, prep))
        return out

    @property
    def atoms(self) -> set[str]:
        out = {w for pair in self.action_pairs for w in pair if w}
        if self.color:
            out |= {self.color, self.shape}
        return out | set(self.places)


def enumerate_templates() -> list[TaskTemplate]:
    objs = list(itertools.product(COLORS, SHAPES))
    names = list(PLACES)
    out = []
    for (c, s), p in itertools.product(objs, names):
        out.append(TaskTemplate("pick_from", c, s, (p,)))
    for (c, s), (p0, p1) in itertools.product(objs, itertools.permutations(names, 2)):
        out.append(TaskTemplate("pick_place", c, s, (p0, p1)))
    for structure in ("place_on", "push_toward", "place_close"):
        for (c, s), p in itertools.product(objs, names):
            out.append(TaskTemplate(structure, c, s, (p,)))
    for p in names:
        out.append(TaskTemplate("close", places=(p,)))
    return out


def instruction_corpus(templates: Iterable[TaskTemplate] | None = None) -> list[str]:
    return [t.instruction for t in (templates or enumerate_templates())]


@dataclass
class Episode:
    instruction: str
    frames: np.ndarray  # [T+1, 3, H, W]
    depth_gt: np.ndarray  # [1, H, W] raw depth of frame 0
    semantic_gt: np.ndarray  # [C, H, W] one-hot classes of frame 0
    mask_gt: np.ndarray  # [1, H, W] union of moved-object footprints
    flow_gt: np.ndarray  # [T, 2, H, W] (dx, dy) of frame t -> t+1
    labels: np.ndarray  # [T+1, H, W] class id per pixel
    moving: np.ndarray  # [T+1, H, W] visible pixels of the moving object
    template: TaskTemplate
    seed: int
    task_id: str = ""
    split: str = "train"
    extras: dict = field(default_factory=dict)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def _lerp_path(start, end, n_steps, t0, t1, scale):
    """Integer positions for frames 0..n_steps, moving between t0 and t1."""
    start = np.asarray(start)
    delta = np.round((np.asarray(end) - start) * scale).astype(int)
    out = []
    for t in range(n_steps + 1):
        u = min(max((t - t0) / max(t1 - t0, 1), 0.0), 1.0)
        out.append(tuple(int(v) for v in start + np.round(delta * u).astype(int)))
    return out


def generate_episode(template: TaskTemplate, seed: int, num_frames: int = 9,
                     size: int = SIZE) -> Episode:
    if size != SIZE:
        raise TemplateRejected(f"layout is fixed to {SIZE}x{SIZE}")
    rng = np.random.default_rng([seed, 7919])
    steps = num_frames - 1
    slot_of = dict(zip(PLACES, rng.permutation(len(SLOTS_X))))
    place_x = {p: SLOTS_X[i] for p, i in slot_of.items()}

    def on_place(p):
        return (place_x[p] + (PLACE_W - SPRITE) // 2, PLACE_Y + (PLACE_W - SPRITE) // 2)

    objs = list(itertools.product(COLORS, SHAPES))
    if template.color:
        target = (template.color, template.shape)
    else:
        target = objs[rng.integers(len(objs))]
    others = [o for o in objs if o[0] != target[0] and o[1] != target[1]]
    distractor = others[rng.integers(len(others))]

    # free positions in the top band, non-overlapping with a one-pixel gap
    def top_position(avoid=None):
        for _ in range(100):
            pos = (int(rng.integers(1, size - SPRITE - 1)), int(rng.integers(2, 6)))
            if avoid is None or abs(pos[0] - avoid[0]) > SPRITE:
                return pos
        raise TemplateRejected("could not place sprites")

    s = template.structure
    scale = template.motion_scale
    lid_paths = {p: [(place_x[p], LID_REST_Y)] * (steps + 1) for p in PLACES}
    moving_obj = "target"
    if s in ("pick_from", "pick_place"):
        start = on_place(template.places[0])
        end = (start[0], start[1] - 12) if s == "pick_from" else on_place(template.places[1])
        target_path = _lerp_path(start, end, steps, 0, steps - SETTLE, scale)
        d_pos = top_position()
    elif s in ("place_on", "push_toward"):
        start = top_position()
        goal = np.array(on_place(template.places[0]))
        end = goal if s == "place_on" else np.array(start) + np.round((goal - start) / 2).astype(int)
        target_path = _lerp_path(start, end, steps, 0, steps - SETTLE, scale)
        d_pos = top_position(avoid=start)
    elif s == "close":
        start = top_position()
        target_path = [start] * (steps + 1)
        d_pos = top_position(avoid=start)
        p = template.places[0]
        lid_paths[p] = _lerp_path((place_x[p], LID_REST_Y), (place_x[p], LID_CLOSED_Y),
                                  steps, 0, steps - SETTLE, scale)
        moving_obj = "lid:" + p
    else:  # place_close
        start = top_position()
        half = steps // 2
        p = template.places[0]
        target_path = _lerp_path(start, on_place(p), steps, 0, half, scale)
        lid_paths[p] = _lerp_path((place_x[p], LID_REST_Y), (place_x[p], LID_CLOSED_Y),
                                  steps, half, steps - SETTLE, scale)
        d_pos = top_position(avoid=start)
        moving_obj = "both"

    extents = [(target_path, SPRITE, SPRITE)] + [(p, PLACE_W, LID_H) for p in lid_paths.values()]
    for path, w, h in extents:
        for x, y in path:
            if x < 0 or y < 0 or x + w > size or y + h > size:
                raise TemplateRejected(f"object leaves the canvas in {template.task_id}")

    # static background texture and table depth
    tex = rng.uniform(-0.03, 0.03, size=(1, size, size))
    base = np.array(BACKGROUND).reshape(3, 1, 1) + tex
    yy = np.arange(size).reshape(size, 1) * np.ones((1, size))
    table_depth = 1.3 + 0.01 * (size - 1 - yy)

    frames = np.zeros((steps + 1, 3, size, size))
    labels = np.zeros((steps + 1, size, size), dtype=np.int64)
    moving = np.zeros((steps + 1, size, size), dtype=bool)
    obj_id = np.zeros((steps + 1, size, size), dtype=np.int64)  # 0 = static
    depth0 = table_depth.copy()
    footprint = np.zeros((size, size), bool)
    tmask, dmask = _shape_mask(target[1]), _shape_mask(distractor[1])

    for t in range(steps + 1):
        img = base.copy()
        lab = np.zeros((size, size), np.int64)
        oid = np.zeros((size, size), np.int64)
        dep = table_depth.copy()

        def paint(x, y, w, h, mask, cls, color, layer, ident):
            region = (slice(y, y + h), slice(x, x + w))
            m = mask if mask is not None else np.ones((h, w), bool)
            sub = img[:, region[0], region[1]]
            sub[:, m] = np.array(color).reshape(3, 1)
            lab[region][m] = cls
            oid[region][m] = ident
            dep[region][m] = table_depth[region][m] - DEPTH[layer]

        for p, px in place_x.items():
            paint(px, PLACE_Y, PLACE_W, PLACE_W, None, CLASSES.index(p), PLACES[p], "place", 0)
        paint(*d_pos, SPRITE, SPRITE, dmask, CLASSES.index(distractor[0]), COLORS[distractor[0]],
              "sprite", 0)

        def paint_target():
            paint(*target_path[t], SPRITE, SPRITE, tmask, CLASSES.index(target[0]),
                  COLORS[target[0]], "sprite", 1)

        def paint_lids():
            for p, path in lid_paths.items():
                lx, ly = path[t]
                ident = 2 if path[0] != path[-1] else 0
                paint(lx, ly, PLACE_W, LID_H, None, CLASSES.index("lid"), LID, "lid", ident)

        # the object that is moving (or last moved) is drawn on top
        lid_moving = moving_obj != "target" and (moving_obj != "both" or t > steps // 2)
        if lid_moving:
            paint_target()
            paint_lids()
        else:
            paint_lids()
            paint_target()

        frames[t] = np.clip(img, 0.0, 1.0)
        labels[t] = lab
        obj_id[t] = oid
        if t == 0:
            depth0 = dep

    # moving-object footprints and flow
    paths = {1: target_path}
    for p, path in lid_paths.items():
        if path[0] != path[-1]:
            paths[2] = path
    flow = np.zeros((steps, 2, size, size))
    for ident, path in paths.items():
        if path[0] == path[-1]:
            continue
        w, h, m = (SPRITE, SPRITE, tmask) if ident == 1 else (PLACE_W, LID_H, np.ones((LID_H, PLACE_W), bool))
        for t in range(steps + 1):
            x, y = path[t]
            footprint[y:y + h, x:x + w] |= m
        for t in range(steps):
            vis = obj_id[t] == ident
            dx = path[t + 1][0] - path[t][0]
            dy = path[t + 1][1] - path[t][1]
            flow[t, 0][vis] = dx
            flow[t, 1][vis] = dy
            moving[t] |= vis
        moving[steps] |= obj_id[steps] == ident

    semantic = np.eye(NUM_CLASSES)[labels[0]].transpose(2, 0, 1)
    return Episode(
        instruction=template.instruction,
        frames=frames.astype(np.float32),
        depth_gt=depth0[None].astype(np.float32),
        semantic_gt=semantic.astype(np.float32),
        mask_gt=footprint[None].astype(np.float32),
        flow_gt=flow.astype(np.float32),
        labels=labels,
        moving=moving,
        template=template,
        seed=seed,
        task_id=template.task_id,
    )


def warp_forward(frame: np.ndarray, flow: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Move pixels selected by ``mask`` along integer ``flow``.

    Returns destination coordinates (y, x) and the source colors.
    """
    ys, xs = np.nonzero(mask)
    dx = flow[0][ys, xs].astype(int)
    dy = flow[1][ys, xs].astype(int)
    return (ys + dy, xs + dx), frame[:, ys, xs]


def split_tasks(templates: Sequence[TaskTemplate], ratio: float, seed: int = 0
                ) -> tuple[list[TaskTemplate], list[TaskTemplate]]:
    """Compositional seen/unseen split.

    Whole groups of templates sharing a held-out combination move to the
    unseen side, so every unseen template carries a verb-object or
    verb-preposition pairing never seen in training, while every atomic
    word it uses still occurs in the seen set.
    """
    if not 0.0 < ratio < 1.0:
        raise SplitConfigError(f"ratio must lie in (0, 1), got {ratio}")
    templates = list(templates)
    target = int(round(len(templates) * (1.0 - ratio) + 1e-9))
    if target < 1 or target >= len(templates):
        raise SplitConfigError(f"{len(templates)} templates cannot be split at ratio {ratio}")
    combos = sorted({c for t in templates for c in t.combos})
    order = np.random.default_rng(seed).permutation(len(combos))
    unseen_ids: set[str] = set()

    def covered(unseen, seen):
        seen_atoms = set().union(*(t.atoms for t in seen)) if seen else set()
        return all(t.atoms <= seen_atoms for t in unseen)

    for i in order:
        combo = combos[i]
        group = [t for t in templates if t.task_id not in unseen_ids and combo in t.combos]
        if not group or len(unseen_ids) + len(group) > target:
            continue
        trial = unseen_ids | {t.task_id for t in group}
        unseen = [t for t in templates if t.task_id in trial]
        seen = [t for t in templates if t.task_id not in trial]
        if covered(unseen, seen):
            unseen_ids = trial
        if len(unseen_ids) == target:
            break
    if not unseen_ids:
        raise SplitConfigError("too few templates for a compositional split")
    seen = [t for t in templates if t.task_id not in unseen_ids]
    unseen = [t for t in templates if t.task_id in unseen_ids]
    return seen, unseen


@dataclass
class Dataset:
    train: list[Episode]
    eval_seen: list[Episode]
    eval_unseen: list[Episode]
    seen_templates: list[TaskTemplate]
    unseen_templates: list[TaskTemplate]


def make_dataset(n_train: int = 2000, n_eval: int = 200, seed: int = 0, ratio: float = 0.9,
                 num_frames: int = 9) -> Dataset:
    seen, unseen = split_tasks(enumerate_templates(), ratio, seed)
    rng = np.random.default_rng([seed, 31])

    def draw(pool, n, split, offset):
        out = []
        for k in range(n):
            tpl = pool[k % len(pool)] if k < len(pool) else pool[rng.integers(len(pool))]
            ep = generate_episode(tpl, seed=offset + k, num_frames=num_frames)
            ep.split = split
            out.append(ep)
        return out

    base = 1_000_000 * (seed + 1)
    train = draw(list(np.array(seen, dtype=object)[rng.permutation(len(seen))]), n_train, "train", base)
    ev_seen = draw(list(np.array(seen, dtype=object)[rng.permutation(len(seen))]), n_eval, "seen", base + 500_000)
    ev_unseen = draw(unseen, n_eval, "unseen", base + 700_000)
    return Dataset(train, ev_seen, ev_unseen, seen, unseen)


# -- on-disk layout -----------------------------------------------------------

def save_episode(root, ep: Episode) -> Path:
    d = Path(root) / "episodes" / ep.task_id / str(ep.seed)
    d.mkdir(parents=True, exist_ok=True)
    for t in range(ep.num_frames):
        mdtn.save(d / f"frame_{t:04d}.mdtn", ep.frames[t])
    mdtn.save(d / "depth.mdtn", ep.depth_gt)
    mdtn.save(d / "sem.mdtn", ep.semantic_gt)
    mdtn.save(d / "mask.mdtn", ep.mask_gt)
    mdtn.save(d / "flow.mdtn", ep.flow_gt)
    meta = {"instruction": ep.instruction, "template": asdict(ep.template), "split": ep.split,
            "seed": ep.seed, "task_id": ep.task_id, "num_frames": ep.num_frames}
    (d / "meta.json").write_text(json.dumps(meta, indent=1))
    return d


def load_episode(directory) -> Episode:
    """Reload an episode; label/motion maps are re-rendered from the template."""
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    tpl_fields = dict(meta["template"])
    tpl_fields["places"] = tuple(tpl_fields["places"])
    tpl = TaskTemplate(**tpl_fields)
    ep = generate_episode(tpl, meta["seed"], meta["num_frames"])
    frames = np.stack([mdtn.load(d / f"frame_{t:04d}.mdtn") for t in range(meta["num_frames"])])
    ep.frames = frames.astype(np.float32)
    ep.depth_gt = mdtn.load(d / "depth.mdtn")
    ep.semantic_gt = mdtn.load(d / "sem.mdtn")
    ep.mask_gt = mdtn.load(d / "mask.mdtn")
    ep.flow_gt = mdtn.load(d / "flow.mdtn")
    ep.split = meta["split"]
    return ep


def save_dataset(root, ds: Dataset) -> None:
    root = Path(root)
    for ep in ds.train + ds.eval_seen + ds.eval_unseen:
        save_episode(root, ep)
    index = {split: [f"{ep.task_id}/{ep.seed}" for ep in eps]
             for split, eps in (("train", ds.train), ("seen", ds.eval_seen), ("unseen", ds.eval_unseen))}
    (root / "index.json").write_text(json.dumps(index))


def load_dataset(root) -> dict[str, list[Episode]]:
    root = Path(root)
    index = json.loads((root / "index.json").read_text())
    return {split: [load_episode(root / "episodes" / key) for key in keys] for split, keys in index.items()}
