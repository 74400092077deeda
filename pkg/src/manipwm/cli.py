"""Command-line entry points: ``manipwm <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .core import mdtn

log = logging.getLogger("manipwm")

MASK_PRIOR = "mask_prior.mdtn"


def _lines(path) -> list[str]:
    return [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8")) if path else {}


# -- action tree ----------------------------------------------------------

def cmd_lexicon_build(args) -> None:
    from .action_tree import build_lexicon, corpus_n_max, save_lexicon

    corpus = _lines(args.corpus)
    lex = build_lexicon(corpus, _lines(args.verbs), _lines(args.preps))
    save_lexicon(args.out, lex, corpus_n_max(corpus, lex), args.embed_dim, args.seed)
    print(f"{len(lex.verbs)} verbs, {len(lex.prepositions)} prepositions -> {args.out}")


def cmd_encode(args) -> None:
    from .action_tree import EmbeddingTable, action_words, embed_instruction, load_lexicon, pair_words

    lex, doc = load_lexicon(args.lexicon)
    seq = pair_words(action_words(args.instruction, lex), lex)
    emb = embed_instruction(seq, EmbeddingTable(doc["embed_dim"], doc["seed"]), doc["n_max"])
    mdtn.save(args.out, emb.flat)
    print(" ".join(seq.words()), f"-> width {emb.width}")


# -- modalities -------------------------------------------------------------

def cmd_mask(args) -> None:
    from .modalities import FileExtractor, SyntheticExtractor, dynamic_mask

    paths = sorted(Path(args.frames).glob("frame_*.mdtn"))
    if not paths:
        raise SystemExit(f"no frame_XXXX.mdtn files in {args.frames}")
    frames = [mdtn.load(p) for p in paths]
    if args.extractor == "file":
        if not args.features:
            raise SystemExit("--extractor file needs --features")
        extractor = FileExtractor(args.features, args.frames)
    else:
        extractor = SyntheticExtractor()
    mask = dynamic_mask(frames, extractor)
    mdtn.save(args.out, mask)
    print(f"mask {mask.shape}, mean {mask.mean():.4f} -> {args.out}")


# -- data -------------------------------------------------------------------

def cmd_datagen(args) -> None:
    from .spriteworld import make_dataset, save_dataset

    doc = _read_json(args.config).get("data", {})
    ds = make_dataset(args.episodes, doc.get("n_eval", 200), args.seed, doc.get("ratio", 0.9),
                      doc.get("num_frames", 9))
    save_dataset(args.out, ds)
    print(f"{len(ds.train)} train, {len(ds.eval_seen)} seen, {len(ds.eval_unseen)} unseen -> {args.out}")


# -- model --------------------------------------------------------------------

def _model_config(doc: dict):
    from .config import ModelConfig
    from .train import sprite_model_config

    overrides = dict(doc.get("model", {}))
    cfg = ModelConfig.from_dict(overrides)  # validates keys
    if cfg.vocab:
        return cfg
    return sprite_model_config(**{k: getattr(cfg, k) for k in overrides})


def cmd_train(args) -> None:
    from .config import TrainConfig
    from .spriteworld import load_dataset
    from .train import EpisodeSet, save_checkpoint, train
    from .unet import WorldModel

    doc = _read_json(args.config)
    cfg = _model_config(doc)
    tc = TrainConfig(**doc.get("train", {}))
    if args.steps is not None:
        tc = replace(tc, steps=args.steps)
    splits = load_dataset(args.data)
    data = EpisodeSet.build(splits["train"], cfg)
    model = WorldModel(cfg)
    log.info("training %d params on %d episodes", model.num_parameters(), len(data))
    result = train(model, data, tc, time_limit=args.time_limit)
    save_checkpoint(args.out, model, {"train": {"steps": result.steps, "seconds": result.seconds,
                                                "final_loss": result.losses[-1]}})
    # mean training mask, the stand-in when only frame 0 is available
    mdtn.save(Path(args.out) / MASK_PRIOR, np.mean([o.dyn_mask for o in data.observations], axis=0))
    print(f"{result.steps} steps in {result.seconds:.0f}s, loss {result.losses[-1]:.4f} -> {args.out}")


def cmd_sample(args) -> None:
    from .diffusion import sample_decomposed, sample_video
    from .modalities import SyntheticExtractor, observe_episode, prior_observation
    from .spriteworld import load_episode
    from .train import load_checkpoint, schedule_for

    model = load_checkpoint(args.ckpt)
    if args.fusion and model.guidance is not None:
        want = {"additive": "additive", "xattn": "cross_attention"}[args.fusion]
        if model.fusion != want:
            raise SystemExit(f"checkpoint was trained with {model.fusion} fusion, not {args.fusion}")
    ep = load_episode(args.obs)
    ext = SyntheticExtractor()
    if args.mask == "episode":
        obs = observe_episode(ep, ext)
    else:
        prior_path = Path(args.ckpt) / MASK_PRIOR
        prior = mdtn.load(prior_path) if prior_path.exists() else None
        obs = prior_observation(ep.frames[0], ep.depth_gt, ext, prior)
    instruction = args.instruction or ep.instruction
    sched = schedule_for(model.cfg)
    if args.mode == "decomposed":
        video = sample_decomposed(model, sched, [obs], [instruction], args.seed, args.sample_steps, args.eta)
    else:
        video = sample_video(model, sched, [obs], [instruction], args.seed, args.sample_steps, args.eta)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = np.concatenate([np.asarray(ep.frames[:1], np.float32), video[0].astype(np.float32)])
    for t, frame in enumerate(frames):
        mdtn.save(out / f"frame_{t:04d}.mdtn", frame)
    print(f"{len(frames)} frames, {model.forward_count} forward passes -> {out}")


# -- evaluation ---------------------------------------------------------------

def cmd_eval(args) -> None:
    from .eval_harness import Variant, run_experiment, write_reports
    from .modalities import SyntheticExtractor, observe_episode
    from .spriteworld import load_dataset

    spec = _read_json(args.variants) if args.variants else [{"name": "model", "mode": "tree"}]
    variants = [Variant(v["name"], v.get("checkpoint", args.ckpt), v.get("mode", "tree")) for v in spec]
    data = load_dataset(args.data)
    ext = SyntheticExtractor()
    splits = {}
    for name in args.splits.split(","):
        eps = data[name][: args.limit] if args.limit else data[name]
        splits[name] = (eps, [observe_episode(e, ext) for e in eps])
    reports = run_experiment(variants, splits, args.seed, args.sample_steps, args.eta)
    write_reports(args.out, reports)
    print((Path(args.out) / "comparison.tsv").read_text(), end="")


def cmd_weights_report(args) -> None:
    from .guidance import weight_report
    from .modalities import SyntheticExtractor, observe_episode
    from .spriteworld import enumerate_templates, generate_episode
    from .train import load_checkpoint

    model = load_checkpoint(args.ckpt)
    tpls = enumerate_templates()
    rng = np.random.default_rng(args.seed)
    ext = SyntheticExtractor()
    obs = [observe_episode(generate_episode(tpls[rng.integers(len(tpls))], seed=int(rng.integers(2**31))), ext)
           for _ in range(args.n)]
    report = weight_report(model, obs)
    Path(args.out).write_text(json.dumps(report, indent=1))
    for key, vals in report.items():
        if key != "modalities":
            print(key, " ".join(f"{m}={v:.3f}" for m, v in zip(report["modalities"], vals)))


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="manipwm", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    lex = sub.add_parser("lexicon", help="lexicon files")
    lex_sub = lex.add_subparsers(dest="action", required=True)
    b = lex_sub.add_parser("build")
    b.add_argument("--corpus", required=True)
    b.add_argument("--verbs", required=True)
    b.add_argument("--preps", required=True)
    b.add_argument("--embed-dim", type=int, default=64)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("-o", "--out", required=True)
    b.set_defaults(fn=cmd_lexicon_build)

    e = sub.add_parser("encode", help="action-tree embedding of one instruction")
    e.add_argument("--lexicon", required=True)
    e.add_argument("--instruction", required=True)
    e.add_argument("-o", "--out", required=True)
    e.set_defaults(fn=cmd_encode)

    m = sub.add_parser("mask", help="dynamic mask of a frame directory")
    m.add_argument("--frames", required=True)
    m.add_argument("--extractor", choices=("synthetic", "file"), default="synthetic")
    m.add_argument("--features")
    m.add_argument("-o", "--out", required=True)
    m.set_defaults(fn=cmd_mask)

    d = sub.add_parser("datagen", help="render a sprite-world dataset")
    d.add_argument("--config")
    d.add_argument("--out", required=True)
    d.add_argument("--episodes", type=int, default=2000)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(fn=cmd_datagen)

    t = sub.add_parser("train", help="train a world model")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--time-limit", type=float)
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="generate a clip from an episode's first frame")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--obs", required=True, help="episode directory")
    s.add_argument("--instruction")
    s.add_argument("--mode", choices=("tree", "decomposed"), default="tree")
    s.add_argument("--fusion", choices=("additive", "xattn"))
    s.add_argument("--mask", choices=("episode", "prior"), default="episode")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--sample-steps", type=int, default=50)
    s.add_argument("--eta", type=float, default=0.0)
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(fn=cmd_sample)

    v = sub.add_parser("eval", help="score variants on dataset splits")
    v.add_argument("--ckpt")
    v.add_argument("--data", required=True)
    v.add_argument("--variants")
    v.add_argument("--splits", default="seen,unseen")
    v.add_argument("--limit", type=int)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--sample-steps", type=int, default=50)
    v.add_argument("--eta", type=float, default=0.0)
    v.add_argument("-o", "--out", required=True)
    v.set_defaults(fn=cmd_eval)

    w = sub.add_parser("weights-report", help="mean router scores per injected layer")
    w.add_argument("--ckpt", required=True)
    w.add_argument("--n", type=int, default=100)
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("-o", "--out", required=True)
    w.set_defaults(fn=cmd_weights_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
