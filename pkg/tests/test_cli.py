import json

import numpy as np
import pytest

from manipwm.cli import main
from manipwm.core import mdtn
from manipwm.spriteworld import PREPOSITIONS, VERBS, instruction_corpus

TINY_MODEL = {"c0": 8, "c1": 16, "text_dim": 16, "heads": 2, "pyramid": [4, 8, 8, 8], "router_hidden": 8,
              "tree": True, "modalities": ["depth", "mask"]}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = {"model": TINY_MODEL, "train": {"steps": 2, "batch": 2, "warmup": 1, "log_every": 0},
           "data": {"n_eval": 2}}
    (root / "cfg.json").write_text(json.dumps(cfg))
    assert main(["datagen", "--config", str(root / "cfg.json"), "--out", str(root / "data"),
                 "--episodes", "4", "--seed", "1"]) == 0
    assert main(["train", "--config", str(root / "cfg.json"), "--data", str(root / "data"),
                 "--out", str(root / "ckpt")]) == 0
    return root


def test_datagen_layout(workspace):
    index = json.loads((workspace / "data" / "index.json").read_text())
    assert [len(index[k]) for k in ("train", "seen", "unseen")] == [4, 2, 2]
    ep = workspace / "data" / "episodes" / index["train"][0]
    assert (ep / "frame_0000.mdtn").exists() and (ep / "meta.json").exists()


def test_train_writes_checkpoint_with_config(workspace):
    manifest = json.loads((workspace / "ckpt" / "manifest.json").read_text())
    assert manifest["config"]["modalities"] == ["depth", "mask"]
    assert manifest["train"]["steps"] == 2
    prior = mdtn.load(workspace / "ckpt" / "mask_prior.mdtn")
    assert prior.shape == (1, 32, 32) and 0 <= prior.min() and prior.max() <= 1


@pytest.mark.parametrize("mode,mask", [("tree", "episode"), ("decomposed", "episode"), ("tree", "prior")])
def test_sample_writes_frames(workspace, mode, mask):
    index = json.loads((workspace / "data" / "index.json").read_text())
    out = workspace / f"video_{mode}_{mask}"
    assert main(["sample", "--ckpt", str(workspace / "ckpt"), "--obs",
                 str(workspace / "data" / "episodes" / index["unseen"][0]), "--mode", mode,
                 "--fusion", "additive", "--mask", mask, "--sample-steps", "2", "-o", str(out)]) == 0
    frames = sorted(out.glob("frame_*.mdtn"))
    assert len(frames) == 9
    assert mdtn.load(frames[-1]).shape == (3, 32, 32)


def test_sample_rejects_fusion_mismatch(workspace, capsys):
    index = json.loads((workspace / "data" / "index.json").read_text())
    with pytest.raises(SystemExit, match="additive"):
        main(["sample", "--ckpt", str(workspace / "ckpt"), "--obs",
              str(workspace / "data" / "episodes" / index["unseen"][0]), "--fusion", "xattn",
              "-o", str(workspace / "v")])


def test_eval_writes_reports(workspace):
    variants = [{"name": "tree", "mode": "tree"}, {"name": "decomposed", "mode": "decomposed"}]
    (workspace / "variants.json").write_text(json.dumps(variants))
    out = workspace / "reports"
    assert main(["eval", "--ckpt", str(workspace / "ckpt"), "--data", str(workspace / "data"),
                 "--variants", str(workspace / "variants.json"), "--limit", "1", "--sample-steps", "2",
                 "-o", str(out)]) == 0
    table = (out / "comparison.tsv").read_text().splitlines()
    assert [row.split("\t")[0] for row in table[1:]] == ["tree", "decomposed"]
    doc = json.loads((out / "tree_unseen.json").read_text())
    assert doc["aggregate"]["fid"] is None


def test_eval_reports_missing_checkpoint(workspace, capsys):
    assert main(["eval", "--ckpt", str(workspace / "nothing"), "--data", str(workspace / "data"),
                 "--limit", "1", "-o", str(workspace / "r2")]) == 1
    assert "not found" in capsys.readouterr().err


def test_weights_report_fresh_checkpoint(workspace):
    out = workspace / "weights.json"
    assert main(["weights-report", "--ckpt", str(workspace / "ckpt"), "--n", "2", "-o", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["modalities"] == ["depth", "mask"]
    assert set(rep) == {"modalities", "layer_2", "layer_5", "layer_8", "layer_11"}


def test_lexicon_build_and_encode(tmp_path):
    (tmp_path / "corpus.txt").write_text("\n".join(instruction_corpus()))
    (tmp_path / "verbs.txt").write_text("\n".join(VERBS))
    (tmp_path / "preps.txt").write_text("\n".join(PREPOSITIONS))
    lex = tmp_path / "lex.json"
    assert main(["lexicon", "build", "--corpus", str(tmp_path / "corpus.txt"), "--verbs",
                 str(tmp_path / "verbs.txt"), "--preps", str(tmp_path / "preps.txt"), "-o", str(lex)]) == 0
    doc = json.loads(lex.read_text())
    assert doc["n_max"] == 2 and doc["embed_dim"] == 64
    emb = tmp_path / "emb.mdtn"
    assert main(["encode", "--lexicon", str(lex), "--instruction",
                 "pick the red square from the mat and place it in the blue box", "-o", str(emb)]) == 0
    vec = mdtn.load(emb)
    assert vec.shape == (4 * 64,)
    short = tmp_path / "short.mdtn"
    main(["encode", "--lexicon", str(lex), "--instruction", "push the red square toward the tray",
          "-o", str(short)])
    assert not mdtn.load(short)[2 * 64:].any()  # unused pair stays zero


def test_mask_of_static_frames_is_zero(tmp_path):
    frame = np.random.default_rng(0).random((3, 8, 8))
    for t in range(3):
        mdtn.save(tmp_path / f"frame_{t:04d}.mdtn", frame)
    assert main(["mask", "--frames", str(tmp_path), "-o", str(tmp_path / "m.mdtn")]) == 0
    assert not mdtn.load(tmp_path / "m.mdtn").any()
