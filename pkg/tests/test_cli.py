import json
import subprocess
import sys

import pytest

from mmfsod.checkpoint import Checkpoint
from mmfsod.cli import main
from mmfsod.detection import read_detections_jsonl

TINY = ["d=16", "heads=2", "rect_heads=2", "rect_layers=1", "n=2", "k=2", "n_categories=6",
        "n_novel=2", "images_per_category=8", "height=4", "width=4", "eval_every=2",
        "eval_episodes=2", "optimizer=adam"]


def sets(*pairs):
    return [x for p in pairs for x in ("--set", p)]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_train_then_eval(tmp_path, capsys):
    code, out, _ = run(capsys, "train", *sets(*TINY, "steps=2"), "--no-rectify",
                       "--out", str(tmp_path / "run"))
    assert code == 0
    summary = json.loads(out)
    assert summary["final"]["step"] == 2 and summary["final"]["loss_rect"] is None
    ck = Checkpoint.load(tmp_path / "run" / "checkpoint.bin")
    assert ck.config["no_rectify"] is True and ck.step == 2
    lines = (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2

    code, out, _ = run(capsys, "eval", str(tmp_path / "run" / "checkpoint.bin"),
                       "--set", "eval_episodes=3", "--detections", str(tmp_path / "d.jsonl"))
    assert code == 0
    report = json.loads(out)
    assert report["n_episodes"] == 3 and "detections" not in report
    assert isinstance(read_detections_jsonl(tmp_path / "d.jsonl"), list)


def test_eval_config_file_only_overrides_its_keys(tmp_path, capsys):
    run(capsys, "train", *sets(*TINY, "steps=0"), "--out", str(tmp_path))
    (tmp_path / "eval.cfg").write_text("eval_episodes = 1\n")
    code, out, _ = run(capsys, "eval", str(tmp_path / "checkpoint.bin"), "--config",
                       str(tmp_path / "eval.cfg"))
    assert code == 0 and json.loads(out)["n_episodes"] == 1
    code, _, err = run(capsys, "eval", str(tmp_path / "checkpoint.bin"), "--set", "d=32")
    assert code == 2 and "d=16" in err


def test_ablation_flags_reach_config(tmp_path, capsys):
    code, _, _ = run(capsys, "train", *sets(*TINY, "steps=0"), "--no-language",
                     "--decoupled-attention", "--out", str(tmp_path))
    cfg = Checkpoint.load(tmp_path / "checkpoint.bin").config
    assert code == 0 and cfg["no_language"] and cfg["decoupled_attention"]
    assert any(k.startswith("language_attn") for k in Checkpoint.load(
        tmp_path / "checkpoint.bin").tensors)


def test_gradcheck(capsys):
    code, out, _ = run(capsys, "gradcheck", "task_encoding", "--instances", "3")
    report = json.loads(out)
    assert code == 0 and report["passed"] and report["max_rel_error"] <= 1e-8
    with pytest.raises(SystemExit):
        main(["gradcheck", "backbone"])


def test_corpus_validate(tmp_path, capsys):
    code, out, _ = run(capsys, "corpus", "validate")
    report = json.loads(out)
    assert code == 0 and report["errors"] == []
    (tmp_path / "bad.json").write_text("")
    code, out, _ = run(capsys, "corpus", "validate", str(tmp_path / "bad.json"))
    assert code == 1 and len(json.loads(out)["errors"]) == 1


def test_episode_sample(capsys):
    code, out, _ = run(capsys, "episode", "sample", *sets(*TINY), "--seed", "4")
    ep = json.loads(out)
    assert code == 0 and len(ep["categories"]) == 2 and len(ep["support"]) == 4
    code, out2, _ = run(capsys, "episode", "sample", *sets(*TINY), "--seed", "4")
    assert out2 == out


def test_bad_override_is_reported(capsys):
    code, _, err = run(capsys, "train", "--set", "depth=3")
    assert code == 2 and "depth" in err


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "mmfsod", "--help"], capture_output=True,
                         text=True, check=True)
    for cmd in ("train", "eval", "gradcheck", "corpus", "episode"):
        assert cmd in res.stdout
