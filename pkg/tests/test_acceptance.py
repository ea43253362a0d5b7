"""Acceptance checks A1-A11.

Each check prints one ``A<n> PASS|FAIL`` line with the measured quantity.
Run on its own with ``pytest tests/test_acceptance.py -s`` or
``python3 tests/test_acceptance.py``.
"""

import json
import math
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

from mmfsod.aggregation import aggregate, feature_matching_coefficients, foreground_filter, \
    task_encoding
from mmfsod.cli import main as cli_main
from mmfsod.config import load_config
from mmfsod.corpus import TokenSequence
from mmfsod.detection import average_precision, compute_map
from mmfsod.gradcheck import gradcheck
from mmfsod.rectify import SequencePrediction, rectification_loss
from mmfsod.training import train

from oracles import aggregation_oracle, brute_force_map, random_case

PRESET = Path(__file__).resolve().parents[1] / "configs" / "acceptance.cfg"
SEEDS = (0, 1, 2)


def report(capsys, name, ok, detail):
    with capsys.disabled():
        print(f"\n{name} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def mean_accuracy(**overrides):
    accs = []
    for seed in SEEDS:
        cfg = load_config(PRESET, {"seed": seed, **overrides})
        accs.append(train(cfg)[1][-1]["acc"])
    return float(np.mean(accs)), accs


def test_a1_attention_rows_normalized(capsys):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        hw, c, d = rng.integers(1, 17), rng.integers(1, 6), rng.integers(1, 17)
        Q = rng.normal(size=(hw, d)) * rng.uniform(0.1, 10)
        S = rng.normal(size=(c + 1, d)) * rng.uniform(0.1, 10)
        A = feature_matching_coefficients(Q, S).numpy()
        worst = max(worst, np.abs(A.sum(1) - 1).max())
    S = rng.normal(size=(5, 8))
    S[:, 4:] = 0
    Q = np.zeros((6, 8))
    Q[:, 4:] = rng.normal(size=(6, 4))
    uniform_dev = np.abs(feature_matching_coefficients(Q, S).numpy() - 1 / 5).max()
    ok = worst <= 1e-6 and uniform_dev <= 1e-12
    report(capsys, "A1", ok, f"max |row sum - 1| = {worst:.2e}, uniform deviation = {uniform_dev:.2e}")


def test_a2_oracle_equivalence(capsys):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        hw, c, d = rng.integers(1, 17), rng.integers(1, 6), rng.integers(1, 17)
        Q, S, T = rng.normal(size=(hw, d)), rng.normal(size=(c + 1, d)), rng.normal(size=(c + 1, d))
        A, Q1, Q2 = aggregation_oracle(Q, S, T)
        ours = (feature_matching_coefficients(Q, S).numpy(), foreground_filter(A, S, Q).numpy(),
                task_encoding(A, T).numpy(), aggregate(Q, S, T).numpy())
        for x, y in zip(ours, (A, Q1, Q2, Q1 + Q2)):
            worst = max(worst, np.abs(x - y).max())
    report(capsys, "A2", worst <= 1e-10, f"max abs deviation = {worst:.2e}")


def test_a3_gradient_checks(capsys):
    results = {s: gradcheck(s, seed=3, instances=20) for s in ("aggregate", "rectification_loss")}
    worst = max(r["max_rel_error"] for r in results.values())
    detail = ", ".join(f"{s} {r['max_rel_error']:.2e}" for s, r in results.items())
    report(capsys, "A3", worst <= 1e-4, f"max relative error: {detail}")


def test_a4_loss_closed_forms(capsys):
    c, m, v = 3, 6, 12
    seqs = [TokenSequence((0,) + tuple(range(2 + i, m + i)) + (1,)) for i in range(c)]
    fwd, bwd = [], []
    for s in seqs:
        f = np.full((m - 1, v), -1e3)
        b = f.copy()
        f[np.arange(m - 1), list(s.ids[1:])] = 1e3
        b[np.arange(m - 1), list(s.ids[:-1])] = 1e3
        fwd.append(SequencePrediction(torch.as_tensor(f), "forward"))
        bwd.append(SequencePrediction(torch.as_tensor(b), "backward"))
    zero = rectification_loss(fwd, bwd, seqs).item()
    flat = torch.zeros(m - 1, v, dtype=torch.float64)
    uniform = rectification_loss([SequencePrediction(flat, "forward")] * c,
                                 [SequencePrediction(flat, "backward")] * c, seqs).item()
    gap = abs(uniform - c * (m - 1) * math.log(v))
    report(capsys, "A4", zero == 0.0 and gap <= 1e-9,
           f"certain loss = {zero}, uniform loss off closed form by {gap:.2e}")


def test_a5_learning_signal(capsys):
    mean, accs = mean_accuracy(separability="vision_separable")
    report(capsys, "A5", mean >= 0.90,
           f"vision_separable accuracy {mean:.3f} (seeds {[round(a, 3) for a in accs]}), need >= 0.90")


@pytest.fixture(scope="module")
def text_only_runs():
    return {name: mean_accuracy(separability="text_only_separable", **flags)
            for name, flags in (("full", {}), ("no_language", {"no_language": True}),
                                ("decoupled", {"decoupled_attention": True}))}


def test_a6_modality_ablation(capsys, text_only_runs):
    chance = 1 / load_config(PRESET).n
    full, blind = text_only_runs["full"][0], text_only_runs["no_language"][0]
    ok = full - chance >= 0.25 and abs(blind - chance) <= 0.10
    report(capsys, "A6", ok, f"text_only accuracy: full {full:.3f}, no-language {blind:.3f}, "
                             f"chance {chance:.3f}")


def test_a7_shared_attention_ablation(capsys, text_only_runs):
    shared, split = text_only_runs["full"], text_only_runs["decoupled"]
    report(capsys, "A7", split[0] < shared[0],
           f"text_only accuracy: shared {shared[0]:.3f} {[round(a, 3) for a in shared[1]]}, "
           f"decoupled {split[0]:.3f} {[round(a, 3) for a in split[1]]}")


def test_a8_permutation_invariance(capsys):
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(100):
        c, d = rng.integers(1, 6), rng.integers(1, 17)
        Q, S, T = rng.normal(size=(9, d)), rng.normal(size=(c + 1, d)), rng.normal(size=(c + 1, d))
        perm = rng.permutation(c + 1)
        worst = max(worst, np.abs(aggregate(Q, S[perm], T[perm]).numpy()
                                  - aggregate(Q, S, T).numpy()).max())
    report(capsys, "A8", worst <= 1e-10, f"max deviation under permutation = {worst:.2e}")


def test_a9_map_oracle(capsys):
    mismatches = 0
    for seed in range(200):
        dets, gt = random_case(np.random.default_rng(seed))
        mismatches += compute_map(dets, gt)[0] != brute_force_map(dets, gt)
    scores = [0.9, 0.8, 0.7]
    hand = [average_precision(scores[:2], [True, False], 1) == 1.0,
            average_precision(scores[:2], [False, True], 1) == 0.5,
            average_precision(scores, [True, False, True], 2) == (1.0 + 2 / 3) / 2]
    report(capsys, "A9", mismatches == 0 and all(hand),
           f"{mismatches}/200 brute-force mismatches, hand examples {hand}")


def test_a10_corpus_integrity(capsys):
    code = cli_main(["corpus", "validate"])
    out = json.loads(capsys.readouterr().out)
    uodd = out["stats"]["UODD"]
    ok = code == 0 and out["errors"] == [] and uodd["extended"]["mean"] >= uodd["manual"]["mean"]
    report(capsys, "A10", ok, f"{len(out['errors'])} errors; UODD mean tokens manual "
                              f"{uodd['manual']['mean']:.1f}, extended {uodd['extended']['mean']:.1f}")


def test_a11_determinism(capsys, tmp_path):
    args = ["train", "--config", str(PRESET), "--set", "steps=100", "--set", "eval_every=50"]
    for run in ("a", "b"):
        assert cli_main(args + ["--out", str(tmp_path / run)]) == 0
    capsys.readouterr()
    same = {name: (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
            for name in ("metrics.jsonl", "checkpoint.bin")}
    report(capsys, "A11", all(same.values()), f"byte-identical outputs: {same}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
