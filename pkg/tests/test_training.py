import json

import pytest
import torch

from mmfsod.episodes import sample_episode
from mmfsod.model import MultiModalDetector, prepare_episode
from mmfsod.training import (TrainingError, _episode_categories, build_model, build_workspace,
                             episode_seed, token_table, train)

from conftest import tiny


def batch_and_model(**overrides):
    cfg = tiny(**overrides)
    ws = build_workspace(cfg)
    ep = sample_episode(ws.catalog, cfg.n, cfg.k, seed=3, corpus=ws.corpus,
                        categories=ws.train_categories)
    model = build_model(cfg, ws.vocab.size, token_table(ws, cfg.d))
    return cfg, model, prepare_episode(ep, ws.features, ws.vocab)


def grads_of(model, loss):
    model.zero_grad()
    loss.backward()
    return {n: (p.grad.clone() if p.grad is not None else None)
            for n, p in model.named_parameters()}


def touched(grads, prefix):
    return any(g is not None and bool(torch.any(g != 0))
               for n, g in grads.items() if n.startswith(prefix))


def test_no_language_cuts_text_from_detection():
    _, full, batch = batch_and_model()
    g = grads_of(full, full(batch).loss_det)
    assert touched(g, "token_embedding") and touched(g, "background_text")
    _, blind, batch = batch_and_model(no_language=True)
    g = grads_of(blind, blind(batch).loss_det)
    assert not touched(g, "token_embedding") and not touched(g, "background_text")
    assert touched(g, "vision_attn") and touched(g, "task_prototypes") and touched(g, "head")


def test_rectifier_only_learns_from_rectify_loss():
    cfg, model, batch = batch_and_model()
    out = model(batch, rect_weight=1.0)
    assert not touched(grads_of(model, out.loss_det), "rectifier")
    out = model(batch, rect_weight=1.0)
    g = grads_of(model, out.loss_rect)
    assert touched(g, "rectifier") and touched(g, "token_embedding")
    assert model(batch, rect_weight=0.0).loss_rect is None


def test_zero_rect_weight_leaves_detection_bit_identical():
    _, model, batch = batch_and_model()
    plain = model(batch, rect_weight=0.0).loss_det
    g_plain = grads_of(model, plain)
    with_rect = model(batch, rect_weight=1.0)
    g_det = grads_of(model, with_rect.loss_det)
    assert torch.equal(plain, with_rect.loss_det)
    for n in g_plain:
        a, b = g_plain[n], g_det[n]
        assert (a is None and b is None) or torch.equal(a, b), n


def test_no_rectify_matches_zero_weight_run():
    a = [r["loss_det"] for r in train(tiny(no_rectify=True))[1]]
    b = [r["loss_det"] for r in train(tiny(rect_weight=0.0))[1]]
    assert a == b
    assert all(r["loss_rect"] is None for r in train(tiny(no_rectify=True))[1])


def test_decoupled_attention_separates_text_path():
    _, shared, batch = batch_and_model()
    g = grads_of(shared, shared.language_prototypes(batch.token_ids).sum())
    assert touched(g, "vision_attn")
    _, split, batch = batch_and_model(decoupled_attention=True)
    g = grads_of(split, split.language_prototypes(batch.token_ids).sum())
    assert touched(g, "language_attn") and not touched(g, "vision_attn")
    g = grads_of(split, split(batch).loss_det)
    assert touched(g, "language_attn") and touched(g, "vision_attn")


def test_same_seed_same_log(tmp_path):
    cfg = tiny(steps=3, eval_every=3)
    ck1, _ = train(cfg, tmp_path / "a.jsonl")
    ck2, _ = train(cfg, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert ck1.to_bytes() == ck2.to_bytes()
    rows = [json.loads(x) for x in (tmp_path / "a.jsonl").read_text().splitlines()]
    assert [set(r) for r in rows] == [{"step", "loss_det", "loss_rect", "acc", "map"}] * 3
    assert rows[0]["acc"] is None and rows[2]["acc"] is not None
    ck3, _ = train(cfg.replace(seed=1))
    assert ck3.to_bytes() != ck1.to_bytes()


def test_episode_seeds_differ_across_steps_and_slots():
    seeds = {episode_seed(0, s, b) for s in range(50) for b in range(4)}
    assert len(seeds) == 200 and episode_seed(0, 1, 0) == episode_seed(0, 1, 0)


def test_unbalanced_strategy_mixes_novel_episodes():
    cfg = tiny(strategy="unbalanced_images", base_novel_ratio="2:1")
    ws = build_workspace(cfg)
    picks = [_episode_categories(cfg, ws, s) for s in range(6)]
    assert picks.count(ws.novel_categories) == 2 and picks.count(ws.train_categories) == 4
    balanced = tiny()
    assert {_episode_categories(balanced, ws, s) for s in range(6)} == {ws.train_categories}


@pytest.mark.parametrize("term,attr", [("detection", "loss_det"), ("rectification", "loss_rect")])
def test_non_finite_loss_aborts_with_step_and_term(monkeypatch, term, attr):
    real = MultiModalDetector.forward
    calls = {"n": 0}

    def poisoned(self, *args, **kwargs):
        out = real(self, *args, **kwargs)
        calls["n"] += 1
        if calls["n"] == 2:
            setattr(out, attr, getattr(out, attr) * float("nan"))
        return out

    monkeypatch.setattr(MultiModalDetector, "forward", poisoned)
    with pytest.raises(TrainingError, match=f"{term} loss at step 2"):
        train(tiny(steps=3, eval_every=10))
