"""Episodic training and evaluation loops."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .backends import SyntheticBackend, get_backend
from .checkpoint import Checkpoint
from .config import RunConfig, data_root
from .corpus import RichTextEntry, Vocabulary, build_vocabulary, load_corpus
from .detection import (compute_map, detections_from_predictions, object_predictions)
from .episodes import (CategoryCatalog, generate_synthetic_catalog, load_catalog,
                       sample_episode)
from .model import FeatureCache, MultiModalDetector, prepare_episode

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class TrainingError(RuntimeError):
    pass


@dataclass
class Workspace:
    catalog: CategoryCatalog
    corpus: list[RichTextEntry]
    vocab: Vocabulary
    features: FeatureCache
    train_categories: tuple[str, ...]
    novel_categories: tuple[str, ...]
    eval_categories: tuple[str, ...]


def build_workspace(config: RunConfig, vocab: Vocabulary | None = None) -> Workspace:
    if config.catalog:
        catalog = load_catalog(config.catalog, data_root())
        corpus: list[RichTextEntry] = []
    else:
        catalog, corpus = generate_synthetic_catalog(
            config.n_categories, config.images_per_category, config.height, config.width,
            config.d, config.separability, seed=config.data_seed)
    if config.corpus:
        corpus = load_corpus(config.corpus)
    if catalog.dim != config.d:
        raise ValueError(f"catalog features have d={catalog.dim}, config has d={config.d}")
    if not catalog.base and not catalog.novel and 0 < config.n_novel < len(catalog.categories):
        cats = catalog.categories
        catalog = catalog.with_split(cats[:-config.n_novel], cats[-config.n_novel:])
    base = catalog.base or catalog.categories
    novel = catalog.novel
    if vocab is None:
        vocab = build_vocabulary([*corpus, *catalog.categories])
    backend = get_backend(config.backend)
    if isinstance(backend, SyntheticBackend):
        backend.vocab, backend.vocab_size = vocab, vocab.size
    features = FeatureCache(backend, catalog.height, catalog.width, catalog.dim)
    return Workspace(catalog, corpus, vocab, features, tuple(base), tuple(novel),
                     tuple(novel) if novel else tuple(base))


def token_table(ws: Workspace, d: int) -> np.ndarray | None:
    """Pretrained text vectors from the backend, when it exposes them."""
    table = getattr(ws.features.backend, "token_table", None)
    return table(d) if table is not None else None


def build_model(config: RunConfig, vocab_size: int, token_init=None) -> MultiModalDetector:
    torch.manual_seed(config.seed)
    model = MultiModalDetector(config.d, vocab_size, config.n, heads=config.heads,
                               use_language=not config.no_language,
                               decoupled_attention=config.decoupled_attention,
                               rect_layers=config.rect_layers, rect_heads=config.rect_heads,
                               token_init=token_init)
    return model.to(DTYPES[config.dtype])


def model_checkpoint(model: MultiModalDetector, config: RunConfig, step: int,
                     vocab: Vocabulary) -> Checkpoint:
    tensors = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
    return Checkpoint(tensors, config.to_dict(), step, list(vocab.tokens))


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[MultiModalDetector, RunConfig, Vocabulary]:
    config = RunConfig.from_dict(ckpt.config)
    vocab = Vocabulary(tuple(ckpt.vocab))
    model = build_model(config, vocab.size)
    model.load_state_dict({k: torch.from_numpy(v) for k, v in ckpt.tensors.items()})
    return model, config, vocab


def episode_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _episode_categories(config: RunConfig, ws: Workspace, step: int) -> tuple[str, ...]:
    """Base classes, mixed with novel ones under the unbalanced strategy."""
    if config.strategy != "unbalanced_images" or not ws.novel_categories:
        return ws.train_categories
    base, novel = config.ratio()
    return ws.train_categories if step % (base + novel) < base else ws.novel_categories


def make_optimizer(config: RunConfig, params):
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.lr)
    return torch.optim.SGD(params, lr=config.lr)


def train(config: RunConfig, log_path: str | Path | None = None,
          workspace: Workspace | None = None) -> tuple[Checkpoint, list[dict]]:
    """Run ``config.steps`` optimizer steps; returns the final checkpoint and the
    metrics log (one record per step, with ``acc``/``map`` filled in at
    evaluation steps and at the last step)."""
    torch.use_deterministic_algorithms(True)
    ws = workspace or build_workspace(config)
    model = build_model(config, ws.vocab.size, token_table(ws, config.d))
    opt = make_optimizer(config, model.parameters())
    dtype = DTYPES[config.dtype]
    rect_weight = 0.0 if config.no_rectify else config.rect_weight
    records: list[dict] = []
    sink = open(log_path, "w") if log_path is not None else None
    try:
        for step in range(1, config.steps + 1):
            model.train()
            opt.zero_grad()
            det_total, rect_total = 0.0, 0.0
            for b in range(config.episodes_per_step):
                ep = sample_episode(ws.catalog, config.n, config.k, config.strategy,
                                    config.text_variant, episode_seed(config.seed, step, b),
                                    ws.corpus, _episode_categories(config, ws, step),
                                    config.query_size)
                batch = prepare_episode(ep, ws.features, ws.vocab, dtype)
                out = model(batch, rect_weight, config.normalize_rect)
                loss = out.loss_det
                if not torch.isfinite(out.loss_det):
                    raise TrainingError(f"non-finite detection loss at step {step}")
                if out.loss_rect is not None:
                    if not torch.isfinite(out.loss_rect):
                        raise TrainingError(f"non-finite rectification loss at step {step}")
                    loss = loss + rect_weight * out.loss_rect
                    rect_total += out.loss_rect.item()
                det_total += out.loss_det.item()
                loss.backward()
            opt.step()
            rec = {"step": step, "loss_det": det_total,
                   "loss_rect": rect_total if rect_weight > 0 else None,
                   "acc": None, "map": None}
            if step % config.eval_every == 0 or step == config.steps:
                report = evaluate_model(model, config, ws)
                rec["acc"], rec["map"] = report["accuracy"], report["map"]
                log.info("step %d  det %.3f  rect %.3f  acc %.3f  mAP %.3f", step, det_total,
                         rect_total, rec["acc"], rec["map"])
            records.append(rec)
            if sink:
                sink.write(json.dumps(rec) + "\n")
    finally:
        if sink:
            sink.close()
    return model_checkpoint(model, config, config.steps, ws.vocab), records


@torch.no_grad()
def evaluate_model(model: MultiModalDetector, config: RunConfig, ws: Workspace,
                   categories: Sequence[str] | None = None,
                   keep_detections: bool = False) -> dict:
    """Query accuracy and mAP on ``config.eval_episodes`` held-out episodes.

    The rectifier is never run here.  With ``keep_detections`` the report
    also carries the raw detections (global category indices).
    """
    model.eval()
    cats = tuple(categories) if categories is not None else ws.eval_categories
    dtype = DTYPES[config.dtype]
    correct = total = 0
    detections, ground_truth = [], {}
    cat_index = {c: i for i, c in enumerate(ws.catalog.categories)}
    for e in range(config.eval_episodes):
        ep = sample_episode(ws.catalog, config.n, config.k, config.strategy, config.text_variant,
                            config.eval_seed + e, ws.corpus, cats, config.query_size)
        batch = prepare_episode(ep, ws.features, ws.vocab, dtype)
        out = model(batch, rect_weight=0.0)
        to_global = [cat_index[c] for c in ep.categories]
        for i, q in enumerate(ep.query):
            preds = object_predictions(out.class_logits[i], q.boxes, batch.height, batch.width)
            correct += sum(int(p == t) for p, t in zip(preds, q.labels))
            total += len(q.labels)
            image = f"{e}/{q.sample.image_id}"
            ground_truth[image] = [(b, to_global[l]) for b, l in zip(q.boxes, q.labels)]
            for det in detections_from_predictions(image, out.class_logits[i],
                                                   out.box_offsets[i], batch.height, batch.width):
                detections.append(type(det)(det.image, det.box, to_global[det.category],
                                            det.score))
    mean_ap, per_class = compute_map(detections, ground_truth)
    names = ws.catalog.categories
    report = {"accuracy": correct / total if total else math.nan, "map": mean_ap,
              "per_category_ap": {names[c]: ap for c, ap in per_class.items()},
              "n_objects": total, "n_episodes": config.eval_episodes}
    if keep_detections:
        report["detections"] = detections
    return report


def evaluate(checkpoint: Checkpoint, config: RunConfig | None = None,
             categories: Sequence[str] | None = None, keep_detections: bool = False) -> dict:
    """Evaluate a checkpoint; ``config`` may override data/evaluation settings."""
    model, ck_config, vocab = model_from_checkpoint(checkpoint)
    if config is None:
        config = ck_config
    elif config.d != ck_config.d:
        raise ValueError(f"checkpoint has d={ck_config.d}, config has d={config.d}")
    ws = build_workspace(config, vocab=vocab)
    return evaluate_model(model, config, ws, categories, keep_detections)


def write_metrics(records: Sequence[dict], path: str | Path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
