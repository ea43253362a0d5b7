"""End-to-end episodic detector built from the aggregation and rectification parts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .aggregation import (SharedAttentionLayer, aggregate, causal_mask, fuse_prototypes,
                          init_task_prototypes)
from .backends import FeatureBackend, roi_align_weights, sinusoidal_table
from .corpus import TokenSequence, Vocabulary, tokenize
from .detection import DetectionHead, PositionTargets, detection_loss, position_targets
from .episodes import Episode
from .rectify import RectifierModel, composite_feature, predict_sequence, rectification_loss

ROI_OUT_SIZE = (2, 2)


@dataclass
class EpisodeTensors:
    support_maps: torch.Tensor  # (Ns, HW, d)
    prototype_weights: torch.Tensor  # (C+1, Ns*HW), background row last
    query_maps: torch.Tensor  # (Nq, HW, d)
    query_targets: list[PositionTargets]
    query_boxes: list[tuple]
    query_labels: list[tuple[int, ...]]
    query_ids: list[str]
    token_ids: list[torch.Tensor]
    height: int
    width: int

    @property
    def n_categories(self) -> int:
        return self.prototype_weights.shape[0] - 1


class FeatureCache:
    """Memoizes backend feature maps by image id."""

    def __init__(self, backend: FeatureBackend, height: int, width: int, d: int):
        self.backend, self.height, self.width, self.d = backend, height, width, d
        self._maps: dict[str, np.ndarray] = {}

    def __call__(self, sample) -> np.ndarray:
        hit = self._maps.get(sample.image_id)
        if hit is None:
            fm = self.backend.extract_query_features(sample.image, self.height, self.width, self.d)
            hit = self._maps[sample.image_id] = fm.values
        return hit


def prepare_episode(episode: Episode, features: FeatureCache, vocab: Vocabulary,
                    dtype=torch.float64) -> EpisodeTensors:
    h, w = features.height, features.width
    hw = h * w
    images: dict[str, int] = {}
    maps = []
    for inst in episode.support + episode.background:
        if inst.sample.image_id not in images:
            images[inst.sample.image_id] = len(maps)
            maps.append(features(inst.sample))
    n = episode.n
    weights = np.zeros((n + 1, len(maps) * hw))
    counts = np.zeros(n + 1)
    for inst in episode.support + episode.background:
        off = images[inst.sample.image_id] * hw
        weights[inst.category, off:off + hw] += roi_align_weights(inst.box, h, w, ROI_OUT_SIZE)
        counts[inst.category] += 1
    weights /= counts[:, None]  # mean over the k instances (or background crops)
    qmaps = [features(q.sample) for q in episode.query]
    return EpisodeTensors(
        support_maps=torch.as_tensor(np.stack(maps), dtype=dtype),
        prototype_weights=torch.as_tensor(weights, dtype=dtype),
        query_maps=torch.as_tensor(np.stack(qmaps), dtype=dtype) if qmaps
        else torch.zeros((0, hw, features.d), dtype=dtype),
        query_targets=[position_targets(q.boxes, q.labels, h, w, n) for q in episode.query],
        query_boxes=[q.boxes for q in episode.query],
        query_labels=[q.labels for q in episode.query],
        query_ids=[q.sample.image_id for q in episode.query],
        token_ids=[torch.as_tensor(tokenize(t, vocab).ids, dtype=torch.long)
                   for t in episode.texts],
        height=h, width=w,
    )


@dataclass
class EpisodeOutput:
    class_logits: torch.Tensor  # (Nq, HW, C+1)
    box_offsets: torch.Tensor  # (Nq, HW, 4)
    prototypes: torch.Tensor  # fused S, (C+1, d)
    query_encoded: torch.Tensor
    loss_det: torch.Tensor | None = None
    loss_rect: torch.Tensor | None = None


class MultiModalDetector(nn.Module):
    """Shared-attention encoder, prototype fusion, aggregation, head and rectifier.

    ``use_language=False`` drops the text prototypes from the fused support
    features; ``decoupled_attention=True`` gives text its own attention layer.
    ``token_init`` seeds the trainable token table, e.g. with a backend's
    pretrained text vectors.
    """

    def __init__(self, d: int, vocab_size: int, n_way: int, heads: int = 4,
                 use_language: bool = True, decoupled_attention: bool = False,
                 rect_layers: int = 2, rect_heads: int = 4, max_tokens: int = 256,
                 token_init=None):
        super().__init__()
        self.d, self.n_way = d, n_way
        self.use_language = use_language
        self.decoupled_attention = decoupled_attention
        self.vision_attn = SharedAttentionLayer(d, heads)
        if decoupled_attention:
            self.language_attn = SharedAttentionLayer(d, heads)
        self.token_embedding = nn.Embedding(vocab_size, d)
        if token_init is None:
            nn.init.normal_(self.token_embedding.weight, std=1.0)
        else:
            if tuple(np.shape(token_init)) != (vocab_size, d):
                raise ValueError(f"token_init must have shape {(vocab_size, d)}")
            with torch.no_grad():
                self.token_embedding.weight.copy_(torch.as_tensor(np.asarray(token_init)))
        self.register_buffer("positions", torch.as_tensor(sinusoidal_table(max_tokens, d)),
                             persistent=False)
        self.task_prototypes = nn.Parameter(init_task_prototypes(n_way + 1, d))
        self.background_text = nn.Parameter(torch.zeros(d))
        self.rectifier = RectifierModel(d, vocab_size, rect_layers, rect_heads)
        self.head = DetectionHead(d, n_way)

    @property
    def language_layer(self) -> SharedAttentionLayer:
        return self.language_attn if self.decoupled_attention else self.vision_attn

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        return self.token_embedding(ids) + self.positions[: len(ids)].to(
            self.token_embedding.weight.dtype)

    def language_prototypes(self, token_ids) -> torch.Tensor:
        return torch.stack([self.language_layer(self.embed(ids)).mean(0) for ids in token_ids])

    def support_prototypes(self, batch: EpisodeTensors):
        enc = self.vision_attn(batch.support_maps)
        vision = batch.prototype_weights @ enc.reshape(-1, self.d)
        if not self.use_language:
            return vision
        language = self.language_prototypes(batch.token_ids)
        return fuse_prototypes(vision, language, self.background_text)

    def forward(self, batch: EpisodeTensors, rect_weight: float = 0.0,
                normalize_rect: bool = False) -> EpisodeOutput:
        c = batch.n_categories
        if c > self.n_way:
            raise ValueError(f"model built for {self.n_way}-way episodes, got {c} categories")
        S = self.support_prototypes(batch)
        nq, hw = batch.query_maps.shape[:2]
        q_enc = self.vision_attn(batch.query_maps) if nq else batch.query_maps
        agg = aggregate(q_enc.reshape(-1, self.d), S, self.task_prototypes)
        logits, offsets = self.head(agg)
        logits = logits.reshape(nq, hw, -1)[..., list(range(c)) + [self.n_way]]
        out = EpisodeOutput(logits, offsets.reshape(nq, hw, 4), S, q_enc)
        if nq:
            out.loss_det = sum(detection_loss(logits[i], out.box_offsets[i], t)[0]
                               for i, t in enumerate(batch.query_targets))
        if rect_weight > 0 and nq:
            out.loss_rect = self.rectification(batch, S, q_enc, normalize_rect)
        return out

    def rectification(self, batch: EpisodeTensors, S, q_enc, normalize: bool = False):
        """Bidirectional text loss, one composite feature per support category."""
        fwd, bwd = [], []
        for ci, ids in enumerate(batch.token_ids):
            qi = next((i for i, labs in enumerate(batch.query_labels) if ci in labs), 0)
            p = composite_feature(S[ci], q_enc[qi])
            emb = self.embed(ids)
            for direction, store in (("forward", fwd), ("backward", bwd)):
                refined = self.language_layer(emb, causal_mask(len(ids), direction))
                store.append(predict_sequence(self.rectifier, refined, p, direction))
        seqs = [TokenSequence(tuple(int(i) for i in ids)) for ids in batch.token_ids]
        return rectification_loss(fwd, bwd, seqs, normalize=normalize)
