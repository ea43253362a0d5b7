"""Per-position detection head, its loss, and single-threshold VOC-style mAP."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .episodes import iou

CLS_WEIGHT = 1.0
BOX_WEIGHT = 5.0


@dataclass(frozen=True)
class Detection:
    image: str
    box: tuple[float, float, float, float]
    category: int
    score: float

    def to_json(self) -> str:
        return json.dumps({"image": self.image, "box": list(self.box),
                           "category": self.category, "score": self.score})


class DetectionHead(nn.Module):
    """Two affine maps per position: C+1 class logits and 4 box distances."""

    def __init__(self, d: int, n_classes: int):
        super().__init__()
        self.d, self.n_classes = d, n_classes
        self.cls = nn.Linear(d, n_classes + 1)
        self.box = nn.Linear(d, 4)

    def forward(self, aggregated):
        if aggregated.shape[-1] != self.d:
            raise ValueError(f"head expects width {self.d}, got {aggregated.shape[-1]}")
        return self.cls(aggregated), self.box(aggregated)


def head_forward(head: DetectionHead, aggregated):
    return head(aggregated)


@lru_cache(maxsize=64)
def position_centers(height: int, width: int) -> np.ndarray:
    """(x, y) centre of every position, row-major; the array is read-only."""
    ys, xs = np.meshgrid((np.arange(height) + 0.5) / height, (np.arange(width) + 0.5) / width,
                         indexing="ij")
    out = np.stack([xs.ravel(), ys.ravel()], axis=1)
    out.flags.writeable = False
    return out


def box_positions(box: Sequence[float], height: int, width: int) -> np.ndarray:
    """Indices of positions whose centre lies in ``box``; nearest one if none does."""
    c = position_centers(height, width)
    x0, y0, x1, y1 = box
    inside = np.flatnonzero((c[:, 0] >= x0) & (c[:, 0] <= x1) & (c[:, 1] >= y0) & (c[:, 1] <= y1))
    if inside.size:
        return inside
    mid = np.array([(x0 + x1) / 2, (y0 + y1) / 2])
    return np.array([int(np.argmin(((c - mid) ** 2).sum(1)))])


@dataclass(frozen=True)
class PositionTargets:
    labels: np.ndarray  # (HW,), background = n_classes
    boxes: np.ndarray  # (HW, 4) distances (left, top, right, bottom)
    foreground: np.ndarray  # (HW,) bool


def position_targets(boxes: Sequence[Sequence[float]], labels: Sequence[int], height: int,
                     width: int, n_classes: int) -> PositionTargets:
    """Assign every position to the smallest covering box, or to background."""
    hw = height * width
    out_labels = np.full(hw, n_classes, dtype=np.int64)
    out_boxes = np.zeros((hw, 4))
    area = np.full(hw, np.inf)
    c = position_centers(height, width)
    for box, lab in zip(boxes, labels):
        if not 0 <= lab < n_classes:
            raise ValueError(f"label {lab} outside [0, {n_classes})")
        a = (box[2] - box[0]) * (box[3] - box[1])
        for p in box_positions(box, height, width):
            if a < area[p]:
                area[p] = a
                out_labels[p] = lab
                out_boxes[p] = (c[p, 0] - box[0], c[p, 1] - box[1], box[2] - c[p, 0], box[3] - c[p, 1])
    return PositionTargets(out_labels, out_boxes, out_labels < n_classes)


def detection_loss(class_logits, box_offsets, targets: PositionTargets,
                   cls_weight: float = CLS_WEIGHT, box_weight: float = BOX_WEIGHT):
    """Summed cross-entropy over positions plus weighted L1 on foreground boxes.

    Returns ``(total, class_term, box_term)``; the terms are unweighted.
    """
    labels = torch.as_tensor(targets.labels, dtype=torch.long)
    cls_term = F.cross_entropy(class_logits, labels, reduction="sum")
    fg = torch.as_tensor(targets.foreground)
    tgt = torch.as_tensor(targets.boxes, dtype=box_offsets.dtype)
    box_term = (box_offsets[fg] - tgt[fg]).abs().sum()
    return cls_weight * cls_term + box_weight * box_term, cls_term, box_term


def decode_boxes(box_offsets: np.ndarray, height: int, width: int) -> np.ndarray:
    c = position_centers(height, width)
    b = np.stack([c[:, 0] - box_offsets[:, 0], c[:, 1] - box_offsets[:, 1],
                  c[:, 0] + box_offsets[:, 2], c[:, 1] + box_offsets[:, 3]], axis=1)
    return np.clip(b, 0.0, 1.0)


def detections_from_predictions(image: str, class_logits, box_offsets, height: int, width: int,
                                score_threshold: float = 0.05) -> list[Detection]:
    """One detection per position: its best foreground class and probability."""
    probs = torch.softmax(torch.as_tensor(class_logits), dim=-1).detach().cpu().numpy()
    boxes = decode_boxes(np.asarray(torch.as_tensor(box_offsets).detach().cpu()), height, width)
    fg = probs[:, :-1]
    cats = fg.argmax(1)
    scores = fg[np.arange(len(cats)), cats]
    dets = []
    for p in np.flatnonzero(scores >= score_threshold):
        b = boxes[p]
        if b[2] - b[0] <= 0 or b[3] - b[1] <= 0:
            continue
        dets.append(Detection(image, tuple(float(v) for v in b), int(cats[p]), float(scores[p])))
    return dets


def object_predictions(class_logits, boxes: Sequence[Sequence[float]], height: int,
                       width: int) -> list[int]:
    """Predicted class per ground-truth box: argmax over foreground classes of
    the mean logits at the box's positions."""
    logits = torch.as_tensor(class_logits).detach()
    preds = []
    for box in boxes:
        pos = torch.as_tensor(box_positions(box, height, width))
        preds.append(int(logits[pos, :-1].mean(0).argmax()))
    return preds


# ---------------------------------------------------------------------------
# mAP


def average_precision(scores: Sequence[float], is_tp: Sequence[bool], n_gt: int) -> float:
    """Area under the monotone precision envelope of a ranked detection list.

    Each true positive adds 1/n_gt recall at the best precision reached at or
    after its rank; the terms are summed with ``math.fsum`` so the result is
    independent of summation order.
    """
    if n_gt <= 0:
        raise ValueError("average precision needs at least one ground-truth box")
    tp = np.asarray(is_tp, dtype=bool)
    if tp.size == 0:
        return 0.0
    precision = np.cumsum(tp) / np.arange(1, tp.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return math.fsum(envelope[tp].tolist()) / n_gt


def match_detections(detections: Sequence[Detection],
                     ground_truth: Mapping[str, Sequence[tuple[Sequence[float], int]]],
                     category: int, iou_threshold: float) -> tuple[list[float], list[bool], int]:
    """Greedy matching for one category: descending score, ties by input order.

    Each detection takes the unmatched ground-truth box of highest IoU (lowest
    index on ties) if that IoU reaches the threshold.
    """
    gts = {img: [b for b, c in items if c == category] for img, items in ground_truth.items()}
    n_gt = sum(len(v) for v in gts.values())
    used = {img: [False] * len(v) for img, v in gts.items()}
    dets = [d for d in detections if d.category == category]
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    scores, flags = [], []
    for i in order:
        det = dets[i]
        best, best_iou = -1, iou_threshold
        for j, gt in enumerate(gts.get(det.image, [])):
            if used[det.image][j]:
                continue
            v = iou(det.box, gt)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = j, v
        if best >= 0:
            used[det.image][best] = True
        scores.append(det.score)
        flags.append(best >= 0)
    return scores, flags, n_gt


def compute_map(detections: Iterable[Detection],
                ground_truth: Mapping[str, Sequence[tuple[Sequence[float], int]]],
                iou_threshold: float = 0.5) -> tuple[float, dict[int, float]]:
    """Mean AP over categories present in ``ground_truth``.

    ``ground_truth`` maps image id to ``[(box, category), ...]``.  Returns
    ``(mAP, {category: AP})``.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    cats = sorted({c for items in ground_truth.values() for _, c in items})
    if not cats:
        raise ValueError("ground truth holds no boxes")
    detections = list(detections)
    per_class = {}
    for c in cats:
        scores, flags, n_gt = match_detections(detections, ground_truth, c, iou_threshold)
        per_class[c] = average_precision(scores, flags, n_gt)
    return math.fsum(per_class.values()) / len(per_class), per_class


def write_detections_jsonl(detections: Iterable[Detection], path: str | Path) -> None:
    with open(path, "w") as fh:
        for d in detections:
            fh.write(d.to_json() + "\n")


def read_detections_jsonl(path: str | Path) -> list[Detection]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                out.append(Detection(r["image"], tuple(r["box"]), int(r["category"]),
                                     float(r["score"])))
    return out


def ground_truth_index(images: Iterable[tuple[str, Sequence, Sequence[int]]]) -> dict:
    gt: dict[str, list] = defaultdict(list)
    for image, boxes, labels in images:
        gt[image].extend((tuple(b), int(l)) for b, l in zip(boxes, labels))
    return dict(gt)
