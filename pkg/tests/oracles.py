"""Independent reference computations shared by the unit and acceptance suites."""

import math

import numpy as np

from mmfsod.detection import Detection
from mmfsod.episodes import iou


def np_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def aggregation_oracle(Q, S, T):
    A = np_softmax(Q @ S.T / np.sqrt(Q.shape[1]))
    Q1 = (A @ (1 / (1 + np.exp(-S)))) * Q
    return A, Q1, A @ T[: S.shape[0]]


def brute_force_map(dets, gt, thr=0.5):
    """Rematch from scratch at every score threshold and integrate the envelope."""
    aps = []
    for c in sorted({c for items in gt.values() for _, c in items}):
        boxes = [(img, b) for img, items in gt.items() for b, cc in items if cc == c]
        mine = sorted((d for d in dets if d.category == c), key=lambda d: -d.score)
        points = []
        for t in range(1, len(mine) + 1):
            taken, tp = set(), 0
            for d in mine[:t]:
                cands = [(iou(d.box, b), -j) for j, (img, b) in enumerate(boxes)
                         if img == d.image and j not in taken and iou(d.box, b) >= thr]
                if cands:
                    taken.add(-max(cands)[1])
                    tp += 1
            points.append((tp, tp / t))
        steps = [t for t in range(len(points))
                 if points[t][0] > (points[t - 1][0] if t else 0)]
        terms = [max(p for r, p in points[t:]) for t in steps]
        aps.append(math.fsum(terms) / len(boxes))
    return math.fsum(aps) / len(aps)


def random_case(rng):
    gt, dets = {}, []
    n_boxes = int(rng.integers(1, 6))
    for i in range(n_boxes):
        img = f"im{rng.integers(0, 2)}"
        x0, y0 = rng.uniform(0, 0.6, 2)
        box = (x0, y0, x0 + rng.uniform(0.1, 0.4), y0 + rng.uniform(0.1, 0.4))
        cat = int(rng.integers(0, 2))
        gt.setdefault(img, []).append((box, cat))
        for _ in range(int(rng.integers(0, 3))):
            jitter = rng.normal(0, 0.05, 4)
            b = np.clip(np.array(box) + jitter, 0, 1)
            if b[2] > b[0] and b[3] > b[1]:
                dets.append(Detection(img, tuple(b), cat if rng.random() < 0.8 else 1 - cat,
                                      float(rng.uniform(0.01, 1))))
    for _ in range(int(rng.integers(0, 3))):
        x0, y0 = rng.uniform(0, 0.7, 2)
        dets.append(Detection(f"im{rng.integers(0, 2)}", (x0, y0, x0 + 0.3, y0 + 0.3),
                              int(rng.integers(0, 2)), float(rng.uniform(0.01, 1))))
    return dets, gt
