"""Category catalogs, the synthetic toy-detection generator and episode sampling.

Synthetic images are rendered lazily by :class:`SyntheticImage` as a noise
floor plus one Gaussian-profiled blob per object.  A category's appearance
is the normalized sum of its attribute directions, and its rich texts name
those attributes, so text carries category identity to unseen categories.

With ``separability="text_only_separable"`` every object in the support
image pool shares one generic appearance, so support vision features carry
no category information and only the rich text can tell categories apart.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .backends import word_vector
from .corpus import RichTextEntry, TEXT_VARIANTS, select_text

SEPARABILITIES = ("vision_separable", "text_only_separable")
STRATEGIES = ("balanced_instances", "unbalanced_images")
POOLS = ("support", "query")

ATTRIBUTE_WORDS = (
    "red", "striped", "round", "spiky", "glossy", "elongated", "furry", "metallic",
    "winged", "translucent", "angular", "spotted", "segmented", "flat", "curved", "hairy",
)

Box = tuple[float, float, float, float]


class EpisodeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# synthetic world


@dataclass(frozen=True)
class SyntheticWorld:
    """Appearance model shared by all images of a synthetic catalog."""

    n_categories: int
    d: int
    separability: str
    seed: int
    attributes_per_category: int = 3
    amplitude: float = 3.0
    noise_std: float = 0.5
    jitter_std: float = 0.1

    def __post_init__(self):
        if self.separability not in SEPARABILITIES:
            raise ValueError(f"unknown separability {self.separability!r}")
        if self.n_categories < 2:
            raise ValueError("a synthetic catalog needs at least two categories")

    @property
    def n_attributes(self) -> int:
        return len(ATTRIBUTE_WORDS)

    @cached_property
    def _tables(self):
        rng = np.random.default_rng([self.seed, 0xA77])
        # attribute directions coincide with the synthetic text vectors of the words
        directions = np.stack([word_vector(w, self.d) for w in ATTRIBUTE_WORDS])
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        combos: list[tuple[int, ...]] = []
        seen = set()
        while len(combos) < self.n_categories:
            combo = tuple(sorted(rng.choice(self.n_attributes, self.attributes_per_category,
                                            replace=False).tolist()))
            if combo not in seen:
                seen.add(combo)
                combos.append(combo)
        appearance = np.stack([directions[list(c)].sum(0) for c in combos])
        appearance /= np.linalg.norm(appearance, axis=1, keepdims=True)
        generic = rng.standard_normal(self.d)
        generic /= np.linalg.norm(generic)
        return directions, combos, appearance, generic

    @property
    def attribute_directions(self) -> np.ndarray:
        return self._tables[0]

    @property
    def category_attributes(self) -> list[tuple[int, ...]]:
        return self._tables[1]

    @property
    def appearance(self) -> np.ndarray:
        return self._tables[2]

    @property
    def generic_appearance(self) -> np.ndarray:
        return self._tables[3]

    def object_appearance(self, category: int, domain: str | None) -> np.ndarray:
        if self.separability == "text_only_separable" and domain == "support":
            return self.generic_appearance
        return self.appearance[category]

    def params(self) -> dict:
        return {
            "n_categories": self.n_categories, "d": self.d,
            "separability": self.separability, "seed": self.seed,
            "attributes_per_category": self.attributes_per_category,
            "amplitude": self.amplitude, "noise_std": self.noise_std,
            "jitter_std": self.jitter_std,
        }


@dataclass(frozen=True, eq=False)
class SyntheticImage:
    world: SyntheticWorld
    seed: int
    boxes: tuple[Box, ...]
    label_ids: tuple[int, ...]
    domain: str | None = None

    def render(self, height: int, width: int, d: int) -> np.ndarray:
        if d != self.world.d:
            raise ValueError(f"synthetic world has d={self.world.d}, requested d={d}")
        rng = np.random.default_rng([self.seed, height, width, d])
        grid = rng.standard_normal((height, width, d)) * self.world.noise_std
        ys = (np.arange(height) + 0.5) / height
        xs = (np.arange(width) + 0.5) / width
        for (x0, y0, x1, y1), cat in zip(self.boxes, self.label_ids):
            look = self.world.object_appearance(cat, self.domain)
            look = look + rng.standard_normal(d) * self.world.jitter_std
            look = look / np.linalg.norm(look)
            amp = self.world.amplitude * rng.uniform(0.8, 1.2)
            cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
            sx, sy = (x1 - x0) / 2, (y1 - y0) / 2
            gy = np.exp(-0.5 * ((ys - cy) / sy) ** 2) * ((ys >= y0) & (ys <= y1))
            gx = np.exp(-0.5 * ((xs - cx) / sx) ** 2) * ((xs >= x0) & (xs <= x1))
            profile = np.outer(gy, gx)
            grid += amp * profile[:, :, None] * look
        return grid


# ---------------------------------------------------------------------------
# catalog


@dataclass(frozen=True, eq=False)
class Sample:
    image_id: str
    image: object  # SyntheticImage, .npy path, or array
    boxes: tuple[Box, ...]
    labels: tuple[str, ...]
    pool: str | None = None

    def __post_init__(self):
        if len(self.boxes) != len(self.labels):
            raise ValueError(f"{self.image_id}: {len(self.boxes)} boxes for {len(self.labels)} labels")
        if self.pool is not None and self.pool not in POOLS:
            raise ValueError(f"{self.image_id}: unknown pool {self.pool!r}")


@dataclass(frozen=True, eq=False)
class CategoryCatalog:
    dataset_id: str
    categories: tuple[str, ...]
    samples: tuple[Sample, ...]
    height: int
    width: int
    dim: int
    base: tuple[str, ...] = ()
    novel: tuple[str, ...] = ()
    world: SyntheticWorld | None = None

    def __post_init__(self):
        if len(set(self.categories)) != len(self.categories):
            raise ValueError("duplicate category names")
        overlap = set(self.base) & set(self.novel)
        if overlap:
            raise ValueError(f"base and novel classes overlap: {sorted(overlap)}")
        known = set(self.categories)
        for s in self.samples:
            unknown = set(s.labels) - known
            if unknown:
                raise ValueError(f"{s.image_id}: unknown labels {sorted(unknown)}")

    def with_split(self, base: Iterable[str], novel: Iterable[str]) -> "CategoryCatalog":
        return CategoryCatalog(self.dataset_id, self.categories, self.samples, self.height,
                               self.width, self.dim, tuple(base), tuple(novel), self.world)

    @cached_property
    def _instance_index(self) -> dict[str, list[tuple[int, int, str | None]]]:
        index: dict[str, list[tuple[int, int, str | None]]] = {c: [] for c in self.categories}
        for si, s in enumerate(self.samples):
            for bi, lab in enumerate(s.labels):
                index[lab].append((si, bi, s.pool))
        return index

    def instances(self, category: str, pool: str | None = None) -> list[tuple[int, int]]:
        """(sample index, box index) pairs of ``category`` usable in ``pool``."""
        return [(si, bi) for si, bi, p in self._instance_index.get(category, ())
                if pool is None or p in (None, pool)]

    def images(self, category: str, pool: str | None = None) -> list[int]:
        return sorted({si for si, _ in self.instances(category, pool)})


def split_base_novel(catalog: CategoryCatalog, split_spec: dict) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Partition categories into (base, novel).

    ``split_spec`` holds ``"base"`` and/or ``"novel"`` name lists; a missing
    key takes every category not named by the other.
    """
    known = set(catalog.categories)
    base = split_spec.get("base")
    novel = split_spec.get("novel")
    if base is None and novel is None:
        raise EpisodeError("split spec names neither base nor novel classes")
    for name in list(base or []) + list(novel or []):
        if name not in known:
            raise EpisodeError(f"unknown category {name!r} in split spec")
    if base is None:
        base = [c for c in catalog.categories if c not in set(novel)]
    if novel is None:
        novel = [c for c in catalog.categories if c not in set(base)]
    overlap = set(base) & set(novel)
    if overlap:
        raise EpisodeError(f"categories in both base and novel sets: {sorted(overlap)}")
    if len(set(base)) != len(base) or len(set(novel)) != len(novel):
        raise EpisodeError("split spec repeats a category")
    return tuple(base), tuple(novel)


def _place_boxes(rng, n_objects: int, min_size: float, max_size: float) -> list[Box]:
    boxes: list[Box] = []
    for _ in range(n_objects):
        for _attempt in range(50):
            w, h = rng.uniform(min_size, max_size, size=2)
            x0, y0 = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
            box = (float(x0), float(y0), float(x0 + w), float(y0 + h))
            if all(iou(box, b) == 0.0 for b in boxes):
                boxes.append(box)
                break
    return boxes


def category_names(n: int) -> tuple[str, ...]:
    return tuple(f"cls{i:02d}" for i in range(n))


def synthetic_texts(world: SyntheticWorld, names: Sequence[str],
                    dataset_id: str = "synthetic") -> list[RichTextEntry]:
    """Manual, extended and LLM-style descriptions naming each category's attributes."""
    entries = []
    for ci, name in enumerate(names):
        a = [ATTRIBUTE_WORDS[i] for i in world.category_attributes[ci]]
        manual = f"{name} is {', '.join(a[:-1])} and {a[-1]}."
        other = names[(ci + 1) % len(names)]
        extended = f"{manual[:-1]}; usually seen together with {other}."
        llm = (f"A {name} typically looks {a[0]}, with {' and '.join(a[1:])} parts "
               "visible on its surface.")
        entries += [RichTextEntry(dataset_id, name, "manual", manual),
                    RichTextEntry(dataset_id, name, "extended", extended),
                    RichTextEntry(dataset_id, name, "llm", llm)]
    return entries


def generate_synthetic_catalog(n_categories: int, images_per_category: int, height: int = 8,
                               width: int = 8, d: int = 32,
                               separability: str = "vision_separable", seed: int = 0,
                               max_objects: int = 2, query_fraction: float = 0.5,
                               **world_kwargs) -> tuple[CategoryCatalog, list[RichTextEntry]]:
    """Toy detection catalog plus its rich-text corpus.

    Each image holds 1..``max_objects`` non-overlapping objects of a single
    category.  The first ``1 - query_fraction`` of a category's images form
    the support pool, the rest the query pool.
    """
    if n_categories < 2:
        raise ValueError("n_categories must be at least 2")
    world = SyntheticWorld(n_categories, d, separability, seed, **world_kwargs)
    names = category_names(n_categories)
    rng = np.random.default_rng([seed, 0xCA7])
    n_support = images_per_category - int(round(images_per_category * query_fraction))
    samples = []
    for ci, name in enumerate(names):
        for j in range(images_per_category):
            pool = "support" if j < n_support else "query"
            boxes = _place_boxes(rng, int(rng.integers(1, max_objects + 1)), 0.25, 0.5)
            img_seed = int(rng.integers(2**31))
            image = SyntheticImage(world, img_seed, tuple(boxes), (ci,) * len(boxes), pool)
            samples.append(Sample(f"{name}_{j:03d}", image, tuple(boxes),
                                  (name,) * len(boxes), pool))
    catalog = CategoryCatalog("synthetic", names, tuple(samples), height, width, d, world=world)
    return catalog, synthetic_texts(world, names)


# ---------------------------------------------------------------------------
# episodes


@dataclass(frozen=True, eq=False)
class SupportInstance:
    category: int  # index into Episode.categories
    sample: Sample
    box: Box


@dataclass(frozen=True, eq=False)
class QueryImage:
    sample: Sample
    boxes: tuple[Box, ...]
    labels: tuple[int, ...]  # episode category indices


@dataclass(frozen=True, eq=False)
class Episode:
    categories: tuple[str, ...]
    support: tuple[SupportInstance, ...]
    background: tuple[SupportInstance, ...]
    query: tuple[QueryImage, ...]
    texts: tuple[str, ...]
    k: int
    strategy: str
    text_variant: str
    seed: int
    dataset_id: str = "synthetic"

    @property
    def n(self) -> int:
        return len(self.categories)

    def support_images(self) -> set[str]:
        return {s.sample.image_id for s in self.support}

    def query_images(self) -> set[str]:
        return {q.sample.image_id for q in self.query}

    def to_dict(self) -> dict:
        return {
            "categories": list(self.categories),
            "texts": list(self.texts),
            "k": self.k, "strategy": self.strategy,
            "text_variant": self.text_variant, "seed": self.seed,
            "support": [{"category": self.categories[s.category], "image": s.sample.image_id,
                         "box": list(s.box)} for s in self.support],
            "background": [{"image": s.sample.image_id, "box": list(s.box)}
                           for s in self.background],
            "query": [{"image": q.sample.image_id, "boxes": [list(b) for b in q.boxes],
                       "labels": [self.categories[i] for i in q.labels]} for q in self.query],
        }


def _background_box(rng, sample: Sample, size: float = 0.25) -> Box:
    for _ in range(50):
        x0, y0 = rng.uniform(0, 1 - size, size=2)
        box = (float(x0), float(y0), float(x0 + size), float(y0 + size))
        if all(iou(box, b) == 0.0 for b in sample.boxes):
            return box
    # crowded image: fall back to the corner farthest from every object
    corners = [(0.0, 0.0), (1 - size, 0.0), (0.0, 1 - size), (1 - size, 1 - size)]
    def clearance(c):
        return min(abs((b[0] + b[2]) / 2 - c[0] - size / 2) + abs((b[1] + b[3]) / 2 - c[1] - size / 2)
                   for b in sample.boxes)
    x0, y0 = max(corners, key=clearance)
    return (x0, y0, x0 + size, y0 + size)


def sample_episode(catalog: CategoryCatalog, n: int, k: int,
                   strategy: str = "balanced_instances", text_variant: str = "manual",
                   seed: int = 0, corpus: Sequence[RichTextEntry] = (),
                   categories: Sequence[str] | None = None, query_size: int | None = None,
                   allow_empty_query: bool = False) -> Episode:
    """Sample one n-way k-shot episode.

    ``balanced_instances`` draws exactly k annotated instances per category;
    ``unbalanced_images`` draws k images per category and keeps all of that
    category's instances in them.  Query images never overlap the support
    images and together hold at least ``query_size`` (default 2nk) instances
    of the episode categories when the catalog has that many.
    """
    if strategy not in STRATEGIES:
        raise EpisodeError(f"unknown sampling strategy {strategy!r}")
    if text_variant not in TEXT_VARIANTS:
        raise EpisodeError(f"unknown text variant {text_variant!r}")
    if n < 1 or k < 1:
        raise EpisodeError("n and k must be positive")
    pool = list(categories if categories is not None else catalog.categories)
    for name in pool:
        have = (len(catalog.instances(name, "support")) if strategy == "balanced_instances"
                else len(catalog.images(name, "support")))
        if have < k:
            unit = "instances" if strategy == "balanced_instances" else "images"
            raise EpisodeError(f"category {name!r} has {have} support {unit}, need {k}")
    if len(pool) < n:
        raise EpisodeError(f"{len(pool)} categories available, need {n}")

    rng = np.random.default_rng([seed, 0xE915])
    chosen = [pool[i] for i in rng.choice(len(pool), n, replace=False)]
    used_images: set[int] = set()
    support: list[SupportInstance] = []
    for ci, name in enumerate(chosen):
        if strategy == "balanced_instances":
            cands = [(si, bi) for si, bi in catalog.instances(name, "support")
                     if si not in used_images]
            if len(cands) < k:
                raise EpisodeError(f"category {name!r}: only {len(cands)} unused instances")
            picks = [cands[i] for i in sorted(rng.choice(len(cands), k, replace=False))]
        else:
            imgs = [si for si in catalog.images(name, "support") if si not in used_images]
            if len(imgs) < k:
                raise EpisodeError(f"category {name!r}: only {len(imgs)} unused images")
            chosen_imgs = [imgs[i] for i in sorted(rng.choice(len(imgs), k, replace=False))]
            picks = [(si, bi) for si in chosen_imgs
                     for bi, lab in enumerate(catalog.samples[si].labels) if lab == name]
        for si, bi in picks:
            used_images.add(si)
            s = catalog.samples[si]
            support.append(SupportInstance(ci, s, s.boxes[bi]))

    background = []
    for ci in range(n):
        owner = [s.sample for s in support if s.category == ci][0]
        background.append(SupportInstance(n, owner, _background_box(rng, owner)))

    index = {name: i for i, name in enumerate(chosen)}
    want = 2 * n * k if query_size is None else query_size
    cands = [si for si, s in enumerate(catalog.samples)
             if si not in used_images and s.pool in (None, "query")
             and any(lab in index for lab in s.labels)]
    order = rng.permutation(len(cands))
    query: list[QueryImage] = []
    count = 0
    for oi in order:
        if count >= want:
            break
        s = catalog.samples[cands[oi]]
        keep = [(b, index[lab]) for b, lab in zip(s.boxes, s.labels) if lab in index]
        query.append(QueryImage(s, tuple(b for b, _ in keep), tuple(c for _, c in keep)))
        count += len(keep)
    if not query and not allow_empty_query and want > 0:
        raise EpisodeError("no query images available for the episode categories")

    texts = tuple(select_text(corpus, catalog.dataset_id, name, text_variant) for name in chosen)
    return Episode(tuple(chosen), tuple(support), tuple(background), tuple(query), texts, k,
                   strategy, text_variant, seed, catalog.dataset_id)


# ---------------------------------------------------------------------------
# geometry


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


# ---------------------------------------------------------------------------
# on-disk catalog index


def catalog_to_dict(catalog: CategoryCatalog) -> dict:
    samples = []
    for s in catalog.samples:
        if isinstance(s.image, SyntheticImage):
            image = {"synthetic": s.image.seed, "domain": s.image.domain}
        elif isinstance(s.image, (str, Path)):
            image = str(s.image)
        else:
            raise ValueError(f"{s.image_id}: in-memory images cannot be written to an index")
        rec = {"id": s.image_id, "image": image, "boxes": [list(b) for b in s.boxes],
               "labels": list(s.labels)}
        if s.pool is not None:
            rec["pool"] = s.pool
        samples.append(rec)
    doc = {"dataset_id": catalog.dataset_id, "height": catalog.height, "width": catalog.width,
           "dim": catalog.dim, "categories": list(catalog.categories),
           "base": list(catalog.base), "novel": list(catalog.novel), "samples": samples}
    if catalog.world is not None:
        doc["generator"] = catalog.world.params()
    return doc


def save_catalog(catalog: CategoryCatalog, path: str | Path) -> None:
    Path(path).write_text(json.dumps(catalog_to_dict(catalog), indent=1) + "\n")


def load_catalog(path: str | Path, data_root: str | Path | None = None) -> CategoryCatalog:
    """Read a catalog index; relative .npy paths resolve against ``data_root``
    (default: the index's directory)."""
    path = Path(path)
    doc = json.loads(path.read_text())
    root = Path(data_root) if data_root is not None else path.parent
    world = SyntheticWorld(**doc["generator"]) if "generator" in doc else None
    cats = tuple(doc["categories"])
    cat_index = {c: i for i, c in enumerate(cats)}
    samples = []
    for i, rec in enumerate(doc["samples"]):
        boxes = tuple(tuple(float(v) for v in b) for b in rec["boxes"])
        labels = tuple(rec["labels"])
        img = rec["image"]
        if isinstance(img, dict) and "synthetic" in img:
            if world is None:
                raise ValueError(f"sample {i}: synthetic image but no generator record")
            image = SyntheticImage(world, int(img["synthetic"]), boxes,
                                   tuple(cat_index[l] for l in labels), img.get("domain"))
        else:
            image = root / img
        samples.append(Sample(rec.get("id", f"img{i:05d}"), image, boxes, labels,
                              rec.get("pool")))
    return CategoryCatalog(doc.get("dataset_id", "custom"), cats, tuple(samples),
                           int(doc["height"]), int(doc["width"]), int(doc["dim"]),
                           tuple(doc.get("base", ())), tuple(doc.get("novel", ())), world)
