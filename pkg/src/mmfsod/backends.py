"""Feature sources: query feature maps, RoIAlign instance pooling, token embeddings.

The synthetic backend is a pure function of its inputs.  Real vision-language
models plug in through :func:`register_adapter` and are selected with
``backend="external:<name>"``; an unregistered adapter is an error, never a
silent fallback to the synthetic backend.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .corpus import TokenSequence, Vocabulary

MIN_BOX_AREA = 1e-6


class BackendError(RuntimeError):
    pass


@dataclass(frozen=True)
class QueryFeatureMap:
    """Per-position features, ``values[r * width + c]`` is the vector at (r, c)."""

    height: int
    width: int
    values: np.ndarray

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ValueError("feature map height and width must be positive")
        v = np.asarray(self.values)
        if v.ndim != 2 or v.shape[0] != self.height * self.width or v.shape[1] <= 0:
            raise ValueError(
                f"values of shape {v.shape} do not match H*W={self.height * self.width}")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature map contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_grid(cls, grid: np.ndarray) -> "QueryFeatureMap":
        """Build from an (H, W, d) array."""
        grid = np.asarray(grid)
        if grid.ndim != 3:
            raise ValueError("grid must have shape (H, W, d)")
        h, w, d = grid.shape
        return cls(h, w, grid.reshape(h * w, d))

    def grid(self) -> np.ndarray:
        return self.values.reshape(self.height, self.width, self.dim)


@dataclass(frozen=True)
class InstanceFeature:
    vector: np.ndarray
    box: tuple[float, float, float, float]


def check_box(box: Sequence[float]) -> tuple[float, float, float, float]:
    x0, y0, x1, y1 = (float(v) for v in box)
    if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
        raise ValueError(f"invalid normalized box {box}")
    if (x1 - x0) * (y1 - y0) < MIN_BOX_AREA:
        raise ValueError(f"degenerate box {box}")
    return x0, y0, x1, y1


def roi_align_weights(box: Sequence[float], height: int, width: int,
                      out_size: tuple[int, int] = (2, 2)) -> np.ndarray:
    """Pooling weights ``w`` with ``roi_align_pool(fm, box) == w @ fm.values``.

    One bilinear sample at the centre of each of the ``out_size`` bins; pixel
    (r, c) has its centre at normalized ((c + .5) / W, (r + .5) / H).  Samples
    outside the centre grid are clamped to the border.
    """
    x0, y0, x1, y1 = check_box(box)
    oh, ow = out_size
    if oh < 1 or ow < 1:
        raise ValueError("out_size must be at least (1, 1)")
    ys = y0 + (np.arange(oh) + 0.5) * (y1 - y0) / oh
    xs = x0 + (np.arange(ow) + 0.5) * (x1 - x0) / ow
    wy = _interp_weights(ys * height - 0.5, height)
    wx = _interp_weights(xs * width - 0.5, width)
    # mean over bins of the separable bilinear kernel
    w = np.einsum("ir,jc->rc", wy, wx) / (oh * ow)
    return w.reshape(height * width)


def _interp_weights(coords: np.ndarray, n: int) -> np.ndarray:
    coords = np.clip(coords, 0.0, n - 1)
    lo = np.floor(coords).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = coords - lo
    w = np.zeros((len(coords), n))
    rows = np.arange(len(coords))
    np.add.at(w, (rows, lo), 1.0 - frac)
    np.add.at(w, (rows, hi), frac)
    return w


def roi_align_pool(fm: QueryFeatureMap, box: Sequence[float],
                   out_size: tuple[int, int] = (2, 2)) -> InstanceFeature:
    w = roi_align_weights(box, fm.height, fm.width, out_size)
    return InstanceFeature(w @ fm.values, check_box(box))


def sinusoidal_table(rows: int, d: int) -> np.ndarray:
    """``T[k, 2i] = sin(k / 10000^(2i/d))``, ``T[k, 2i+1] = cos(...)``."""
    if d <= 0 or d % 2:
        raise ValueError("sinusoidal table needs a positive even width")
    k = np.arange(rows, dtype=np.float64)[:, None]
    freq = 10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d)
    table = np.empty((rows, d))
    table[:, 0::2] = np.sin(k / freq)
    table[:, 1::2] = np.cos(k / freq)
    return table


# ---------------------------------------------------------------------------
# backends


class FeatureBackend(Protocol):
    def extract_query_features(self, image, height: int, width: int, d: int) -> QueryFeatureMap:
        ...

    def embed_tokens(self, seq: TokenSequence, d: int) -> np.ndarray:
        ...


def word_vector(word: str, d: int) -> np.ndarray:
    """Unit-variance pseudo-random vector keyed by the word's UTF-8 bytes."""
    key = int.from_bytes(hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest(), "little")
    return np.random.default_rng([key, d, 0x7E7]).standard_normal(d)


class SyntheticBackend:
    """Deterministic stand-in for a pretrained vision-language backbone.

    ``image`` may be an integer seed (pure noise map), an object with a
    ``render(height, width, d)`` method (see :mod:`mmfsod.episodes`), an
    (H, W, d) array, or a path to such an array saved with ``np.save``.

    With a vocabulary attached, token vectors are keyed by the token's word,
    which is also how the synthetic world lays out attribute directions; the
    two modalities therefore share one feature space, as a contrastively
    pretrained encoder pair would.  Without one they are keyed by id.
    """

    def __init__(self, vocab_size: int | None = None, vocab: Vocabulary | None = None):
        self.vocab = vocab
        self.vocab_size = vocab.size if vocab is not None else vocab_size

    def extract_query_features(self, image, height: int, width: int, d: int) -> QueryFeatureMap:
        if height <= 0 or width <= 0 or d <= 0:
            raise ValueError("H, W and d must be positive")
        if isinstance(image, (int, np.integer)):
            rng = np.random.default_rng([int(image), height, width, d])
            return QueryFeatureMap(height, width, rng.standard_normal((height * width, d)))
        if hasattr(image, "render"):
            grid = image.render(height, width, d)
        elif isinstance(image, (str, Path)):
            grid = np.load(image)
        else:
            grid = np.asarray(image, dtype=np.float64)
        fm = QueryFeatureMap.from_grid(grid)
        if (fm.height, fm.width, fm.dim) != (height, width, d):
            raise ValueError(
                f"image features have shape {(fm.height, fm.width, fm.dim)}, "
                f"expected {(height, width, d)}")
        return fm

    def token_vector(self, token_id: int, d: int) -> np.ndarray:
        if token_id < 0 or (self.vocab_size is not None and token_id >= self.vocab_size):
            raise ValueError(f"token id {token_id} outside vocabulary of size {self.vocab_size}")
        if self.vocab is not None:
            return word_vector(self.vocab.tokens[token_id], d)
        return np.random.default_rng([int(token_id), d, 0x7E7]).standard_normal(d)

    def token_table(self, d: int) -> np.ndarray:
        """(V, d) matrix of all token vectors; needs a known vocabulary size."""
        if self.vocab_size is None:
            raise ValueError("token_table needs a vocabulary size")
        return np.stack([self.token_vector(i, d) for i in range(self.vocab_size)])

    def embed_tokens(self, seq: TokenSequence, d: int) -> np.ndarray:
        if d <= 0:
            raise ValueError("d must be positive")
        pos = sinusoidal_table(len(seq), d + d % 2)[:, :d]
        return np.stack([self.token_vector(t, d) for t in seq.ids]) + pos


_ADAPTERS: dict[str, Callable[..., FeatureBackend]] = {}


def register_adapter(name: str, factory: Callable[..., FeatureBackend]) -> None:
    _ADAPTERS[name] = factory


def unregister_adapter(name: str) -> None:
    _ADAPTERS.pop(name, None)


def get_backend(spec: str, **kwargs) -> FeatureBackend:
    """Resolve ``"synthetic"`` or ``"external:<adapter-name>"``."""
    if spec == "synthetic":
        return SyntheticBackend(**kwargs)
    if spec.startswith("external:"):
        name = spec.split(":", 1)[1]
        if name not in _ADAPTERS:
            raise BackendError(f"external backend adapter {name!r} is not registered")
        return _ADAPTERS[name](**kwargs)
    raise BackendError(f"unknown backend {spec!r}")
