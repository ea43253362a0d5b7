"""Run configuration: a single JSON or key=value file plus overrides."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .corpus import TEXT_VARIANTS
from .episodes import SEPARABILITIES, STRATEGIES

DATA_ROOT_ENV = "MMFSOD_DATA_ROOT"
OPTIMIZERS = ("sgd", "adam")


@dataclass
class RunConfig:
    seed: int = 0
    d: int = 256
    heads: int = 4
    n: int = 3
    k: int = 5
    strategy: str = "balanced_instances"
    text_variant: str = "manual"
    backend: str = "synthetic"
    rect_weight: float = 1.0
    normalize_rect: bool = False
    lr: float = 1e-3
    optimizer: str = "sgd"
    batch_size: int | None = None  # None: 4 episodes for 1-shot, else 1
    steps: int = 500
    no_language: bool = False
    no_rectify: bool = False
    decoupled_attention: bool = False
    rect_layers: int = 2
    rect_heads: int = 4
    dtype: str = "float64"
    # data
    catalog: str | None = None  # catalog index path; None builds a synthetic one
    corpus: str | None = None
    n_categories: int = 12
    images_per_category: int = 20
    height: int = 8
    width: int = 8
    separability: str = "vision_separable"
    data_seed: int = 0
    n_novel: int = 4
    query_size: int | None = None
    base_novel_ratio: str = "1:1"
    # evaluation
    eval_every: int = 100
    eval_episodes: int = 20
    eval_seed: int = 100_000

    def __post_init__(self):
        self.validate()

    @property
    def episodes_per_step(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 4 if self.k == 1 else 1

    def validate(self) -> None:
        positive = ["d", "heads", "n", "k", "lr", "rect_layers", "rect_heads", "n_categories",
                    "images_per_category", "height", "width", "eval_every", "eval_episodes"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("steps", "rect_weight", "n_novel", "seed", "data_seed", "eval_seed"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.batch_size is not None and self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.d % 2 or self.d % self.heads:
            raise ValueError("d must be even and divisible by heads")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.text_variant not in TEXT_VARIANTS:
            raise ValueError(f"unknown text variant {self.text_variant!r}")
        if self.separability not in SEPARABILITIES:
            raise ValueError(f"unknown separability {self.separability!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        self.ratio()

    def ratio(self) -> tuple[int, int]:
        try:
            base, novel = (int(v) for v in self.base_novel_ratio.split(":"))
        except ValueError as exc:
            raise ValueError(f"base_novel_ratio must look like '1:1', got {self.base_novel_ratio!r}") from exc
        if base < 0 or novel < 0 or base + novel == 0:
            raise ValueError("base_novel_ratio needs a positive total")
        return base, novel

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **overrides) -> "RunConfig":
        return RunConfig.from_dict({**self.to_dict(), **overrides})


def _coerce(name: str, raw: str):
    types = {f.name: f.type for f in fields(RunConfig)}
    if name not in types:
        raise ValueError(f"unknown config key {name!r}")
    kind = str(types[name])
    if raw.lower() in ("none", "null") and "None" in kind:
        return None
    if kind.startswith("bool"):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{name}: expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if kind.startswith("int"):
        return int(raw)
    if kind.startswith("float"):
        return float(raw)
    return raw


def parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        out[key.strip()] = _coerce(key.strip(), raw.strip())
    return out


def read_config_file(path: str | Path) -> dict:
    """The fields a JSON or ``key=value`` file sets, without defaults."""
    text = Path(path).read_text()
    if str(path).endswith(".json") or text.lstrip().startswith("{"):
        return json.loads(text)
    lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    return parse_overrides(ln for ln in lines if ln)


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Read JSON (``.json``) or ``key=value`` lines, then apply ``overrides``."""
    data = read_config_file(path) if path is not None else {}
    data.update(overrides or {})
    return RunConfig.from_dict(data)


def data_root() -> Path | None:
    root = os.environ.get(DATA_ROOT_ENV)
    return Path(root) if root else None
