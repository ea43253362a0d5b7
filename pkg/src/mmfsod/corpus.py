"""Rich-text corpus: loading, validation, vocabulary and tokenization.

Every category carries up to three descriptions (``manual``, ``extended``,
``llm``).  Two further text variants, ``none`` and ``category_name``, are
synthesized on demand by :func:`select_text`.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

STORED_VARIANTS = ("manual", "extended", "llm")
TEXT_VARIANTS = ("none", "category_name") + STORED_VARIANTS

BOS, EOS, UNK, PAD = 0, 1, 2, 3
RESERVED_TOKENS = ("<s>", "</s>", "<unk>", "<pad>")

# letters and digits; everything else (whitespace, punctuation, underscore) splits
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)
_ALPHA_RE = re.compile(r"[^\W\d_]", re.UNICODE)


class CorpusError(ValueError):
    """Raised for malformed or invalid corpus files."""


def split_words(text: str) -> list[str]:
    """Lower-case ``text`` and split it into word tokens, dropping punctuation."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class RichTextEntry:
    dataset_id: str
    category_name: str
    variant: str
    text: str

    def __post_init__(self):
        if self.variant not in STORED_VARIANTS:
            raise CorpusError(f"unknown text variant {self.variant!r}")
        if not self.text or not self.text.strip():
            raise CorpusError(
                f"empty text for ({self.dataset_id}, {self.category_name}, {self.variant})"
            )
        if not any(_ALPHA_RE.search(tok) for tok in split_words(self.text)):
            raise CorpusError(
                f"text for ({self.dataset_id}, {self.category_name}, {self.variant}) "
                "has no alphabetic token"
            )

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.dataset_id, self.category_name, self.variant)


@dataclass(frozen=True)
class Vocabulary:
    """Dense token-to-id map with the four reserved ids at 0..3."""

    tokens: tuple[str, ...]
    token_to_id: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != RESERVED_TOKENS:
            raise ValueError("vocabulary must start with the reserved tokens")
        mapping = {tok: i for i, tok in enumerate(self.tokens)}
        if len(mapping) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        object.__setattr__(self, "token_to_id", mapping)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]

    def __post_init__(self):
        ids = self.ids
        if len(ids) < 2:
            raise ValueError("a token sequence holds at least BOS and EOS")
        if ids[0] != BOS or ids[-1] != EOS:
            raise ValueError("token sequence must start with BOS and end with EOS")
        if any(i in (BOS, EOS) for i in ids[1:-1]):
            raise ValueError("BOS/EOS may not appear in interior positions")
        if any(i < 0 for i in ids):
            raise ValueError("token ids must be non-negative")

    @property
    def length(self) -> int:
        return len(self.ids)

    def __len__(self) -> int:
        return len(self.ids)


# ---------------------------------------------------------------------------
# JSON (de)serialization


def _parse_document(doc, source: str) -> list[RichTextEntry]:
    if not isinstance(doc, dict) or not isinstance(doc.get("datasets"), list):
        raise CorpusError(f"{source}: top level must be an object with a 'datasets' list")
    entries: list[RichTextEntry] = []
    seen: set[tuple[str, str, str]] = set()
    for ds in doc["datasets"]:
        if not isinstance(ds, dict) or not isinstance(ds.get("id"), str):
            raise CorpusError(f"{source}: every dataset needs a string 'id'")
        cats = ds.get("categories", [])
        if not isinstance(cats, list):
            raise CorpusError(f"{source}: dataset {ds['id']!r}: 'categories' must be a list")
        for cat in cats:
            if not isinstance(cat, dict) or not isinstance(cat.get("name"), str):
                raise CorpusError(f"{source}: dataset {ds['id']!r}: category needs a 'name'")
            texts = cat.get("texts")
            if not isinstance(texts, dict):
                raise CorpusError(
                    f"{source}: {ds['id']}/{cat['name']}: 'texts' must be an object"
                )
            unknown = set(texts) - set(STORED_VARIANTS)
            if unknown:
                raise CorpusError(
                    f"{source}: {ds['id']}/{cat['name']}: unknown variants {sorted(unknown)}"
                )
            if texts.get("manual") is None:
                raise CorpusError(f"{source}: {ds['id']}/{cat['name']}: missing manual text")
            for variant in STORED_VARIANTS:
                text = texts.get(variant)
                if text is None:
                    continue
                if not isinstance(text, str):
                    raise CorpusError(
                        f"{source}: {ds['id']}/{cat['name']}/{variant}: text must be a string"
                    )
                entry = RichTextEntry(ds["id"], cat["name"], variant, text)
                if entry.key in seen:
                    raise CorpusError(f"{source}: duplicate entry {entry.key}")
                seen.add(entry.key)
                entries.append(entry)
    return entries


def parse_corpus(text: str, source: str = "<string>") -> list[RichTextEntry]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{source}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return _parse_document(doc, source)


def load_corpus(path: str | Path) -> list[RichTextEntry]:
    """Load and validate a corpus JSON file; entries keep file order."""
    path = Path(path)
    return parse_corpus(path.read_text(encoding="utf-8"), str(path))


def corpus_to_dict(entries: Iterable[RichTextEntry]) -> dict:
    datasets: dict[str, dict[str, dict[str, str | None]]] = {}
    for e in entries:
        cats = datasets.setdefault(e.dataset_id, {})
        texts = cats.setdefault(e.category_name, {v: None for v in STORED_VARIANTS})
        texts[e.variant] = e.text
    return {
        "datasets": [
            {"id": ds, "categories": [{"name": name, "texts": t} for name, t in cats.items()]}
            for ds, cats in datasets.items()
        ]
    }


def dump_corpus(entries: Iterable[RichTextEntry]) -> str:
    return json.dumps(corpus_to_dict(entries), indent=2, ensure_ascii=False) + "\n"


def save_corpus(entries: Iterable[RichTextEntry], path: str | Path) -> None:
    Path(path).write_text(dump_corpus(entries), encoding="utf-8")


def default_corpus_path() -> Path:
    return Path(str(resources.files("mmfsod") / "data" / "rich_text.json"))


def load_default_corpus() -> list[RichTextEntry]:
    """The bundled transcription of the published rich-text tables."""
    return load_corpus(default_corpus_path())


# ---------------------------------------------------------------------------
# vocabulary and tokenization


def build_vocabulary(entries: Iterable[RichTextEntry | str], min_count: int = 1) -> Vocabulary:
    """Frequency-ordered vocabulary; ties are broken lexicographically.

    ``entries`` may hold :class:`RichTextEntry` objects or plain strings.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts: Counter[str] = Counter()
    for e in entries:
        counts.update(split_words(e.text if isinstance(e, RichTextEntry) else e))
    kept = sorted((tok for tok, n in counts.items() if n >= min_count),
                  key=lambda tok: (-counts[tok], tok))
    return Vocabulary(RESERVED_TOKENS + tuple(kept))


def tokenize(text: str, vocab: Vocabulary) -> TokenSequence:
    return TokenSequence((BOS, *(vocab.lookup(t) for t in split_words(text)), EOS))


def detokenize(seq: TokenSequence | Sequence[int], vocab: Vocabulary) -> list[str]:
    ids = seq.ids if isinstance(seq, TokenSequence) else seq
    return [vocab.tokens[i] for i in ids]


# ---------------------------------------------------------------------------
# lookup helpers


def index_corpus(entries: Iterable[RichTextEntry]) -> dict[tuple[str, str, str], RichTextEntry]:
    return {e.key: e for e in entries}


def select_text(entries: Iterable[RichTextEntry], dataset_id: str, category_name: str,
                variant: str) -> str:
    """Text of one category under ``variant``.

    ``none`` yields the empty string and ``category_name`` the bare name; the
    stored variants must exist in the corpus.
    """
    if variant not in TEXT_VARIANTS:
        raise ValueError(f"unknown text variant {variant!r}")
    if variant == "none":
        return ""
    if variant == "category_name":
        return category_name
    for e in entries:
        if e.key == (dataset_id, category_name, variant):
            return e.text
    raise KeyError(f"no {variant} text for {dataset_id}/{category_name}")


def token_length_stats(entries: Iterable[RichTextEntry]) -> dict[str, dict[str, dict[str, float]]]:
    """Per-dataset, per-variant token-length statistics (word tokens, no BOS/EOS)."""
    lengths: dict[str, dict[str, list[int]]] = {}
    for e in entries:
        lengths.setdefault(e.dataset_id, {}).setdefault(e.variant, []).append(
            len(split_words(e.text)))
    out: dict[str, dict[str, dict[str, float]]] = {}
    for ds, by_variant in lengths.items():
        out[ds] = {}
        for variant in STORED_VARIANTS:
            vals = by_variant.get(variant)
            if not vals:
                continue
            out[ds][variant] = {
                "count": len(vals),
                "mean": sum(vals) / len(vals),
                "min": min(vals),
                "max": max(vals),
            }
    return out


def validate_corpus_file(path: str | Path) -> dict:
    """Schema + invariant check with token-length statistics.

    Returns a report ``{"path", "errors", "n_entries", "stats"}``.  Parse or
    validation failures are reported in ``errors`` rather than raised.
    """
    report: dict = {"path": str(path), "errors": [], "n_entries": 0, "stats": {}}
    try:
        entries = load_corpus(path)
    except (CorpusError, OSError) as exc:
        report["errors"].append(str(exc))
        return report
    report["n_entries"] = len(entries)
    report["stats"] = token_length_stats(entries)
    return report
