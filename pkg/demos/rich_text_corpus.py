"""Browse the shipped rich-text corpus: lengths per variant and a tokenized entry."""

from mmfsod.corpus import (build_vocabulary, detokenize, load_default_corpus, select_text,
                           token_length_stats, tokenize)

entries = load_default_corpus()
print(f"{len(entries)} descriptions")
for dataset, variants in token_length_stats(entries).items():
    summary = ", ".join(f"{v} {s['mean']:.1f}" for v, s in variants.items())
    print(f"  {dataset:10s} mean tokens: {summary}")

vocab = build_vocabulary(entries)
print(f"\nvocabulary: {vocab.size} tokens")
for variant in ("manual", "extended"):
    text = select_text(entries, "UODD", "Sea urchin", variant)
    seq = tokenize(text, vocab)
    print(f"\nUODD / Sea urchin / {variant} ({len(seq)} ids):\n  {text}")
    print("  ->", " ".join(detokenize(seq, vocab)))
