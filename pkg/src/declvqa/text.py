"""Shared text normalization: lowercasing, punctuation-aware tokenization.

Every component that looks at text (declaration building, template
induction, BLEU, the encoder vocabulary) goes through the same tokenizer so
that token boundaries agree everywhere. Bracketed control tokens such as
``[MASK]`` or ``[V3]`` survive as single tokens.
"""

from __future__ import annotations

import re

# Control token or word or single punctuation mark, in that priority.
_TOKEN_RE = re.compile(r"\[\w+\]|\w+|[^\w\s]")

# Punctuation that attaches to the preceding token when detokenizing.
_CLINGY = {".", ",", "?", "!", ";"}

MASK_TOKEN = "[MASK]"


def tokenize_text(text: str) -> list[str]:
    """Lowercase and split into word / punctuation / control tokens."""
    return _TOKEN_RE.findall(text.lower())


def detokenize_text(tokens: list[str]) -> str:
    """Inverse of tokenize_text up to casing for ordinary sentences."""
    parts: list[str] = []
    for tok in tokens:
        if tok in _CLINGY and parts:
            parts[-1] += tok
        else:
            parts.append(tok)
    return " ".join(parts)
