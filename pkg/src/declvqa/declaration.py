"""Question-to-declaration machinery and its quality metric.

A declaration is the statement form of a question with the answer slot
replaced by a single ``[MASK]`` (or exactly the string ``[MASK]`` when no
slot can be carved out, which covers yes/no questions). The converter is a
deterministic template inducer: groups of question/declaration pairs that
share a literal skeleton are abstracted into slot rules, with exact-match
memorization in front and the bare-mask fallback behind, so conversion is
total. Corpus BLEU-4 scores converter output against reference declarations.
"""

from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .text import tokenize_text, detokenize_text, MASK_TOKEN

logger = logging.getLogger(__name__)

FALLBACK_DECLARATION = MASK_TOKEN
_YES_NO = {"yes", "no"}
_SLOT_RE = re.compile(r"<s(\d+)>$")


@dataclass(frozen=True)
class AnnotationTriple:
    question: str
    answer: str
    full_answer: str


@dataclass(frozen=True)
class DeclarationPair:
    question: str
    declaration: str


def is_valid_declaration(declaration: str) -> bool:
    return declaration.count(MASK_TOKEN) == 1 or declaration == FALLBACK_DECLARATION


def mask_full_answer(triple: AnnotationTriple) -> DeclarationPair:
    """Replace the first whole-word occurrence of the answer with [MASK].

    Yes/no answers always produce the bare-mask fallback, and so does an
    answer that never occurs in the full answer as a whole word.
    """
    answer = triple.answer.strip()
    if not answer:
        raise ValueError("annotation has an empty answer")
    if answer.lower() in _YES_NO:
        return DeclarationPair(triple.question, FALLBACK_DECLARATION)
    pattern = re.compile(rf"(?<!\w){re.escape(answer)}(?!\w)", re.IGNORECASE)
    masked, n = pattern.subn(MASK_TOKEN, triple.full_answer, count=1)
    if n == 0:
        return DeclarationPair(triple.question, FALLBACK_DECLARATION)
    return DeclarationPair(triple.question, masked)


def substitute_answer(declaration: str, answer: str) -> str:
    """Fill the single [MASK] slot with a candidate answer."""
    n = declaration.count(MASK_TOKEN)
    if n != 1:
        raise ValueError(f"declaration must contain exactly one {MASK_TOKEN}, found {n}")
    return declaration.replace(MASK_TOKEN, answer)


# -- template induction -------------------------------------------------------


@dataclass(frozen=True)
class TemplateRule:
    """A question skeleton and the declaration skeleton it maps to.

    Slots are written ``<s0>``, ``<s1>``, ... and every slot referenced by
    the declaration template is bound by the question pattern.
    """

    question_pattern: tuple[str, ...]
    declaration_template: tuple[str, ...]

    @property
    def n_literals(self) -> int:
        return sum(1 for tok in self.question_pattern if not _SLOT_RE.match(tok))

    def match(self, question_tokens: Sequence[str]) -> dict[str, str] | None:
        if len(question_tokens) != len(self.question_pattern):
            return None
        bindings: dict[str, str] = {}
        for pat, tok in zip(self.question_pattern, question_tokens):
            if _SLOT_RE.match(pat):
                if bindings.setdefault(pat, tok) != tok:
                    return None
            elif pat != tok:
                return None
        return bindings

    def apply(self, bindings: dict[str, str]) -> str:
        tokens = [bindings.get(tok, tok) for tok in self.declaration_template]
        return _render_tokens(tokens)


def _render_tokens(tokens: list[str]) -> str:
    return detokenize_text(tokens).replace(MASK_TOKEN.lower(), MASK_TOKEN)


def _induce(group: list[tuple[tuple[str, ...], tuple[str, ...]]], depth: int = 0) -> list[TemplateRule]:
    """Abstract aligned varying tokens into slots; split the group if needed."""
    qs = [q for q, _ in group]
    ds = [d for _, d in group]
    q_len, d_len = len(qs[0]), len(ds[0])
    q_vary = [i for i in range(q_len) if len({q[i] for q in qs}) > 1]
    d_vary = [j for j in range(d_len) if len({d[j] for d in ds}) > 1]

    slot_name = {i: f"<s{k}>" for k, i in enumerate(q_vary)}
    source: dict[int, int] = {}
    for j in d_vary:
        src = next((i for i in q_vary if all(q[i] == d[j] for q, d in group)), None)
        if src is None:
            if depth >= 8:
                return [TemplateRule(q, d) for q, d in dict.fromkeys(group)]
            parts: dict[str, list] = defaultdict(list)
            for q, d in group:
                parts[d[j]].append((q, d))
            rules: list[TemplateRule] = []
            for key in sorted(parts):
                rules.extend(_induce(parts[key], depth + 1))
            return rules
        source[j] = src

    pattern = tuple(slot_name.get(i, qs[0][i]) for i in range(q_len))
    template = tuple(slot_name[source[j]] if j in d_vary else ds[0][j] for j in range(d_len))
    rule = TemplateRule(pattern, template)
    for q, d in group:
        bindings = rule.match(q)
        if bindings is None or rule.apply(bindings) != _render_tokens(list(d)):
            # Abstraction failed to reproduce the group; memorize instead.
            return [TemplateRule(q2, d2) for q2, d2 in dict.fromkeys(group)]
    return [rule]


@dataclass
class ConverterModel:
    """Exact-match memory plus induced template rules plus the fallback."""

    rules: list[TemplateRule]
    exact: dict[str, str]

    def to_dict(self) -> dict:
        return {
            "rules": [
                {"question_pattern": list(r.question_pattern), "declaration_template": list(r.declaration_template)}
                for r in self.rules
            ],
            "exact": self.exact,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConverterModel":
        rules = [
            TemplateRule(tuple(r["question_pattern"]), tuple(r["declaration_template"]))
            for r in d["rules"]
        ]
        return cls(rules=rules, exact=dict(d["exact"]))

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "ConverterModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def fit_converter(pairs: Sequence[DeclarationPair]) -> ConverterModel:
    """Induce template rules from question/declaration pairs.

    Conflicting pairs (same question, different declarations) are resolved
    by majority and logged as warnings.
    """
    if not pairs:
        raise ValueError("cannot fit a converter on an empty pair list")
    for pair in pairs:
        if not is_valid_declaration(pair.declaration):
            raise ValueError(f"invalid declaration in training pairs: {pair.declaration!r}")

    by_question: dict[str, Counter] = defaultdict(Counter)
    for pair in pairs:
        by_question[pair.question][pair.declaration] += 1
    exact: dict[str, str] = {}
    for question, counts in by_question.items():
        if len(counts) > 1:
            logger.warning("conflicting declarations for %r: %s", question, dict(counts))
        # Majority, ties broken lexicographically for determinism.
        exact[question] = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]

    groups: dict[tuple[int, int], list] = defaultdict(list)
    for question, declaration in exact.items():
        q_toks = tuple(tokenize_text(question))
        d_toks = tuple(tokenize_text(declaration))
        groups[(len(q_toks), len(d_toks))].append((q_toks, d_toks))

    rules: list[TemplateRule] = []
    for key in sorted(groups):
        rules.extend(_induce(groups[key]))
    # Most specific first; full ordering fixed for determinism.
    rules.sort(key=lambda r: (-r.n_literals, r.question_pattern, r.declaration_template))
    return ConverterModel(rules=rules, exact=exact)


def convert(question: str, model: ConverterModel) -> str:
    """Deterministic, total question-to-declaration conversion."""
    if question in model.exact:
        return model.exact[question]
    q_toks = tokenize_text(question)
    for rule in model.rules:
        bindings = rule.match(q_toks)
        if bindings is not None:
            return rule.apply(bindings)
    return FALLBACK_DECLARATION


# -- BLEU ---------------------------------------------------------------------


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(candidates: Sequence[str], references: Sequence[str], max_order: int = 4) -> float:
    """Corpus BLEU with clipped n-gram precision, add-one smoothing for n >= 2,
    and the standard brevity penalty."""
    if len(candidates) != len(references):
        raise ValueError(f"length mismatch: {len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ValueError("empty corpus")

    matched = [0] * max_order
    total = [0] * max_order
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        c_toks = tokenize_text(cand)
        r_toks = tokenize_text(ref)
        cand_len += len(c_toks)
        ref_len += len(r_toks)
        for n in range(1, max_order + 1):
            c_counts = _ngram_counts(c_toks, n)
            r_counts = _ngram_counts(r_toks, n)
            total[n - 1] += sum(c_counts.values())
            matched[n - 1] += sum(min(count, r_counts[gram]) for gram, count in c_counts.items())

    if cand_len == 0 or matched[0] == 0:
        return 0.0
    log_precision = 0.0
    for n in range(1, max_order + 1):
        smooth = 0 if n == 1 else 1
        log_precision += math.log((matched[n - 1] + smooth) / (total[n - 1] + smooth)) / max_order
    brevity = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return brevity * math.exp(log_precision)


# -- corpus plumbing ----------------------------------------------------------


def triples_from_records(records) -> list[AnnotationTriple]:
    return [AnnotationTriple(r.question, r.answer, r.full_answer) for r in records]


def build_declaration_pairs(triples: Sequence[AnnotationTriple]) -> list[DeclarationPair]:
    return [mask_full_answer(t) for t in triples]
