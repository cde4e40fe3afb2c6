"""Text <-> graph conversion: fact-sequence serialization, a rule-based extractor
and extraction precision/recall."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Iterable, Optional, Protocol, Sequence

from .core import ClassVocab

SEP = "SEP"
EOF = "EOF"
TASK_PREFIX = "make graph: "

Fact = tuple[str, str, str]


class ParseError(ValueError):
    def __init__(self, msg: str, position: int):
        super().__init__(f"{msg} (token {position})")
        self.position = position


def normalize(s: str) -> str:
    return " ".join(s.lower().split())


def symbolic_graph(facts: Iterable[Sequence[str]]) -> frozenset[Fact]:
    """Set of lowercase-normalized facts."""
    return frozenset(tuple(normalize(x) for x in f) for f in facts)


def serialize(facts: Iterable[Fact]) -> list[str]:
    """Tokens ``h SEP p SEP t EOF`` per fact, facts in lexicographic order."""
    tokens = []
    for fact in sorted(symbolic_graph(facts)):
        if len(fact) != 3:
            raise ValueError(f"fact must have three fields: {fact!r}")
        for i, part in enumerate(fact):
            if not part:
                raise ValueError(f"empty field in fact {fact!r}")
            if SEP.lower() in part.split() or EOF.lower() in part.split():
                raise ValueError(f"field {part!r} contains a reserved token")
            tokens.append(part)
            tokens.append(SEP if i < 2 else EOF)
    return tokens


def to_text(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


def split_words(seq: str) -> list[str]:
    """Regroup a serialized string into field and marker tokens."""
    out, words = [], []
    for w in seq.split():
        if w in (SEP, EOF):
            if words:
                out.append(" ".join(words))
                words = []
            out.append(w)
        else:
            words.append(w)
    if words:
        out.append(" ".join(words))
    return out


def parse(seq: str | Sequence[str]) -> frozenset[Fact]:
    """Inverse of :func:`serialize`; duplicates collapse, order is irrelevant."""
    tokens = split_words(seq) if isinstance(seq, str) else list(seq)
    facts = set()
    fields: list[str] = []
    expect_field = True
    start = 0
    for pos, tok in enumerate(tokens):
        if tok in (SEP, EOF):
            if expect_field:
                raise ParseError(f"empty field before {tok}", pos)
            if tok == EOF:
                if len(fields) != 3:
                    raise ParseError(f"fact starting at token {start} has {len(fields)} field(s), need 3", pos)
                facts.add(tuple(normalize(f) for f in fields))
                fields = []
                start = pos + 1
            elif len(fields) >= 3:
                raise ParseError("fact has more than two SEP separators", pos)
            expect_field = True
        else:
            if not expect_field:
                raise ParseError("two fields without a separator", pos)
            fields.append(tok)
            expect_field = False
    if fields or not expect_field:
        raise ParseError("trailing fact without EOF", len(tokens))
    return frozenset(facts)


class Extractor(Protocol):
    def __call__(self, text: str) -> frozenset[Fact]: ...


_WORD = re.compile(r"[a-z0-9]+(?:['-][a-z0-9]+)*")


def tokenize(text: str) -> list[str]:
    return _WORD.findall(text.lower())


@dataclass
class RuleExtractor:
    """Greedy longest-match lexicon lookup followed by linear fact chaining.

    Objects win ties against predicates of the same length; earlier
    vocabulary entries win within a kind.
    """

    vocab: ClassVocab

    def __post_init__(self):
        self._lex: dict[tuple[str, ...], tuple[str, str]] = {}
        for kind, names in (("obj", self.vocab.object_names), ("pred", self.vocab.predicate_names)):
            for name in names:
                key = tuple(tokenize(name))
                if key and key not in self._lex:
                    self._lex[key] = (kind, normalize(name))
        self._maxlen = max((len(k) for k in self._lex), default=0)

    def lex(self, text: str) -> list[tuple[str, str]]:
        words = tokenize(text)
        out, i = [], 0
        while i < len(words):
            for L in range(min(self._maxlen, len(words) - i), 0, -1):
                hit = self._lex.get(tuple(words[i:i + L]))
                if hit:
                    out.append(hit)
                    i += L
                    break
            else:
                i += 1
        return out

    def __call__(self, text: str) -> frozenset[Fact]:
        facts = set()
        subject: Optional[str] = None
        pending: Optional[tuple[str, str]] = None  # (subject, predicate)
        for kind, name in self.lex(text):
            if kind == "obj":
                if pending is not None and pending[0] != name:
                    facts.add((pending[0], pending[1], name))
                pending = None
                subject = name
            elif subject is not None:
                pending = (subject, name)
        return frozenset(facts)


def extract_rules(text: str, vocab: ClassVocab) -> frozenset[Fact]:
    return RuleExtractor(vocab)(text)


EXTRACTORS = {"rules": RuleExtractor}


def make_extractor(name: str, vocab: ClassVocab) -> Extractor:
    try:
        return EXTRACTORS[name](vocab)
    except KeyError:
        raise ValueError(f"unknown extractor {name!r}; known: {sorted(EXTRACTORS)}") from None


def extraction_prf(predicted: Iterable[Fact], reference: Iterable[Fact]) -> tuple[float, float, float]:
    """Exact-match precision, recall and F1 of fact sets."""
    pred, ref = set(symbolic_graph(predicted)), set(symbolic_graph(reference))
    if not pred and not ref:
        return 1.0, 1.0, 1.0
    hit = len(pred & ref)
    p = hit / len(pred) if pred else 0.0
    r = hit / len(ref) if ref else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def corpus_line(text: str, facts: Optional[Iterable[Fact]] = None) -> str:
    rec = {"text": TASK_PREFIX + text}
    if facts is not None:
        rec["graph"] = to_text(serialize(facts))
    return json.dumps(rec)


def read_corpus_line(line: str) -> tuple[str, Optional[frozenset[Fact]]]:
    rec = json.loads(line)
    text = rec["text"]
    if text.startswith(TASK_PREFIX):
        text = text[len(TASK_PREFIX):]
    ref = parse(rec["graph"]) if rec.get("graph") is not None else None
    return text, ref
