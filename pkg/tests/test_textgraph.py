import json
import random

import pytest
from hypothesis import given, settings, strategies as st

from scenetext.core import ClassVocab
from scenetext.textgraph import (
    ParseError, RuleExtractor, TASK_PREFIX, corpus_line, extract_rules, extraction_prf, parse,
    read_corpus_line, serialize, symbolic_graph, to_text,
)

# Table 1: input sentence, reference graph and two extractor outputs
SENTENCE = "man standing with child on ski slope"
RG = {("child", "on", "ski slope"), ("man", "on", "ski slope"), ("man", "standing with", "child")}
T5_10 = {("man", "standing with", "child"), ("child", "on", "ski slope")}
COPYNET_10 = {("man", "standing with", "child"), ("child", "on", "slope")}


@pytest.fixture
def vocab():
    return ClassVocab(("man", "child", "ski slope"), ("standing with", "on"))


def test_serialize_single():
    assert to_text(serialize({("child", "on", "ski slope")})) == "child SEP on SEP ski slope EOF"


def test_serialize_empty_and_order():
    assert serialize(set()) == []
    s = to_text(serialize({("man", "on", "ski slope"), ("child", "on", "ski slope")}))
    assert s == "child SEP on SEP ski slope EOF man SEP on SEP ski slope EOF"


def test_serialize_rejects_empty_field():
    with pytest.raises(ValueError):
        serialize({("a", "", "b")})


def test_parse_errors_are_positioned():
    with pytest.raises(ParseError) as e:
        parse("a SEP b EOF")
    assert e.value.position == 3
    with pytest.raises(ParseError):
        parse("a SEP b SEP c")  # trailing fragment
    with pytest.raises(ParseError):
        parse("a SEP b SEP c SEP d EOF")
    with pytest.raises(ParseError):
        parse("SEP b SEP c EOF")


def test_parse_dedups():
    assert parse("a SEP b SEP c EOF a SEP b SEP c EOF") == {("a", "b", "c")}


words = st.lists(st.sampled_from(["man", "ski", "slope", "red", "on", "of", "top", "a1"]), min_size=1, max_size=3)
field = words.map(" ".join)


@settings(max_examples=200, deadline=None)
@given(st.sets(st.tuples(field, field, field), max_size=6))
def test_round_trip_property(facts):
    assert parse(serialize(facts)) == symbolic_graph(facts)
    assert parse(to_text(serialize(facts))) == symbolic_graph(facts)


def test_round_trip_thousand_random_graphs():
    rng = random.Random(0)
    for _ in range(1000):
        vocab = ["".join(rng.choice("abcdefgh") for _ in range(rng.randint(1, 6))) for _ in range(8)]
        phrase = lambda: " ".join(rng.choice(vocab) for _ in range(rng.randint(1, 3)))
        g = {(phrase(), phrase(), phrase()) for _ in range(rng.randint(0, 6))}
        assert parse(serialize(g)) == symbolic_graph(g)


def test_extract_table1_sentence(vocab):
    assert extract_rules(SENTENCE, vocab) == T5_10


def test_extract_empty(vocab):
    assert extract_rules("", vocab) == frozenset()
    assert extract_rules("nothing to see here", vocab) == frozenset()


def test_extract_longest_match():
    v = ClassVocab(("ski", "ski slope", "man"), ("on", "on top of"))
    assert extract_rules("a man on top of a ski slope", v) == {("man", "on top of", "ski slope")}


def test_extract_never_hallucinates(vocab):
    rng = random.Random(1)
    pool = ["man", "child", "ski", "slope", "on", "standing", "with", "the", "a", "and"]
    for _ in range(300):
        text = " ".join(rng.choice(pool) for _ in range(rng.randint(0, 12)))
        for h, p, t in extract_rules(text, vocab):
            assert h in vocab.object_names and t in vocab.object_names
            assert p in vocab.predicate_names


def test_prf_identity():
    assert extraction_prf(RG, RG) == (1.0, 1.0, 1.0)


def test_prf_table1_rows():
    p, r, f = extraction_prf(T5_10, RG)
    assert abs(p - 1.0) < 1e-9 and abs(r - 0.666667) < 1e-6 and abs(f - 0.8) < 1e-9
    p, r, f = extraction_prf(COPYNET_10, RG)
    assert abs(p - 0.5) < 1e-9 and abs(r - 0.333333) < 1e-6 and abs(f - 0.4) < 1e-9


def test_prf_empty_cases():
    assert extraction_prf(set(), set()) == (1.0, 1.0, 1.0)
    assert extraction_prf(set(), RG) == (0.0, 0.0, 0.0)


@settings(max_examples=100, deadline=None)
@given(st.sets(st.tuples(st.sampled_from("abc"), st.sampled_from("pq"), st.sampled_from("abc")), max_size=5),
       st.sets(st.tuples(st.sampled_from("abc"), st.sampled_from("pq"), st.sampled_from("abc")), max_size=5))
def test_prf_swap_exchanges_p_and_r(a, b):
    p1, r1, f1 = extraction_prf(a, b)
    p2, r2, f2 = extraction_prf(b, a)
    if a and b:
        assert (p1, r1) == (r2, p2) and f1 == pytest.approx(f2)


def test_corpus_line_round_trip(vocab):
    line = corpus_line(SENTENCE, RG)
    rec = json.loads(line)
    assert rec["text"].startswith(TASK_PREFIX)
    text, ref = read_corpus_line(line)
    assert text == SENTENCE and ref == RG
    assert read_corpus_line(corpus_line(SENTENCE))[1] is None


def test_extractor_is_pluggable(vocab):
    ex = RuleExtractor(vocab)
    assert ex(SENTENCE) == T5_10
