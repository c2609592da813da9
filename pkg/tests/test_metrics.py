import math
import random

import pytest
from hypothesis import given, strategies as st

from gsbuild.metrics import (CHAR, WORD, cer, edit_distance, levenshtein, metric_for_language, score_pairs,
                             tokenize, wer)
from oracles import edit_distance_oracle

seqs = st.lists(st.sampled_from("abcde"), max_size=12)


def test_kitten_sitting():
    assert levenshtein("kitten", "sitting") == 3 == edit_distance_oracle("kitten", "sitting")


def test_trivial_distances():
    assert levenshtein("abc", "abc") == 0
    assert levenshtein("", "abcd") == 4
    assert levenshtein("abc", "") == 3


def test_cer_examples():
    assert cer("sitting", "kitten") == pytest.approx(3 / 7)
    assert cer("ab", "abcd") == 1.0
    assert cer("same", "same") == 0.0


def test_wer_examples():
    assert wer("a b c", "a x c") == pytest.approx(1 / 3)
    assert wer("a b c", "a b c") == 0.0
    assert wer("a b c", "") == 1.0


def test_empty_reference():
    assert cer("", "") == 0.0
    assert math.isinf(cer("", "x"))


def test_tokenize():
    assert tokenize("ab c", CHAR).tokens == ("a", "b", "c")
    assert tokenize("ab c", WORD).tokens == ("ab", "c")
    assert tokenize("  ab c  ", WORD).tokens == ("ab", "c")


def test_granularity_mismatch():
    with pytest.raises(ValueError):
        edit_distance(tokenize("ab", CHAR), tokenize("ab", WORD))


def test_thai_scored_by_characters():
    assert metric_for_language("th") == CHAR
    assert metric_for_language("id") == WORD


def test_score_pairs_is_micro_average():
    recs, total = score_pairs([("s1", "abcd", "abce"), ("s2", "ab", "ab")], CHAR)
    assert [r.edits for r in recs] == [1, 0]
    assert total == pytest.approx(1 / 6)


def test_matches_oracle_on_seeded_corpus():
    rng = random.Random(7)
    for _ in range(300):
        a = "".join(rng.choice("abc") for _ in range(rng.randint(0, 8)))
        b = "".join(rng.choice("abc") for _ in range(rng.randint(0, 8)))
        assert levenshtein(a, b) == edit_distance_oracle(a, b)


@given(seqs, seqs)
def test_symmetry(a, b):
    assert levenshtein(a, b) == levenshtein(b, a)


@given(seqs, seqs, seqs)
def test_triangle(a, b, c):
    assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)


@given(seqs, seqs, seqs)
def test_common_suffix_never_hurts(a, b, s):
    assert levenshtein(a + s, b + s) <= levenshtein(a, b)


@given(st.text(alphabet="abc ", min_size=1, max_size=15), st.text(alphabet="abc ", max_size=15))
def test_cer_times_length_is_integral(ref, hyp):
    n = len(tokenize(ref, CHAR).tokens)
    if n == 0:
        return
    x = cer(ref, hyp) * n
    assert abs(x - round(x)) < 1e-9
