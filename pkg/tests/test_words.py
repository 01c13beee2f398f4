import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from transportlab.words import (
    BernoulliSource, Word, dimer_word, sample_letters, sample_word, substitute,
    substitution_power,
)


def test_thue_morse_images():
    a = Word.from_string("a")
    assert substitute(a, "TM").to_string() == "ab"
    assert substitute(substitute(a, "TM"), "TM").to_string() == "abba"
    assert substitution_power("TM", 3).to_string() == "abbabaab"
    assert substitute(Word.from_string("b"), "TM").to_string() == "ba"


def test_period_doubling_images():
    assert substitution_power("PD", 1).to_string() == "ab"
    assert substitution_power("PD", 2).to_string() == "abaa"


def test_unknown_rule():
    with pytest.raises(ValueError):
        substitute(Word.from_string("a"), "FIB")


@pytest.mark.parametrize("rule", ["TM", "PD"])
def test_length_law(rule):
    w = Word.from_string("a")
    for k in range(1, 26):
        w = substitute(w, rule)
        assert len(w) == 2 ** k


def test_tm_factors_are_contained():
    big = substitution_power("TM", 10).to_string()
    small = [substitution_power("TM", k, letter).to_string()
             for k in range(11) for letter in (0, 1)]
    for n in range(1, 9):
        for i in range(len(big) - n + 1):
            f = big[i:i + n]
            assert any(f in s for s in small)


def test_p_must_be_interior():
    with pytest.raises(ValueError):
        BernoulliSource(1.0, seed=1)
    with pytest.raises(ValueError):
        BernoulliSource(0.0, seed=1)


def test_sampling_is_deterministic():
    src = BernoulliSource(0.5, seed=1, stream_id=0)
    assert sample_word(src, 0, 8) == sample_word(src, 0, 8)
    other = BernoulliSource(0.5, seed=1, stream_id=1)
    assert not np.array_equal(sample_letters(src, 0, 256), sample_letters(other, 0, 256))


@given(start=st.integers(-10 ** 6, 0), extra=st.integers(1, 300), cut=st.integers(0, 299))
@settings(max_examples=60, deadline=None)
def test_counter_keyed_by_index(start, extra, cut):
    src = BernoulliSource(0.3, seed=77, stream_id=5)
    whole = sample_letters(src, start, start + extra)
    cut = min(cut, extra - 1)
    part = sample_letters(src, start + cut, start + extra)
    assert np.array_equal(whole[cut:], part)


def test_empty_window_rejected():
    src = BernoulliSource(0.5, seed=1)
    with pytest.raises(ValueError):
        sample_word(src, 3, 3)


def test_origin_index_tracks_window():
    src = BernoulliSource(0.5, seed=9)
    w = sample_word(src, -5, 5)
    assert w.origin_index == 5
    assert np.array_equal(w.cells(0, 5), sample_letters(src, 0, 5))


def test_bernoulli_frequency():
    # letter 1 has probability 1 - p; 3 sigma band should hold for ~99% of seeds
    n = 10 ** 5
    band = 3 * np.sqrt(0.25 / n)
    hits = 0
    for seed in range(100):
        freq = sample_letters(BernoulliSource(0.5, seed=seed), 0, n).mean()
        hits += abs(freq - 0.5) <= band
    assert hits >= 97


def test_letter_zero_has_probability_p():
    x = sample_letters(BernoulliSource(0.2, seed=3), 0, 200000)
    assert abs((x == 0).mean() - 0.2) < 0.005


def test_dimer_pairs():
    src = BernoulliSource(0.5, seed=4)
    pairs = sample_letters(src, 0, 3)
    w = dimer_word(src, 3)
    assert w.to_string("01") == "".join(str(b) * 2 for b in pairs)
    big = dimer_word(src, 10 ** 4).letters
    assert np.array_equal(big[0::2], big[1::2])


def test_string_round_trip():
    w = Word.from_string("0110100", origin_index=2)
    assert Word.from_string(w.to_string("ab"), origin_index=2) == w
    with pytest.raises(ValueError):
        Word.from_string("abc")
    with pytest.raises(ValueError):
        Word.from_string("01", origin_index=2)


def test_source_triple():
    src = BernoulliSource(0.25, seed=12, stream_id=3)
    assert BernoulliSource.from_triple(src.to_triple()) == src
