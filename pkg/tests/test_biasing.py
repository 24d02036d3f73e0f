import logging
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from calm.biasing import (DEFAULT_COMMON_SIZE, FrequencyTable, assemble_list,
                          build_frequency_table, extract_rare, read_list, training_list, units,
                          write_list)

POOL = ["p", "q", "r", "s", "t", "u", "v", "w"]


def test_word_counts():
    table = build_frequency_table(["a a b"])
    assert table.counts == Counter({"a": 2, "b": 1})
    assert table.total == 3


def test_character_counts_skip_whitespace():
    table = build_frequency_table(["ab a"], unit="character")
    assert table.counts == Counter({"a": 2, "b": 1})


def test_empty_corpus_rejected():
    with pytest.raises(ValueError):
        build_frequency_table([])
    with pytest.raises(ValueError):
        build_frequency_table(["   "])


def test_tie_at_cut_keeps_lexicographically_smaller():
    table = build_frequency_table(["c b a a"])
    assert table.ranked() == ["a", "b", "c"]
    assert table.common_set(2) == {"a", "b"}
    assert table.rare_set(2) == ["c"]


def test_default_common_sizes():
    assert DEFAULT_COMMON_SIZE == {"word": 5000, "character": 1500, "conversational": 1000}


def test_extract_rare():
    table = build_frequency_table(["the cat the dog the cat sat"])
    assert extract_rare("the cat", table, 2) == []
    assert extract_rare("the dog the", table, 2) == ["dog"]
    assert extract_rare("zebra the zebra", table, 2) == ["zebra"]


def test_extract_rare_token_sequences():
    table = FrequencyTable(Counter({1: 5, 2: 3, 3: 1}))
    assert extract_rare([1, 3, 4, 3], table, 2) == [3, 4]


def test_table_round_trip(tmp_path):
    table = build_frequency_table(["x y y z z z"])
    table.save(tmp_path / "freq.tsv")
    assert (tmp_path / "freq.tsv").read_text() == "z\t3\ny\t2\nx\t1\n"
    assert FrequencyTable.load(tmp_path / "freq.tsv").counts == table.counts


def test_units_rejects_unknown_kind():
    with pytest.raises(ValueError):
        units("a", "syllable")


def test_empty_list_when_size_zero():
    assert assemble_list([["ref"]], POOL, 0) == []


def test_one_reference_plus_seeded_draws():
    pool = ["p", "q", "r", "s"]
    got = assemble_list([["ref"]], pool, 3, seed=7)
    idx = np.random.default_rng(7).choice(4, size=2, replace=False)
    assert got == ["ref"] + [pool[i] for i in idx]


def test_two_speakers_concatenated():
    got = assemble_list([["a1"], ["b1"]], POOL, 2, seed=3)
    assert len(got) == 4
    assert got[0] == "a1" and got[2] == "b1"
    assert len(set(got)) == 4


def test_per_utterance_single_block():
    got = assemble_list([["a1"], ["b1", "a1"]], POOL, 5, scope="per-utterance", seed=1)
    assert got[:2] == ["a1", "b1"]
    assert len(got) == 5 and len(set(got)) == 5


def test_too_small_pool_rejected():
    with pytest.raises(ValueError):
        assemble_list([["ref"]], ["p"], 4)


def test_overflow_keeps_all_references(caplog):
    with caplog.at_level(logging.WARNING):
        got = assemble_list([["a", "b", "c"]], POOL, 2)
    assert got == ["a", "b", "c"]
    assert "exceed" in caplog.text


def test_list_io(tmp_path):
    write_list(tmp_path / "l.txt", ["new york", [3, 4]])
    assert read_list(tmp_path / "l.txt") == ["new york", "3 4"]


rare_sets = st.lists(st.lists(st.sampled_from(["a", "b", "c", "d", "p", "q"]), max_size=4),
                     min_size=1, max_size=3)


@settings(max_examples=80, deadline=None)
@given(refs=rare_sets, size=st.integers(0, 6), seed=st.integers(0, 10 ** 6),
       scope=st.sampled_from(["per-speaker", "per-utterance"]))
def test_list_invariants(refs, size, seed, scope):
    pool = POOL + ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"]
    got = assemble_list(refs, pool, size, scope=scope, seed=seed)
    assert len(got) == len(set(got))
    if size == 0:
        assert got == []
        return
    all_refs = {u for r in refs for u in r}
    assert all_refs <= set(got)
    if scope == "per-utterance":
        assert len(got) == max(size, len(all_refs))
    elif all(len(set(r)) <= size for r in refs):
        assert len(got) == size * len(refs)
    again = assemble_list(refs, pool, size, scope=scope, seed=seed)
    assert again == got
    other = assemble_list(refs, pool, size, scope=scope, seed=seed + 1)
    assert all_refs <= set(other)


@settings(max_examples=40, deadline=None)
@given(refs=st.lists(st.sampled_from(POOL), max_size=3, unique=True), seed=st.integers(0, 999))
def test_training_list(refs, seed):
    rng = np.random.default_rng(seed)
    got = training_list(refs, POOL, (2, 6), rng)
    assert got[:len(refs)] == refs
    assert len(got) == len(set(got))
    assert max(2, len(refs)) <= len(got) <= max(6, len(refs))
