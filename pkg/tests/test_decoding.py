import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from calm.config import DecodeConfig
from calm.decoding import (apply_biasing_weight, beam_decode, collapse, decode, expand_dynamic,
                           greedy_decode, write_hypotheses)
from calm.model import PosteriorGrid, joint_softmax

from oracles import best_labeling

NEW, YORK = 7, 8


def one_hot_grid(path, V):
    return np.eye(V)[path]


def test_greedy_all_blank():
    hyp = greedy_decode(one_hot_grid([0, 0, 0], 3))
    assert hyp.tokens == [] and hyp.surface == []


def test_greedy_collapse():
    hyp = greedy_decode(one_hot_grid([0, 1, 1, 0, 2], 3))
    assert hyp.tokens == [1, 2]
    assert hyp.score == 0.0


def test_greedy_ties_pick_lowest_index():
    hyp = greedy_decode(np.array([[0.25, 0.25, 0.5], [0.5, 0.5, 0.0]]))
    assert hyp.tokens == [2]


def test_greedy_expands_dynamic_phrase():
    M = 10
    phrases = [[3], [NEW, YORK]]
    grid = PosteriorGrid(one_hot_grid([0, 2, 0, M + 1, 0, 5], M + 2), M, 2)
    hyp = greedy_decode(grid, phrases)
    assert hyp.tokens == [2, M + 1, 5]
    assert hyp.surface == [2, NEW, YORK, 5]


def test_expand_dynamic_cases():
    M = 10
    assert expand_dynamic([1, 2, 3], [[4]], M) == [1, 2, 3]
    assert expand_dynamic([M], [[NEW, YORK]], M) == [NEW, YORK]
    assert expand_dynamic([1, M + 1, 3], [[4], [NEW, YORK]], M) == [1, NEW, YORK, 3]
    with pytest.raises(ValueError):
        expand_dynamic([M + 2], [[4], [5]], M)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 13), max_size=10))
def test_expand_dynamic_idempotent(tokens):
    M, phrases = 10, [[1, 2], [3], [4, 5, 6], [9]]
    once = expand_dynamic(tokens, phrases, M)
    assert expand_dynamic(once, phrases, M) == once
    assert all(t < M for t in once)


def test_collapse():
    assert collapse([0, 1, 1, 0, 1, 2, 2]) == [1, 1, 2]


def test_beam_on_degenerate_grid_equals_greedy():
    rng = np.random.default_rng(0)
    for _ in range(20):
        path = rng.integers(0, 4, size=int(rng.integers(1, 7)))
        grid = one_hot_grid(path, 4)
        for size in (1, 3):
            best = beam_decode(grid, DecodeConfig(mode="beam", beam_size=size))[0]
            assert best.tokens == greedy_decode(grid).tokens


def test_beam_size_one_two_modal_grid():
    grid = np.array([[0.0, 0.55, 0.45], [0.0, 0.55, 0.45]])
    hyps = beam_decode(grid, DecodeConfig(mode="beam", beam_size=1))
    assert len(hyps) == 1
    assert hyps[0].tokens == [1]
    assert hyps[0].score == pytest.approx(math.log(0.55 * 0.55), abs=1e-12)


def test_beam_prefers_prefix_mass_over_best_path():
    # best single path is all blank (0.16) but label [1] has mass 0.09 + 2 * 0.12
    grid = np.array([[0.4, 0.35, 0.25], [0.4, 0.35, 0.25]])
    assert greedy_decode(grid).tokens == []
    best = beam_decode(grid, DecodeConfig(mode="beam", beam_size=10))[0]
    assert best.tokens == [1]
    assert best.score == pytest.approx(math.log(0.35 ** 2 + 2 * 0.4 * 0.35), abs=1e-12)


def test_exhaustive_beam_matches_enumeration():
    rng = np.random.default_rng(1)
    for T in range(1, 5):
        for V in (2, 3):
            for _ in range(25):
                logits = 2 * rng.standard_normal((T, V))
                grid = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
                best = beam_decode(grid, DecodeConfig(mode="beam", beam_size=V ** T))[0]
                label, p = best_labeling(grid)
                assert tuple(best.tokens) == label
                assert best.score == pytest.approx(math.log(p), abs=1e-12)


def test_beam_scores_sorted_and_non_positive():
    rng = np.random.default_rng(2)
    grid = rng.dirichlet(np.ones(4), size=5)
    hyps = beam_decode(grid, DecodeConfig(mode="beam", beam_size=6))
    scores = [h.score for h in hyps]
    assert scores == sorted(scores, reverse=True)
    assert all(s <= 0 for s in scores)


def test_beam_ties_broken_lexicographically():
    grid = np.array([[0.0, 0.5, 0.5]])
    hyps = beam_decode(grid, DecodeConfig(mode="beam", beam_size=2))
    assert [h.tokens for h in hyps] == [[1], [2]]


def test_decode_dispatch():
    grid = np.array([[0.4, 0.35, 0.25], [0.4, 0.35, 0.25]])
    assert decode(grid, DecodeConfig(mode="greedy")).tokens == []
    assert decode(grid, DecodeConfig(mode="beam", beam_size=4)).tokens == [1]


def test_biasing_weight_matches_score_offset():
    rng = np.random.default_rng(3)
    static = torch.as_tensor(rng.standard_normal((6, 5)))
    dynamic = torch.as_tensor(rng.standard_normal((6, 3)))
    base = joint_softmax(static, dynamic, 1.0).numpy()
    for mu in (0.1, 0.5, 1.0):
        np.testing.assert_allclose(apply_biasing_weight(base, 5, mu),
                                   joint_softmax(static, dynamic, mu).numpy(), atol=1e-14)


def count_dynamic(grid, M):
    phrases = [[1]] * (grid.shape[1] - M)
    return sum(t >= M for t in greedy_decode(grid, phrases, M).tokens)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1))
def test_lower_mu_shrinks_dynamic_argmax_frames(seed):
    rng = np.random.default_rng(seed)
    M = 4
    static = torch.as_tensor(2 * rng.standard_normal((8, M)))
    dynamic = torch.as_tensor(2 * rng.standard_normal((8, 3)))
    frames = [set(np.flatnonzero(joint_softmax(static, dynamic, mu).numpy().argmax(1) >= M))
              for mu in (0.1, 0.3, 0.5, 0.8, 1.0)]
    for lo, hi in zip(frames, frames[1:]):
        assert lo <= hi


def test_lower_mu_can_split_a_dynamic_run():
    # a run of one dynamic token whose middle frame flips to a static token
    # yields two dynamic tokens, so token counts are not monotone in mu
    M = 3
    static = torch.tensor([[0.0, -9, -9], [-9, 1.0, -9], [0.0, -9, -9]], dtype=torch.float64)
    dynamic = torch.tensor([[3.0], [2.0], [3.0]], dtype=torch.float64)
    assert count_dynamic(joint_softmax(static, dynamic, 1.0).numpy(), M) == 1
    assert count_dynamic(joint_softmax(static, dynamic, 0.1).numpy(), M) == 2


def test_write_hypotheses(tmp_path):
    out = tmp_path / "hyp.txt"
    write_hypotheses(out, [("u1", ["a", "b"]), ("u2", [])])
    assert out.read_text() == "u1\ta b\nu2\t\n"
    write_hypotheses(out, [])
    assert out.read_text() == ""
