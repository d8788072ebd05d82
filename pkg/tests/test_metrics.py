import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles

from hstory.dataio import EmbeddingTable
from hstory.metrics import bleu, cider, cider_items, cosine, nearest_neighbors

CORPUS = [
    ("the cat sat on the mat", ["the cat is on the mat", "there is a cat on the mat"]),
    ("the dog runs in a big park", ["the dog runs in a park"]),
    ("birds fly", ["two birds fly over the lake", "birds are flying"]),
]
CANDS = [c.split() for c, _ in CORPUS]
REFS = [[r.split() for r in rs] for _, rs in CORPUS]


# ------------------------------------------------------------------- BLEU


def test_bleu_perfect_and_disjoint():
    assert bleu([["a", "b", "c", "d", "e"]], [["a", "b", "c", "d", "e"]]) == 100.0
    assert bleu([["x", "y"]], [["a", "b"]]) == 0.0


def test_bleu_golden_short_candidate():
    # p1 = 3/3, p2 = 2/2, p3 = 1/1, no 4-grams; BP = exp(1 - 4/3)
    assert bleu([["the", "cat", "sat"]], [["the", "cat", "sat", "down"]]) == pytest.approx(71.65313105737893, abs=1e-9)


def test_bleu_matches_brute_force_on_hand_corpus():
    assert abs(bleu(CANDS, REFS) - oracles.bleu(CANDS, REFS)) <= 1e-9
    # by hand: c = r = 15 so BP = 1; p1..p4 = 13/15, 8/12, 4/9, 2/7
    assert bleu(CANDS, REFS) == pytest.approx(100 * (13 / 15 * 8 / 12 * 4 / 9 * 2 / 7) ** 0.25, abs=1e-9)
    assert bleu(CANDS, REFS) == pytest.approx(52.04482684165617, abs=1e-9)


def test_bleu_errors():
    with pytest.raises(ValueError):
        bleu([], [])
    with pytest.raises(ValueError):
        bleu([["a"]], [["a"], ["b"]])


def test_bleu_clips_repeated_words():
    # 7 x "the" against a reference holding two: unigram precision 2/7
    got = bleu([["the"] * 7], [["the", "cat", "is", "on", "the", "mat", "x"]])
    assert got == pytest.approx(oracles.bleu([["the"] * 7], [[["the", "cat", "is", "on", "the", "mat", "x"]]]))


# ------------------------------------------------------------------ CIDEr


def test_cider_identical_single_item_is_ten():
    assert cider([["a", "b", "c"]], [["a", "b", "c"]]) == 10.0


def test_cider_disjoint_is_zero():
    assert cider([["x", "y", "z"], ["p", "q"]], [["a", "b", "c"], ["d", "e"]]) == 0.0


def test_cider_matches_brute_force_on_hand_corpus():
    assert abs(cider(CANDS, REFS) - oracles.cider(CANDS, REFS)) <= 1e-9
    assert cider(CANDS, REFS) == pytest.approx(4.260970972665583, abs=1e-9)


def test_cider_lowercases_and_checks_inputs():
    assert cider([["The", "Cat"], ["a"]], [["the", "cat"], ["b"]]) == cider([["the", "cat"], ["a"]], [["the", "cat"], ["b"]])
    with pytest.raises(ValueError):
        cider([], [])
    with pytest.raises(ValueError):
        cider_items([["a"]], [[]])


# -------------------------------------------------------------- properties

words = st.sampled_from("the a cat dog sat ran on in mat park big small".split())
sentence = st.lists(words, min_size=1, max_size=12)


@settings(max_examples=100, deadline=None)
@given(sentence)
def test_self_scores(c):
    assert bleu([c], [c]) == pytest.approx(100.0, abs=1e-9)
    assert cider([c], [c]) == 10.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(sentence, sentence), min_size=1, max_size=6), st.randoms(use_true_random=False))
def test_permutation_and_duplication_invariance(pairs, rnd):
    cands, refs = [p[0] for p in pairs], [p[1] for p in pairs]
    order = list(range(len(pairs)))
    rnd.shuffle(order)
    b, c = bleu(cands, refs), cider(cands, refs)
    assert bleu([cands[i] for i in order], [refs[i] for i in order]) == pytest.approx(b, abs=1e-9)
    assert cider([cands[i] for i in order], [refs[i] for i in order]) == pytest.approx(c, abs=1e-9)
    assert bleu(cands * 2, refs * 2) == pytest.approx(b, abs=1e-9)
    assert 0.0 <= b <= 100.0 + 1e-9 and c >= 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(sentence, st.integers(0, 11), st.integers(1, 12)), min_size=1, max_size=5))
def test_cider_duplication_invariance_when_idf_is_unchanged(items):
    # candidates are slices of their references, so every candidate n-gram has df >= 1;
    # duplicating every pair then doubles both |items| and df and leaves idf alone
    refs = [r for r, _, _ in items]
    cands = [r[min(i, len(r) - 1):min(i, len(r) - 1) + n] for r, i, n in items]
    assert cider(cands * 2, refs * 2) == pytest.approx(cider(cands, refs), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(sentence, sentence), min_size=1, max_size=5))
def test_random_corpora_match_brute_force(pairs):
    cands, refs = [p[0] for p in pairs], [[p[1]] for p in pairs]
    assert bleu(cands, refs) == pytest.approx(oracles.bleu(cands, refs), abs=1e-9)
    assert cider(cands, refs) == pytest.approx(oracles.cider(cands, refs), abs=1e-9)


# ------------------------------------------------------------- neighbours


def test_cosine_basics():
    assert cosine([3.0, 4.0], [3.0, 4.0]) == pytest.approx(1.0)
    assert cosine([1.0, 0.0], [0.0, 2.0]) == 0.0
    with pytest.raises(ValueError):
        cosine([0.0, 0.0], [1.0, 1.0])


def test_nearest_neighbors_examples():
    t = EmbeddingTable(["a", "b", "c"], np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]))
    hits = nearest_neighbors("a", t, k=3)
    assert hits[0] == ("a", pytest.approx(1.0))
    assert dict(hits)["b"] == 0.0
    assert [tok for tok, _ in nearest_neighbors("a", t, k=2, exclude_query=True)] == ["c", "b"]
    assert nearest_neighbors([2.0, 2.0], t, k=1)[0][0] == "c"


def test_nearest_neighbors_ties_keep_table_order():
    t = EmbeddingTable(["p", "q", "r"], np.array([[1.0, 1.0], [2.0, 2.0], [1.0, 0.0]]))
    assert [tok for tok, _ in nearest_neighbors([1.0, 1.0], t, k=2)] == ["p", "q"]


def test_nearest_neighbors_match_full_sort_oracle():
    rng = np.random.default_rng(0)
    t = EmbeddingTable([f"t{i}" for i in range(50)], rng.normal(size=(50, 8)))
    for qi in range(10):
        q = t.vectors[qi]
        sims = [(-(v @ q) / (np.linalg.norm(v) * np.linalg.norm(q)), i) for i, v in enumerate(t.vectors)]
        expected = [t.tokens[i] for _, i in sorted(sims)[:5]]
        assert [tok for tok, _ in nearest_neighbors(t.tokens[qi], t, k=5)] == expected


def test_nearest_neighbors_errors():
    t = EmbeddingTable(["a", "z"], np.array([[1.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(ValueError, match="'z'"):
        nearest_neighbors("a", t, k=1)
    ok = EmbeddingTable(["a", "b"], np.eye(2))
    with pytest.raises(ValueError):
        nearest_neighbors([0.0, 0.0], ok, k=1)
    with pytest.raises(ValueError):
        nearest_neighbors("a", ok, k=2, exclude_query=True)
    with pytest.raises(KeyError):
        nearest_neighbors("nope", ok, k=1)
