from __future__ import annotations

import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recinstruct.catalog import Catalog, InteractionRecord, ItemRecord, build_sequences, leave_one_out_split
from recinstruct.matcher import (
    CandidatePool,
    PoolError,
    PoolKind,
    RetrieverIndex,
    build_retriever_index,
    retrieve_hard_negatives,
    sample_large_pool,
    sample_uniform_pool,
    title_terms,
)


def _catalog(titles: dict[str, str]) -> Catalog:
    return Catalog({i: ItemRecord(i, t, ()) for i, t in titles.items()}, ())


def brute_force_hard_negatives(sequences, titles, window, history, target, n, alpha):
    """Score every item from scratch in plain Python and take the top n."""
    co = Counter()
    for seq in sequences:
        for i in range(len(seq)):
            for j in range(i + 1, min(len(seq), i + 1 + window)):
                if seq[i] != seq[j]:
                    co[seq[i], seq[j]] += 1
                    co[seq[j], seq[i]] += 1
    items = sorted(titles)
    docs = {i: Counter(title_terms(titles[i])) for i in items}
    df = Counter(t for d in docs.values() for t in d)
    vec = {i: {t: tf * math.log(len(items) / df[t]) for t, tf in d.items()} for i, d in docs.items()}
    hist = [h for h in history if h in titles]
    mean = Counter()
    for h in hist:
        for t, w in vec[h].items():
            mean[t] += w / len(hist)
    mean_norm = math.sqrt(sum(w * w for w in mean.values()))
    co_sum = {i: sum(co[i, h] for h in hist) for i in items}
    top = max((co_sum[i] for i in items if i not in hist), default=0)

    def score(i):
        c = co_sum[i] / top if top > 0 else 0.0
        norm = math.sqrt(sum(w * w for w in vec[i].values()))
        dot = sum(w * mean.get(t, 0.0) for t, w in vec[i].items())
        cos = dot / (norm * mean_norm) if norm * mean_norm > 0 else 0.0
        return alpha * c + (1 - alpha) * cos

    scored = {i: round(score(i), 9) for i in items}
    ranked = sorted((i for i in items if scored[i] > 0 and i not in hist and i != target),
                    key=lambda i: (-scored[i], i))
    return ranked[:n]


# -- uniform pools -----------------------------------------------------------


def test_forced_pool():
    items = [f"i{k:02d}" for k in range(11)]
    pool = sample_uniform_pool(items, ["i00"], "i01", 9, seed=4)
    assert sorted(pool.negatives) == items[2:]
    assert pool.pool_kind is PoolKind.UniformRandom
    assert pool.size == 10


def test_uniform_pool_deterministic_and_clean():
    items = [f"i{k:02d}" for k in range(50)]
    a = sample_uniform_pool(items, ["i03", "i04"], "i05", 9, seed=11)
    assert a == sample_uniform_pool(items, ["i03", "i04"], "i05", 9, seed=11)
    assert not {"i03", "i04", "i05"} & set(a.negatives)
    assert len(set(a.negatives)) == 9


def test_uniform_pool_too_small():
    with pytest.raises(PoolError):
        sample_uniform_pool(["a", "b", "c"], ["a"], "b", 9, seed=0)


def test_pool_invariants_enforced():
    with pytest.raises(PoolError):
        CandidatePool("a", ("a", "b"), PoolKind.UniformRandom, 0)
    with pytest.raises(PoolError):
        CandidatePool("a", ("b", "b"), PoolKind.UniformRandom, 0)


def test_uniform_inclusion_frequency():
    eligible = [f"i{k:02d}" for k in range(20)]
    items = eligible + ["hist", "target"]
    draws = 50_000
    counts = Counter()
    for seed in range(draws):
        counts.update(sample_uniform_pool(sorted(items), ["hist"], "target", 9, seed).negatives)
    assert set(counts) == set(eligible)
    for item in eligible:
        assert abs(counts[item] / draws - 9 / 20) <= 0.02


def test_large_pool():
    items = [f"i{k:03d}" for k in range(150)]
    pool = sample_large_pool(items, ["i000", "i001"], "i002", seed=2)
    assert pool.size == 100
    assert pool.pool_kind is PoolKind.LargeUniform
    assert not {"i000", "i001", "i002"} & set(pool.negatives)
    assert pool == sample_large_pool(items, ["i000", "i001"], "i002", seed=2)


# -- retriever index ---------------------------------------------------------


def test_pair_counts_symmetric():
    cat = _catalog({"a": "alpha", "b": "beta", "c": "gamma", "d": "delta"})
    index = build_retriever_index([["a", "b"], ["c", "d"]], cat)
    assert index.count("a", "b") == index.count("b", "a") == 1
    assert index.count("a", "c") == 0
    assert index.count("b", "d") == 0


def test_window_limits_pairs():
    cat = _catalog({k: k for k in "abcdefg"})
    index = build_retriever_index([list("abcdefg")], cat, window=2)
    assert index.count("a", "c") == 1
    assert index.count("a", "d") == 0


def test_shared_term_has_zero_idf():
    cat = _catalog({"a": "Game Alpha", "b": "Game Beta", "c": "Game Gamma"})
    index = build_retriever_index([], cat)
    assert all(index.term_weights[i]["game"] == 0.0 for i in "abc")
    assert index.term_weights["a"]["alpha"] == pytest.approx(math.log(3))
    assert all(w >= 0 for ws in index.term_weights.values() for w in ws.values())


def test_index_round_trip(tmp_path):
    cat = _catalog({"a": "Space Alpha", "b": "Space Beta", "c": "Piano"})
    index = build_retriever_index([["a", "b", "c"]], cat)
    index.save(tmp_path / "idx.jsonl")
    back = RetrieverIndex.load(tmp_path / "idx.jsonl")
    assert np.array_equal(back.scores(["a"]), index.scores(["a"]))


def test_index_ignores_held_out_events():
    items = {k: ItemRecord(k, f"title {k}", ()) for k in "abcdefgh"}
    base = [("u", "a", 1), ("u", "b", 2), ("u", "c", 3), ("u", "d", 4), ("v", "e", 1), ("v", "f", 2), ("v", "g", 3)]

    def index_for(rows):
        cat = Catalog(items, tuple(InteractionRecord(u, i, t) for u, i, t in rows))
        split = leave_one_out_split(build_sequences(cat))
        return build_retriever_index(split.train_sequences(), cat)

    # swap u's test item (d) for h: the index must not move
    perturbed = [r if r != ("u", "d", 4) else ("u", "h", 4) for r in base]
    assert index_for(base).cooccurrence == index_for(perturbed).cooccurrence
    assert "d" not in index_for(base).cooccurrence


# -- hard negatives ----------------------------------------------------------


def test_dominance():
    cat = _catalog({
        "h1": "Zombie Horror Night", "h2": "Zombie Horror Day",
        "near": "Zombie Horror Dawn", "far": "Piano Sonata", "t": "Target",
        "x": "Filler One", "y": "Filler Two",
    })
    index = build_retriever_index([["h1", "near", "h2"], ["far", "x"]], cat)
    pool = retrieve_hard_negatives(index, ["h1", "h2"], "t", n=2)
    assert pool.negatives[0] == "near"
    assert pool.pool_kind is PoolKind.HardRetrieved


def test_alpha_one_is_cooccurrence_order():
    titles = {k: f"Item {k}" for k in "abcdef"}
    seqs = [["h", "a"]] * 3 + [["h", "b"]] * 2 + [["h", "c"]]
    cat = _catalog({**titles, "h": "Item h"})
    index = build_retriever_index(seqs, cat)
    pool = retrieve_hard_negatives(index, ["h"], "f", n=3, alpha=1.0)
    assert pool.negatives == ("a", "b", "c")


def test_three_item_toy_index():
    cat = _catalog({"h": "red apple", "a": "red apple pie", "b": "green pear", "c": "red wine"})
    seqs = [["h", "b"], ["h", "c", "b"]]
    index = build_retriever_index(seqs, cat)
    expected = brute_force_hard_negatives(seqs, {i: r.title for i, r in cat.items.items()}, 5, ["h"], "zz", 2, 0.5)
    assert list(retrieve_hard_negatives(index, ["h"], "zz", n=2).negatives) == expected


def test_padding_is_flagged():
    cat = _catalog({"h": "alpha", "a": "alpha beta", "b": "gamma", "c": "delta", "t": "epsilon"})
    index = build_retriever_index([], cat)
    pool = retrieve_hard_negatives(index, ["h"], "t", n=3)
    assert pool.negatives[0] == "a"
    assert pool.padded == 2
    assert set(pool.negatives[1:]) == {"b", "c"}


def test_hard_negatives_need_history():
    index = build_retriever_index([], _catalog({"a": "x"}))
    with pytest.raises(PoolError):
        retrieve_hard_negatives(index, [], "a")


_VOCAB = ["zombie", "horror", "piano", "jazz", "racing", "turbo", "mouse", "pro", "deluxe"]


@st.composite
def toy_world(draw):
    n_items = draw(st.integers(5, 40))
    items = [f"i{k:02d}" for k in range(n_items)]
    titles = {i: " ".join(draw(st.lists(st.sampled_from(_VOCAB), min_size=1, max_size=4))) for i in items}
    seqs = draw(st.lists(st.lists(st.sampled_from(items), min_size=1, max_size=8), max_size=12))
    history = draw(st.lists(st.sampled_from(items), min_size=1, max_size=4, unique=True))
    target = draw(st.sampled_from(items))
    alpha = draw(st.sampled_from([0.0, 0.25, 0.5, 1.0]))
    window = draw(st.integers(1, 5))
    return titles, seqs, history, target, alpha, window


@settings(max_examples=200, deadline=None)
@given(toy_world())
def test_hard_negatives_match_brute_force(world):
    titles, seqs, history, target, alpha, window = world
    if target in history:
        return
    n = min(9, len(titles) - len(history) - 1)
    if n < 1:
        return
    expected = brute_force_hard_negatives(seqs, titles, window, history, target, n, alpha)
    index = build_retriever_index(seqs, _catalog(titles), window)
    pool = retrieve_hard_negatives(index, history, target, n, alpha=alpha)
    assert list(pool.negatives[: len(expected)]) == expected
    assert pool.padded == n - len(expected)
