"""Candidate pools: uniform negatives, retrieved hard negatives, 100-item pools."""

from __future__ import annotations

import enum
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from . import jsonl
from .catalog import Catalog, UserSequence

_TOKEN = re.compile(r"[a-z0-9]+")
# scores are rounded before ordering so float noise never decides a tie
SCORE_DECIMALS = 12


class PoolError(Exception):
    pass


class PoolKind(enum.Enum):
    UniformRandom = "UniformRandom"
    HardRetrieved = "HardRetrieved"
    LargeUniform = "LargeUniform"


@dataclass(frozen=True)
class CandidatePool:
    target_item_id: str
    negatives: tuple[str, ...]
    pool_kind: PoolKind
    seed: int
    padded: int = 0

    def __post_init__(self):
        object.__setattr__(self, "negatives", tuple(self.negatives))
        if self.target_item_id in self.negatives:
            raise PoolError("target must not be among the negatives")
        if len(set(self.negatives)) != len(self.negatives):
            raise PoolError("negatives must be pairwise distinct")

    @property
    def size(self) -> int:
        return len(self.negatives) + 1

    def as_dict(self) -> dict:
        return {
            "target": self.target_item_id,
            "negatives": list(self.negatives),
            "pool_kind": self.pool_kind.value,
            "seed": self.seed,
            "padded": self.padded,
        }


def _item_list(items: Catalog | Sequence[str]) -> Sequence[str]:
    if isinstance(items, Catalog):
        return sorted(items.items)
    return items


def _eligible(items: Catalog | Sequence[str], history: Iterable[str], target: str) -> list[str]:
    excluded = set(history)
    excluded.add(target)
    return [i for i in _item_list(items) if i not in excluded]


def sample_uniform_pool(
    items: Catalog | Sequence[str],
    history: Iterable[str],
    target: str,
    n: int = 9,
    seed: int = 0,
    *,
    kind: PoolKind = PoolKind.UniformRandom,
) -> CandidatePool:
    """``n`` distinct negatives drawn uniformly without replacement.

    Items in ``history`` and the target itself are never drawn. ``items`` is a
    catalog or an already sorted list of item ids.
    """
    eligible = _eligible(items, history, target)
    if len(eligible) < n:
        raise PoolError(f"only {len(eligible)} eligible items for {n} negatives")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(eligible), size=n, replace=False)
    return CandidatePool(target, tuple(eligible[i] for i in idx), kind, seed)


def sample_large_pool(
    items: Catalog | Sequence[str], history: Iterable[str], target: str, n: int = 99, seed: int = 0
) -> CandidatePool:
    return sample_uniform_pool(items, history, target, n, seed, kind=PoolKind.LargeUniform)


# -- retriever ---------------------------------------------------------------


def title_terms(title: str) -> list[str]:
    return _TOKEN.findall(title.lower())


@dataclass
class RetrieverIndex:
    """Windowed co-occurrence counts plus TF-IDF title vectors."""

    item_ids: list[str]
    cooccurrence: dict[str, dict[str, int]]
    term_weights: dict[str, dict[str, float]]
    window: int = 5
    _pos: dict[str, int] = field(default_factory=dict, repr=False)
    _co: sparse.csr_matrix | None = field(default=None, repr=False)
    _tfidf: sparse.csr_matrix | None = field(default=None, repr=False)

    def __post_init__(self):
        self._pos = {item: i for i, item in enumerate(self.item_ids)}
        n = len(self.item_ids)
        rows, cols, vals = [], [], []
        for a, nbrs in self.cooccurrence.items():
            for b, c in nbrs.items():
                rows.append(self._pos[a])
                cols.append(self._pos[b])
                vals.append(c)
        self._co = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n), dtype=np.float64)
        vocab = sorted({t for w in self.term_weights.values() for t in w})
        tpos = {t: j for j, t in enumerate(vocab)}
        rows, cols, vals = [], [], []
        for item, weights in self.term_weights.items():
            for t, w in weights.items():
                rows.append(self._pos[item])
                cols.append(tpos[t])
                vals.append(w)
        self._tfidf = sparse.csr_matrix((vals, (rows, cols)), shape=(n, len(vocab)), dtype=np.float64)

    def count(self, a: str, b: str) -> int:
        return self.cooccurrence.get(a, {}).get(b, 0)

    def scores(self, history: Sequence[str], alpha: float = 0.5) -> np.ndarray:
        """Blended score of every indexed item against ``history``.

        Co-occurrence is summed over history events and divided by its
        maximum over items outside the history; title similarity is the
        cosine between an item's TF-IDF vector and the mean history vector.
        """
        hist = [self._pos[h] for h in history if h in self._pos]
        n = len(self.item_ids)
        if not hist:
            return np.zeros(n)
        co = np.asarray(self._co[:, hist].sum(axis=1)).ravel()
        outside = np.ones(n, dtype=bool)
        outside[hist] = False
        top = co[outside].max() if outside.any() else 0.0
        co_norm = co / top if top > 0 else np.zeros(n)
        mean = np.asarray(self._tfidf[hist].mean(axis=0)).ravel()
        mean_norm = np.linalg.norm(mean)
        dots = self._tfidf @ mean
        row_norms = np.sqrt(np.asarray(self._tfidf.multiply(self._tfidf).sum(axis=1)).ravel())
        denom = row_norms * mean_norm
        cos = np.divide(dots, denom, out=np.zeros(n), where=denom > 0)
        return alpha * co_norm + (1.0 - alpha) * cos

    def save(self, path: str | Path) -> None:
        rows = (
            {"item": i, "cooc": self.cooccurrence.get(i, {}), "terms": self.term_weights.get(i, {})}
            for i in self.item_ids
        )
        jsonl.write_jsonl(path, rows, {"kind": "retriever-index", "window": self.window})

    @classmethod
    def load(cls, path: str | Path) -> RetrieverIndex:
        header, rows = jsonl.read_jsonl(path)
        return cls(
            [r["item"] for r in rows],
            {r["item"]: r["cooc"] for r in rows if r["cooc"]},
            {r["item"]: r["terms"] for r in rows},
            (header or {}).get("window", 5),
        )


def build_retriever_index(
    training_sequences: Iterable[UserSequence | Sequence[str]],
    catalog: Catalog,
    window: int = 5,
) -> RetrieverIndex:
    """Count item pairs at most ``window`` positions apart; weight title terms.

    Pass training prefixes only; held-out events must not reach the index.
    """
    counts: dict[str, Counter] = defaultdict(Counter)
    for seq in training_sequences:
        ids = seq.item_ids if isinstance(seq, UserSequence) else list(seq)
        for i, a in enumerate(ids):
            for b in ids[i + 1 : i + 1 + window]:
                if a == b:
                    continue
                counts[a][b] += 1
                counts[b][a] += 1
    item_ids = sorted(catalog.items)
    docs = {i: Counter(title_terms(catalog.items[i].title)) for i in item_ids}
    df = Counter(t for terms in docs.values() for t in terms)
    n_docs = len(item_ids)
    weights = {
        i: {t: tf * math.log(n_docs / df[t]) for t, tf in sorted(terms.items())}
        for i, terms in docs.items()
    }
    return RetrieverIndex(item_ids, {a: dict(c) for a, c in counts.items()}, weights, window)


def retrieve_hard_negatives(
    index: RetrieverIndex,
    history: Sequence[str],
    target: str,
    n: int = 9,
    *,
    alpha: float = 0.5,
    seed: int = 0,
) -> CandidatePool:
    """Top-``n`` eligible items by blended score, ties broken by item id.

    Items scoring zero are never retrieved; a short list is padded with
    uniform negatives and the pad count recorded on the pool.
    """
    if not history:
        raise PoolError("hard-negative retrieval needs a non-empty history")
    scores = np.round(index.scores(history, alpha), SCORE_DECIMALS)
    excluded = set(history) | {target}
    ranked = sorted(
        (i for i, s in zip(index.item_ids, scores) if s > 0 and i not in excluded),
        key=lambda i: (-scores[index._pos[i]], i),
    )
    chosen = ranked[:n]
    padded = n - len(chosen)
    if padded:
        taken = excluded | set(chosen)
        rest = [i for i in index.item_ids if i not in taken]
        if len(rest) < padded:
            raise PoolError(f"cannot pad hard negatives: only {len(rest)} items left")
        rng = np.random.default_rng(seed)
        chosen += [rest[i] for i in rng.choice(len(rest), size=padded, replace=False)]
    return CandidatePool(target, tuple(chosen), PoolKind.HardRetrieved, seed, padded)
