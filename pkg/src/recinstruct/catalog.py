"""Interaction ingestion, k-core filtering, user sequences and evaluation splits."""

from __future__ import annotations

import enum
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from . import jsonl

log = logging.getLogger(__name__)

DEFAULT_K = 5
DEFAULT_MAX_LEN = 20
MIN_LOO_LENGTH = 3


class CatalogError(Exception):
    pass


class IngestAborted(CatalogError):
    """Malformed-line rate exceeded the configured threshold."""

    def __init__(self, message: str, errors: list[tuple[str, int, str]]):
        super().__init__(message)
        self.errors = errors


class EmptyCatalogError(CatalogError):
    pass


class SplitError(CatalogError):
    pass


@dataclass(frozen=True)
class InteractionRecord:
    user_id: str
    item_id: str
    timestamp: int
    rating: float | None = None
    review_text: str | None = None

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise ValueError("user_id and item_id must be non-empty")
        if self.timestamp < 0:
            raise ValueError("timestamp must be >= 0")
        if self.rating is not None and not 1 <= self.rating <= 5:
            raise ValueError(f"rating {self.rating} outside [1, 5]")

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.user_id, self.item_id, self.timestamp)


@dataclass(frozen=True)
class ItemRecord:
    item_id: str
    title: str
    categories: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.title.strip():
            raise ValueError(f"item {self.item_id!r} has an empty title")
        object.__setattr__(self, "categories", tuple(self.categories))


@dataclass
class IngestReport:
    errors: list[tuple[str, int, str]] = field(default_factory=list)
    duplicates_dropped: int = 0
    untitled_items_dropped: int = 0
    unknown_item_interactions: int = 0
    duplicate_items: int = 0

    def as_dict(self) -> dict:
        return {
            "errors": [{"source": s, "line": n, "message": m} for s, n, m in self.errors],
            "duplicates_dropped": self.duplicates_dropped,
            "untitled_items_dropped": self.untitled_items_dropped,
            "unknown_item_interactions": self.unknown_item_interactions,
            "duplicate_items": self.duplicate_items,
        }


@dataclass(frozen=True)
class Catalog:
    items: Mapping[str, ItemRecord]
    interactions: tuple[InteractionRecord, ...]
    provenance: str = ""
    report: IngestReport | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "interactions", tuple(self.interactions))

    @property
    def users(self) -> list[str]:
        return sorted({r.user_id for r in self.interactions})

    @property
    def item_ids(self) -> list[str]:
        return sorted(self.items)

    def title(self, item_id: str) -> str:
        return self.items[item_id].title


@dataclass(frozen=True)
class Event:
    item_id: str
    timestamp: int
    review_text: str | None = None


@dataclass(frozen=True)
class UserSequence:
    user_id: str
    events: tuple[Event, ...]

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        ts = [e.timestamp for e in self.events]
        if any(a > b for a, b in zip(ts, ts[1:])):
            raise ValueError(f"events of {self.user_id!r} are not chronological")

    def __len__(self) -> int:
        return len(self.events)

    @property
    def item_ids(self) -> list[str]:
        return [e.item_id for e in self.events]


class SplitKind(enum.Enum):
    LeaveOneOut = "LeaveOneOut"
    ProductSearch801010 = "ProductSearch801010"


@dataclass(frozen=True)
class HeldOut:
    """One prediction instance: everything before ``target`` is history."""

    user_id: str
    history: tuple[Event, ...]
    target: Event
    part: str


@dataclass(frozen=True)
class DatasetSplit:
    """Train/validation/test membership.

    For leave-one-out the entries are ``(user_id, position)`` pairs into
    ``sequences``; for product search they are ``(item_id, query)`` pairs.
    """

    train: tuple[tuple, ...]
    validation: tuple[tuple, ...]
    test: tuple[tuple, ...]
    split_kind: SplitKind
    sequences: Mapping[str, UserSequence] = field(default_factory=dict, compare=False)
    excluded: tuple[str, ...] = ()
    seed: int | None = None

    def held_out(self, part: str) -> list[HeldOut]:
        if self.split_kind is not SplitKind.LeaveOneOut:
            raise SplitError("held-out instances exist only for leave-one-out splits")
        out = []
        for user_id, pos in getattr(self, part):
            events = self.sequences[user_id].events
            out.append(HeldOut(user_id, events[:pos], events[pos], part))
        return out

    def train_sequences(self) -> list[UserSequence]:
        """Per-user training prefixes (held-out events removed)."""
        if self.split_kind is not SplitKind.LeaveOneOut:
            raise SplitError("training sequences exist only for leave-one-out splits")
        n_train: Counter = Counter(user for user, _ in self.train)
        return [
            UserSequence(user, self.sequences[user].events[: n_train[user]])
            for user in sorted(n_train)
        ]


# -- ingestion ---------------------------------------------------------------


def _parse_interaction(raw: dict) -> InteractionRecord:
    user, item, ts = raw.get("user"), raw.get("item"), raw.get("ts")
    if not isinstance(user, str) or not isinstance(item, str):
        raise ValueError("'user' and 'item' must be strings")
    if not isinstance(ts, int) or isinstance(ts, bool):
        raise ValueError("'ts' must be an integer")
    rating = raw.get("rating")
    if rating is not None and (not isinstance(rating, (int, float)) or isinstance(rating, bool)):
        raise ValueError("'rating' must be a number")
    review = raw.get("review")
    if review is not None and not isinstance(review, str):
        raise ValueError("'review' must be a string")
    return InteractionRecord(user, item, ts, None if rating is None else float(rating), review)


def _parse_item(raw: dict) -> tuple[str, str, list[str]]:
    item, title = raw.get("item"), raw.get("title", "")
    categories = raw.get("categories", [])
    if not isinstance(item, str) or not item:
        raise ValueError("'item' must be a non-empty string")
    if title is None:
        title = ""
    if not isinstance(title, str):
        raise ValueError("'title' must be a string")
    if not isinstance(categories, list) or not all(isinstance(c, str) for c in categories):
        raise ValueError("'categories' must be a list of strings")
    return item, title, categories


def _records(lines: Iterable[str], source: str, report: IngestReport, parse):
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            if not isinstance(raw, dict):
                raise ValueError("record is not an object")
            yield parse(raw)
        except (ValueError, TypeError) as exc:
            report.errors.append((source, lineno, str(exc)))


def ingest(
    interaction_source: Iterable[str],
    metadata_source: Iterable[str],
    *,
    provenance: str = "",
    max_error_rate: float = 0.01,
) -> Catalog:
    """Parse, join and de-duplicate raw interaction and metadata lines.

    Malformed lines are collected in ``catalog.report.errors`` with their line
    numbers. If the malformed fraction of either source exceeds
    ``max_error_rate`` the whole ingest is aborted.
    """
    report = IngestReport()
    items: dict[str, ItemRecord] = {}
    n_meta = 0
    for item, title, categories in _records(
        _counting(metadata_source, counter := [0]), "metadata", report, _parse_item
    ):
        if item in items:
            report.duplicate_items += 1
            continue
        if not title.strip():
            report.untitled_items_dropped += 1
            continue
        items[item] = ItemRecord(item, " ".join(title.split()), tuple(categories))
    n_meta = counter[0]
    meta_errors = len(report.errors)

    seen: set[tuple[str, str, int]] = set()
    interactions = []
    for rec in _records(
        _counting(interaction_source, counter := [0]), "interactions", report, _parse_interaction
    ):
        if rec.key in seen:
            report.duplicates_dropped += 1
            continue
        seen.add(rec.key)
        if rec.item_id not in items:
            report.unknown_item_interactions += 1
            continue
        interactions.append(rec)
    n_inter = counter[0]
    inter_errors = len(report.errors) - meta_errors

    for name, bad, total in (("metadata", meta_errors, n_meta), ("interactions", inter_errors, n_inter)):
        if total and bad / total > max_error_rate:
            raise IngestAborted(
                f"{bad}/{total} malformed {name} lines exceeds error-rate threshold {max_error_rate}",
                report.errors,
            )
    if report.untitled_items_dropped:
        log.info("dropped %d items without titles", report.untitled_items_dropped)
    if report.unknown_item_interactions:
        log.info("dropped %d interactions referencing unknown items", report.unknown_item_interactions)
    if report.duplicates_dropped:
        log.info("dropped %d duplicate interactions", report.duplicates_dropped)
    return Catalog(items, tuple(interactions), provenance, report)


def _counting(lines: Iterable[str], counter: list[int]) -> Iterator[str]:
    for line in lines:
        if line.strip():
            counter[0] += 1
        yield line


# -- filtering and sequences -------------------------------------------------


def kcore_filter(catalog: Catalog, k: int = DEFAULT_K) -> Catalog:
    """Drop users and items with fewer than ``k`` interactions until a fixpoint."""
    if k < 1:
        raise ValueError("k must be >= 1")
    inters = list(catalog.interactions)
    while True:
        users = Counter(r.user_id for r in inters)
        items = Counter(r.item_id for r in inters)
        kept = [r for r in inters if users[r.user_id] >= k and items[r.item_id] >= k]
        if len(kept) == len(inters):
            break
        inters = kept
    if not inters:
        raise EmptyCatalogError(f"no interactions survive {k}-core filtering")
    surviving = {r.item_id for r in inters}
    return Catalog(
        {i: rec for i, rec in catalog.items.items() if i in surviving},
        tuple(inters),
        catalog.provenance,
        catalog.report,
    )


def build_sequences(catalog: Catalog, max_len: int = DEFAULT_MAX_LEN) -> list[UserSequence]:
    """Chronological per-user sequences keeping the most recent ``max_len`` events."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    by_user: dict[str, list[InteractionRecord]] = defaultdict(list)
    for rec in catalog.interactions:
        by_user[rec.user_id].append(rec)
    out = []
    for user in sorted(by_user):
        recs = sorted(by_user[user], key=lambda r: (r.timestamp, r.item_id))[-max_len:]
        out.append(UserSequence(user, tuple(Event(r.item_id, r.timestamp, r.review_text) for r in recs)))
    return out


def leave_one_out_split(sequences: Sequence[UserSequence]) -> DatasetSplit:
    train, valid, test, excluded = [], [], [], []
    kept: dict[str, UserSequence] = {}
    for seq in sequences:
        n = len(seq)
        if n < MIN_LOO_LENGTH:
            excluded.append(seq.user_id)
            continue
        kept[seq.user_id] = seq
        train.extend((seq.user_id, p) for p in range(n - 2))
        valid.append((seq.user_id, n - 2))
        test.append((seq.user_id, n - 1))
    if excluded:
        log.warning("excluded %d users with fewer than %d events", len(excluded), MIN_LOO_LENGTH)
    return DatasetSplit(
        tuple(train), tuple(valid), tuple(test), SplitKind.LeaveOneOut, kept, tuple(excluded)
    )


def _bucket_targets(n: int) -> tuple[int, int, int]:
    n_train = round(0.8 * n)
    n_valid = round(0.1 * n)
    return n_train, n_valid, n - n_train - n_valid


def product_search_split(pairs: Sequence[tuple[str, str]], seed: int) -> DatasetSplit:
    """Seeded 80/10/10 partition of (item_id, query) pairs with disjoint items.

    Pairs sharing an item move together; each item group goes to the bucket
    with the largest remaining deficit so sizes stay within one of target
    when items are unique.
    """
    if len(pairs) < 10:
        raise SplitError(f"need at least 10 pairs for an 80/10/10 split, got {len(pairs)}")
    groups: dict[str, list[tuple[str, str]]] = defaultdict(list)
    for item, query in pairs:
        groups[item].append((item, query))
    order = sorted(groups)
    perm = np.random.default_rng(seed).permutation(len(order))
    targets = _bucket_targets(len(pairs))
    buckets: list[list[tuple[str, str]]] = [[], [], []]
    for idx in perm:
        group = groups[order[idx]]
        deficits = [t - len(b) for t, b in zip(targets, buckets)]
        buckets[int(np.argmax(deficits))].extend(group)
    return DatasetSplit(
        tuple(buckets[0]), tuple(buckets[1]), tuple(buckets[2]),
        SplitKind.ProductSearch801010, seed=seed,
    )


# -- persistence -------------------------------------------------------------


def save_catalog(catalog: Catalog, directory: str | Path, *, seed: int | None = None) -> None:
    directory = Path(directory)
    header = {"kind": "catalog", "provenance": catalog.provenance, "seed": seed}
    jsonl.write_jsonl(
        directory / "items.jsonl",
        ({"item": r.item_id, "title": r.title, "categories": list(r.categories)}
         for r in sorted(catalog.items.values(), key=lambda r: r.item_id)),
        header,
    )
    jsonl.write_jsonl(
        directory / "interactions.jsonl",
        ({k: v for k, v in (("user", r.user_id), ("item", r.item_id), ("ts", r.timestamp),
                            ("rating", r.rating), ("review", r.review_text)) if v is not None}
         for r in catalog.interactions),
        header,
    )


def load_catalog(directory: str | Path) -> Catalog:
    directory = Path(directory)
    header, items = jsonl.read_jsonl(directory / "items.jsonl")
    _, inters = jsonl.read_jsonl(directory / "interactions.jsonl")
    return ingest(
        (json.dumps(r) for r in inters),
        (json.dumps(r) for r in items),
        provenance=(header or {}).get("provenance", ""),
        max_error_rate=0.0,
    )


def sequences_to_rows(sequences: Iterable[UserSequence]) -> Iterator[dict]:
    for seq in sequences:
        yield {
            "user": seq.user_id,
            "events": [{"item": e.item_id, "ts": e.timestamp, "review": e.review_text} for e in seq.events],
        }


def sequences_from_rows(rows: Iterable[dict]) -> list[UserSequence]:
    return [
        UserSequence(r["user"], tuple(Event(e["item"], e["ts"], e.get("review")) for e in r["events"]))
        for r in rows
    ]


def split_to_rows(split: DatasetSplit) -> Iterator[dict]:
    for part in ("train", "validation", "test"):
        for a, b in getattr(split, part):
            if split.split_kind is SplitKind.LeaveOneOut:
                yield {"part": part, "user": a, "position": b}
            else:
                yield {"part": part, "item": a, "query": b}


def split_from_rows(
    rows: Iterable[dict], kind: SplitKind, sequences: Mapping[str, UserSequence] | None = None
) -> DatasetSplit:
    parts: dict[str, list[tuple]] = {"train": [], "validation": [], "test": []}
    for r in rows:
        if kind is SplitKind.LeaveOneOut:
            parts[r["part"]].append((r["user"], r["position"]))
        else:
            parts[r["part"]].append((r["item"], r["query"]))
    return DatasetSplit(
        tuple(parts["train"]), tuple(parts["validation"]), tuple(parts["test"]), kind,
        dict(sequences or {}),
    )


def sparsity(catalog: Catalog) -> float:
    n_users, n_items = len(catalog.users), len(catalog.items)
    if not n_users or not n_items:
        return math.nan
    return 1.0 - len(catalog.interactions) / (n_users * n_items)
