"""Seeded synthetic catalogs with themed titles.

Items of one theme share two title terms and their category path, and each
user buys mostly within one theme. That gives retrieved hard negatives
genuine lexical overlap with the target, and gives reviews and categories
something to say.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .catalog import Catalog, ingest

THEMES = (
    ("Horror", "Zombie", ("Video Games", "PC", "Games", "Horror")),
    ("Racing", "Turbo", ("Video Games", "PlayStation 4", "Games", "Racing")),
    ("Puzzle", "Logic", ("Video Games", "Nintendo Switch", "Games", "Puzzle")),
    ("Gaming", "Mouse", ("Video Games", "PC", "Accessories", "Gaming Mice")),
    ("Space", "Strategy", ("Video Games", "PC", "Games", "Strategy")),
    ("Soccer", "League", ("Video Games", "Xbox One", "Games", "Sports")),
    ("Wireless", "Headset", ("Video Games", "PC", "Accessories", "Headsets")),
    ("Fantasy", "Quest", ("Video Games", "PlayStation 4", "Games", "Role-Playing")),
    ("Jazz", "Piano", ("CDs & Vinyl", "Jazz", "Piano")),
    ("Classic", "Rock", ("CDs & Vinyl", "Rock", "Classic Rock")),
)

_WORDS = (
    "Nightfall Ember Crimson Echo Vertex Harbor Summit Prism Atlas Cobalt Zenith Ridge Falcon Nova Drift "
    "Orbit Quartz Raven Storm Tundra Velvet Willow Aurora Blaze Cinder Dawn Frost Glacier Halo Iris "
    "Jade Karma Lumen Mirage Nimbus Onyx Pulse Quill Rune Sable Tidal Umbra Vortex Whisper Xenon Yonder"
).split()
_EDITIONS = ("Deluxe", "Remastered", "Standard", "Gold", "Complete", "Pro", "Classic Edition", "Limited")

_REVIEW_OPENERS = (
    "I bought this for my son who loves {t} things.",
    "My daughter wanted something {t} for her birthday.",
    "I was looking for a {t} title to play on weekends.",
    "The user wanted a {t} gift for a friend.",
    "I needed a new {t} pick after finishing my last one.",
)
_REVIEW_TAILS = ("Works great.", "Five stars.", "Would buy again.", "A bit pricey but fine.", "Arrived quickly.")


@dataclass(frozen=True)
class SyntheticConfig:
    n_users: int = 300
    items_per_theme: int = 20
    n_themes: int = 8
    first_theme: int = 0
    min_len: int = 6
    max_len: int = 14
    # share of a user's events drawn from the user's main theme
    focus: float = 0.85
    seed: int = 0

    def __post_init__(self):
        if self.n_themes < 1 or self.first_theme < 0 or self.first_theme + self.n_themes > len(THEMES):
            raise ValueError(f"themes {self.first_theme}..{self.first_theme + self.n_themes - 1} "
                             f"outside the {len(THEMES)} available")
        if self.items_per_theme > len(_WORDS):
            raise ValueError(f"items_per_theme must be <= {len(_WORDS)}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")


def generate_raw(config: SyntheticConfig = SyntheticConfig()) -> tuple[list[str], list[str]]:
    """Raw ``(interaction_lines, metadata_lines)`` in the ingest format."""
    rng = np.random.default_rng(config.seed)
    themes = THEMES[config.first_theme : config.first_theme + config.n_themes]
    meta, by_theme = [], []
    for t, (a, b, cats) in enumerate(themes):
        ids = []
        words = rng.permutation(len(_WORDS))[: config.items_per_theme]
        for j, w in enumerate(words):
            item = f"i{config.first_theme + t:02d}{j:03d}"
            edition = _EDITIONS[int(rng.integers(len(_EDITIONS)))]
            title = f"{a} {b} {_WORDS[w]} {edition}"
            meta.append(json.dumps({"item": item, "title": title, "categories": list(cats)}))
            ids.append(item)
        by_theme.append(ids)
    inter = []
    for u in range(config.n_users):
        user = f"u{u:04d}"
        main = int(rng.integers(len(themes)))
        n = int(rng.integers(config.min_len, config.max_len + 1))
        ts = int(rng.integers(1_000_000, 2_000_000))
        seen: set[str] = set()
        for _ in range(n):
            theme = main if rng.random() < config.focus else int(rng.integers(len(themes)))
            choices = [i for i in by_theme[theme] if i not in seen]
            if not choices:
                continue
            item = choices[int(rng.integers(len(choices)))]
            seen.add(item)
            ts += int(rng.integers(1, 10_000))
            word = themes[theme][0].lower()
            opener = _REVIEW_OPENERS[int(rng.integers(len(_REVIEW_OPENERS)))].format(t=word)
            review = f"{opener} {_REVIEW_TAILS[int(rng.integers(len(_REVIEW_TAILS)))]}"
            rating = float(rng.integers(1, 6))
            inter.append(json.dumps({"user": user, "item": item, "ts": ts, "rating": rating, "review": review}))
    return inter, meta


def generate_catalog(config: SyntheticConfig = SyntheticConfig()) -> Catalog:
    inter, meta = generate_raw(config)
    return ingest(inter, meta, provenance=f"synthetic:seed={config.seed}")
