"""Human review sheets for sampled corpus instances, and their aggregation."""

from __future__ import annotations

import csv
import os
import warnings
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..catalog import Catalog

KINDS = ("preference", "intention")

QUESTIONS = (
    ("q_source", "Is the instruction generated from the user's related information?"),
    ("q_knowledge", "Does the teacher-LLM provide related world knowledge?"),
    ("q_reflects", "Does the instruction reflect the user's preference/intention?"),
    ("q_target", "Is the instruction related to target item?"),
)

COLUMNS = ("kind", "seq", "template_id", "user", "instruction", "output", "history", "target", "review") + tuple(
    q for q, _ in QUESTIONS
)

_YES = {"yes", "y", "1", "true"}
_NO = {"no", "n", "0", "false"}


class InsufficientInstances(UserWarning):
    pass


def _titles(ids: Sequence[str], catalog: Catalog | None) -> str:
    if catalog is None:
        return " | ".join(ids)
    return " | ".join(catalog.items[i].title if i in catalog.items else i for i in ids)


def audit_sample(
    rows: Sequence[Mapping],
    n_per_kind: int = 100,
    seed: int = 0,
    catalog: Catalog | None = None,
) -> list[dict]:
    """Seeded sample of ``n_per_kind`` rows per kind, with blank verdicts.

    A kind with fewer rows is sampled whole and a warning is issued.
    """
    by_kind: dict[str, list[Mapping]] = defaultdict(list)
    for r in rows:
        by_kind[r["kind"]].append(r)
    rng = np.random.default_rng(seed)
    sheet = []
    for kind in KINDS:
        pool = sorted(by_kind.get(kind, []), key=lambda r: r["seq"])
        if len(pool) < n_per_kind:
            warnings.warn(
                f"only {len(pool)} {kind} instances for a sample of {n_per_kind}; taking all",
                InsufficientInstances,
                stacklevel=2,
            )
            picked = pool
        else:
            idx = sorted(rng.choice(len(pool), size=n_per_kind, replace=False))
            picked = [pool[i] for i in idx]
        for r in picked:
            src = r.get("source", {})
            entry = {
                "kind": kind,
                "seq": r["seq"],
                "template_id": r["template_id"],
                "user": r["user"],
                "instruction": r["instruction"],
                "output": r["output"],
                "history": _titles(src.get("history", []), catalog),
                "target": _titles([src["target"]], catalog) if "target" in src else "",
                "review": src.get("review", ""),
            }
            entry.update({q: "" for q, _ in QUESTIONS})
            sheet.append(entry)
    return sheet


def write_sheet(sheet: Iterable[Mapping], path: str | os.PathLike) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS)
        w.writeheader()
        for row in sheet:
            w.writerow({c: row.get(c, "") for c in COLUMNS})
    os.replace(tmp, path)


def read_sheet(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def aggregate(sheet: Iterable[Mapping]) -> dict[str, dict[str, float | None]]:
    """Percentage of "yes" per question and kind; blank verdicts are left out.

    Returns ``None`` for a cell with no answered rows.
    """
    yes: dict[tuple[str, str], int] = defaultdict(int)
    answered: dict[tuple[str, str], int] = defaultdict(int)
    for row in sheet:
        for q, _ in QUESTIONS:
            v = (row.get(q) or "").strip().lower()
            if not v:
                continue
            if v not in _YES and v not in _NO:
                raise ValueError(f"row {row.get('seq')}: verdict {v!r} for {q} is not yes/no")
            answered[row["kind"], q] += 1
            yes[row["kind"], q] += v in _YES
    return {
        kind: {
            q: (100.0 * yes[kind, q] / answered[kind, q]) if answered[kind, q] else None
            for q, _ in QUESTIONS
        }
        for kind in KINDS
    }


def format_aggregate(result: Mapping[str, Mapping[str, float | None]]) -> str:
    def cell(v):
        return "-" if v is None else f"{v:.0f}%"

    width = max(len(text) for _, text in QUESTIONS)
    lines = [f"{'Quality review question'.ljust(width)}  Preference  Intention"]
    for q, text in QUESTIONS:
        lines.append(f"{text.ljust(width)}  {cell(result['preference'][q]):>10}  {cell(result['intention'][q]):>9}")
    return "\n".join(lines)
