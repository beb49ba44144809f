"""Line-delimited JSON helpers shared by every artifact writer."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Iterable, Iterator

SCHEMA_VERSION = 1


def dumps(record: Any) -> str:
    # sort_keys keeps output byte-stable across runs
    return json.dumps(record, ensure_ascii=False, sort_keys=True)


def iter_lines(path: str | os.PathLike) -> Iterator[str]:
    with open(path, encoding="utf-8") as fh:
        yield from fh


def write_jsonl(
    path: str | os.PathLike,
    rows: Iterable[dict],
    header: dict | None = None,
) -> int:
    """Write rows atomically; a header record, when given, goes first.

    Returns the number of data rows written.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    n = 0
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        if header is not None:
            fh.write(dumps({"header": {"schema_version": SCHEMA_VERSION, **header}}) + "\n")
        for row in rows:
            fh.write(dumps(row) + "\n")
            n += 1
    os.replace(tmp, path)
    return n


def read_jsonl(path: str | os.PathLike) -> tuple[dict | None, list[dict]]:
    header = None
    rows = []
    for i, line in enumerate(iter_lines(path)):
        line = line.strip()
        if not line:
            continue
        record = json.loads(line)
        if i == 0 and isinstance(record, dict) and set(record) == {"header"}:
            header = record["header"]
            continue
        rows.append(record)
    return header, rows


def digest(*parts: Any) -> str:
    h = hashlib.sha256()
    for part in parts:
        if not isinstance(part, (str, bytes)):
            part = dumps(part)
        if isinstance(part, str):
            part = part.encode("utf-8")
        h.update(len(part).to_bytes(8, "big"))
        h.update(part)
    return h.hexdigest()


def file_digest(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
