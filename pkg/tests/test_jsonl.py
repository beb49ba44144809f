from __future__ import annotations

from hypothesis import given
from hypothesis import strategies as st

from recinstruct.jsonl import digest, file_digest, read_jsonl, write_jsonl


def test_write_read_with_header(tmp_path):
    path = tmp_path / "sub" / "x.jsonl"
    n = write_jsonl(path, [{"b": 1, "a": "é"}, {"c": None}], {"kind": "test", "seed": 3})
    assert n == 2
    header, rows = read_jsonl(path)
    assert header == {"schema_version": 1, "kind": "test", "seed": 3}
    assert rows == [{"a": "é", "b": 1}, {"c": None}]
    assert path.read_text(encoding="utf-8").splitlines()[1] == '{"a": "é", "b": 1}'
    assert not path.with_name("x.jsonl.tmp").exists()


def test_read_without_header(tmp_path):
    path = tmp_path / "x.jsonl"
    write_jsonl(path, [{"header": 1, "other": 2}])
    header, rows = read_jsonl(path)
    assert header is None
    assert rows == [{"header": 1, "other": 2}]


def test_file_digest_tracks_content(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_jsonl(a, [{"x": 1}])
    write_jsonl(b, [{"x": 1}])
    assert file_digest(a) == file_digest(b)
    write_jsonl(b, [{"x": 2}])
    assert file_digest(a) != file_digest(b)


@given(st.text(), st.text())
def test_digest_is_length_prefixed(a, b):
    # moving characters across a part boundary must change the digest
    if a:
        assert digest(a, b) != digest(a[:-1], a[-1] + b)


def test_digest_accepts_structures():
    assert digest({"b": 1, "a": 2}) == digest({"a": 2, "b": 1})
    assert digest("x") == digest(b"x")
