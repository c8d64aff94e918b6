"""JSONL request files and CSV result files."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Iterable, Sequence

from ..errors import RequestFileError
from ..speculation import Request, RequestBatch

RESULT_COLUMNS = ("id", "kept_tokens", "original_tokens", "output_tokens", "wall_ms")


def encode_text(text: str) -> list[int]:
    """Byte-level tokenizer: one token per UTF-8 byte (needs vocab >= 256)."""
    return list(text.encode("utf-8"))


def decode_bytes(tokens: Iterable[int]) -> str:
    return bytes(t for t in tokens if 0 <= t < 256).decode("utf-8", errors="replace")


def _parse_line(obj, lineno) -> Request:
    if not isinstance(obj, dict):
        raise ValueError("expected a JSON object")
    if "id" not in obj:
        raise ValueError("missing 'id'")
    if ("tokens" in obj) == ("text" in obj):
        raise ValueError("exactly one of 'tokens' or 'text' is required")
    if "tokens" in obj:
        tokens = obj["tokens"]
        if not isinstance(tokens, list) or not all(
            isinstance(t, int) and not isinstance(t, bool) and t >= 0 for t in tokens
        ):
            raise ValueError("'tokens' must be a list of non-negative integers")
    else:
        if not isinstance(obj["text"], str):
            raise ValueError("'text' must be a string")
        tokens = encode_text(obj["text"])
    if not tokens:
        raise ValueError("empty prompt")
    max_new = obj.get("max_new_tokens", 16)
    if not isinstance(max_new, int) or isinstance(max_new, bool) or max_new < 0:
        raise ValueError("'max_new_tokens' must be a non-negative integer")
    return Request(
        id=str(obj["id"]),
        tokens=tuple(tokens),
        max_new_tokens=max_new,
        phase=obj.get("phase", "prefill"),
    )


def read_requests(path) -> RequestBatch:
    """Parse one request per non-blank line.

    Raises:
        RequestFileError: naming the first bad line; ``partial`` carries the
            requests parsed before it.
    """
    requests = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                requests.append(_parse_line(json.loads(line), lineno))
            except ValueError as exc:
                raise RequestFileError(f"line {lineno}: {exc}", lineno, requests) from exc
    return RequestBatch(requests)


@dataclass
class ResultRow:
    id: str
    kept_tokens: int
    original_tokens: int
    output_tokens: Sequence[int]
    wall_ms: float

    def as_csv(self) -> list:
        return [
            self.id,
            self.kept_tokens,
            self.original_tokens,
            " ".join(str(t) for t in self.output_tokens),
            f"{self.wall_ms:.3f}",
        ]


def write_results(path, rows: Iterable[ResultRow]) -> None:
    """Write the results CSV to a path or an open text stream."""
    if hasattr(path, "write"):
        _write_rows(path, rows)
        return
    with open(path, "w", newline="", encoding="utf-8") as f:
        _write_rows(f, rows)


def _write_rows(f, rows):
    writer = csv.writer(f, lineterminator="\n")
    writer.writerow(RESULT_COLUMNS)
    for row in rows:
        writer.writerow(row.as_csv())


def read_results(path) -> list[ResultRow]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        return [
            ResultRow(
                id=r["id"],
                kept_tokens=int(r["kept_tokens"]),
                original_tokens=int(r["original_tokens"]),
                output_tokens=[int(t) for t in r["output_tokens"].split()],
                wall_ms=float(r["wall_ms"]),
            )
            for r in reader
        ]
