"""Synthetic tasks, contrived models and request/result file I/O."""

from .contrived import planted_needle_model, successor_model
from .io import ResultRow, decode_bytes, encode_text, read_requests, write_results
from .tasks import (
    EOS_ID,
    QUERY_ID,
    SyntheticTask,
    gen_copy,
    gen_needle,
    gen_passkey,
    gen_task,
    needle_token_range,
    retention_rate,
)

__all__ = [
    "EOS_ID",
    "QUERY_ID",
    "ResultRow",
    "SyntheticTask",
    "decode_bytes",
    "encode_text",
    "gen_copy",
    "gen_needle",
    "gen_passkey",
    "gen_task",
    "needle_token_range",
    "planted_needle_model",
    "read_requests",
    "retention_rate",
    "successor_model",
    "write_results",
]
