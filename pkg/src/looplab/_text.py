"""Deterministic text truncation helpers used by prompt assembly."""

from __future__ import annotations


def truncate_head(text: str, limit: int) -> str:
    """Keep the first ``limit`` characters. Used for task/profile slots."""
    if limit < 0:
        raise ValueError("limit must be non-negative")
    return text[:limit]


def truncate_tail(text: str, limit: int) -> str:
    """Keep the last ``limit`` characters. Used for log-like slots."""
    if limit < 0:
        raise ValueError("limit must be non-negative")
    if len(text) <= limit:
        return text
    return text[-limit:] if limit else ""
