"""Fenced-block wire protocol: every agent reply travels as labeled
triple-backtick blocks, and this module is the only parser for them.

Parsing is total: any input text yields a result, never an exception. See
PROTOCOL.md at the repository root for the grammar and the label registry.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Iterator, Optional, Union

from .core import MetaAction, MetaDecision, Stage
from .errors import DecisionParseError, StatusParseError

log = logging.getLogger(__name__)

_FENCE_RE = re.compile(r"^[ \t]*```(.*)$")


class StatusSignal(Enum):
    CONTINUE = "CONTINUE"
    FINISH = "FINISH"


@dataclass(frozen=True)
class Block:
    """One labeled fenced region, fence markers stripped.

    ``offset`` is the character offset of the opening fence line in the
    source reply, so document order is recoverable.
    """

    label: str
    body: str
    offset: int = 0


@dataclass(frozen=True)
class ParseResult:
    blocks: tuple[Block, ...]
    warnings: tuple[str, ...] = ()

    def __iter__(self) -> Iterator[Block]:
        return iter(self.blocks)

    def __len__(self) -> int:
        return len(self.blocks)


BlockSource = Union[ParseResult, Iterable[Block]]


def parse_blocks(reply: str) -> ParseResult:
    """Extract every fenced block from model output, in document order.

    Fences are recognized only at line start (after optional indentation).
    Nested fences are not supported: an inner triple-backtick line closes
    the open block. A block still open at end-of-text is emitted as-is with
    a warning on the result.
    """
    blocks: list[Block] = []
    warnings: list[str] = []
    label: Optional[str] = None
    body_lines: list[str] = []
    open_offset = 0

    offset = 0
    for line in reply.split("\n"):
        match = _FENCE_RE.match(line)
        if match is not None:
            if label is None:
                rest = match.group(1).strip()
                label = rest.split()[0] if rest else ""
                open_offset = offset
                body_lines = []
            else:
                blocks.append(Block(label, "\n".join(body_lines), open_offset))
                label = None
        elif label is not None:
            body_lines.append(line)
        offset += len(line) + 1

    if label is not None:
        blocks.append(Block(label, "\n".join(body_lines), open_offset))
        warnings.append(f"unterminated fence opened at offset {open_offset}")

    return ParseResult(tuple(blocks), tuple(warnings))


def _block_list(blocks: BlockSource) -> tuple[Block, ...]:
    if isinstance(blocks, ParseResult):
        return blocks.blocks
    return tuple(blocks)


def extract(blocks: BlockSource, label: str) -> Optional[Block]:
    """Return the last block whose label matches exactly, if any.

    Last wins: models often restate a corrected block, and the correction
    is the one to trust.
    """
    found = None
    for block in _block_list(blocks):
        if block.label == label:
            found = block
    return found


def extract_fold(blocks: BlockSource, label: str) -> Optional[Block]:
    """Case-insensitive :func:`extract`; exact label matches take priority."""
    exact = extract(blocks, label)
    if exact is not None:
        return exact
    wanted = label.lower()
    found = None
    for block in _block_list(blocks):
        if block.label.lower() == wanted:
            found = block
    return found


def leading_text(reply: str) -> str:
    """Prose before the first fence line; agents read step purposes here."""
    lines = []
    for line in reply.split("\n"):
        if _FENCE_RE.match(line):
            break
        lines.append(line)
    return "\n".join(lines).strip()


def emit(label: str, body: str) -> str:
    """Render a block back to wire format."""
    return f"```{label}\n{body}\n```"


def parse_status(body: str) -> StatusSignal:
    """Map a status block body to its signal; whitespace and case tolerated."""
    token = body.strip().upper()
    if token == "CONTINUE":
        return StatusSignal.CONTINUE
    if token == "FINISH":
        return StatusSignal.FINISH
    raise StatusParseError(f"expected CONTINUE or FINISH, got {body.strip()[:80]!r}")


_NEXT_START_VALUES = {
    "data_understanding": Stage.DATA_UNDERSTANDING,
    "planning": Stage.PLANNING,
    "code_execution": Stage.CODE_EXECUTION,
}


def parse_decision(body: str) -> MetaDecision:
    """Parse the interior of a decision_json block.

    An unknown ``next_start`` falls back to planning with a logged warning;
    an unknown ``action`` or unparseable structure is an error.
    """
    try:
        data = json.loads(body)
    except json.JSONDecodeError:
        start = body.find("{")
        end = body.rfind("}")
        if start < 0 or end <= start:
            raise DecisionParseError("no JSON object found in decision body")
        try:
            data = json.loads(body[start : end + 1])
        except json.JSONDecodeError as exc:
            raise DecisionParseError(f"malformed decision JSON: {exc}") from None
    if not isinstance(data, dict):
        raise DecisionParseError("decision body must be a JSON object")

    action_raw = str(data.get("action", "")).strip().lower()
    try:
        action = MetaAction(action_raw)
    except ValueError:
        raise DecisionParseError(f"invalid action {data.get('action')!r}") from None

    next_raw = str(data.get("next_start", "")).strip().lower()
    next_start = _NEXT_START_VALUES.get(next_raw)
    if next_start is None:
        if next_raw:
            log.warning("unknown next_start %r, falling back to planning", next_raw)
        next_start = Stage.PLANNING

    stop_reason = str(data.get("stop_reason", "") or "")
    if action is MetaAction.STOP and not stop_reason.strip():
        stop_reason = "(no reason given)"

    return MetaDecision(
        action=action,
        next_start=next_start,
        stop_reason=stop_reason,
        decision_reason=str(data.get("decision_reason", "") or ""),
        next_start_reason=str(data.get("next_start_reason", "") or ""),
    )
