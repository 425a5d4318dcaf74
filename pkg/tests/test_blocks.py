from __future__ import annotations

import pytest
from hypothesis import given, settings, strategies as st

from looplab.blocks import (
    Block,
    StatusSignal,
    emit,
    extract,
    extract_fold,
    leading_text,
    parse_blocks,
    parse_decision,
    parse_status,
)
from looplab.core import MetaAction, Stage
from looplab.errors import DecisionParseError, StatusParseError


def test_single_status_block():
    result = parse_blocks("```status\nFINISH\n```")
    assert [(b.label, b.body) for b in result.blocks] == [("status", "FINISH")]


def test_step_reply_block_order():
    reply = (
        "Here is the step.\n"
        "```purpose\ntrain the model\n```\n"
        "```python\nx = 1\nprint(x)\n```\n"
        "```status\nCONTINUE\n```\ntrailing prose"
    )
    result = parse_blocks(reply)
    labels = [b.label for b in result.blocks]
    assert labels == ["purpose", "python", "status"]
    assert {"python", "status"} <= set(labels)
    assert result.blocks[1].body == "x = 1\nprint(x)"
    assert not result.warnings


def test_no_fences_yields_empty():
    assert parse_blocks("no fences at all").blocks == ()


def test_unlabeled_fence_gets_empty_label():
    result = parse_blocks("```\nraw\n```")
    assert result.blocks[0].label == ""
    assert result.blocks[0].body == "raw"


def test_unterminated_fence_flagged():
    result = parse_blocks("```python\nprint(1)")
    assert result.blocks[0].body == "print(1)"
    assert result.warnings


def test_indented_fence_recognized_inline_backticks_ignored():
    reply = "text with ``` inline\n  ```python\n  pass\n  ```"
    result = parse_blocks(reply)
    assert len(result.blocks) == 1
    assert result.blocks[0].label == "python"


def test_inner_fence_closes_block():
    reply = "```python\ncode\n```status\nFINISH\n```"
    result = parse_blocks(reply)
    assert result.blocks[0] == Block("python", "code", 0)
    # the rest opens a new (unlabeled-content) region starting at FINISH's fence
    assert len(result.blocks) == 2


def test_extract_last_wins():
    blocks = parse_blocks("```python\nfirst\n```\n```python\nsecond\n```")
    found = extract(blocks, "python")
    assert found is not None and found.body == "second"


def test_extract_absent_and_empty_label_identity():
    blocks = parse_blocks("```python\nbody\n```\n```\nplain\n```")
    assert extract(blocks, "bash") is None
    unlabeled = extract(blocks, "")
    assert unlabeled is not None and unlabeled.body == "plain"


def test_extract_fold_prefers_exact():
    blocks = parse_blocks("```Status\nupper\n```\n```status\nlower\n```")
    assert extract_fold(blocks, "status").body == "lower"
    only_upper = parse_blocks("```Status\nupper\n```")
    assert extract_fold(only_upper, "status").body == "upper"


def test_leading_text():
    assert leading_text("purpose here\n```python\nx\n```") == "purpose here"
    assert leading_text("```python\nx\n```") == ""


@given(st.text(max_size=2000))
@settings(max_examples=300)
def test_parse_blocks_total(text):
    result = parse_blocks(text)
    assert isinstance(result.blocks, tuple)


@given(st.text(max_size=1000))
@settings(max_examples=200)
def test_document_order_preserved(text):
    offsets = [b.offset for b in parse_blocks(text).blocks]
    assert offsets == sorted(offsets)
    assert len(set(offsets)) == len(offsets)


@given(
    st.from_regex(r"[A-Za-z_]{0,12}", fullmatch=True),
    st.text(max_size=300).filter(lambda s: "```" not in s),
)
@settings(max_examples=200)
def test_emit_parse_round_trip(label, body):
    result = parse_blocks(emit(label, body))
    assert len(result.blocks) == 1
    block = result.blocks[0]
    assert (block.label, block.body) == (label, body)


# -- status --------------------------------------------------------------------


def test_parse_status_exact_tokens():
    assert parse_status("CONTINUE") is StatusSignal.CONTINUE
    assert parse_status("  finish \n") is StatusSignal.FINISH


def test_parse_status_rejects_other_tokens():
    with pytest.raises(StatusParseError):
        parse_status("DONE")


# -- decisions -----------------------------------------------------------------


def test_parse_decision_stop():
    decision = parse_decision(
        '{"action": "stop", "stop_reason": "Maximum rounds reached"}'
    )
    assert decision.action is MetaAction.STOP
    assert decision.stop_reason == "Maximum rounds reached"


def test_parse_decision_continue_planning():
    decision = parse_decision(
        '{"action": "continue", "next_start": "planning", "next_start_reason": "replan"}'
    )
    assert decision.action is MetaAction.CONTINUE
    assert decision.next_start is Stage.PLANNING


def test_parse_decision_invalid_action():
    with pytest.raises(DecisionParseError):
        parse_decision('{"action": "maybe"}')


def test_parse_decision_unknown_next_start_falls_back():
    decision = parse_decision('{"action": "continue", "next_start": "reporting"}')
    assert decision.next_start is Stage.PLANNING


def test_parse_decision_tolerates_surrounding_prose():
    decision = parse_decision('Decision follows {"action": "continue"} end')
    assert decision.action is MetaAction.CONTINUE


def test_parse_decision_unparseable():
    with pytest.raises(DecisionParseError):
        parse_decision("not json at all")
