from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cobra_ssm.errors import ConfigurationError
from cobra_ssm.prompting import (
    ASSISTANT,
    EOT,
    EOT_ID,
    SPECIAL_TOKENS,
    USER,
    Conversation,
    ConversationOrderError,
    TemplateParseError,
    apply_ocr_ordering,
    detokenize,
    dump_conversation,
    load_conversation,
    parse,
    prompt_segments,
    render,
    render_base,
    render_chat,
    tokenize,
    tokenize_segments,
)

GOLDEN = Path(__file__).parent / "fixtures" / "templates"


def golden(name: str) -> str:
    return (GOLDEN / name).read_bytes().decode("utf-8")


TWO_TURN = Conversation((("user", "{X1}"), ("assistant", "{A1}"), ("user", "{X2}")))

# text that cannot collide with template markers
plain_text = st.text(
    st.characters(blacklist_categories=("Cs",), blacklist_characters="<\n"), max_size=30
)


def test_chat_golden_single():
    assert render_chat(Conversation.single("hi")) == golden("chat_single.txt")
    assert render_chat(Conversation.single("hi")) == "<|user|>\nhi<|endoftext|>\n<|assistant|>\n"


def test_chat_golden_two_turn():
    assert render_chat(TWO_TURN) == golden("chat_two_turn.txt")


def test_base_goldens():
    assert render_base(Conversation.single("{X}")) == golden("base_single.txt")
    assert render_base(TWO_TURN) == golden("base_two_turn.txt")


def test_empty_instruction_renders():
    assert render_chat(Conversation.single("")) == f"{USER}\n{EOT}\n{ASSISTANT}\n"
    assert render_base(Conversation.single("")) == "In:\nOut:"


def test_ocr_orderings_golden():
    assert apply_ocr_ordering("What is written?", "STOP", "ocr_first") == golden("ocr_first.txt")
    assert apply_ocr_ordering("What is written?", "STOP", "ocr_last") == golden("ocr_last.txt")
    assert apply_ocr_ordering("What is written?", "STOP", "none") == "What is written?"


@settings(max_examples=100, deadline=None)
@given(plain_text, plain_text)
def test_ocr_last_reverses_segments(q, ocr):
    first = apply_ocr_ordering(q, ocr, "ocr_first").split("\n")
    last = apply_ocr_ordering(q, ocr, "ocr_last").split("\n")
    assert first == last[::-1]


def test_ocr_applied_to_last_user_turn_in_render():
    conv = Conversation.single("What is written?", ocr="STOP", ordering="ocr_first")
    assert render_chat(conv) == f"{USER}\nReference OCR token: STOP\nWhat is written?{EOT}\n{ASSISTANT}\n"


@settings(max_examples=100, deadline=None)
@given(st.lists(plain_text, min_size=1, max_size=5), st.sampled_from(["chat", "base"]))
def test_render_parse_round_trip(texts, template):
    turns = tuple(("user" if i % 2 == 0 else "assistant", t) for i, t in enumerate(texts))
    conv = Conversation(turns)
    assert parse(render(conv, template), template) == conv


def test_templates_share_structure():
    chat, base = render_chat(TWO_TURN), render_base(TWO_TURN)
    assert chat.count(USER) == base.count("In:") == 2
    assert chat.count(ASSISTANT) == base.count("Out:") == 2
    stripped = chat.replace(f"{USER}\n", "").replace(f"{EOT}\n{ASSISTANT}\n", "")
    assert stripped == base.replace("In:", "").replace("\nOut:", "")


def test_bad_conversations():
    with pytest.raises(ConversationOrderError):
        Conversation((("assistant", "x"),))
    with pytest.raises(ConfigurationError):
        Conversation.single("q", ocr="x", ordering="middle")
    with pytest.raises(TemplateParseError):
        parse("garbage", "chat")
    with pytest.raises(ConfigurationError):
        render(TWO_TURN, "xml")


def test_conversation_file_round_trip(tmp_path):
    conv = Conversation(TWO_TURN.turns, ocr="STOP", ordering="ocr_last")
    dump_conversation(conv, tmp_path / "c.jsonl")
    assert load_conversation(tmp_path / "c.jsonl") == conv


def test_answer_mask_counts_answer_tokens():
    conv = Conversation.single("Where?", "top left")
    ids, flags = tokenize_segments(prompt_segments(conv, "chat"))
    assert sum(flags) == len(tokenize("top left")) + 1  # answer bytes + closing end-of-text
    answer_ids = [i for i, f in zip(ids, flags) if f]
    assert detokenize(answer_ids) == "top left" + EOT
    assert detokenize(ids) == render_chat(conv)


def test_tokenizer_examples():
    assert tokenize(EOT) == [EOT_ID]
    assert tokenize("ab") == [97, 98]
    assert detokenize(tokenize("hello world")) == "hello world"
    assert detokenize([]) == ""
    assert tokenize("<|user") == list(b"<|user")  # incomplete marker stays bytes
    assert sorted(SPECIAL_TOKENS.values()) == [256, 257, 258]


def test_all_bytes_round_trip():
    # every byte id either is a complete character or, alone, is not valid UTF-8
    for b in range(256):
        text = detokenize([b])
        if b < 0x80:
            assert tokenize(text) == [b]
        else:
            assert text == "\ufffd"
    # as part of valid multi-byte sequences, high bytes survive the round trip too
    every_char = "".join(chr(c) for c in range(0x80, 0x10000, 7) if not 0xD800 <= c < 0xE000)
    ids = tokenize(every_char)
    assert detokenize(ids) == every_char
    assert set(range(0x80, 0xC0)) <= set(ids)


def test_unknown_ids_and_invalid_utf8():
    assert detokenize([999]) == "�"
    assert detokenize([0xFF]) == "�"


@settings(max_examples=10_000, deadline=None)
@given(st.text(st.characters(blacklist_categories=("Cs",))))
def test_utf8_fuzz_round_trip(s):
    assert detokenize(tokenize(s)) == s


def test_ids_are_within_vocab():
    ids = np.array(tokenize(render_chat(TWO_TURN) + "é漢😀"))
    assert ids.min() >= 0 and ids.max() <= 258
