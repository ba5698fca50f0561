"""Prompt templates, OCR-token ordering and a byte-level tokenizer.

Two templates are supported. The chat template::

    <|user|>\\n{instruction}<|endoftext|>\\n<|assistant|>\\n{answer}<|endoftext|>\\n...

and the base-model template::

    In:{instruction}\\nOut:{answer}<|endoftext|>\\nIn:...

A conversation that ends on a user turn renders with an open assistant header
(``<|assistant|>\\n`` or ``Out:``) so the model continues with the answer.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Literal

from .errors import CobraError, ConfigurationError

USER = "<|user|>"
ASSISTANT = "<|assistant|>"
EOT = "<|endoftext|>"

SPECIAL_TOKENS = {EOT: 256, USER: 257, ASSISTANT: 258}
SPECIAL_IDS = {v: k for k, v in SPECIAL_TOKENS.items()}
EOT_ID = SPECIAL_TOKENS[EOT]
BASE_VOCAB = 256 + len(SPECIAL_TOKENS)
REPLACEMENT = "�"

OCR_PREFIX = "Reference OCR token: "

Ordering = Literal["ocr_first", "ocr_last", "none"]
Template = Literal["chat", "base"]


class ConversationOrderError(CobraError, ValueError):
    """Roles do not alternate user/assistant starting with user."""


class TemplateParseError(CobraError, ValueError):
    pass


@dataclass(frozen=True)
class Conversation:
    turns: tuple[tuple[str, str], ...]
    ocr: str | None = None
    ordering: Ordering = "none"

    def __post_init__(self):
        object.__setattr__(self, "turns", tuple((r, t) for r, t in self.turns))
        if self.ordering not in ("ocr_first", "ocr_last", "none"):
            raise ConfigurationError(f"unknown OCR ordering {self.ordering!r}")
        for i, (role, _) in enumerate(self.turns):
            expected = "user" if i % 2 == 0 else "assistant"
            if role != expected:
                raise ConversationOrderError(
                    f"turn {i} has role {role!r}, expected {expected!r} (turns alternate starting with user)"
                )

    @classmethod
    def single(cls, question: str, answer: str | None = None, **kw) -> "Conversation":
        turns = [("user", question)] + ([("assistant", answer)] if answer is not None else [])
        return cls(tuple(turns), **kw)

    def instructions(self) -> list[str]:
        """User texts, with the OCR ordering applied to the final user turn."""
        users = [t for r, t in self.turns if r == "user"]
        if users and self.ocr is not None:
            users[-1] = apply_ocr_ordering(users[-1], self.ocr, self.ordering)
        return users


def apply_ocr_ordering(question: str, ocr_tokens: str, ordering: Ordering) -> str:
    """Combine a question with OCR reference tokens.

    ``ocr_first`` puts the reference line before the question, ``ocr_last`` after it;
    the two segments are joined by a single newline.
    """
    if ordering == "none":
        return question
    reference = OCR_PREFIX + ocr_tokens
    if ordering == "ocr_first":
        return f"{reference}\n{question}"
    if ordering == "ocr_last":
        return f"{question}\n{reference}"
    raise ConfigurationError(f"unknown OCR ordering {ordering!r}")


def prompt_segments(conv: Conversation, template: Template = "chat") -> list[tuple[str, bool]]:
    """Rendered prompt as ``(text, is_answer)`` pieces.

    An answer piece is the answer text plus its closing ``<|endoftext|>``; these are
    the positions a training loss is computed on.
    """
    if template not in ("chat", "base"):
        raise ConfigurationError(f"unknown template {template!r}")
    users = iter(conv.instructions())
    out: list[tuple[str, bool]] = []
    for role, text in conv.turns:
        if role == "user":
            instruction = next(users)
            if template == "chat":
                out.append((f"{USER}\n{instruction}{EOT}\n{ASSISTANT}\n", False))
            else:
                out.append((f"In:{instruction}\nOut:", False))
        else:
            out.append((f"{text}{EOT}", True))
            out.append(("\n", False))
    return out


def render(conv: Conversation, template: Template = "chat") -> str:
    return "".join(text for text, _ in prompt_segments(conv, template))


def render_chat(conv: Conversation) -> str:
    return render(conv, "chat")


def render_base(conv: Conversation) -> str:
    return render(conv, "base")


def _take_until(s: str, pos: int, marker: str) -> tuple[str, int]:
    end = s.find(marker, pos)
    if end < 0:
        raise TemplateParseError(f"expected {marker!r} after offset {pos}")
    return s[pos:end], end + len(marker)


def _expect(s: str, pos: int, literal: str) -> int:
    if not s.startswith(literal, pos):
        raise TemplateParseError(f"expected {literal!r} at offset {pos}, found {s[pos:pos + 20]!r}")
    return pos + len(literal)


def parse(prompt: str, template: Template = "chat") -> Conversation:
    """Inverse of :func:`render` for conversations without OCR tokens."""
    if template == "chat":
        user_open, user_close = f"{USER}\n", f"{EOT}\n{ASSISTANT}\n"
    elif template == "base":
        user_open, user_close = "In:", "\nOut:"
    else:
        raise ConfigurationError(f"unknown template {template!r}")
    turns = []
    pos = 0
    while pos < len(prompt):
        pos = _expect(prompt, pos, user_open)
        text, pos = _take_until(prompt, pos, user_close)
        turns.append(("user", text))
        if pos == len(prompt):
            break
        answer, pos = _take_until(prompt, pos, f"{EOT}\n")
        turns.append(("assistant", answer))
    return Conversation(tuple(turns))


def load_conversation(path: str | os.PathLike) -> Conversation:
    """Read a conversation from JSON lines.

    Each line is ``{"role": "user"|"assistant", "text": ...}``; an optional line
    ``{"ocr": ..., "ordering": "ocr_first"|"ocr_last"|"none"}`` sets OCR tokens.
    """
    turns, ocr, ordering = [], None, "none"
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if "role" in rec:
                turns.append((rec["role"], rec.get("text", "")))
            else:
                ocr = rec.get("ocr", ocr)
                ordering = rec.get("ordering", ordering)
    return Conversation(tuple(turns), ocr=ocr, ordering=ordering)


def dump_conversation(conv: Conversation, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for role, text in conv.turns:
            fh.write(json.dumps({"role": role, "text": text}) + "\n")
        if conv.ocr is not None:
            fh.write(json.dumps({"ocr": conv.ocr, "ordering": conv.ordering}) + "\n")


# --------------------------------------------------------------------------
# tokenizer
# --------------------------------------------------------------------------

_SPECIALS_LONGEST_FIRST = sorted(SPECIAL_TOKENS, key=len, reverse=True)


def tokenize(text: str) -> list[int]:
    """UTF-8 bytes as ids 0..255; special tokens recognized by longest match."""
    ids: list[int] = []
    pending: list[str] = []
    i = 0
    while i < len(text):
        if text[i] == "<":
            hit = next((s for s in _SPECIALS_LONGEST_FIRST if text.startswith(s, i)), None)
            if hit is not None:
                if pending:
                    ids.extend("".join(pending).encode("utf-8"))
                    pending.clear()
                ids.append(SPECIAL_TOKENS[hit])
                i += len(hit)
                continue
        pending.append(text[i])
        i += 1
    if pending:
        ids.extend("".join(pending).encode("utf-8"))
    return ids


def detokenize(ids: Iterable[int]) -> str:
    """Inverse of :func:`tokenize`. Unknown ids and invalid UTF-8 become U+FFFD."""
    parts: list[str] = []
    buf = bytearray()
    for t in ids:
        t = int(t)
        if 0 <= t < 256:
            buf.append(t)
            continue
        if buf:
            parts.append(buf.decode("utf-8", errors="replace"))
            buf.clear()
        parts.append(SPECIAL_IDS.get(t, REPLACEMENT))
    if buf:
        parts.append(buf.decode("utf-8", errors="replace"))
    return "".join(parts)


def tokenize_segments(segments: list[tuple[str, bool]]) -> tuple[list[int], list[bool]]:
    """Token ids plus a per-token flag marking answer tokens."""
    ids: list[int] = []
    flags: list[bool] = []
    for text, is_answer in segments:
        t = tokenize(text)
        ids.extend(t)
        flags.extend([is_answer] * len(t))
    return ids, flags
