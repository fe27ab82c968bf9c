"""Prompt construction for teacher and student expansion generation.

Two fixed templates share one system message; the few-shot variant adds
four query/passage exemplars ahead of the target query. Template text is
pinned byte-for-byte by golden tests.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

SYSTEM_MESSAGE = (
    "You are an assistant that generates detailed passages to answer search "
    "queries. Your responses should be informative, directly address the "
    "query, and provide comprehensive explanations or solutions."
)

INSTRUCTION = "Please write a passage (60-100 words) that answers it."

FEW_SHOT_EXEMPLARS: tuple[tuple[str, str], ...] = (
    (
        "what state is this zip code 85282",
        "Welcome to TEMPE, AZ 85282. 85282 is a rural zip code in Tempe, "
        "Arizona. The population is primarily white and mostly single. At "
        "$200,200 the average home value here is a bit higher than average "
        "for the Phoenix-Mesa-Scottsdale metro area, so this probably is not "
        "the place to look for housing bargains. 85282 Zip code is located "
        "in the Mountain time zone at 33 degrees latitude (Fun Fact: this "
        "is the same latitude as Damascus, Syria) and -112 degrees longitude.",
    ),
    (
        "why is gibbs model of reflection good",
        "In this reflection, I am going to use Gibbs (1988) Reflective "
        "Cycle. This model is a recognised framework for my reflection. "
        "Gibbs (1988) consists of six stages to complete one cycle which is "
        "able to improve my nursing practice continuously and learning from "
        "the experience for better practice in the future. In conclusion of "
        "my reflective assignment, I mention the model that I chose, Gibbs "
        "(1988) Reflective Cycle as my framework of my reflective. I state "
        "the reasons why I am choosing the model as well as some discussion "
        "on the importance of doing reflection in nursing practice.",
    ),
    (
        "what does a thousand pardons means",
        "Oh, that is all right, that is all right, give us a rest; never "
        "mind about the direction, hang the direction - I beg pardon, I beg "
        "a thousand pardons, I am not well today; pay no attention when I "
        "soliloquize, it is an old habit, an old, bad habit, and hard to "
        "get rid of when one's digestion is all disordered with eating food "
        "that was raised forever and ever before he was born; good land! A "
        "man cannot keep his functions regular on spring chickens thirteen "
        "hundred years old.",
    ),
    (
        "what is a macro warning",
        "Macro virus warning appears when no macros exist in the file in "
        "Word. When you open a Microsoft Word 2002 document or template, "
        "you may receive the following macro virus warning, even though the "
        "document or template does not contain macros: C:\\<path>\\<file "
        "name> contains macros. Macros may contain viruses.",
    ),
)


@dataclass(frozen=True)
class PromptTemplate:
    system: str = SYSTEM_MESSAGE
    exemplars: tuple[tuple[str, str], ...] = ()
    instruction: str = INSTRUCTION


ZERO_SHOT = PromptTemplate()
FEW_SHOT = PromptTemplate(exemplars=FEW_SHOT_EXEMPLARS)


def build_prompt(
    q: str, mode: str, instruction: str | None = None
) -> tuple[str, str]:
    """Return (system, user) messages for query `q` in "zero" or "few" mode.

    `instruction` overrides the final instruction line (e.g. to request a
    Chinese passage); the template text is otherwise fixed.
    """
    if not q:
        raise ValueError("query must be non-empty")
    if mode == "zero":
        template = ZERO_SHOT
    elif mode == "few":
        template = FEW_SHOT
    else:
        raise ValueError(f"unknown prompt mode: {mode!r}")
    lines = []
    for ex_query, ex_passage in template.exemplars:
        lines.append(f"Query: {ex_query}")
        lines.append(f"Passage: {ex_passage}")
    lines.append(f"Query: {q}")
    lines.append(instruction if instruction is not None else template.instruction)
    return template.system, "\n".join(lines)


def render_prompt(system: str, user: str) -> str:
    """Canonical single-string form of a (system, user) prompt pair."""
    return f"{system}\n\n{user}"


_QUERY_LINE_RE = re.compile(r"^Query: (.*)$", re.MULTILINE)


def query_from_prompt(prompt: str) -> str:
    """Recover the target query from a stored prompt string.

    The target is the last "Query:" line (exemplars precede it in few-shot
    prompts). Falls back to the whole text for free-form prompts.
    """
    matches = _QUERY_LINE_RE.findall(prompt)
    if matches:
        return matches[-1]
    return prompt
