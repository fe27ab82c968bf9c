import pytest

from qedistill.prompts import build_prompt, query_from_prompt, render_prompt

GOLDEN_SYSTEM = (
    "You are an assistant that generates detailed passages to answer search "
    "queries. Your responses should be informative, directly address the "
    "query, and provide comprehensive explanations or solutions."
)

GOLDEN_ZERO_USER = (
    "Query: what is bm25\n"
    "Please write a passage (60-100 words) that answers it."
)


def test_zero_shot_golden():
    system, user = build_prompt("what is bm25", "zero")
    assert system == GOLDEN_SYSTEM
    assert user == GOLDEN_ZERO_USER


def test_few_shot_has_exactly_four_exemplar_blocks():
    _, user = build_prompt("what is bm25", "few")
    assert user.count("Passage: ") == 4
    # 4 exemplar queries + the target query
    assert user.count("Query: ") == 5
    assert user.endswith(GOLDEN_ZERO_USER)


def test_few_shot_golden_exemplar_fragments():
    _, user = build_prompt("x", "few")
    assert "Query: what state is this zip code 85282" in user
    assert "Query: why is gibbs model of reflection good" in user
    assert "Query: what does a thousand pardons means" in user
    assert "Query: what is a macro warning" in user
    assert "Welcome to TEMPE, AZ 85282." in user
    assert "C:\\<path>\\<file name> contains macros." in user


def test_system_text_shared_across_modes():
    assert build_prompt("q", "zero")[0] == build_prompt("q", "few")[0]


def test_instruction_override():
    _, user = build_prompt(
        "q", "zero",
        instruction="Please write a passage (60-100 words) in Chinese that answers it.",
    )
    assert user.endswith("in Chinese that answers it.")


def test_empty_query_rejected():
    with pytest.raises(ValueError):
        build_prompt("", "zero")


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        build_prompt("q", "one")


def test_prompt_construction_deterministic():
    assert build_prompt("same q", "few") == build_prompt("same q", "few")


def test_query_round_trips_through_rendered_prompt():
    for mode in ("zero", "few"):
        system, user = build_prompt("what is bm25", mode)
        assert query_from_prompt(render_prompt(system, user)) == "what is bm25"


def test_query_from_free_form_prompt_falls_back():
    assert query_from_prompt("just a plain question") == "just a plain question"
