from __future__ import annotations

import pytest

from memfl.errors import UnparseableSelection
from memfl.prompting import PromptBook, extract_json_array, guidance_cap, render_bug_info, section


def test_section_omits_blank_bodies():
    assert section("T", "  \n ") == ""
    assert section("T", "body") == "## T\nbody"


def test_render_collapses_blank_runs():
    book = PromptBook()
    text = book.render("review", project_section="", bug_info="info", guidance_section="")
    assert "\n\n\n" not in text
    assert "## Project summary" not in text


def test_override_directory(tmp_path):
    (tmp_path / "review.txt").write_text("custom ${bug_info}\n")
    book = PromptBook(tmp_path)
    assert book.render("review", bug_info="X", project_section="", guidance_section="") == "custom X\n"
    assert "experienced" in book.render("system")


@pytest.mark.parametrize(
    "reply, expected",
    [
        ('["a", "b"]', ["a", "b"]),
        ('Here:\n```json\n["x"]\n```\nand ["y"]', ["x"]),
        ('text [1, "z"] tail', ["z"]),
        ("```\n[\n \"a@1\"\n]\n```", ["a@1"]),
    ],
)
def test_extract_json_array(reply, expected):
    assert extract_json_array(reply) == expected


def test_extract_json_array_failure():
    with pytest.raises(UnparseableSelection):
        extract_json_array("I think it is Foo.bar")


def test_guidance_cap():
    assert guidance_cap("keep it tight\ncap: 3") == 3
    assert guidance_cap("- cap = 7\ncap: 2") == 2
    assert guidance_cap("no cap here") is None
    assert guidance_cap("cap: 0") is None


def test_bug_info_lists_helpers_only_when_asked(bugs):
    b06 = next(b for b in bugs if b.bug_id == "B06")
    full = render_bug_info(b06, with_helpers=True)
    short = render_bug_info(b06, with_helpers=False)
    assert "org.mini.TextTest::collect" in full
    assert "org.mini.TextTest::collect" not in short
    assert "testTokenizeDecimal" in short
