import json
import logging

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eco.backends import BackendError
from eco.context import (
    QUERY_TYPES, DocumentChunk, GenerationAborted, QueryType, TrainingQuery, chunk_documents, clean_content,
    generate_queries, load_documents, load_queries, parse_markdown, save_queries, split_train_test,
)
from eco.tokens import count_tokens


def section(title: str, n_tokens: int, paragraphs: int = 1) -> str:
    """A markdown section whose text is exactly ``n_tokens`` tokens long."""
    body_tokens = n_tokens - 2  # "#" and the single-word title
    per = [body_tokens // paragraphs] * paragraphs
    per[-1] += body_tokens - sum(per)
    paras = [" ".join(f"w{title}{p}x{i}" for i in range(n)) for p, n in enumerate(per)]
    text = f"# {title}\n" + "\n\n".join(paras) + "\n\n"
    assert count_tokens(text) == n_tokens
    return text


class Recorder:
    def __init__(self, reply):
        self.reply = reply
        self.prompts: list[str] = []

    def generate(self, prompt: str) -> str:
        self.prompts.append(prompt)
        return self.reply(prompt) if callable(self.reply) else self.reply


VALID = json.dumps({"question": "Q?", "answer": "A.", "evaluation_guideline": "G."})


def make_chunks(n: int, tokens: int = 150) -> list[DocumentChunk]:
    text = " ".join(f"t{i}" for i in range(tokens))
    return [DocumentChunk(f"doc#{i}", text, tokens, "S", "doc", 0, len(text)) for i in range(n)]


def make_queries(per_type: int) -> list[TrainingQuery]:
    return [TrainingQuery(f"q{t.value}{i}", "text", t, "ref", "guide", chunk_id="c")
            for t in QUERY_TYPES for i in range(per_type)]


# -- ingestion and cleaning

def test_parse_markdown_sections_tile_body():
    text = "intro line\n# One\nalpha\n## Two\nbeta\n"
    doc = parse_markdown("d", text)
    assert [s.heading for s in doc.sections] == ["One", "One", "Two"]
    assert doc.sections[0].start == 0 and doc.sections[-1].end == len(text)
    assert all(a.end == b.start for a, b in zip(doc.sections, doc.sections[1:]))
    assert doc.sections[2].level == 2


def test_load_documents_skips_empty(tmp_path):
    (tmp_path / "a.md").write_text("# A\nbody\n")
    (tmp_path / "b.md").write_text("   \n")
    (tmp_path / "c.bin").write_text("ignored")
    assert [d.id for d in load_documents(tmp_path)] == ["a.md"]


def test_clean_content_identity_generator():
    echo = Recorder(lambda p: p.split("Text to clean: ")[1].split("\n\nCleaned text:")[0])
    assert clean_content("  raw text here ", echo) == "raw text here"
    assert "Cleaned text:" in echo.prompts[0].splitlines()


def test_clean_content_empty_skips_call():
    rec = Recorder("x")
    assert clean_content("   ", rec) == ""
    assert rec.prompts == []


def test_clean_content_error_names_chunk():
    class Broken:
        def generate(self, prompt):
            raise BackendError("down")
    with pytest.raises(BackendError, match="doc#3"):
        clean_content("text", Broken(), chunk_id="doc#3")


# -- chunking

def test_three_small_sections_merge():
    text = "".join(section(t, 80) for t in ("A", "B", "C"))
    (chunk,) = chunk_documents([parse_markdown("d", text)])
    assert chunk.token_count == 240
    assert chunk.section_title == "A / B / C"
    assert chunk.text == text


def test_medium_section_passes_through():
    text = section("Mid", 500)
    (chunk,) = chunk_documents([parse_markdown("d", text)])
    assert chunk.text == text and chunk.token_count == 500


def test_large_section_splits_at_paragraphs():
    text = section("Big", 4500, paragraphs=3)
    chunks = chunk_documents([parse_markdown("d", text)])
    assert len(chunks) == 3
    assert [c.token_count for c in chunks] == [count_tokens(c.text) for c in chunks]
    assert all(c.token_count <= 2000 for c in chunks)
    assert "".join(c.text for c in chunks) == text


def test_single_huge_paragraph_hard_split():
    text = section("Huge", 4100)
    chunks = chunk_documents([parse_markdown("d", text)])
    assert [c.token_count for c in chunks] == [2000, 2000, 100]
    assert "".join(c.text for c in chunks) == text


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(3, 1500), min_size=1, max_size=12))
def test_chunk_conservation_and_bands(sizes):
    text = "".join(section(f"S{i}", n) for i, n in enumerate(sizes))
    chunks = chunk_documents([parse_markdown("d", text)])
    assert "".join(c.text for c in chunks) == text
    assert all(c.token_count <= 2000 for c in chunks)
    for a, b in zip(chunks, chunks[1:]):
        assert not (a.token_count < 200 and b.token_count < 200)
        assert a.end == b.start


# -- query generation

def test_two_chunks_six_types():
    out = generate_queries(make_chunks(2), "ops", Recorder(VALID))
    assert len(out) == 12
    assert {q.type for q in out} == set(QueryType)
    assert all(q.text and q.reference_answer and q.evaluation_guideline for q in out)
    assert out[0].id == "doc#0:retrieval:0"


def test_prompt_contains_json_fragment():
    rec = Recorder(VALID)
    generate_queries(make_chunks(1), "", rec, types=[QueryType.ANALYSIS])
    assert "Return complex JSON" in rec.prompts[0]
    assert "challenging analysis question" in rec.prompts[0]


def test_malformed_json_retried_once_then_skipped(caplog):
    rec = Recorder("sorry, no")
    with caplog.at_level(logging.WARNING):
        out = generate_queries(make_chunks(1), "", rec, types=[QueryType.SOLVING])
    assert out == []
    assert len(rec.prompts) == 2
    assert "malformed" in caplog.text


def test_malformed_pair_does_not_stop_run():
    calls = {"n": 0}

    def reply(prompt):
        calls["n"] += 1
        return "broken" if "retrieval question" in prompt else VALID
    out = generate_queries(make_chunks(1), "", Recorder(reply), max_in_flight=1)
    assert len(out) == 5 and calls["n"] == 7


def test_short_chunks_unsuitable():
    assert generate_queries(make_chunks(2, tokens=40), "", Recorder(VALID)) == []


def test_unreachable_generator_keeps_partial():
    calls = {"n": 0}

    class Flaky:
        def generate(self, prompt):
            calls["n"] += 1
            if calls["n"] > 3:
                raise BackendError("gone")
            return VALID
    with pytest.raises(GenerationAborted) as info:
        generate_queries(make_chunks(2), "", Flaky(), max_in_flight=1)
    assert len(info.value.partial) == 3


def test_queries_jsonl_round_trip(tmp_path):
    qs = make_queries(1)
    save_queries(tmp_path / "q.jsonl", qs)
    assert load_queries(tmp_path / "q.jsonl") == qs
    row = json.loads((tmp_path / "q.jsonl").read_text().splitlines()[0])
    assert set(row) == {"id", "text", "type", "reference_answer", "evaluation_guideline", "split", "chunk_id"}


# -- splitting

def test_split_hundred():
    qs = [TrainingQuery(f"q{i}", "t", QUERY_TYPES[i % 6], "r", "g") for i in range(100)]
    train, test = split_train_test(qs, 0.75, seed=1)
    assert (len(train), len(test)) == (75, 25)
    assert all(q.split == "train" for q in train) and all(q.split == "test" for q in test)


def test_split_per_type_rounding():
    train, test = split_train_test(make_queries(4), 0.75, seed=0)
    for t in QueryType:
        assert sum(q.type == t for q in train) == 3
        assert sum(q.type == t for q in test) == 1


def test_split_deterministic():
    a = [q.id for q in split_train_test(make_queries(5), 0.75, seed=9)[0]]
    b = [q.id for q in split_train_test(make_queries(5), 0.75, seed=9)[0]]
    assert a == b


def test_split_lonely_type_goes_to_train(caplog):
    qs = make_queries(3)[:-2]  # one recommendation query left
    with caplog.at_level(logging.WARNING):
        train, _ = split_train_test(qs, 0.75)
    assert any(q.type == QueryType.RECOMMENDATION for q in train)
    assert "recommendation" in caplog.text


def test_split_rejects_bad_ratio():
    with pytest.raises(ValueError):
        split_train_test(make_queries(2), 1.0)
