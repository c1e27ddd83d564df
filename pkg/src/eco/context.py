"""Turn plain-text / markdown domain documents into chunks and typed training queries."""
from __future__ import annotations

import json
import logging
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .backends import BackendError, TextGenerationClient
from .tokens import count_tokens, token_spans

log = logging.getLogger(__name__)

MERGE_BELOW = 200
SPLIT_ABOVE = 2000
SUITABLE_MIN_TOKENS = 100

CLEANING_PROMPT = (
    "Clean and format the following text to make it grammatically correct and properly "
    "formatted. Remove unnecessary characters and fix indentation while preserving all "
    "important information. Do not summarize or explain the content. Only return the "
    "cleaned text.\n\n"
    "Text to clean: {CONTENT}\n\n"
    "Cleaned text:"
)

QUESTION_PROMPT = (
    "Generate a challenging {query_type} question from this content: {content}\n\n"
    "Requirements:\n"
    "- Make question highly specific and contextual\n"
    "- Combine multiple aspects or features\n"
    "- Include edge cases or conditional scenarios\n"
    "- Require deep system understanding\n"
    "- Answer should be comprehensive with technical details\n"
    "- Evaluation must check for nuanced understanding\n\n"
    "Return complex JSON:\n"
    '{{  "question": "sophisticated question requiring deep analysis",\n'
    '  "answer": "detailed technical answer with reasoning and edge cases",\n'
    '  "evaluation_guideline": "specific technical points and reasoning to verify"}}'
)

SUITABILITY_PROMPT = (
    "Domain: {domain}\n\nIs the following content suitable for generating a {query_type} "
    "question? Answer yes or no.\n\n{content}"
)


class QueryType(str, Enum):
    RETRIEVAL = "retrieval"
    EXPLANATION = "explanation"
    ANALYSIS = "analysis"
    SOLVING = "solving"
    COMPARISON = "comparison"
    RECOMMENDATION = "recommendation"


QUERY_TYPES: tuple[QueryType, ...] = tuple(QueryType)


@dataclass(frozen=True)
class Section:
    heading: str
    level: int
    start: int
    end: int


@dataclass
class SourceDocument:
    id: str
    title: str
    body: str
    sections: list[Section] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.body.strip():
            raise ValueError(f"document {self.id!r} has an empty body")
        starts = [s.start for s in self.sections]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError(f"document {self.id!r}: section offsets must strictly increase")


@dataclass
class DocumentChunk:
    id: str
    text: str
    token_count: int
    section_title: str
    doc_id: str
    start: int
    end: int


@dataclass
class TrainingQuery:
    id: str
    text: str
    type: QueryType
    reference_answer: str
    evaluation_guideline: str
    split: str = "train"
    chunk_id: str = ""

    def __post_init__(self) -> None:
        self.type = QueryType(self.type)
        if not (self.text.strip() and self.reference_answer.strip() and self.evaluation_guideline.strip()):
            raise ValueError(f"query {self.id!r} is missing question, answer or guideline")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["type"] = self.type.value
        return d


class GenerationAborted(RuntimeError):
    def __init__(self, message: str, partial: list[TrainingQuery]):
        super().__init__(message)
        self.partial = partial


# -- ingestion --------------------------------------------------------------------

_HEADING_RE = re.compile(r"^(#{1,6})[ \t]+(.+?)[ \t]*#*[ \t]*$", re.M)


def parse_markdown(doc_id: str, text: str, title: str | None = None) -> SourceDocument:
    """Sections start at each ``#`` heading line and tile the body exactly.

    Non-blank text before the first heading forms a leading section titled
    after the document; leading whitespace is folded into the first section.
    """
    matches = list(_HEADING_RE.finditer(text))
    if title is None:
        title = matches[0].group(2).strip() if matches else doc_id
    if not matches:
        return SourceDocument(doc_id, title, text, [Section(title, 0, 0, len(text))])
    sections: list[Section] = []
    first = matches[0].start()
    if text[:first].strip():
        sections.append(Section(title, 0, 0, first))
    for i, m in enumerate(matches):
        start = 0 if i == 0 and not sections else m.start()
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        sections.append(Section(m.group(2).strip(), len(m.group(1)), start, end))
    return SourceDocument(doc_id, title, text, sections)


def load_documents(directory: str | Path) -> list[SourceDocument]:
    root = Path(directory)
    docs = []
    for path in sorted(root.rglob("*")):
        if path.suffix.lower() not in (".md", ".markdown", ".txt") or not path.is_file():
            continue
        text = path.read_text(encoding="utf-8")
        if not text.strip():
            log.warning("skipping empty document %s", path)
            continue
        docs.append(parse_markdown(path.relative_to(root).as_posix(), text))
    return docs


def clean_content(raw: str, generator: TextGenerationClient | None, chunk_id: str = "") -> str:
    if not raw.strip() or generator is None:
        return raw.strip()
    try:
        return generator.generate(CLEANING_PROMPT.replace("{CONTENT}", raw)).strip()
    except BackendError as exc:
        raise BackendError(f"cleaning {chunk_id or 'content'} failed: {exc}") from exc


# -- chunking -----------------------------------------------------------------------

TokenCounter = Callable[[str], int]


def _split_large(body: str, start: int, end: int, counter: TokenCounter) -> list[tuple[int, int]]:
    """Cut [start, end) at paragraph boundaries into pieces of at most SPLIT_ABOVE tokens."""
    # paragraph j spans [bounds[j], bounds[j+1]); separators stay with the preceding paragraph
    bounds = [start]
    for m in re.finditer(r"\n[ \t]*\n\s*", body[start:end]):
        cut = start + m.end()
        if start < cut < end:
            bounds.append(cut)
    bounds.append(end)
    paragraphs = list(zip(bounds, bounds[1:]))

    pieces: list[tuple[int, int]] = []
    cur_start, cur_tokens = None, 0
    for p_start, p_end in paragraphs:
        p_tokens = counter(body[p_start:p_end])
        if p_tokens > SPLIT_ABOVE:
            if cur_start is not None:
                pieces.append((cur_start, p_start))
                cur_start, cur_tokens = None, 0
            pieces.extend(_hard_split(body, p_start, p_end))
            continue
        if cur_start is not None and cur_tokens + p_tokens > SPLIT_ABOVE:
            pieces.append((cur_start, p_start))
            cur_start, cur_tokens = None, 0
        if cur_start is None:
            cur_start = p_start
        cur_tokens += p_tokens
    if cur_start is not None:
        pieces.append((cur_start, end))
    return pieces


def _hard_split(body: str, start: int, end: int) -> list[tuple[int, int]]:
    spans = token_spans(body[start:end])
    cuts = [start + spans[i][0] for i in range(SPLIT_ABOVE, len(spans), SPLIT_ABOVE)]
    edges = [start, *cuts, end]
    return list(zip(edges, edges[1:]))


def chunk_documents(docs: Sequence[SourceDocument], token_counter: TokenCounter = count_tokens) -> list[DocumentChunk]:
    """Merge sub-200-token sections forward, keep 200-2000 as-is, split larger ones.

    Chunk texts are exact slices of the source body, in order, so the chunks of
    a document concatenate back to its body.
    """
    chunks: list[DocumentChunk] = []
    for doc in docs:
        sections = doc.sections or [Section(doc.title, 0, 0, len(doc.body))]
        groups: list[tuple[int, int, str]] = []
        g_start, g_titles, g_tokens = None, [], 0
        for sec in sections:
            if g_start is None:
                g_start = sec.start
            g_titles.append(sec.heading)
            g_tokens += token_counter(doc.body[sec.start:sec.end])
            if g_tokens >= MERGE_BELOW:
                groups.append((g_start, sec.end, " / ".join(g_titles)))
                g_start, g_titles, g_tokens = None, [], 0
        if g_start is not None:
            tail = (g_start, sections[-1].end, " / ".join(g_titles))
            if groups and token_counter(doc.body[groups[-1][0]:tail[1]]) <= SPLIT_ABOVE:
                prev = groups.pop()
                groups.append((prev[0], tail[1], f"{prev[2]} / {tail[2]}"))
            else:
                groups.append(tail)

        pieces: list[tuple[int, int, str]] = []
        for start, end, title in groups:
            if token_counter(doc.body[start:end]) > SPLIT_ABOVE:
                pieces.extend((s, e, title) for s, e in _split_large(doc.body, start, end, token_counter))
            else:
                pieces.append((start, end, title))
        for n, (start, end, title) in enumerate(pieces):
            text = doc.body[start:end]
            chunks.append(DocumentChunk(f"{doc.id}#{n}", text, token_counter(text), title, doc.id, start, end))
    return chunks


# -- query generation --------------------------------------------------------------------

_JSON_OBJ_RE = re.compile(r"\{.*\}", re.S)


def _parse_generated(text: str) -> dict | None:
    m = _JSON_OBJ_RE.search(text)
    if not m:
        return None
    try:
        doc = json.loads(m.group(0))
    except json.JSONDecodeError:
        return None
    if not isinstance(doc, dict):
        return None
    keys = ("question", "answer", "evaluation_guideline")
    if not all(isinstance(doc.get(k), str) and doc[k].strip() for k in keys):
        return None
    return doc


def is_suitable(chunk: DocumentChunk, query_type: QueryType, domain_description: str,
                generator: TextGenerationClient | None) -> bool:
    if chunk.token_count < SUITABLE_MIN_TOKENS:
        return False
    if generator is None:
        return True
    prompt = SUITABILITY_PROMPT.format(domain=domain_description, query_type=query_type.value,
                                       content=chunk.text)
    return generator.generate(prompt).strip().lower().startswith("yes")


def generate_queries(
    chunks: Sequence[DocumentChunk],
    domain_description: str,
    generator: TextGenerationClient,
    per_type_count: int = 1,
    *,
    probe: TextGenerationClient | None = None,
    types: Iterable[QueryType] = QUERY_TYPES,
    max_in_flight: int = 4,
) -> list[TrainingQuery]:
    """One query per (chunk, type, ordinal) for every suitable pair.

    ``probe`` is the optional generator used for the yes/no suitability check;
    without it only the token-count floor applies.  On an unreachable
    generator, raise GenerationAborted carrying the queries finished so far.
    """
    types = tuple(types)
    jobs = [
        (chunk, qtype, ordinal)
        for chunk in chunks
        for qtype in types
        for ordinal in range(per_type_count)
    ]

    def run(job) -> TrainingQuery | None:
        chunk, qtype, ordinal = job
        if not is_suitable(chunk, qtype, domain_description, probe):
            return None
        prompt = f"Domain: {domain_description}\n\n" if domain_description else ""
        prompt += QUESTION_PROMPT.format(query_type=qtype.value, content=chunk.text)
        for _attempt in range(2):
            doc = _parse_generated(generator.generate(prompt))
            if doc is not None:
                return TrainingQuery(
                    id=f"{chunk.id}:{qtype.value}:{ordinal}",
                    text=doc["question"].strip(),
                    type=qtype,
                    reference_answer=doc["answer"].strip(),
                    evaluation_guideline=doc["evaluation_guideline"].strip(),
                    chunk_id=chunk.id,
                )
        log.warning("generator returned malformed JSON twice for %s/%s; skipping", chunk.id, qtype.value)
        return None

    results: list[TrainingQuery] = []
    with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
        futures = [pool.submit(run, job) for job in jobs]
        for fut in futures:
            try:
                q = fut.result()
            except BackendError as exc:
                for other in futures:
                    other.cancel()
                raise GenerationAborted(f"generator unreachable: {exc}", results) from exc
            if q is not None:
                results.append(q)
    return results


def _largest_remainder(quotas: dict, total: int) -> dict:
    floors = {k: int(v) for k, v in quotas.items()}
    left = total - sum(floors.values())
    order = sorted(quotas, key=lambda k: (-(quotas[k] - floors[k]), list(quotas).index(k)))
    for k in order[:max(0, left)]:
        floors[k] += 1
    return floors


def round_half_up(x: float) -> int:
    return int(x + 0.5) if x >= 0 else -int(-x + 0.5)


def split_train_test(queries: Sequence[TrainingQuery], ratio: float = 0.75,
                     seed: int = 0) -> tuple[list[TrainingQuery], list[TrainingQuery]]:
    """Stratified by query type; overall train size is round(ratio * eligible)."""
    if not 0 < ratio < 1:
        raise ValueError("ratio must be in (0, 1)")
    by_type: dict[QueryType, list[TrainingQuery]] = {}
    for q in queries:
        by_type.setdefault(q.type, []).append(q)
    eligible = {t: qs for t, qs in by_type.items() if len(qs) >= 2}
    for t, qs in by_type.items():
        if t not in eligible:
            log.warning("only %d queries of type %s; all assigned to train", len(qs), t.value)
    n_eligible = sum(len(qs) for qs in eligible.values())
    quotas = {t: ratio * len(qs) for t, qs in eligible.items()}
    alloc = _largest_remainder(quotas, round_half_up(ratio * n_eligible))

    rng = random.Random(seed)
    train_ids: set[str] = set()
    for t in QUERY_TYPES:
        qs = by_type.get(t)
        if not qs:
            continue
        ids = sorted(q.id for q in qs)
        if t in eligible:
            rng.shuffle(ids)
            ids = ids[: alloc[t]]
        train_ids.update(ids)
    train, test = [], []
    for q in queries:
        q.split = "train" if q.id in train_ids else "test"
        (train if q.split == "train" else test).append(q)
    return train, test


# -- persistence ----------------------------------------------------------------------

def write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def save_queries(path: str | Path, queries: Iterable[TrainingQuery]) -> None:
    write_jsonl(path, (q.to_dict() for q in queries))


def load_queries(path: str | Path) -> list[TrainingQuery]:
    return [TrainingQuery(**row) for row in read_jsonl(path)]


def save_chunks(path: str | Path, chunks: Iterable[DocumentChunk]) -> None:
    write_jsonl(path, (asdict(c) for c in chunks))


def load_chunks(path: str | Path) -> list[DocumentChunk]:
    return [DocumentChunk(**row) for row in read_jsonl(path)]
