"""Document ingestion and question-answer data handling.

Documents are parsed into 1-based, contiguously numbered paragraphs. The
paragraph boundary is a blank line; single line breaks inside a paragraph are
treated as spaces. Paragraph and QA records are line-delimited JSON and
round-trip bit-identically through their writers.
"""

from __future__ import annotations

import csv
import json
import logging
import random
import re
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Iterable, Iterator, Literal, Mapping

from .errors import LumberkitError

if TYPE_CHECKING:
    from .backends import CompletionBackend

logger = logging.getLogger(__name__)

PARAGRAPH_SEPARATOR = "\n\n"

TokenCounter = Callable[[str], int]

DocumentFormat = Literal["plain_text", "paragraph_records"]

_QA_COLUMNS = ("doc_id", "question", "answer", "supporting_passage")


class CorpusError(LumberkitError):
    """Problem with document or QA input data."""


class EmptyDocumentError(CorpusError):
    """The input text contains no non-whitespace content."""


class MalformedRecordError(CorpusError):
    """A record file contains an unusable line."""

    def __init__(self, path: object, line_number: int, reason: str):
        super().__init__(f"{path}, line {line_number}: {reason}")
        self.line_number = line_number


class MissingColumnError(CorpusError):
    """A QA table lacks one of the required columns."""

    def __init__(self, column: str, path: object = None):
        where = f" in {path}" if path is not None else ""
        super().__init__(f"missing required column {column!r}{where}")
        self.column = column


@dataclass(frozen=True)
class Paragraph:
    """One paragraph of a document; index is 1-based within the document."""

    index: int
    text: str

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ValueError(f"paragraph index must be >= 1, got {self.index}")
        if not self.text or self.text != self.text.strip():
            raise ValueError("paragraph text must be non-empty and stripped")


@dataclass(frozen=True)
class Document:
    """An ordered, contiguously indexed sequence of paragraphs."""

    doc_id: str
    title: str
    paragraphs: tuple[Paragraph, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "paragraphs", tuple(self.paragraphs))
        if not self.paragraphs:
            raise ValueError("a document must contain at least one paragraph")
        for position, para in enumerate(self.paragraphs, start=1):
            if para.index != position:
                raise ValueError(
                    f"paragraph indices must run 1..{len(self.paragraphs)} "
                    f"contiguously; found {para.index} at position {position}"
                )

    def __len__(self) -> int:
        return len(self.paragraphs)

    @property
    def text(self) -> str:
        """The normalized document text: paragraphs joined by blank lines."""
        return PARAGRAPH_SEPARATOR.join(p.text for p in self.paragraphs)

    def paragraph(self, index: int) -> Paragraph:
        if not 1 <= index <= len(self.paragraphs):
            raise CorpusError(f"paragraph index {index} outside 1..{len(self.paragraphs)}")
        return self.paragraphs[index - 1]


@dataclass(frozen=True)
class QAPair:
    """A question with its gold answer and the passage that supports it."""

    doc_id: str
    question: str
    answer: str
    supporting_passage: str

    def __post_init__(self) -> None:
        if not self.supporting_passage.strip():
            raise ValueError("supporting_passage must be non-empty")


def split_paragraphs(raw_text: str) -> list[Paragraph]:
    """Split raw text into 1-indexed paragraphs on blank-line boundaries.

    Runs of blank lines collapse into a single boundary, single line breaks
    inside a paragraph become spaces, and each paragraph is trimmed.
    Raises EmptyDocumentError when nothing but whitespace remains.
    """
    normalized = raw_text.replace("\r\n", "\n").replace("\r", "\n")
    paragraphs: list[Paragraph] = []
    for block in re.split(r"\n\s*\n", normalized):
        lines = (line.strip() for line in block.split("\n"))
        text = " ".join(line for line in lines if line)
        if text:
            paragraphs.append(Paragraph(index=len(paragraphs) + 1, text=text))
    if not paragraphs:
        raise EmptyDocumentError("input text contains no paragraphs")
    return paragraphs


def default_token_counter(text: str) -> int:
    """Deterministic proxy for subword counts: ceil(word_count * 4 / 3)."""
    words = len(text.split())
    return (4 * words + 2) // 3


def count_tokens(text: str, counter: TokenCounter | None = None) -> int:
    """Count tokens with the given counter, or the default word-based one."""
    return (counter or default_token_counter)(text)


def load_document(
    path: str | Path,
    format: DocumentFormat = "plain_text",
    *,
    doc_id: str | None = None,
    title: str | None = None,
) -> Document:
    """Load a document from disk.

    plain_text files are split on blank lines. paragraph_records files hold
    one JSON record per line with doc_id/index/text fields; records keep their
    file order and indices are reassigned contiguously from 1.
    """
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise CorpusError(f"{path} is not valid UTF-8: {exc}") from exc
    if format == "plain_text":
        paragraphs = split_paragraphs(raw)
        resolved_id = doc_id or path.stem
        return Document(resolved_id, title or resolved_id, tuple(paragraphs))
    if format == "paragraph_records":
        return _document_from_records(raw, path, doc_id=doc_id, title=title)
    raise ValueError(f"unknown document format: {format!r}")


def _document_from_records(
    raw: str, path: Path, *, doc_id: str | None, title: str | None
) -> Document:
    paragraphs: list[Paragraph] = []
    record_doc_id: str | None = None
    for line_number, line in enumerate(raw.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedRecordError(path, line_number, f"invalid JSON: {exc}") from exc
        if not isinstance(record, dict):
            raise MalformedRecordError(path, line_number, "record is not an object")
        for field in ("doc_id", "index", "text"):
            if field not in record:
                raise MalformedRecordError(path, line_number, f"missing field {field!r}")
        lines = (part.strip() for part in str(record["text"]).split("\n"))
        text = " ".join(part for part in lines if part)
        if not text:
            raise MalformedRecordError(path, line_number, "empty paragraph text")
        if record_doc_id is None:
            record_doc_id = str(record["doc_id"])
        paragraphs.append(Paragraph(index=len(paragraphs) + 1, text=text))
    if not paragraphs:
        raise EmptyDocumentError(f"{path} contains no paragraph records")
    resolved_id = doc_id or record_doc_id or path.stem
    return Document(resolved_id, title or resolved_id, tuple(paragraphs))


def write_document(document: Document, path: str | Path) -> None:
    """Write paragraph records; reading them back round-trips bit-identically."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for para in document.paragraphs:
            record = {"doc_id": document.doc_id, "index": para.index, "text": para.text}
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def _iter_jsonl_rows(path: Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecordError(path, line_number, f"invalid JSON: {exc}") from exc
            if not isinstance(record, dict):
                raise MalformedRecordError(path, line_number, "record is not an object")
            yield line_number, record


def _iter_delimited_rows(path: Path) -> Iterator[tuple[int, dict]]:
    delimiter = "\t" if path.suffix.lower() == ".tsv" else ","
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        header = reader.fieldnames or []
        for column in _QA_COLUMNS:
            if column not in header:
                raise MissingColumnError(column, path)
        for line_number, row in enumerate(reader, start=2):
            yield line_number, row


def _pairs_from_rows(rows: Iterable[tuple[int, dict]], path: Path) -> list[QAPair]:
    pairs: list[QAPair] = []
    skipped = 0
    for _line_number, row in rows:
        for column in ("doc_id", "question", "answer"):
            if column not in row or row[column] is None:
                raise MissingColumnError(column, path)
        passage = str(row.get("supporting_passage") or "").strip()
        if not passage:
            skipped += 1
            continue
        pairs.append(
            QAPair(
                doc_id=str(row["doc_id"]),
                question=str(row["question"]),
                answer=str(row["answer"]),
                supporting_passage=passage,
            )
        )
    if skipped:
        logger.warning("skipped %d QA row(s) with empty supporting passages in %s", skipped, path)
    return pairs


def load_qa(path: str | Path) -> list[QAPair]:
    """Load QA records from a .jsonl or delimited (.csv/.tsv) table.

    Required columns: doc_id, question, answer, supporting_passage. Rows with
    an empty supporting passage are skipped and counted in a logged warning;
    a structurally absent column raises MissingColumnError.
    """
    path = Path(path)
    if path.suffix.lower() in {".csv", ".tsv"}:
        rows: Iterable[tuple[int, dict]] = _iter_delimited_rows(path)
    else:
        rows = _iter_jsonl_rows(path)
    return _pairs_from_rows(rows, path)


def load_qa_mapped(path: str | Path, column_map: Mapping[str, str]) -> list[QAPair]:
    """Load QA rows whose columns use external names.

    column_map maps each of our column names (doc_id, question, answer,
    supporting_passage) to the name used in the file, so externally published
    question sets import without renaming files by hand.
    """
    for column in _QA_COLUMNS:
        if column not in column_map:
            raise MissingColumnError(column, path)
    path = Path(path)
    if path.suffix.lower() in {".csv", ".tsv"}:
        delimiter = "\t" if path.suffix.lower() == ".tsv" else ","
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh, delimiter=delimiter)
            header = reader.fieldnames or []
            for ours, theirs in column_map.items():
                if theirs not in header:
                    raise MissingColumnError(theirs, path)
            raw_rows = [(i, dict(row)) for i, row in enumerate(reader, start=2)]
    else:
        raw_rows = list(_iter_jsonl_rows(path))
        for line_number, row in raw_rows:
            for ours, theirs in column_map.items():
                if ours != "supporting_passage" and theirs not in row:
                    raise MissingColumnError(theirs, path)
    renamed = (
        (line_number, {ours: row.get(theirs) for ours, theirs in column_map.items()})
        for line_number, row in raw_rows
    )
    return _pairs_from_rows(renamed, path)


def write_qa(pairs: Iterable[QAPair], path: str | Path) -> None:
    """Write QA records as JSONL; load_qa reads them back bit-identically."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for pair in pairs:
            record = {
                "doc_id": pair.doc_id,
                "question": pair.question,
                "answer": pair.answer,
                "supporting_passage": pair.supporting_passage,
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


QA_PROMPT_TEMPLATE = """\
You are given an excerpt from the book "{title}". Write one question-answer \
pair that is specific to the excerpt, together with the exact sentence or \
sentences from the excerpt that support the answer. Copy the supporting \
passage verbatim; do not shorten it with ellipses. Use exactly the field \
layout of the example.

Example:

Passage: The lighthouse keeper wound the great clock at midnight, as his \
father had done before him. The town below slept without ever hearing it.
Question: When did the lighthouse keeper wind the great clock?
Answer: He wound it at midnight.
Supporting Passage: The lighthouse keeper wound the great clock at midnight, \
as his father had done before him.

Passage: {passage}
"""

_QA_FIELD_RE = re.compile(
    r"Question\s*:\s*(?P<question>.+?)\s*"
    r"Answer\s*:\s*(?P<answer>.+?)\s*"
    r"Supporting Passage\s*:\s*(?P<passage>.+?)\s*$",
    re.IGNORECASE | re.DOTALL,
)


def normalize_whitespace(text: str) -> str:
    """Collapse all whitespace runs to single spaces and trim the ends."""
    return " ".join(text.split())


def parse_qa_response(response: str) -> tuple[str, str, str] | None:
    """Extract (question, answer, supporting passage) or None when unusable."""
    match = _QA_FIELD_RE.search(response)
    if match is None:
        return None
    question = normalize_whitespace(match.group("question"))
    answer = normalize_whitespace(match.group("answer"))
    passage = match.group("passage").strip()
    if not question or not answer or not passage:
        return None
    return question, answer, passage


def generate_qa(
    document: Document,
    llm: CompletionBackend,
    n: int,
    *,
    seed: int = 0,
    max_retries: int = 2,
    window_range: tuple[int, int] = (3, 6),
) -> list[QAPair]:
    """Generate up to n QA pairs from randomly sampled passages.

    Each sample is a window of 3-6 consecutive paragraphs drawn with the
    seeded RNG. The backend answers with Question/Answer/Supporting Passage
    fields; pairs whose supporting passage does not occur verbatim in the
    document (after whitespace normalization) are dropped. Parse failures and
    rejected passages are counted in a logged warning. n=0 makes no calls.
    """
    from .backends import BackendError

    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    rng = random.Random(seed)
    doc_normalized = normalize_whitespace(document.text)
    pairs: list[QAPair] = []
    parse_failures = 0
    rejected = 0
    for _ in range(n):
        low, high = window_range
        span = min(rng.randint(low, high), len(document))
        start = rng.randint(1, len(document) - span + 1)
        passage = PARAGRAPH_SEPARATOR.join(
            p.text for p in document.paragraphs[start - 1 : start - 1 + span]
        )
        prompt = QA_PROMPT_TEMPLATE.format(title=document.title, passage=passage)
        last_error: BackendError | None = None
        response = None
        for _attempt in range(max_retries + 1):
            try:
                response = llm.complete(prompt, temperature=0.0)
                break
            except BackendError as exc:
                last_error = exc
        if response is None:
            raise BackendError(f"QA generation failed after {max_retries + 1} attempts: {last_error}")
        triple = parse_qa_response(response)
        if triple is None:
            parse_failures += 1
            continue
        question, answer, supporting = triple
        if normalize_whitespace(supporting) not in doc_normalized:
            rejected += 1
            continue
        pairs.append(QAPair(document.doc_id, question, answer, supporting))
    if parse_failures or rejected:
        logger.warning(
            "generate_qa: %d unparsable response(s), %d passage(s) not found verbatim",
            parse_failures,
            rejected,
        )
    return pairs
