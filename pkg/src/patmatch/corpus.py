"""Patent corpus and matching-question loading.

Both inputs are line-delimited JSON (one record per line, UTF-8). A corpus
record carries ``id``, ``abstract`` and optionally ``title``, ``language``,
``ipc_section``. A question record carries ``id``, ``query`` (a full patent
record), ``options`` (mapping A-D to patent records), ``gold``, ``language``
and ``ipc_section``. See ``schemas/`` for the JSON Schemas and
``tests/fixtures/`` for worked examples.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

logger = logging.getLogger(__name__)

IPC_SECTIONS = ("HUM", "OPER", "CHEM", "TEXT", "CONS", "MECH", "PHYS", "ELEC")
LANGUAGES = ("EN", "ZH")
OPTION_IDS = ("A", "B", "C", "D")


class CorpusFormatError(ValueError):
    """A corpus or question file violates the documented record format."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateIdError(CorpusFormatError):
    """Two records in one file share an id."""


@dataclass(frozen=True)
class PatentDoc:
    """One patent abstract; the unit of retrieval and matching."""

    id: str
    abstract: str
    title: str | None = None
    language: str = "EN"
    ipc_section: str | None = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("patent id must be nonempty")
        if not self.abstract.strip():
            raise ValueError(f"patent {self.id!r}: abstract is empty")
        if self.language not in LANGUAGES:
            raise ValueError(f"patent {self.id!r}: unknown language {self.language!r}")
        if self.ipc_section is not None and self.ipc_section not in IPC_SECTIONS:
            raise ValueError(
                f"patent {self.id!r}: unknown ipc_section {self.ipc_section!r}"
            )


@dataclass(frozen=True)
class MatchQuestion:
    """A query patent plus four candidate patents labeled A-D and a gold label."""

    id: str
    query: PatentDoc
    options: Mapping[str, PatentDoc]
    gold: str
    language: str
    ipc_section: str

    def __post_init__(self):
        if not self.id:
            raise ValueError("question id must be nonempty")
        keys = tuple(self.options.keys())
        if keys != OPTION_IDS:
            missing = [k for k in OPTION_IDS if k not in keys]
            if missing:
                raise ValueError(
                    f"question {self.id!r}: missing option {', '.join(missing)}"
                )
            extra = [k for k in keys if k not in OPTION_IDS]
            if extra:
                raise ValueError(f"question {self.id!r}: unknown option keys {extra}")
            # All four present but out of order: canonicalize.
            object.__setattr__(self, "options", {k: self.options[k] for k in OPTION_IDS})
        if self.gold not in OPTION_IDS:
            raise ValueError(f"question {self.id!r}: gold label {self.gold!r} not in A-D")
        if self.query.id in {o.id for o in self.options.values()}:
            raise ValueError(
                f"question {self.id!r}: query id {self.query.id!r} collides with an option id"
            )
        if self.language not in LANGUAGES:
            raise ValueError(f"question {self.id!r}: unknown language {self.language!r}")
        if self.ipc_section not in IPC_SECTIONS:
            raise ValueError(
                f"question {self.id!r}: unknown ipc_section {self.ipc_section!r}"
            )

    @property
    def gold_doc(self) -> PatentDoc:
        return self.options[self.gold]


@dataclass
class CorpusStore:
    """Immutable-after-load id-addressed patent store, iterated in load order."""

    docs: dict[str, PatentDoc] = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.docs)

    def __len__(self) -> int:
        return len(self.docs)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self.docs

    def __iter__(self) -> Iterator[PatentDoc]:
        return iter(self.docs.values())

    def get(self, doc_id: str) -> PatentDoc:
        return self.docs[doc_id]

    def add(self, doc: PatentDoc, line: int | None = None) -> None:
        if doc.id in self.docs:
            raise DuplicateIdError(f"duplicate id {doc.id!r}", line=line)
        self.docs[doc.id] = doc


def _doc_from_record(record: dict, line: int | None = None) -> PatentDoc:
    if not isinstance(record, dict):
        raise CorpusFormatError("record is not an object", line=line)
    for key in ("id", "abstract"):
        if key not in record:
            raise CorpusFormatError(f"missing field {key!r}", line=line)
    language = record.get("language")
    if language is None:
        # The dataset splits by language; a bare doc defaults to EN.
        logger.warning("doc %r has no language; assuming EN", record.get("id"))
        language = "EN"
    try:
        return PatentDoc(
            id=str(record["id"]),
            abstract=str(record["abstract"]),
            title=record.get("title"),
            language=language,
            ipc_section=record.get("ipc_section"),
        )
    except ValueError as exc:
        raise CorpusFormatError(str(exc), line=line) from exc


def doc_to_record(doc: PatentDoc) -> dict:
    """Canonical serialization: fixed field order, optional fields omitted when absent."""
    record: dict = {"id": doc.id, "abstract": doc.abstract}
    if doc.title is not None:
        record["title"] = doc.title
    record["language"] = doc.language
    if doc.ipc_section is not None:
        record["ipc_section"] = doc.ipc_section
    return record


def question_to_record(question: MatchQuestion) -> dict:
    return {
        "id": question.id,
        "query": doc_to_record(question.query),
        "options": {k: doc_to_record(v) for k, v in question.options.items()},
        "gold": question.gold,
        "language": question.language,
        "ipc_section": question.ipc_section,
    }


def _iter_json_lines(path: Path) -> Iterator[tuple[int, dict]]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CorpusFormatError(f"cannot read {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            yield lineno, json.loads(raw)
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"malformed JSON ({exc.msg})", line=lineno) from exc


def load_corpus(path: str | Path) -> CorpusStore:
    """Load a line-delimited patent corpus, preserving input order.

    Raises CorpusFormatError naming the offending line on the first malformed
    record or duplicate id.
    """
    store = CorpusStore()
    for lineno, record in _iter_json_lines(Path(path)):
        store.add(_doc_from_record(record, line=lineno), line=lineno)
    return store


def load_questions(path: str | Path, strict_distinct: bool = False) -> list[MatchQuestion]:
    """Load a line-delimited question file, preserving input order.

    With ``strict_distinct`` the five abstracts of a question must be mutually
    distinct texts; otherwise duplicates only log a warning (real data may
    repeat boilerplate).
    """
    questions: list[MatchQuestion] = []
    seen: set[str] = set()
    for lineno, record in _iter_json_lines(Path(path)):
        question = _question_from_record(record, line=lineno)
        if question.id in seen:
            raise DuplicateIdError(f"duplicate question id {question.id!r}", line=lineno)
        seen.add(question.id)
        texts = [question.query.abstract] + [o.abstract for o in question.options.values()]
        if len({t.strip() for t in texts}) != 5:
            if strict_distinct:
                raise CorpusFormatError(
                    f"question {question.id!r}: abstracts are not mutually distinct",
                    line=lineno,
                )
            logger.warning("question %r: abstracts are not mutually distinct", question.id)
        questions.append(question)
    return questions


def _question_from_record(record: dict, line: int | None = None) -> MatchQuestion:
    if not isinstance(record, dict):
        raise CorpusFormatError("record is not an object", line=line)
    for key in ("id", "query", "options", "gold", "language", "ipc_section"):
        if key not in record:
            raise CorpusFormatError(f"missing field {key!r}", line=line)
    options_raw = record["options"]
    if not isinstance(options_raw, dict):
        raise CorpusFormatError("options is not an object", line=line)
    for opt in OPTION_IDS:
        if opt not in options_raw:
            raise CorpusFormatError(f"missing option {opt}", line=line)
    extra = set(options_raw) - set(OPTION_IDS)
    if extra:
        raise CorpusFormatError(f"unknown option keys {sorted(extra)}", line=line)
    try:
        return MatchQuestion(
            id=str(record["id"]),
            query=_doc_from_record(record["query"], line=line),
            options={k: _doc_from_record(options_raw[k], line=line) for k in OPTION_IDS},
            gold=record["gold"],
            language=record["language"],
            ipc_section=record["ipc_section"],
        )
    except ValueError as exc:
        if isinstance(exc, CorpusFormatError):
            raise
        raise CorpusFormatError(str(exc), line=line) from exc


def save_corpus(store: CorpusStore, path: str | Path) -> None:
    lines = [json.dumps(doc_to_record(d), ensure_ascii=False) for d in store]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def save_questions(questions: list[MatchQuestion], path: str | Path) -> None:
    lines = [json.dumps(question_to_record(q), ensure_ascii=False) for q in questions]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
