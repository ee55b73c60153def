"""The four matching pipelines: plain, chain-of-thought, retrieval-augmented,
and memory-graph augmented (with its ablation modes).

A variant decides which latent inputs reach the final prompt: ``ir`` expands
the retrieval query with extracted entities, ``gen`` injects the ontology
block into the match prompt, ``all`` does both. Prompt assembly order is
fixed and golden-file pinned: instruction, retrieved passages, query
abstract, options, ontology block, chain-of-thought suffix.
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .corpus import OPTION_IDS, CorpusStore, MatchQuestion, PatentDoc
from .embedder import EmbeddingBackend
from .extraction import EntitySet, ExtractionFailed, Extractor, OntologyAssignment
from .index import ScoredDoc, VectorIndex, top_k
from .llm import CompletionRequest, LLMBackend, ResponseCache, cached_complete

logger = logging.getLogger(__name__)

VARIANT_KINDS = ("vanilla", "cot", "rag", "memgraph")
MEMGRAPH_MODES = ("ir", "gen", "all")

MATCH_INSTRUCTION = (
    "Please select the most similar patent number from A, B, C and D. Which number is?"
)
COT_SUFFIX = (
    "Please reason step by step about the similarity between the query patent and "
    "each option, then state the final answer letter."
)
PASSAGE_HEADER = "Retrieved Patent"


@dataclass(frozen=True)
class Variant:
    """One pipeline configuration; ``mode`` is set iff kind == "memgraph"."""

    kind: str
    mode: str | None = None
    k: int = 3

    def __post_init__(self):
        if self.kind not in VARIANT_KINDS:
            raise ValueError(f"invalid variant {self.kind!r}")
        if self.kind == "memgraph":
            if self.mode not in MEMGRAPH_MODES:
                raise ValueError(f"invalid memgraph mode {self.mode!r}")
        elif self.mode is not None:
            raise ValueError(f"mode is only valid for memgraph, not {self.kind!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")

    @classmethod
    def parse(cls, spec: str, k: int = 3) -> "Variant":
        """Parse "vanilla" | "cot" | "rag" | "memgraph:{ir|gen|all}"."""
        kind, _, mode = spec.partition(":")
        return cls(kind=kind, mode=mode or None, k=k)

    @property
    def name(self) -> str:
        return f"{self.kind}:{self.mode}" if self.mode else self.kind

    @property
    def file_stem(self) -> str:
        return self.name.replace(":", "_")

    @property
    def uses_retrieval(self) -> bool:
        return self.kind in ("rag", "memgraph")

    @property
    def uses_expansion(self) -> bool:
        return self.kind == "memgraph" and self.mode in ("ir", "all")

    @property
    def uses_ontology(self) -> bool:
        return self.kind == "memgraph" and self.mode in ("gen", "all")

    @property
    def uses_cot(self) -> bool:
        return self.kind == "cot"


@dataclass(frozen=True)
class Evidence:
    """Realized retrieval context: up to k scored documents."""

    docs: tuple[tuple[PatentDoc, float, int], ...]
    k: int

    def __post_init__(self):
        if len(self.docs) > self.k:
            raise ValueError("more evidence docs than k")

    @property
    def doc_ids(self) -> tuple[str, ...]:
        return tuple(doc.id for doc, _, _ in self.docs)


@dataclass(frozen=True)
class MatchResult:
    question_id: str
    variant: str
    chosen: str | None
    correct: bool
    raw_response: str = ""
    reasoning: str | None = None
    evidence_ids: tuple[str, ...] = ()
    flags: tuple[str, ...] = ()
    gold_logprobs: tuple[float, ...] | None = None

    def to_record(self) -> dict:
        return {
            "question_id": self.question_id,
            "variant": self.variant,
            "chosen": self.chosen,
            "correct": self.correct,
            "raw_response": self.raw_response,
            "reasoning": self.reasoning,
            "evidence_ids": list(self.evidence_ids),
            "flags": sorted(self.flags),
            "gold_logprobs": list(self.gold_logprobs) if self.gold_logprobs else None,
        }

    @classmethod
    def from_record(cls, record: dict) -> "MatchResult":
        return cls(
            question_id=record["question_id"],
            variant=record["variant"],
            chosen=record["chosen"],
            correct=record["correct"],
            raw_response=record.get("raw_response", ""),
            reasoning=record.get("reasoning"),
            evidence_ids=tuple(record.get("evidence_ids") or ()),
            flags=tuple(record.get("flags") or ()),
            gold_logprobs=(
                tuple(record["gold_logprobs"]) if record.get("gold_logprobs") else None
            ),
        )


@dataclass
class Services:
    """Everything a pipeline instance needs, configured once per run."""

    backend: LLMBackend
    corpus: CorpusStore | None = None
    index: VectorIndex | None = None
    embedder: EmbeddingBackend | None = None
    cache: ResponseCache | None = None
    extractor: Extractor | None = None
    model_id: str = "default"
    max_tokens: int = 1024
    temperature: float = 0.0
    passage_char_budget: int = 1200
    exclude_options_from_corpus: bool = False
    collect_gold_logprobs: bool = False


def expand_query(patent: PatentDoc, entities: EntitySet | None) -> tuple[str, set[str]]:
    """Append the comma-joined entity list to the abstract on a new line."""
    if entities is None or not entities.entities:
        return patent.abstract, {"no_expansion"}
    return f"{patent.abstract}\n{entities.joined()}", set()


def retrieve_evidence(
    index: VectorIndex,
    embedder: EmbeddingBackend,
    corpus: CorpusStore,
    query_text: str,
    k: int,
    exclusions: Iterable[str] = (),
) -> Evidence:
    """Embed the query text and take the exact top-k, resolving full documents."""
    vector = embedder.embed_text(query_text)
    scored = top_k(index, vector, k, exclusions, fingerprint=embedder.fingerprint)
    docs = tuple((corpus.get(s.doc_id), s.score, s.rank) for s in scored)
    return Evidence(docs=docs, k=k)


def render_zgen(assignment: OntologyAssignment) -> str:
    """Render the ontology block: query path then options A-D, comma-separated."""
    parts = [f"Query Patent: {assignment.query.render()}"]
    for opt in OPTION_IDS:
        parts.append(f"Option {opt}: {assignment.options[opt].render()}")
    return ", ".join(parts)


def build_match_prompt(
    variant: Variant,
    question: MatchQuestion,
    evidence: Evidence | None = None,
    zgen: str | None = None,
    passage_char_budget: int = 1200,
) -> tuple[str, set[str]]:
    """Assemble the final selection prompt for one question.

    Section order is fixed: instruction, retrieved passages, query, options,
    ontology block, chain-of-thought suffix. Passages beyond the character
    budget are cut and flagged.
    """
    if variant.uses_retrieval and evidence is None:
        raise ValueError(f"variant {variant.name} requires evidence")
    if not variant.uses_retrieval and evidence is not None:
        raise ValueError(f"variant {variant.name} must not carry evidence")
    if variant.uses_ontology and zgen is None:
        # Degraded instance: ontology extraction failed, run as plain RAG.
        pass
    if not variant.uses_ontology and zgen is not None:
        raise ValueError(f"variant {variant.name} must not carry an ontology block")

    flags: set[str] = set()
    sections = [MATCH_INSTRUCTION]
    if evidence is not None:
        lines = []
        for doc, _, rank in evidence.docs:
            text = doc.abstract
            if len(text) > passage_char_budget:
                text = text[:passage_char_budget]
                flags.add("truncated_passage")
            lines.append(f"{PASSAGE_HEADER} {rank}: {text}")
        sections.append("\n".join(lines))
    sections.append(f"Query Patent: {question.query.abstract}")
    sections.append(
        "\n".join(f"Option {opt}: {question.options[opt].abstract}" for opt in OPTION_IDS)
    )
    if zgen is not None:
        sections.append(f"Ontology: {zgen}")
    if variant.uses_cot:
        sections.append(COT_SUFFIX)
    return "\n\n".join(sections), flags


_EXPLICIT_CHOICE = re.compile(
    r"\b(?:final answer|answer|chosen|choose|choice|select(?:ed|ion)?)\b"
    r"(?:\s+(?:is|was))?\s*[:\-–]?\s*\(?([A-Da-d])\)?\b"
    , re.IGNORECASE,
)
_STANDALONE_LETTER = re.compile(r"\b([A-D])\b")


def parse_choice(text: str) -> str | None:
    """Extract the chosen option letter, or None when no rule matches.

    Priority: an explicit "answer ... X" pattern, then the first standalone
    uppercase A-D token.
    """
    match = _EXPLICIT_CHOICE.search(text)
    if match:
        return match.group(1).upper()
    match = _STANDALONE_LETTER.search(text)
    if match:
        return match.group(1)
    return None


@dataclass
class InstanceOutcome:
    """A match result plus the retrieval and extraction artifacts behind it."""

    result: MatchResult
    raw_retrieval: tuple[ScoredDoc, ...] | None = None
    evidence_retrieval: tuple[ScoredDoc, ...] | None = None
    entity_artifacts: tuple[dict, ...] = ()
    ontology_artifact: dict | None = None
    prompt: str = ""


def _question_exclusions(question: MatchQuestion, services: Services) -> set[str]:
    exclusions = {question.query.id}
    if services.exclude_options_from_corpus:
        exclusions.update(doc.id for doc in question.options.values())
    return exclusions


def run_instance(
    variant: Variant, question: MatchQuestion, services: Services
) -> InstanceOutcome:
    """Execute one question under one variant, with full provenance."""
    flags: set[str] = set()
    entity_sets: dict[str, EntitySet | None] = {}
    entity_artifacts: list[dict] = []
    ontology_artifact: dict | None = None
    evidence: Evidence | None = None
    raw_retrieval: tuple[ScoredDoc, ...] | None = None
    evidence_retrieval: tuple[ScoredDoc, ...] | None = None
    zgen: str | None = None

    def extract_entities_for(key: str, patent: PatentDoc) -> EntitySet | None:
        assert services.extractor is not None
        try:
            entity_set, outcome = services.extractor.entities(patent)
        except ExtractionFailed as exc:
            flags.add("entity_extraction_failed")
            entity_artifacts.append(
                {
                    "question_id": question.id,
                    "slot": key,
                    "patent_id": patent.id,
                    "entities": None,
                    "raw_response": exc.raw_text,
                    "flags": ["entity_extraction_failed"],
                }
            )
            return None
        flags.update(outcome.flags)
        entity_artifacts.append(
            {
                "question_id": question.id,
                "slot": key,
                "patent_id": patent.id,
                "entities": list(entity_set.entities),
                "raw_response": outcome.raw_text,
                "flags": sorted(outcome.flags),
            }
        )
        return entity_set

    if variant.uses_retrieval:
        if services.index is None or services.embedder is None or services.corpus is None:
            raise ValueError(f"variant {variant.name} requires index, embedder, and corpus")
        exclusions = _question_exclusions(question, services)
        # Raw-query retrieval is always performed and logged: the evaluation
        # scenario splits are defined against it regardless of variant.
        raw_ev = retrieve_evidence(
            services.index,
            services.embedder,
            services.corpus,
            question.query.abstract,
            variant.k,
            exclusions,
        )
        raw_retrieval = tuple(
            ScoredDoc(doc.id, score, rank) for doc, score, rank in raw_ev.docs
        )
        if variant.uses_expansion:
            if services.extractor is None:
                raise ValueError("expansion requires an extractor")
            entity_sets["query"] = extract_entities_for("query", question.query)
            query_text, expansion_flags = expand_query(
                question.query, entity_sets["query"]
            )
            flags.update(expansion_flags)
            evidence = retrieve_evidence(
                services.index,
                services.embedder,
                services.corpus,
                query_text,
                variant.k,
                exclusions,
            )
        else:
            evidence = raw_ev
        evidence_retrieval = tuple(
            ScoredDoc(doc.id, score, rank) for doc, score, rank in evidence.docs
        )

    if variant.uses_ontology:
        if services.extractor is None:
            raise ValueError("ontology extraction requires an extractor")
        if "query" not in entity_sets:
            entity_sets["query"] = extract_entities_for("query", question.query)
        for opt in OPTION_IDS:
            entity_sets[opt] = extract_entities_for(opt, question.options[opt])
        assignment, outcome = services.extractor.ontologies(question, entity_sets)
        flags.update(outcome.flags)
        ontology_artifact = {
            "question_id": question.id,
            "assignment": (
                {
                    "query": assignment.query.render(),
                    **{k: assignment.options[k].render() for k in OPTION_IDS},
                }
                if assignment
                else None
            ),
            "raw_response": outcome.raw_text,
            "flags": sorted(outcome.flags),
        }
        if assignment is not None:
            zgen = render_zgen(assignment)

    prompt, prompt_flags = build_match_prompt(
        variant,
        question,
        evidence=evidence,
        zgen=zgen,
        passage_char_budget=services.passage_char_budget,
    )
    flags.update(prompt_flags)

    request = CompletionRequest(
        prompt=prompt,
        model_id=services.model_id,
        temperature=services.temperature,
        max_tokens=services.max_tokens,
    )
    completion = cached_complete(request, services.cache, services.backend)
    chosen = parse_choice(completion.text)
    if chosen is None:
        flags.add("unparseable_choice")
    correct = chosen == question.gold

    gold_logprobs: tuple[float, ...] | None = None
    if services.collect_gold_logprobs:
        scored = services.backend.score_continuation(prompt, question.gold)
        if scored is not None:
            gold_logprobs = tuple(lp for _, lp in scored)
        else:
            flags.add("logprobs_unsupported")

    result = MatchResult(
        question_id=question.id,
        variant=variant.name,
        chosen=chosen,
        correct=correct,
        raw_response=completion.text,
        reasoning=completion.text if variant.uses_cot else None,
        evidence_ids=evidence.doc_ids if evidence else (),
        flags=tuple(sorted(flags)),
        gold_logprobs=gold_logprobs,
    )
    return InstanceOutcome(
        result=result,
        raw_retrieval=raw_retrieval,
        evidence_retrieval=evidence_retrieval,
        entity_artifacts=tuple(entity_artifacts),
        ontology_artifact=ontology_artifact,
        prompt=prompt,
    )


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _write_jsonl(path: Path, records: Sequence[dict]) -> None:
    lines = [json.dumps(r, ensure_ascii=False) for r in records]
    _atomic_write(path, "\n".join(lines) + ("\n" if lines else ""))


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    return [
        json.loads(line)
        for line in path.read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]


class RunDirectory:
    """Layout of one experiment run on disk; all writes atomic and canonical."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def results_path(self, variant: Variant) -> Path:
        return self.root / "results" / f"{variant.file_stem}.jsonl"

    def retrieval_path(self, name: str) -> Path:
        return self.root / "retrieval" / f"{name}.jsonl"

    def extraction_path(self, name: str) -> Path:
        return self.root / "extraction" / f"{name}.jsonl"

    def load_results(self, variant: Variant) -> dict[str, MatchResult]:
        return {
            r["question_id"]: MatchResult.from_record(r)
            for r in _read_jsonl(self.results_path(variant))
        }

    def load_retrieval_log(self, name: str) -> dict[str, list[str]]:
        """question_id -> ranked doc ids."""
        return {
            r["question_id"]: [doc_id for doc_id, _ in r["ranked"]]
            for r in _read_jsonl(self.retrieval_path(name))
        }


def run_batch(
    variant: Variant,
    questions: Sequence[MatchQuestion],
    services: Services,
    concurrency: int = 1,
    run_dir: RunDirectory | None = None,
) -> list[MatchResult]:
    """Run every question under one variant; order-preserving and resumable.

    Already-persisted instances are skipped. Per-instance failures are
    isolated into flagged incorrect results. Output files are rewritten in
    canonical question order, so reruns and any concurrency level produce
    byte-identical files.
    """
    existing: dict[str, MatchResult] = run_dir.load_results(variant) if run_dir else {}
    pending = [q for q in questions if q.id not in existing]

    def run_one(question: MatchQuestion) -> InstanceOutcome:
        try:
            return run_instance(variant, question, services)
        except Exception as exc:
            logger.error("question %s failed: %s", question.id, exc)
            return InstanceOutcome(
                result=MatchResult(
                    question_id=question.id,
                    variant=variant.name,
                    chosen=None,
                    correct=False,
                    raw_response=f"instance failed: {exc}",
                    flags=("failed",),
                )
            )

    if concurrency <= 1 or len(pending) <= 1:
        outcomes = [run_one(q) for q in pending]
    else:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            outcomes = list(pool.map(run_one, pending))

    by_id = dict(existing)
    by_id.update({o.result.question_id: o.result for o in outcomes})
    ordered = [by_id[q.id] for q in questions if q.id in by_id]

    if run_dir is not None:
        _persist(variant, questions, outcomes, ordered, run_dir)
    return ordered


def _persist(
    variant: Variant,
    questions: Sequence[MatchQuestion],
    outcomes: Sequence[InstanceOutcome],
    ordered_results: Sequence[MatchResult],
    run_dir: RunDirectory,
) -> None:
    order = {q.id: i for i, q in enumerate(questions)}
    _write_jsonl(
        run_dir.results_path(variant), [r.to_record() for r in ordered_results]
    )

    def merge_retrieval(name: str, new: Mapping[str, tuple[ScoredDoc, ...]]) -> None:
        path = run_dir.retrieval_path(name)
        merged = {r["question_id"]: r for r in _read_jsonl(path)}
        for qid, scored in new.items():
            merged[qid] = {
                "question_id": qid,
                "ranked": [[s.doc_id, s.score] for s in scored],
            }
        records = sorted(merged.values(), key=lambda r: order.get(r["question_id"], 1 << 30))
        _write_jsonl(path, records)

    raw_logs = {
        o.result.question_id: o.raw_retrieval for o in outcomes if o.raw_retrieval is not None
    }
    ev_logs = {
        o.result.question_id: o.evidence_retrieval
        for o in outcomes
        if o.evidence_retrieval is not None
    }
    if raw_logs:
        merge_retrieval("raw_query", raw_logs)
    if ev_logs:
        merge_retrieval(variant.file_stem, ev_logs)

    entity_records: list[dict] = []
    ontology_records: list[dict] = []
    for outcome in outcomes:
        entity_records.extend(outcome.entity_artifacts)
        if outcome.ontology_artifact is not None:
            ontology_records.append(outcome.ontology_artifact)
    if entity_records:
        path = run_dir.extraction_path("entities")
        merged_entities = {
            (r["question_id"], r["slot"]): r for r in _read_jsonl(path)
        }
        for record in entity_records:
            merged_entities[(record["question_id"], record["slot"])] = record
        records = sorted(
            merged_entities.values(),
            key=lambda r: (order.get(r["question_id"], 1 << 30), r["slot"]),
        )
        _write_jsonl(path, records)
    if ontology_records:
        path = run_dir.extraction_path("ontologies")
        merged_ont = {r["question_id"]: r for r in _read_jsonl(path)}
        for record in ontology_records:
            merged_ont[record["question_id"]] = record
        records = sorted(
            merged_ont.values(), key=lambda r: order.get(r["question_id"], 1 << 30)
        )
        _write_jsonl(path, records)
