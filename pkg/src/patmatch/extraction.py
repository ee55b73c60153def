"""Entity and ontology extraction from patent abstracts via prompting.

Two traversal prompts reach into the model's own knowledge: one lists the
key technical entities of a single abstract, the other assigns a three-level
classification path to a query patent and each of its four candidates in one
shot. Rendering is byte-stable (golden-file pinned); parsing is tolerant of
the delimiter and casing drift real models produce, and every failure mode is
a typed exception, never a crash.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Mapping

from .corpus import OPTION_IDS, MatchQuestion, PatentDoc
from .llm import Completion, CompletionRequest, LLMBackend, ResponseCache, cached_complete

logger = logging.getLogger(__name__)

MAX_ENTITIES = 10

ENTITY_TEMPLATE = """You are an AI assistant specialized in patent analysis. Your task is to extract key technical entities from a given patent abstract. These entities should be specific technical concepts, components, or methods that are central to the patent's innovation.

Instructions:
1. Carefully read the provided patent abstract.
2. Identify and list the most important technical entities mentioned in the patent.
3. Focus on entities that are:
- Specific to the technology described.
- Central to the patent's claims or innovative aspects.
- Likely to be useful for understanding the patent's technical field.
4. Provide each entity as a concise phrase or term (typically 1-5 words).
5. List up to 10 entities, prioritizing the most significant ones.
6. Do not include general or broad categories; focus on specific technical concepts.

Output Format: [Entity 1], [Entity 2], [Entity 3], ...

Patent Abstract: {Patent_Abstract}"""

ONTOLOGY_TEMPLATE = """You are a patent classification expert. In the patent examination and search process, it is often necessary to compare the technical fields of multiple related patents. I will provide an original patent abstract and its related technical entities, as well as four potentially related patent abstracts (options A, B, C, D) and their respective technical entities. The original abstract represents a patent under examination, while options A-D represent potentially related existing patents found in the database.

Your task is to generate a multi-level technical classification for the original abstract and each option, referencing but not limited to the approach of the International Patent Classification (IPC) system. These classifications will be used to evaluate the technical relevance between the original patent and existing patents, helping to determine the novelty and inventiveness of the patent.

Input:
Original Abstract: {Original_Abstract}
Original Abstract Entities: {Original_Abstract_Entity}
Option A Abstract: {Option_A_Abstract}
Option A Entities: {Option_A_Abstract_Entities}
Option B Abstract: {Option_B_Abstract}
Option B Entities: {Option_B_Abstract_Entities}
Option C Abstract: {Option_C_Abstract}
Option C Entities: {Option_C_Abstract_Entities}
Option D Abstract: {Option_D_Abstract}
Option D Entities: {Option_D_Abstract_Entities}

Please output the classification results using the following format: {Type}: [Major category] > [Subcategory] > [Specific class], where Type ∈ {Original Patent, Option A, Option B, Option C, Option D}

Notes:
1. The classification should be in three levels.
2. Reference but do not limit yourself to the IPC classification system approach, using general, intuitive terms to describe technology categories.
3. Use 1-3 words to describe each level, gradually refining from major category to specific class.
4. Classifications should reflect the patent's core technical features, application areas, and innovation focus.
5. Make full use of the provided technical entities, which contain important technical information.
6. Maintain consistency: if two patents belong to similar fields, they should be given similar classifications.
7. Only output the classification results, do not add any additional explanations.

Based on the above information, please provide accurate and concise three-level technical classifications for the given original patent abstract and each option. Before starting the classification, please carefully read all abstracts and technical entities to ensure consistency and relevance in the classification."""

ENTITY_REPAIR_SUFFIX = (
    "Your previous reply could not be parsed. Respond with only the entity list, "
    "formatted exactly as: [Entity 1], [Entity 2], [Entity 3], ..."
)

ONTOLOGY_REPAIR_SUFFIX = (
    "Your previous reply could not be parsed. Respond with exactly five lines, one per "
    "patent, each formatted as: {Type}: [Major category] > [Subcategory] > [Specific class], "
    "where Type ∈ {Original Patent, Option A, Option B, Option C, Option D}."
)


class ExtractionFailed(RuntimeError):
    """Extraction gave no parseable output after all retries."""

    def __init__(self, message: str, raw_text: str = ""):
        super().__init__(message)
        self.raw_text = raw_text


class EntityParseFailure(ValueError):
    """Response contained no usable entities."""


class OntologyParseFailure(ValueError):
    """Response did not yield all five classification paths."""

    def __init__(self, missing: list[str]):
        self.missing = sorted(missing)
        super().__init__(f"missing ontology paths for: {', '.join(self.missing)}")


@dataclass(frozen=True)
class EntitySet:
    """Up to 10 extracted entities for one patent, in response order."""

    patent_id: str
    entities: tuple[str, ...]
    truncated: bool = False

    def __post_init__(self):
        if not 1 <= len(self.entities) <= MAX_ENTITIES:
            raise ValueError(
                f"entity set for {self.patent_id!r} must hold 1..{MAX_ENTITIES} entities"
            )
        lowered = [e.strip().lower() for e in self.entities]
        if len(set(lowered)) != len(lowered):
            raise ValueError(f"entity set for {self.patent_id!r} has duplicates")

    def joined(self) -> str:
        return ", ".join(self.entities)


@dataclass(frozen=True)
class OntologyPath:
    major: str
    sub: str
    specific: str

    def __post_init__(self):
        for level in (self.major, self.sub, self.specific):
            if not level or not level.strip():
                raise ValueError("ontology path levels must be nonempty")

    def render(self) -> str:
        return f"{self.major} > {self.sub} > {self.specific}"


@dataclass(frozen=True)
class OntologyAssignment:
    """Three-level paths for the query patent and options A-D."""

    query: OntologyPath
    options: Mapping[str, OntologyPath]

    def __post_init__(self):
        if tuple(self.options.keys()) != OPTION_IDS:
            missing = [k for k in OPTION_IDS if k not in self.options]
            if missing:
                raise ValueError(f"missing ontology path for options {missing}")
            object.__setattr__(self, "options", {k: self.options[k] for k in OPTION_IDS})


def render_entity_prompt(patent: PatentDoc) -> str:
    """Substitute the abstract into the entity traversal template, verbatim."""
    return ENTITY_TEMPLATE.replace("{Patent_Abstract}", patent.abstract)


def render_ontology_prompt(
    question: MatchQuestion, entity_sets: Mapping[str, EntitySet | None]
) -> str:
    """Substitute all five abstracts and entity lists into the ontology template.

    ``entity_sets`` maps "query" and "A".."D" to entity sets; a missing set
    renders as an empty slot (logged) rather than failing the question.
    """
    def joined(key: str) -> str:
        entity_set = entity_sets.get(key)
        if entity_set is None:
            logger.warning("question %s: no entities for %s slot", question.id, key)
            return ""
        return entity_set.joined()

    prompt = ONTOLOGY_TEMPLATE
    prompt = prompt.replace("{Original_Abstract}", question.query.abstract)
    prompt = prompt.replace("{Original_Abstract_Entity}", joined("query"))
    for opt in OPTION_IDS:
        prompt = prompt.replace(f"{{Option_{opt}_Abstract}}", question.options[opt].abstract)
        prompt = prompt.replace(f"{{Option_{opt}_Abstract_Entities}}", joined(opt))
    return prompt


_BRACKETED = re.compile(r"\[([^\[\]]+)\]")
_ITEM_PREFIX = re.compile(r"^\s*(?:\d+[.)]\s*|[-*•]\s*)")


def _clean_entity(item: str) -> str:
    item = _ITEM_PREFIX.sub("", item)
    item = item.strip().strip("[]").strip("\"'").rstrip(".").strip()
    if not re.search(r"\w", item):
        return ""
    return item


def parse_entity_response(text: str) -> tuple[tuple[str, ...], bool]:
    """Parse an entity list; returns (entities, truncated).

    Delimiter styles in priority order: bracketed items, comma-separated,
    semicolon-separated, then line-separated. Duplicates are dropped
    case-insensitively; beyond 10 entities the list is cut and flagged.
    """
    items = [m.strip() for m in _BRACKETED.findall(text)]
    if not items:
        stripped = text.strip()
        if "," in stripped:
            items = stripped.split(",")
        elif ";" in stripped:
            items = stripped.split(";")
        elif "\n" in stripped:
            items = stripped.splitlines()
        elif stripped:
            items = [stripped]
    entities: list[str] = []
    seen: set[str] = set()
    for item in items:
        cleaned = _clean_entity(item)
        if not cleaned:
            continue
        key = cleaned.lower()
        if key in seen:
            continue
        seen.add(key)
        if len(cleaned.split()) > 5:
            # The prompt says "typically 1-5 words"; long items pass with a note.
            logger.debug("entity longer than 5 words kept: %r", cleaned)
        entities.append(cleaned)
    if not entities:
        raise EntityParseFailure(f"no entities found in response: {text[:200]!r}")
    truncated = len(entities) > MAX_ENTITIES
    return tuple(entities[:MAX_ENTITIES]), truncated


_QUERY_LABELS = ("original patent", "query patent")
_PATH_LINE = re.compile(
    r"^\s*(?:\*\*)?\s*(original\s+patent|query\s+patent|option\s+([a-d]))\s*(?:\*\*)?\s*[:：](.*)$",
    re.IGNORECASE,
)


def _parse_path(text: str) -> OntologyPath | None:
    parts = [p.strip().strip("[]").strip() for p in text.split(">")]
    if len(parts) != 3 or not all(parts):
        return None
    return OntologyPath(*parts)


def parse_ontology_response(text: str) -> tuple[OntologyAssignment, list[str]]:
    """Scan for five "Type: a > b > c" segments and assemble the assignment.

    Segments split on newlines and semicolons; bracketed levels and a
    "Query Patent" alias for the original-patent label are accepted. A
    duplicated type keeps the last occurrence (noted in the returned
    warnings); malformed path lines are rejected individually. Raises
    OntologyParseFailure naming the missing types when fewer than five parse.
    """
    found: dict[str, OntologyPath] = {}
    warnings: list[str] = []
    for segment in re.split(r"[;\n]", text):
        match = _PATH_LINE.match(segment)
        if not match:
            continue
        label = "query" if match.group(1).lower() in _QUERY_LABELS else match.group(2).upper()
        path = _parse_path(match.group(3))
        if path is None:
            warnings.append(f"rejected malformed path line for {label}")
            continue
        if label in found:
            warnings.append(f"duplicate path for {label}; last occurrence kept")
        found[label] = path
    missing = [k for k in ("query",) + OPTION_IDS if k not in found]
    if missing:
        raise OntologyParseFailure(missing)
    assignment = OntologyAssignment(
        query=found["query"], options={k: found[k] for k in OPTION_IDS}
    )
    return assignment, warnings


@dataclass
class ExtractionOutcome:
    """Extraction result plus audit trail for the run directory."""

    raw_text: str
    attempts: int
    flags: tuple[str, ...] = ()


class Extractor:
    """Runs traversal prompts against a backend with parse-retry repair.

    On a parse failure the prompt is re-issued with a corrective suffix, up to
    ``retries`` extra attempts. Entity extraction failures raise; ontology
    failures degrade (return None) so a batch run can fall back to plain
    retrieval for that instance.
    """

    def __init__(
        self,
        backend: LLMBackend,
        cache: ResponseCache | None = None,
        model_id: str = "default",
        max_tokens: int = 512,
        temperature: float = 0.0,
        retries: int = 2,
    ):
        self.backend = backend
        self.cache = cache
        self.model_id = model_id
        self.max_tokens = max_tokens
        self.temperature = temperature
        self.retries = retries

    def _complete(self, prompt: str) -> Completion:
        request = CompletionRequest(
            prompt=prompt,
            model_id=self.model_id,
            temperature=self.temperature,
            max_tokens=self.max_tokens,
        )
        return cached_complete(request, self.cache, self.backend)

    def entities(self, patent: PatentDoc) -> tuple[EntitySet, ExtractionOutcome]:
        """Extract up to 10 entities for one patent; raises ExtractionFailed."""
        prompt = render_entity_prompt(patent)
        raw = ""
        for attempt in range(self.retries + 1):
            raw = self._complete(prompt).text
            try:
                entities, truncated = parse_entity_response(raw)
            except EntityParseFailure:
                prompt = render_entity_prompt(patent) + "\n\n" + ENTITY_REPAIR_SUFFIX
                continue
            flags = ("truncated_entities",) if truncated else ()
            return (
                EntitySet(patent_id=patent.id, entities=entities, truncated=truncated),
                ExtractionOutcome(raw_text=raw, attempts=attempt + 1, flags=flags),
            )
        raise ExtractionFailed(
            f"entity extraction failed for {patent.id!r} after {self.retries + 1} attempts",
            raw_text=raw,
        )

    def ontologies(
        self, question: MatchQuestion, entity_sets: Mapping[str, EntitySet | None]
    ) -> tuple[OntologyAssignment | None, ExtractionOutcome]:
        """Extract the five classification paths; None signals degraded mode."""
        prompt = render_ontology_prompt(question, entity_sets)
        raw = ""
        warnings: list[str] = []
        for attempt in range(self.retries + 1):
            raw = self._complete(prompt).text
            try:
                assignment, warnings = parse_ontology_response(raw)
            except OntologyParseFailure as exc:
                logger.info("question %s: %s (attempt %d)", question.id, exc, attempt + 1)
                prompt = (
                    render_ontology_prompt(question, entity_sets)
                    + "\n\n"
                    + ONTOLOGY_REPAIR_SUFFIX
                )
                continue
            flags = tuple(f"ontology_warning:{w}" for w in warnings)
            return assignment, ExtractionOutcome(
                raw_text=raw, attempts=attempt + 1, flags=flags
            )
        return None, ExtractionOutcome(
            raw_text=raw, attempts=self.retries + 1, flags=("degraded_ontology",)
        )
