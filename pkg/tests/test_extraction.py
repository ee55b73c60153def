from __future__ import annotations

import pytest

from patmatch.extraction import (
    EntityParseFailure,
    EntitySet,
    ExtractionFailed,
    Extractor,
    OntologyAssignment,
    OntologyParseFailure,
    OntologyPath,
    parse_entity_response,
    parse_ontology_response,
    render_entity_prompt,
    render_ontology_prompt,
)
from patmatch.llm import ScriptRule, ScriptedBackend

from conftest import make_doc, make_question


# --- prompt rendering -------------------------------------------------------

def test_entity_prompt_contains_cap_and_ends_with_abstract():
    prompt = render_entity_prompt(make_doc("P", "X"))
    assert "List up to 10 entities" in prompt
    assert prompt.endswith("Patent Abstract: X")


def test_entity_prompt_render_is_pure():
    doc = make_doc("P", "some abstract")
    assert render_entity_prompt(doc) == render_entity_prompt(doc)


def test_entity_prompt_preserves_internal_newlines():
    doc = make_doc("P", "line one\nline two")
    assert "Patent Abstract: line one\nline two" in render_entity_prompt(doc)


def test_entity_prompt_golden(golden_dir, table6_question):
    expected = (golden_dir / "entity_prompt_t6.txt").read_text(encoding="utf-8")
    assert render_entity_prompt(table6_question.query) == expected


def _t6_entity_sets(question):
    sets = {
        "query": EntitySet(
            patent_id=question.query.id,
            entities=(
                "Sauce-like fluid fish feed", "Imported fish meal", "Antarctic krill meal",
                "squid meal", "α-starch", "Fish oil", "Soybean lecithin oil",
                "Betaine", "Edible gum", "Water retaining agent",
            ),
        ),
        "A": EntitySet(patent_id="a", entities=("Aquaculture feed", "Fluid form")),
        "B": EntitySet(patent_id="b", entities=("Yeast extract", "Fermentation")),
        "C": EntitySet(patent_id="c", entities=("Meal replacement powder", "Pea protein")),
        "D": EntitySet(patent_id="d", entities=("Psoralen polymer", "Nanoparticle preparation")),
    }
    return sets


def test_ontology_prompt_contains_format_line(table6_question):
    prompt = render_ontology_prompt(table6_question, _t6_entity_sets(table6_question))
    assert "[Major category] > [Subcategory] > [Specific class]" in prompt


def test_ontology_prompt_contains_each_abstract_once(table6_question):
    prompt = render_ontology_prompt(table6_question, _t6_entity_sets(table6_question))
    assert prompt.count(table6_question.query.abstract) == 1
    for opt in "ABCD":
        assert prompt.count(table6_question.options[opt].abstract) == 1


def test_ontology_prompt_entities_comma_joined(table6_question):
    prompt = render_ontology_prompt(table6_question, _t6_entity_sets(table6_question))
    assert "Option B Entities: Yeast extract, Fermentation" in prompt


def test_ontology_prompt_missing_set_renders_empty(table6_question, caplog):
    sets = _t6_entity_sets(table6_question)
    sets["C"] = None
    with caplog.at_level("WARNING"):
        prompt = render_ontology_prompt(table6_question, sets)
    assert "Option C Entities: \n" in prompt


def test_ontology_prompt_golden(golden_dir, table6_question):
    expected = (golden_dir / "ontology_prompt_t6.txt").read_text(encoding="utf-8")
    assert render_ontology_prompt(table6_question, _t6_entity_sets(table6_question)) == expected


# --- entity parsing ---------------------------------------------------------

def test_parse_bracketed_entities():
    entities, truncated = parse_entity_response("[Peanut Planter], [Mounting]")
    assert entities == ("Peanut Planter", "Mounting")
    assert truncated is False


def test_parse_twelve_entities_keeps_first_ten():
    text = ", ".join(f"[Entity number {i}]" for i in range(12))
    entities, truncated = parse_entity_response(text)
    assert len(entities) == 10
    assert truncated is True
    assert entities[0] == "Entity number 0"


def test_parse_semicolon_fallback_table6_row():
    text = "Sauce-like fluid fish feed; Imported fish meal; Antarctic krill meal"
    entities, _ = parse_entity_response(text)
    assert entities == (
        "Sauce-like fluid fish feed",
        "Imported fish meal",
        "Antarctic krill meal",
    )


def test_parse_comma_takes_priority_over_semicolon():
    entities, _ = parse_entity_response("alpha, beta; gamma")
    assert entities == ("alpha", "beta; gamma")


def test_parse_dedup_case_insensitive():
    entities, _ = parse_entity_response("[Fish Meal], [fish meal], [Krill]")
    assert entities == ("Fish Meal", "Krill")


def test_parse_numbered_lines():
    entities, _ = parse_entity_response("1. Gear box\n2. Drive shaft\n3. Bearing")
    assert entities == ("Gear box", "Drive shaft", "Bearing")


def test_parse_single_bare_entity():
    entities, _ = parse_entity_response("Peanut Planter")
    assert entities == ("Peanut Planter",)


def test_parse_empty_is_failure():
    with pytest.raises(EntityParseFailure):
        parse_entity_response("   ")
    with pytest.raises(EntityParseFailure):
        parse_entity_response("[], []")


def test_entity_set_invariants():
    with pytest.raises(ValueError):
        EntitySet(patent_id="p", entities=())
    with pytest.raises(ValueError):
        EntitySet(patent_id="p", entities=tuple(f"e{i}" for i in range(11)))
    with pytest.raises(ValueError):
        EntitySet(patent_id="p", entities=("dup", "Dup"))


# --- ontology parsing -------------------------------------------------------

FULL_BLOCK = """Original Patent: Food processing > Mixtures > Fluid fish feed
Option A: Food processing > Mixtures > Fish feed
Option B: Food processing > Yeast extract > Meat-flavored yeast
Option C: Food processing > Mixtures > Meal replacement powders
Option D: Pharmaceutical preparations > Nanoparticle preparations > Psoralen polymers"""


def test_parse_full_block():
    assignment, warnings = parse_ontology_response(FULL_BLOCK)
    assert assignment.query == OntologyPath("Food processing", "Mixtures", "Fluid fish feed")
    assert assignment.options["D"].specific == "Psoralen polymers"
    assert warnings == []


def test_parse_semicolon_separated_one_liner():
    text = FULL_BLOCK.replace("\n", "; ").replace("Original Patent", "Query Patent", 1)
    assignment, _ = parse_ontology_response(text)
    assert assignment.query.major == "Food processing"
    assert assignment.options["A"].specific == "Fish feed"


def test_parse_query_patent_alias():
    text = FULL_BLOCK.replace("Original Patent", "Query Patent")
    assignment, _ = parse_ontology_response(text)
    assert assignment.query.specific == "Fluid fish feed"


def test_parse_bracketed_levels_accepted():
    text = FULL_BLOCK.replace(
        "Option A: Food processing > Mixtures > Fish feed",
        "Option A: [Food processing] > [Mixtures] > [Fish feed]",
    )
    assignment, _ = parse_ontology_response(text)
    assert assignment.options["A"] == OntologyPath("Food processing", "Mixtures", "Fish feed")


def test_parse_missing_option_lists_it():
    text = "\n".join(l for l in FULL_BLOCK.splitlines() if not l.startswith("Option C"))
    with pytest.raises(OntologyParseFailure) as err:
        parse_ontology_response(text)
    assert err.value.missing == ["C"]


def test_parse_duplicate_type_last_wins_flagged():
    text = FULL_BLOCK + "\nOption D: Chemistry > Polymers > Encapsulation"
    assignment, warnings = parse_ontology_response(text)
    assert assignment.options["D"].major == "Chemistry"
    assert any("duplicate" in w for w in warnings)


def test_parse_wrong_level_count_rejects_line():
    text = FULL_BLOCK.replace(
        "Option B: Food processing > Yeast extract > Meat-flavored yeast",
        "Option B: Food processing > Meat-flavored yeast",
    )
    with pytest.raises(OntologyParseFailure) as err:
        parse_ontology_response(text)
    assert err.value.missing == ["B"]


def test_assignment_invariants():
    path = OntologyPath("a", "b", "c")
    with pytest.raises(ValueError):
        OntologyAssignment(query=path, options={"A": path, "B": path, "C": path})
    with pytest.raises(ValueError):
        OntologyPath("a", "", "c")


# --- extraction with retry/repair -------------------------------------------

def entity_backend(response="[One], [Two]"):
    return ScriptedBackend(
        [ScriptRule("extract key technical entities", response)],
        default_response="nope",
    )


def test_extract_entities_happy_path():
    extractor = Extractor(entity_backend())
    entity_set, outcome = extractor.entities(make_doc("P", "about widgets"))
    assert entity_set.entities == ("One", "Two")
    assert outcome.attempts == 1


def test_extract_entities_retry_arithmetic():
    # Garbage response with 2 retries: exactly 3 backend calls, then failure.
    backend = ScriptedBackend([], default_response="???!")
    extractor = Extractor(backend, retries=2)
    with pytest.raises(ExtractionFailed) as err:
        extractor.entities(make_doc("P", "anything"))
    assert backend.calls == 3
    assert err.value.raw_text == "???!"


def test_extract_entities_repair_succeeds_second_try():
    backend = ScriptedBackend(
        [
            ScriptRule("could not be parsed", "[Fixed Entity]"),
        ],
        default_response="!!!",
    )
    extractor = Extractor(backend, retries=2)
    entity_set, outcome = extractor.entities(make_doc("P", "anything"))
    assert entity_set.entities == ("Fixed Entity",)
    assert outcome.attempts == 2


def test_extract_ontologies_degrades_after_retries():
    backend = ScriptedBackend([], default_response="not a classification")
    extractor = Extractor(backend, retries=2)
    question = make_question("Q1")
    sets = {k: None for k in ("query", "A", "B", "C", "D")}
    assignment, outcome = extractor.ontologies(question, sets)
    assert assignment is None
    assert "degraded_ontology" in outcome.flags
    assert backend.calls == 3


def test_extract_ontologies_table6_block(table6_question):
    backend = ScriptedBackend(
        [ScriptRule("patent classification expert", FULL_BLOCK)], default_response=""
    )
    extractor = Extractor(backend)
    assignment, outcome = extractor.ontologies(
        table6_question, _t6_entity_sets(table6_question)
    )
    assert assignment is not None
    assert assignment.query.major == assignment.options["A"].major == "Food processing"
    assert outcome.attempts == 1


def test_render_parse_round_trip_via_echo_backend(table6_question):
    # A backend that answers with a well-formed block regardless of prompt:
    # render -> complete -> parse must succeed (self-consistency).
    backend = ScriptedBackend([], default_response=FULL_BLOCK)
    extractor = Extractor(backend)
    assignment, _ = extractor.ontologies(table6_question, _t6_entity_sets(table6_question))
    assert assignment is not None
    assert tuple(assignment.options) == ("A", "B", "C", "D")
