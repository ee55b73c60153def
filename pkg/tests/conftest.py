from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from patmatch.corpus import CorpusStore, MatchQuestion, PatentDoc, load_corpus, load_questions
from patmatch.embedder import EmbeddingBackend, EmbeddingConfig

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def golden_dir() -> Path:
    return GOLDEN


@pytest.fixture()
def small_corpus() -> CorpusStore:
    return load_corpus(FIXTURES / "corpus_small.jsonl")


@pytest.fixture()
def eight_questions() -> list[MatchQuestion]:
    return load_questions(FIXTURES / "questions_eight.jsonl")


@pytest.fixture()
def table6_question() -> MatchQuestion:
    return load_questions(FIXTURES / "questions_table6.jsonl")[0]


def make_doc(doc_id: str, abstract: str, **kwargs) -> PatentDoc:
    return PatentDoc(id=doc_id, abstract=abstract, **kwargs)


def make_question(
    qid: str = "Q1",
    gold: str = "A",
    query_text: str = "query abstract text",
    option_texts: dict[str, str] | None = None,
    language: str = "EN",
    ipc_section: str = "HUM",
) -> MatchQuestion:
    option_texts = option_texts or {
        opt: f"option {opt} abstract text" for opt in ("A", "B", "C", "D")
    }
    return MatchQuestion(
        id=qid,
        query=make_doc(f"{qid}-query", query_text, language=language),
        options={
            opt: make_doc(f"{qid}-opt-{opt}", option_texts[opt], language=language)
            for opt in ("A", "B", "C", "D")
        },
        gold=gold,
        language=language,
        ipc_section=ipc_section,
    )


class VocabEmbedder(EmbeddingBackend):
    """One-hot bag-of-words embedder over a fixed vocabulary.

    Dot products equal exact word-overlap counts, which makes retrieval
    geometry fully controllable in tests: adding a token shared only with one
    document raises exactly that document's score by one.
    """

    def __init__(self, vocab: list[str], **kwargs):
        self.vocab = {token: i for i, token in enumerate(vocab)}
        config = EmbeddingConfig(backend_id="vocab", dim=len(vocab), **kwargs)
        super().__init__(config)

    def _embed_chunk(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for row, text in enumerate(texts):
            for token in text.lower().replace(",", " ").split():
                idx = self.vocab.get(token)
                if idx is not None:
                    out[row, idx] += 1.0
        return out
