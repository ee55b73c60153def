"""patmatch: memory-graph augmented patent matching, batch-style.

Pipelines select the most similar patent among four candidates, optionally
augmented with exact dense retrieval over a patent corpus, LLM-extracted
entities (query expansion) and three-level ontologies (generation context).
The evaluation layer covers accuracy breakdowns, scenario splits, paired
permutation tests, gold-answer perplexity and pairwise judging.
"""

from .corpus import (
    CorpusFormatError,
    CorpusStore,
    DuplicateIdError,
    MatchQuestion,
    PatentDoc,
    load_corpus,
    load_questions,
)
from .embedder import EmbeddingBackend, EmbeddingConfig, MockEmbedder, RemoteEmbedder
from .extraction import (
    EntitySet,
    ExtractionFailed,
    Extractor,
    OntologyAssignment,
    OntologyPath,
)
from .index import VectorIndex, build_index, load_index, save_index, score, top_k
from .llm import (
    Completion,
    CompletionRequest,
    LLMBackend,
    RemoteChatBackend,
    ResponseCache,
    ScriptedBackend,
    ScriptRule,
    cached_complete,
)
from .pipeline import (
    Evidence,
    MatchResult,
    RunDirectory,
    Services,
    Variant,
    build_match_prompt,
    expand_query,
    parse_choice,
    render_zgen,
    retrieve_evidence,
    run_batch,
    run_instance,
)
from .evaluation import (
    UNSUPPORTED,
    EvalReport,
    ScenarioSplit,
    SignificanceResult,
    accuracy,
    breakdown,
    build_report,
    emit_report,
    gold_perplexity,
    judge_pairwise,
    permutation_test,
    scenario_split,
)

__version__ = "0.1.0"
