"""Evaluation protocol: accuracy with breakdowns, retrieval scenario splits,
paired permutation significance, gold-answer perplexity, and pairwise
LLM-as-judge win rates, plus report rendering.

Everything here is pure post-processing over persisted results except
judging, which calls the configured judge backend.
"""

from __future__ import annotations

import json
import logging
import math
import random
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import IPC_SECTIONS, CorpusStore, MatchQuestion
from .llm import CompletionRequest, LLMBackend, ResponseCache, cached_complete
from .pipeline import MatchResult

logger = logging.getLogger(__name__)

EXACT_THRESHOLD = 20


class _Unsupported:
    """Singleton marker: the backend supplied no logprobs; not a failure."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "UNSUPPORTED"


UNSUPPORTED = _Unsupported()


def accuracy(results: Sequence[MatchResult]) -> float:
    """Fraction correct; unparseable or failed instances count as incorrect."""
    if not results:
        raise ValueError("accuracy over empty results")
    return sum(1 for r in results if r.correct) / len(results)


def breakdown(
    results: Sequence[MatchResult],
    questions: Sequence[MatchQuestion],
    facet: str,
) -> dict[str, tuple[float, int]]:
    """Partition results by a question facet; cells map to (accuracy, n)."""
    if facet not in ("language", "ipc_section"):
        raise ValueError(f"unknown facet {facet!r}")
    by_id = {q.id: q for q in questions}
    cells: dict[str, list[MatchResult]] = {}
    for result in results:
        question = by_id.get(result.question_id)
        if question is None:
            raise KeyError(f"result {result.question_id!r} has no matching question")
        cells.setdefault(getattr(question, facet), []).append(result)
    return {key: (accuracy(rs), len(rs)) for key, rs in sorted(cells.items())}


@dataclass(frozen=True)
class EvalReport:
    variant: str
    n: int
    overall_accuracy: float
    by_language: dict[str, tuple[float, int]]
    by_ipc: dict[str, tuple[float, int]]
    flags_summary: dict[str, int]

    def to_record(self) -> dict:
        return {
            "variant": self.variant,
            "n": self.n,
            "overall_accuracy": self.overall_accuracy,
            "by_language": {k: list(v) for k, v in self.by_language.items()},
            "by_ipc": {k: list(v) for k, v in self.by_ipc.items()},
            "flags_summary": dict(sorted(self.flags_summary.items())),
        }


def build_report(
    results: Sequence[MatchResult],
    questions: Sequence[MatchQuestion],
    variant_name: str,
) -> EvalReport:
    flags = Counter(flag for r in results for flag in r.flags)
    return EvalReport(
        variant=variant_name,
        n=len(results),
        overall_accuracy=accuracy(results),
        by_language=breakdown(results, questions, "language"),
        by_ipc=breakdown(results, questions, "ipc_section"),
        flags_summary=dict(flags),
    )


@dataclass(frozen=True)
class ScenarioSplit:
    """Hit: gold doc retrieved; Miss: absent; Mem: plain-prompt model got it right."""

    hit: frozenset[str]
    miss: frozenset[str]
    mem: frozenset[str]


def _normalize_text(text: str) -> str:
    return " ".join(text.split()).casefold()


def scenario_split(
    retrieval_logs: Mapping[str, Sequence[str]],
    questions: Sequence[MatchQuestion],
    vanilla_results: Sequence[MatchResult],
    corpus: CorpusStore | None = None,
) -> ScenarioSplit:
    """Partition questions by raw-query retrieval outcome and vanilla correctness.

    ``retrieval_logs`` must come from the raw-query retriever and cover every
    question. The gold option's document counts as retrieved when its id
    appears in the log, or (given a corpus) when a retrieved document's
    normalized abstract equals the gold option's.
    """
    log_ids = set(retrieval_logs)
    missing = [q.id for q in questions if q.id not in log_ids]
    if missing:
        raise KeyError(f"missing retrieval logs for: {', '.join(sorted(missing))}")

    hit: set[str] = set()
    miss: set[str] = set()
    for question in questions:
        retrieved = retrieval_logs[question.id]
        gold_doc = question.gold_doc
        is_hit = gold_doc.id in set(retrieved)
        if not is_hit and corpus is not None:
            gold_text = _normalize_text(gold_doc.abstract)
            is_hit = any(
                doc_id in corpus and _normalize_text(corpus.get(doc_id).abstract) == gold_text
                for doc_id in retrieved
            )
        (hit if is_hit else miss).add(question.id)

    question_ids = {q.id for q in questions}
    vanilla_by_id = {r.question_id: r for r in vanilla_results}
    uncovered = question_ids - set(vanilla_by_id)
    if uncovered:
        raise KeyError(f"vanilla results missing for: {', '.join(sorted(uncovered))}")
    mem = {qid for qid in question_ids if vanilla_by_id[qid].correct}
    return ScenarioSplit(hit=frozenset(hit), miss=frozenset(miss), mem=frozenset(mem))


@dataclass(frozen=True)
class SignificanceResult:
    p_value: float
    statistic: float
    n: int
    method: str
    resamples: int
    seed: int

    def to_record(self) -> dict:
        return {
            "p_value": self.p_value,
            "statistic": self.statistic,
            "n": self.n,
            "method": self.method,
            "resamples": self.resamples,
            "seed": self.seed,
        }


def permutation_test(
    a: Sequence[float],
    b: Sequence[float],
    resamples: int = 100_000,
    seed: int = 0,
    exact_threshold: int = EXACT_THRESHOLD,
) -> SignificanceResult:
    """Paired sign-flip permutation test on the per-question differences.

    Statistic is |mean(a - b)|. All 2^n sign assignments are enumerated when
    n <= ``exact_threshold``; otherwise Monte Carlo with the given seed, using
    the add-one p-value estimate (count + 1) / (resamples + 1).
    """
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    n = len(a)
    if n < 1:
        raise ValueError("need at least one pair")
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    statistic = abs(float(d.mean()))

    if n <= exact_threshold:
        count = 0
        total = 1 << n
        # Enumerate sign patterns in chunks to bound memory.
        chunk = 1 << 16
        bits = np.arange(n, dtype=np.int64)
        for start in range(0, total, chunk):
            masks = np.arange(start, min(start + chunk, total), dtype=np.int64)
            signs = (((masks[:, None] >> bits) & 1) * 2 - 1).astype(np.float64)
            stats = np.abs(signs @ d) / n
            count += int(np.sum(stats >= statistic - 1e-15))
        return SignificanceResult(
            p_value=count / total,
            statistic=statistic,
            n=n,
            method="exact",
            resamples=total,
            seed=seed,
        )

    rng = np.random.default_rng(seed)
    count = 0
    remaining = resamples
    while remaining > 0:
        block = min(remaining, 65536)
        signs = rng.integers(0, 2, size=(block, n)).astype(np.float64) * 2 - 1
        stats = np.abs(signs @ d) / n
        count += int(np.sum(stats >= statistic - 1e-15))
        remaining -= block
    return SignificanceResult(
        p_value=(count + 1) / (resamples + 1),
        statistic=statistic,
        n=n,
        method="monte_carlo",
        resamples=resamples,
        seed=seed,
    )


def gold_perplexity(result: MatchResult):
    """exp of negative mean gold-token logprob; UNSUPPORTED when absent."""
    logprobs = result.gold_logprobs
    if not logprobs:
        return UNSUPPORTED
    return math.exp(-sum(logprobs) / len(logprobs))


JUDGE_TEMPLATE = """You are an impartial judge comparing the reasoning quality of different systems answering the same patent matching question. Read the candidate responses below and decide which one presents the most accurate, specific, and well-grounded reasoning about the similarity between the query patent and the options.

{responses}

Reply with the number of the best response, formatted exactly as "Winner: <number>". If no response is clearly better than the others, reply exactly "Winner: tie"."""

_WINNER = re.compile(r"winner\s*[:\-]?\s*(\d+|tie)", re.IGNORECASE)


def render_judge_prompt(presented: Sequence[tuple[str, str]]) -> str:
    """``presented`` is (variant, reasoning) pairs already in presentation order."""
    blocks = [
        f"Response {i}:\n{reasoning}" for i, (_, reasoning) in enumerate(presented, start=1)
    ]
    return JUDGE_TEMPLATE.replace("{responses}", "\n\n".join(blocks))


@dataclass(frozen=True)
class JudgeReport:
    win_rates: dict[str, float]
    wins: dict[str, int]
    ties: int
    abstentions: int
    n: int

    def to_record(self) -> dict:
        return {
            "win_rates": dict(sorted(self.win_rates.items())),
            "wins": dict(sorted(self.wins.items())),
            "ties": self.ties,
            "abstentions": self.abstentions,
            "n": self.n,
        }


def judge_pairwise(
    reasonings: Mapping[str, Mapping[str, str]],
    backend: LLMBackend,
    seed: int = 0,
    model_id: str = "default",
    max_tokens: int = 64,
    cache: ResponseCache | None = None,
) -> JudgeReport:
    """Per-question pairwise judging over two or more variants.

    ``reasonings`` maps variant -> question_id -> reasoning text; all variants
    must cover the same question set. Presentation order is shuffled with a
    per-question seeded RNG so position bias cannot systematically favor one
    variant. Unparseable verdicts count as abstentions.
    """
    variants = sorted(reasonings)
    if len(variants) < 2:
        raise ValueError("judging needs at least two variants")
    question_ids = sorted(reasonings[variants[0]])
    for variant in variants[1:]:
        if sorted(reasonings[variant]) != question_ids:
            raise ValueError(f"variant {variant!r} covers a different question set")

    wins = {v: 0 for v in variants}
    ties = 0
    abstentions = 0
    for qid in question_ids:
        order = list(variants)
        random.Random(f"{seed}:{qid}").shuffle(order)
        presented = [(v, reasonings[v][qid]) for v in order]
        prompt = render_judge_prompt(presented)
        request = CompletionRequest(prompt=prompt, model_id=model_id, max_tokens=max_tokens)
        verdict = cached_complete(request, cache, backend).text
        match = _WINNER.search(verdict)
        if not match:
            abstentions += 1
            logger.warning("unparseable judge verdict for %s: %r", qid, verdict[:80])
            continue
        token = match.group(1).lower()
        if token == "tie":
            ties += 1
            continue
        slot = int(token)
        if not 1 <= slot <= len(presented):
            abstentions += 1
            continue
        wins[presented[slot - 1][0]] += 1

    n = len(question_ids)
    win_rates = {v: wins[v] / n for v in variants}
    return JudgeReport(win_rates=win_rates, wins=wins, ties=ties, abstentions=abstentions, n=n)


def _fmt_pct(value: float) -> str:
    return f"{100 * value:.1f}"


def render_language_table(reports: Sequence[EvalReport]) -> str:
    """Accuracy per variant with English / Chinese / Avg columns."""
    header = f"{'Method':<24}  {'English':>8}  {'Chinese':>8}  {'Avg.':>8}"
    lines = [header, "-" * len(header)]
    for report in reports:
        en = report.by_language.get("EN")
        zh = report.by_language.get("ZH")
        lines.append(
            f"{report.variant:<24}  "
            f"{_fmt_pct(en[0]) if en else '-':>8}  "
            f"{_fmt_pct(zh[0]) if zh else '-':>8}  "
            f"{_fmt_pct(report.overall_accuracy):>8}"
        )
    return "\n".join(lines)


def render_ipc_table(reports: Sequence[EvalReport]) -> str:
    """Accuracy per variant across the eight IPC sections plus Avg."""
    cols = "  ".join(f"{s:>6}" for s in IPC_SECTIONS)
    header = f"{'Method':<24}  {cols}  {'Avg.':>6}"
    lines = [header, "-" * len(header)]
    for report in reports:
        cells = []
        for section in IPC_SECTIONS:
            cell = report.by_ipc.get(section)
            cells.append(f"{_fmt_pct(cell[0]) if cell else '-':>6}")
        lines.append(
            f"{report.variant:<24}  "
            + "  ".join(cells)
            + f"  {_fmt_pct(report.overall_accuracy):>6}"
        )
    return "\n".join(lines)


def emit_report(
    reports: Sequence[EvalReport],
    out_dir: str | Path,
    splits: ScenarioSplit | None = None,
    significance: Mapping[str, SignificanceResult] | None = None,
    config_digest: str = "",
) -> tuple[Path, Path]:
    """Write the machine-readable report and the plain-text tables.

    Re-emitting from the same inputs produces byte-identical files.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload: dict = {
        "config_digest": config_digest,
        "reports": [r.to_record() for r in reports],
    }
    if splits is not None:
        payload["scenario_split"] = {
            "hit": sorted(splits.hit),
            "miss": sorted(splits.miss),
            "mem": sorted(splits.mem),
        }
    if significance:
        payload["significance"] = {
            pair: result.to_record() for pair, result in sorted(significance.items())
        }
    json_path = out_dir / "report.json"
    json_path.write_text(
        json.dumps(payload, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )

    sections = [
        f"config: {config_digest}",
        "",
        "Accuracy by language",
        render_language_table(reports),
        "",
        "Accuracy by IPC section",
        render_ipc_table(reports),
    ]
    if splits is not None:
        sections += [
            "",
            "Scenario split",
            f"hit: {len(splits.hit)}  miss: {len(splits.miss)}  mem: {len(splits.mem)}",
        ]
    if significance:
        sections.append("")
        sections.append("Significance (paired permutation)")
        for pair, result in sorted(significance.items()):
            sections.append(
                f"{pair}: p={result.p_value:.6g} statistic={result.statistic:.6g} "
                f"method={result.method} n={result.n}"
            )
    text_path = out_dir / "report.txt"
    text_path.write_text("\n".join(sections) + "\n", encoding="utf-8")
    return json_path, text_path
