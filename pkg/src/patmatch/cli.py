"""Operator entry point: composable subcommands over a run directory.

Configuration comes from a JSON config file plus flag overrides (flags win);
the effective snapshot is written into the run directory for provenance.
Subcommands: ingest, build-index, extract, run, eval, compare, judge, report.
Every command is idempotent against the run directory and deterministic under
scripted backends. ``eval``, ``compare`` and ``report`` never call an LLM.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import corpus as corpus_mod
from . import evaluation, index as index_mod, pipeline
from .embedder import EmbeddingBackend, EmbeddingConfig, MockEmbedder, RemoteEmbedder
from .extraction import Extractor
from .llm import LLMBackend, RemoteChatBackend, ResponseCache, ScriptedBackend

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid run configuration; message names the offending field."""


@dataclass
class RunConfig:
    corpus_path: str = ""
    questions_path: str = ""
    run_dir: str = "run"
    embedder: dict = field(default_factory=lambda: {"backend": "mock", "dim": 64, "seed": 0})
    llm: dict = field(default_factory=lambda: {"backend": "scripted"})
    judge: dict = field(default_factory=dict)
    variants: list = field(default_factory=lambda: ["vanilla", "rag", "memgraph:all"])
    k: int = 3
    concurrency: int = 1
    seed: int = 0
    cache_path: str | None = None
    normalize_embeddings: bool = False
    exclude_options_from_corpus: bool = False
    passage_char_budget: int = 1200
    retry_limit: int = 2
    collect_gold_logprobs: bool = False

    def validate(self) -> None:
        if self.k < 1:
            raise ConfigError("k: must be >= 1")
        if self.concurrency < 1:
            raise ConfigError("concurrency: must be >= 1")
        if self.passage_char_budget < 1:
            raise ConfigError("passage_char_budget: must be positive")
        if self.retry_limit < 0:
            raise ConfigError("retry_limit: must be >= 0")
        for spec in self.variants:
            try:
                pipeline.Variant.parse(spec, k=self.k)
            except ValueError as exc:
                raise ConfigError(f"variants: {exc}") from exc
        backend = self.embedder.get("backend", "mock")
        if backend not in ("mock", "remote"):
            raise ConfigError(f"embedder.backend: unknown backend {backend!r}")
        if int(self.embedder.get("dim", 0)) < 1:
            raise ConfigError("embedder.dim: must be positive")
        llm_backend = self.llm.get("backend", "scripted")
        if llm_backend not in ("scripted", "remote"):
            raise ConfigError(f"llm.backend: unknown backend {llm_backend!r}")

    def snapshot(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        material = json.dumps(self.snapshot(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(material.encode("utf-8")).hexdigest()[:12]


def load_config(path: str | None, overrides: dict) -> RunConfig:
    data: dict = {}
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"config: cannot read {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: malformed JSON: {exc}") from exc
    known = {f for f in RunConfig.__dataclass_fields__}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"config: unknown fields {sorted(unknown)}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    config = RunConfig(**{k: v for k, v in data.items() if k in known})
    config.validate()
    return config


def _progress(**fields) -> None:
    line = " ".join(f"{k}={v}" for k, v in fields.items())
    print(f"progress: {line}", file=sys.stderr)


def _parse_variant(spec: str, k: int) -> pipeline.Variant:
    try:
        return pipeline.Variant.parse(spec, k=k)
    except ValueError as exc:
        raise ConfigError(f"variant: {exc}") from exc


def _build_embedder(config: RunConfig) -> EmbeddingBackend:
    spec = dict(config.embedder)
    backend = spec.pop("backend", "mock")
    spec.setdefault("normalize", config.normalize_embeddings)
    if backend == "mock":
        return MockEmbedder(
            dim=int(spec["dim"]),
            seed=int(spec.get("seed", config.seed)),
            batch_size=int(spec.get("batch_size", 32)),
            truncation_chars=int(spec.get("truncation_chars", 2000)),
            normalize=bool(spec.get("normalize", False)),
        )
    return RemoteEmbedder(
        EmbeddingConfig(
            backend_id=spec.get("backend_id", "remote"),
            dim=int(spec["dim"]),
            batch_size=int(spec.get("batch_size", 32)),
            truncation_chars=int(spec.get("truncation_chars", 2000)),
            normalize=bool(spec.get("normalize", False)),
            endpoint=spec.get("endpoint"),
            timeout=float(spec.get("timeout", 30.0)),
            retries=int(spec.get("retries", 3)),
            max_in_flight=int(spec.get("max_in_flight", 8)),
        )
    )


def _build_llm(spec: dict, run_dir: Path, role: str) -> LLMBackend:
    backend = spec.get("backend", "scripted")
    if backend == "scripted":
        rules_path = spec.get("rules_path")
        if rules_path:
            return ScriptedBackend.from_file(rules_path, backend_id=f"scripted-{role}")
        return ScriptedBackend(
            default_response=spec.get("default_response", ""),
            backend_id=f"scripted-{role}",
        )
    transcript = spec.get("transcript")
    return RemoteChatBackend(
        endpoint=spec.get("endpoint"),
        api_key_env=spec.get("api_key_env", "PATMATCH_LLM_API_KEY"),
        timeout=float(spec.get("timeout", 120.0)),
        retries=int(spec.get("retries", 3)),
        transcript_path=run_dir / transcript if transcript else None,
        backend_id=spec.get("backend_id", f"remote-{role}"),
    )


def _services(config: RunConfig, need_retrieval: bool) -> pipeline.Services:
    run_dir = Path(config.run_dir)
    backend = _build_llm(config.llm, run_dir, "method")
    cache_path = Path(config.cache_path) if config.cache_path else run_dir / "cache" / "llm.jsonl"
    cache = ResponseCache(cache_path)
    model_id = config.llm.get("model_id", "default")
    extractor = Extractor(
        backend,
        cache=cache,
        model_id=model_id,
        retries=config.retry_limit,
    )
    store = None
    idx = None
    embedder = None
    if need_retrieval:
        store = corpus_mod.load_corpus(config.corpus_path)
        index_dir = run_dir / "index"
        if not (index_dir / "manifest.json").exists():
            raise ConfigError(f"run_dir: no index at {index_dir}; run build-index first")
        idx = index_mod.load_index(index_dir)
        embedder = _build_embedder(config)
        if embedder.fingerprint != idx.fingerprint:
            raise ConfigError(
                f"embedder: fingerprint {embedder.fingerprint!r} does not match "
                f"index {idx.fingerprint!r}"
            )
    return pipeline.Services(
        backend=backend,
        corpus=store,
        index=idx,
        embedder=embedder,
        cache=cache,
        extractor=extractor,
        model_id=model_id,
        max_tokens=int(config.llm.get("max_tokens", 1024)),
        temperature=float(config.llm.get("temperature", 0.0)),
        passage_char_budget=config.passage_char_budget,
        exclude_options_from_corpus=config.exclude_options_from_corpus,
        collect_gold_logprobs=config.collect_gold_logprobs,
    )


def _write_snapshot(config: RunConfig) -> None:
    run_dir = Path(config.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot = {"digest": config.digest(), **config.snapshot()}
    (run_dir / "config.json").write_text(
        json.dumps(snapshot, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


def cmd_ingest(config: RunConfig, args: argparse.Namespace) -> int:
    store = corpus_mod.load_corpus(config.corpus_path)
    questions = corpus_mod.load_questions(config.questions_path)
    by_section: dict[str, int] = {}
    for question in questions:
        by_section[question.ipc_section] = by_section.get(question.ipc_section, 0) + 1
    summary = {
        "corpus_count": store.count,
        "question_count": len(questions),
        "questions_by_ipc": dict(sorted(by_section.items())),
    }
    _write_snapshot(config)
    out = Path(config.run_dir) / "ingest.json"
    out.write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(summary))
    return 0


def cmd_build_index(config: RunConfig, args: argparse.Namespace) -> int:
    store = corpus_mod.load_corpus(config.corpus_path)
    embedder = _build_embedder(config)
    _progress(cmd="build-index", docs=store.count, dim=embedder.dim)
    built = index_mod.build_index(store, embedder)
    index_mod.save_index(built, Path(config.run_dir) / "index")
    _write_snapshot(config)
    print(f"indexed {built.count} docs (dim={built.dim}, fingerprint={built.fingerprint})")
    return 0


def cmd_extract(config: RunConfig, args: argparse.Namespace) -> int:
    questions = corpus_mod.load_questions(config.questions_path)
    services = _services(config, need_retrieval=False)
    run_dir = pipeline.RunDirectory(config.run_dir)
    assert services.extractor is not None
    entity_records: dict[tuple[str, str], dict] = {
        (r["question_id"], r["slot"]): r
        for r in pipeline._read_jsonl(run_dir.extraction_path("entities"))
    }
    ontology_records: dict[str, dict] = {
        r["question_id"]: r
        for r in pipeline._read_jsonl(run_dir.extraction_path("ontologies"))
    }
    for i, question in enumerate(questions, start=1):
        slots = {"query": question.query, **question.options}
        entity_sets = {}
        for slot, patent in slots.items():
            try:
                entity_set, outcome = services.extractor.entities(patent)
                entity_sets[slot] = entity_set
                record = {
                    "question_id": question.id,
                    "slot": slot,
                    "patent_id": patent.id,
                    "entities": list(entity_set.entities),
                    "raw_response": outcome.raw_text,
                    "flags": sorted(outcome.flags),
                }
            except Exception as exc:
                entity_sets[slot] = None
                record = {
                    "question_id": question.id,
                    "slot": slot,
                    "patent_id": patent.id,
                    "entities": None,
                    "raw_response": str(exc),
                    "flags": ["entity_extraction_failed"],
                }
            entity_records[(question.id, slot)] = record
        if args.what == "ontologies":
            assignment, outcome = services.extractor.ontologies(question, entity_sets)
            ontology_records[question.id] = {
                "question_id": question.id,
                "assignment": (
                    {
                        "query": assignment.query.render(),
                        **{k: assignment.options[k].render() for k in corpus_mod.OPTION_IDS},
                    }
                    if assignment
                    else None
                ),
                "raw_response": outcome.raw_text,
                "flags": sorted(outcome.flags),
            }
        _progress(cmd="extract", what=args.what, done=i, total=len(questions))
    order = {q.id: i for i, q in enumerate(questions)}
    pipeline._write_jsonl(
        run_dir.extraction_path("entities"),
        sorted(entity_records.values(), key=lambda r: (order.get(r["question_id"], 1 << 30), r["slot"])),
    )
    if args.what == "ontologies":
        pipeline._write_jsonl(
            run_dir.extraction_path("ontologies"),
            sorted(ontology_records.values(), key=lambda r: order.get(r["question_id"], 1 << 30)),
        )
    _write_snapshot(config)
    return 0


def cmd_run(config: RunConfig, args: argparse.Namespace) -> int:
    variant_specs = [args.variant] if args.variant else config.variants
    questions = corpus_mod.load_questions(config.questions_path)
    run_dir = pipeline.RunDirectory(config.run_dir)
    _write_snapshot(config)
    for spec in variant_specs:
        variant = _parse_variant(spec, config.k)
        services = _services(config, need_retrieval=variant.uses_retrieval)
        _progress(cmd="run", variant=variant.name, total=len(questions))
        results = pipeline.run_batch(
            variant,
            questions,
            services,
            concurrency=config.concurrency,
            run_dir=run_dir,
        )
        correct = sum(1 for r in results if r.correct)
        _progress(cmd="run", variant=variant.name, done=len(results), correct=correct)
        print(f"{variant.name}: {correct}/{len(results)} correct")
    return 0


def _load_variant_results(
    run_dir: pipeline.RunDirectory, spec: str, k: int
) -> tuple[pipeline.Variant, list[pipeline.MatchResult]]:
    variant = _parse_variant(spec, k)
    by_id = run_dir.load_results(variant)
    if not by_id:
        raise ConfigError(f"variant: no results for {variant.name!r}; run it first")
    return variant, list(by_id.values())


def cmd_eval(config: RunConfig, args: argparse.Namespace) -> int:
    questions = corpus_mod.load_questions(config.questions_path)
    run_dir = pipeline.RunDirectory(config.run_dir)
    variant_specs = [args.variant] if args.variant else config.variants
    out_dir = Path(config.run_dir) / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    for spec in variant_specs:
        variant, results = _load_variant_results(run_dir, spec, config.k)
        ordered = _order_results(results, questions)
        report = evaluation.build_report(ordered, questions, variant.name)
        path = out_dir / f"{variant.file_stem}.json"
        path.write_text(
            json.dumps(report.to_record(), indent=2, ensure_ascii=False) + "\n",
            encoding="utf-8",
        )
        print(f"{variant.name}: accuracy={report.overall_accuracy:.4f} n={report.n}")
    _maybe_scenario_split(config, questions, run_dir, out_dir)
    return 0


def _order_results(
    results: list[pipeline.MatchResult], questions: list[corpus_mod.MatchQuestion]
) -> list[pipeline.MatchResult]:
    by_id = {r.question_id: r for r in results}
    ordered = [by_id[q.id] for q in questions if q.id in by_id]
    if len(ordered) != len(questions):
        missing = [q.id for q in questions if q.id not in by_id]
        logger.warning("results missing for %d questions: %s", len(missing), missing[:5])
    return ordered


def _maybe_scenario_split(
    config: RunConfig,
    questions: list[corpus_mod.MatchQuestion],
    run_dir: pipeline.RunDirectory,
    out_dir: Path,
) -> None:
    logs = run_dir.load_retrieval_log("raw_query")
    vanilla = run_dir.load_results(pipeline.Variant.parse("vanilla"))
    if not logs or not vanilla:
        return
    if any(q.id not in logs or q.id not in vanilla for q in questions):
        return
    store = corpus_mod.load_corpus(config.corpus_path) if config.corpus_path else None
    split = evaluation.scenario_split(
        logs, questions, list(vanilla.values()), corpus=store
    )
    payload = {
        "hit": sorted(split.hit),
        "miss": sorted(split.miss),
        "mem": sorted(split.mem),
    }
    (out_dir / "scenario.json").write_text(
        json.dumps(payload, indent=2) + "\n", encoding="utf-8"
    )
    print(f"scenario split: hit={len(split.hit)} miss={len(split.miss)} mem={len(split.mem)}")


def cmd_compare(config: RunConfig, args: argparse.Namespace) -> int:
    questions = corpus_mod.load_questions(config.questions_path)
    run_dir = pipeline.RunDirectory(config.run_dir)
    variant_a, _ = _load_variant_results(run_dir, args.a, config.k)
    variant_b, _ = _load_variant_results(run_dir, args.b, config.k)
    results_a = run_dir.load_results(variant_a)
    results_b = run_dir.load_results(variant_b)
    paired = [q.id for q in questions if q.id in results_a and q.id in results_b]
    if not paired:
        raise ConfigError("variant: no overlapping results to compare")
    a = [1.0 if results_a[qid].correct else 0.0 for qid in paired]
    b = [1.0 if results_b[qid].correct else 0.0 for qid in paired]
    result = evaluation.permutation_test(
        a, b, resamples=args.resamples, seed=config.seed
    )
    payload = {
        "a": variant_a.name,
        "b": variant_b.name,
        "accuracy_a": sum(a) / len(a),
        "accuracy_b": sum(b) / len(b),
        **result.to_record(),
    }
    out_dir = Path(config.run_dir) / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    out = out_dir / f"compare_{variant_a.file_stem}_vs_{variant_b.file_stem}.json"
    out.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(payload))
    return 0


def cmd_judge(config: RunConfig, args: argparse.Namespace) -> int:
    questions = corpus_mod.load_questions(config.questions_path)
    run_dir = pipeline.RunDirectory(config.run_dir)
    variant_specs = args.variants or config.variants
    if len(variant_specs) < 2:
        raise ConfigError("variants: judging needs at least two variants")
    reasonings: dict[str, dict[str, str]] = {}
    for spec in variant_specs:
        variant, _ = _load_variant_results(run_dir, spec, config.k)
        results = run_dir.load_results(variant)
        covered = {q.id for q in questions} & set(results)
        reasonings[variant.name] = {
            qid: (results[qid].reasoning or results[qid].raw_response) for qid in covered
        }
    common = set.intersection(*(set(v) for v in reasonings.values()))
    reasonings = {k: {qid: v[qid] for qid in common} for k, v in reasonings.items()}
    judge_spec = config.judge or config.llm
    backend = _build_llm(judge_spec, Path(config.run_dir), "judge")
    cache_path = (
        Path(config.cache_path)
        if config.cache_path
        else Path(config.run_dir) / "cache" / "llm.jsonl"
    )
    report = evaluation.judge_pairwise(
        reasonings,
        backend,
        seed=config.seed,
        model_id=judge_spec.get("model_id", "default"),
        cache=ResponseCache(cache_path),
    )
    out_dir = Path(config.run_dir) / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "judge.json").write_text(
        json.dumps(report.to_record(), indent=2) + "\n", encoding="utf-8"
    )
    print(json.dumps(report.to_record()))
    return 0


def cmd_report(config: RunConfig, args: argparse.Namespace) -> int:
    questions = corpus_mod.load_questions(config.questions_path)
    run_dir = pipeline.RunDirectory(config.run_dir)
    reports = []
    for spec in config.variants:
        variant = _parse_variant(spec, config.k)
        results = run_dir.load_results(variant)
        if not results:
            continue
        ordered = _order_results(list(results.values()), questions)
        reports.append(evaluation.build_report(ordered, questions, variant.name))
    if not reports:
        raise ConfigError("variants: no results found to report on")
    splits = None
    scenario_path = Path(config.run_dir) / "eval" / "scenario.json"
    if scenario_path.exists():
        payload = json.loads(scenario_path.read_text(encoding="utf-8"))
        splits = evaluation.ScenarioSplit(
            hit=frozenset(payload["hit"]),
            miss=frozenset(payload["miss"]),
            mem=frozenset(payload["mem"]),
        )
    significance = {}
    for path in sorted((Path(config.run_dir) / "eval").glob("compare_*.json")):
        payload = json.loads(path.read_text(encoding="utf-8"))
        significance[f"{payload['a']} vs {payload['b']}"] = evaluation.SignificanceResult(
            p_value=payload["p_value"],
            statistic=payload["statistic"],
            n=payload["n"],
            method=payload["method"],
            resamples=payload["resamples"],
            seed=payload["seed"],
        )
    json_path, text_path = evaluation.emit_report(
        reports,
        Path(config.run_dir) / "eval",
        splits=splits,
        significance=significance or None,
        config_digest=config.digest(),
    )
    print(text_path.read_text(encoding="utf-8"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patmatch",
        description="Batch patent-matching experiments: retrieval, pipelines, evaluation.",
    )
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--run-dir", dest="run_dir", help="run directory (overrides config)")
    parser.add_argument("--corpus", dest="corpus_path", help="corpus JSONL path")
    parser.add_argument("--questions", dest="questions_path", help="questions JSONL path")
    parser.add_argument("--k", type=int, help="retrieval depth")
    parser.add_argument("--concurrency", type=int, help="worker pool size")
    parser.add_argument("--seed", type=int, help="seed for stochastic steps")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", help="validate corpus and question files")
    sub.add_parser("build-index", help="embed the corpus and persist the index")
    p_extract = sub.add_parser("extract", help="precompute extraction artifacts")
    p_extract.add_argument("what", choices=["entities", "ontologies"])
    p_run = sub.add_parser("run", help="run a pipeline variant over all questions")
    p_run.add_argument("--variant", help="vanilla | cot | rag | memgraph:{ir|gen|all}")
    p_eval = sub.add_parser("eval", help="compute accuracy reports (no LLM calls)")
    p_eval.add_argument("--variant", help="restrict to one variant")
    p_compare = sub.add_parser("compare", help="paired permutation test between two variants")
    p_compare.add_argument("--a", required=True)
    p_compare.add_argument("--b", required=True)
    p_compare.add_argument("--resamples", type=int, default=100_000)
    p_judge = sub.add_parser("judge", help="LLM-as-judge pairwise win rates")
    p_judge.add_argument("--variants", nargs="*", help="variants to judge")
    sub.add_parser("report", help="render combined tables (no LLM calls)")
    return parser


_COMMANDS = {
    "ingest": cmd_ingest,
    "build-index": cmd_build_index,
    "extract": cmd_extract,
    "run": cmd_run,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "judge": cmd_judge,
    "report": cmd_report,
}


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {
        "run_dir": args.run_dir,
        "corpus_path": args.corpus_path,
        "questions_path": args.questions_path,
        "k": args.k,
        "concurrency": args.concurrency,
        "seed": args.seed,
    }
    try:
        config = load_config(args.config, overrides)
        return _COMMANDS[args.command](config, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (corpus_mod.CorpusFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
