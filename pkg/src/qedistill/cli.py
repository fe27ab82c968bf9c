"""Command-line interface: every pipeline stage as a subcommand."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .analysis import DEFAULT_STOPWORDS, AnalyzerConfig
from .bm25 import Bm25Params, batch_search, compose_query
from .expansion import TeacherEndpointConfig, api_source, generate_dataset
from .expansion import read_expansion_records, toy_source
from .index import build_index, load_index, read_corpus_jsonl, save_index
from .lm import BigramLM, TinyTransformerLM, build_vocab, greedy_generate
from .lm import load_checkpoint, save_checkpoint
from .metrics import MetricConfig, evaluate_run
from .pipeline import PipelineError, load_config, read_queries_tsv, run_pipeline
from .prefs import PrefBuildConfig, build_pairs, read_pairs, write_pair_report, write_pairs
from .stats import paired_t_test
from .synthetic import SyntheticConfig, write_benchmark
from .training import DpoConfig, SftConfig, dpo_examples_from_pairs
from .training import sft_examples_from_records, train_dpo, train_sft, write_train_report
from .trec import parse_qrels, parse_run, write_run


def _analyzer_from_args(args) -> AnalyzerConfig:
    return AnalyzerConfig(
        lowercase=not args.no_lowercase,
        stopwords=DEFAULT_STOPWORDS,
        stemmer=args.stemmer,
    )


def cmd_index(args) -> int:
    index = build_index(read_corpus_jsonl(args.corpus), _analyzer_from_args(args))
    save_index(index, args.index)
    print(f"indexed {index.doc_count} docs, {len(index.postings)} terms -> {args.index}")
    return 0


def _load_expansion_map(path, field: str) -> dict[str, str]:
    expansions = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                expansions[obj["query_id"]] = obj[field]
    return expansions


def cmd_retrieve(args) -> int:
    index = load_index(args.index)
    params = Bm25Params(k1=args.k1, b=args.b)
    queries = read_queries_tsv(args.queries)
    if args.expansions:
        expansions = _load_expansion_map(args.expansions, args.expansion_field)
        queries = [
            (qid, compose_query(text, expansions.get(qid, "")))
            for qid, text in queries
        ]
    run = batch_search(index, params, queries, args.k)
    write_run(run, args.output, run_tag=args.run_tag)
    print(f"wrote {sum(len(r.entries) for r in run)} result lines -> {args.output}")
    return 0


def cmd_eval(args) -> int:
    qrels = parse_qrels(args.qrels)
    run = parse_run(args.run)
    config = MetricConfig(
        ndcg_cutoff=args.cutoff,
        binary_threshold=args.threshold,
        ndcg_gain="exponential" if args.ndcg_gain == "exp" else "linear",
    )
    result = evaluate_run(run, qrels, config)
    print("query_id\tndcg@{0}\tap\tmrr".format(args.cutoff))
    for qid in sorted(result.per_query):
        m = result.per_query[qid]
        ap = f"{m.ap:.6f}" if m.ap is not None else "excluded"
        print(f"{qid}\t{m.ndcg:.6f}\t{ap}\t{m.mrr:.6f}")
    print(
        f"means over {len(result.per_query)} queries: "
        f"ndcg@{args.cutoff}={result.mean_ndcg:.6f} "
        f"map={result.mean_ap:.6f} mrr={result.mean_mrr:.6f}"
    )
    if result.skipped:
        print(f"skipped (no judgments): {' '.join(result.skipped)}")
    return 0


_METRIC_PICKERS = {
    "ndcg10": lambda m: m.ndcg,
    "map": lambda m: m.ap,
    "mrr": lambda m: m.mrr,
}


def cmd_ttest(args) -> int:
    qrels = parse_qrels(args.qrels)
    config = MetricConfig(binary_threshold=args.threshold)
    res_a = evaluate_run(parse_run(args.run_a), qrels, config)
    res_b = evaluate_run(parse_run(args.run_b), qrels, config)
    pick = _METRIC_PICKERS[args.metric]
    shared = sorted(set(res_a.per_query) & set(res_b.per_query))
    a, b = [], []
    for qid in shared:
        va, vb = pick(res_a.per_query[qid]), pick(res_b.per_query[qid])
        if va is None or vb is None:
            continue
        a.append(va)
        b.append(vb)
    result = paired_t_test(a, b, alternative=args.alternative)
    flag = f" [{result.degenerate}]" if result.degenerate else ""
    print(
        f"paired t-test on {args.metric} over {result.n} queries: "
        f"t={result.t:.6f} p={result.p:.6g}{flag}"
    )
    return 0


def cmd_expand(args) -> int:
    queries = read_queries_tsv(args.queries)
    if args.source == "toy":
        if not args.index:
            print("--index is required for the toy source", file=sys.stderr)
            return 2
        source = toy_source(load_index(args.index))
    else:
        if not args.endpoint or not args.model_name:
            print("--endpoint and --model are required for the api source", file=sys.stderr)
            return 2
        source = api_source(
            TeacherEndpointConfig(
                base_url=args.endpoint,
                model_name=args.model_name,
                api_key_env=args.key_env,
                max_retries=args.max_retries,
                timeout=args.timeout,
            )
        )
    started = time.perf_counter()
    written, failed = generate_dataset(queries, source, args.out)
    elapsed = time.perf_counter() - started
    mean = elapsed / max(1, written)
    print(
        f"wrote {written} records ({failed} failures) -> {args.out} "
        f"[{elapsed:.3f}s total, {mean:.4f}s/query]"
    )
    return 1 if failed else 0


def cmd_build_prefs(args) -> int:
    records = read_expansion_records(args.expansions)
    index = load_index(args.index)
    qrels = parse_qrels(args.qrels)
    cfg = PrefBuildConfig(delta=args.delta, retrieval_k=args.k)
    pairs, skipped, report = build_pairs(records, index, qrels, cfg)
    write_pairs(pairs, args.out)
    if args.report:
        write_pair_report(report, args.report)
    print(f"kept {report.kept} pairs, skipped {skipped} -> {args.out}")
    return 0


def cmd_sft(args) -> int:
    records = read_expansion_records(args.data)
    if args.model:
        model = load_checkpoint(args.model)
    else:
        texts = [r.query for r in records] + [r.e1 for r in records] + [r.e2 for r in records]
        vocab = build_vocab(texts)
        if args.arch == "bigram_softmax":
            model = BigramLM(vocab, seed=args.seed)
        else:
            model = TinyTransformerLM(vocab, seed=args.seed)
    composition = "e1" if args.e1_only else ("e2" if args.e2_only else "both")
    examples = sft_examples_from_records(records, model.vocab, composition, model.max_context)
    cfg = SftConfig(
        lr=args.lr,
        batch_size=args.batch_size,
        grad_accum=args.grad_accum,
        epochs=args.epochs,
        warmup_fraction=args.warmup,
    )
    model, report = train_sft(model, examples, cfg, seed=args.seed)
    save_checkpoint(model, args.out)
    report.checkpoint_path = str(args.out)
    if args.report:
        write_train_report(report, args.report)
    print(
        f"sft: {report.steps} steps, epoch losses "
        f"{[round(x, 4) for x in report.epoch_mean_losses]} -> {args.out}"
    )
    return 0


def cmd_dpo(args) -> int:
    policy = load_checkpoint(args.model)
    pairs = read_pairs(args.pairs)
    if not pairs:
        print("no preference pairs in input", file=sys.stderr)
        return 1
    examples = dpo_examples_from_pairs(pairs, policy.vocab, policy.max_context)
    reference = None
    if args.ref == "raw":
        if policy.arch == "bigram_softmax":
            reference = BigramLM(policy.vocab, seed=policy.seed)
        else:
            reference = TinyTransformerLM(policy.vocab, seed=policy.seed)
        for p in reference.parameters():
            p.requires_grad_(False)
    cfg = DpoConfig(
        beta=args.beta,
        lr=args.lr,
        batch_size=args.batch_size,
        grad_accum=args.grad_accum,
        epochs=args.epochs,
        warmup_fraction=args.warmup,
    )
    policy, report = train_dpo(policy, examples, cfg, seed=args.seed, reference=reference)
    save_checkpoint(policy, args.out)
    report.checkpoint_path = str(args.out)
    if args.report:
        write_train_report(report, args.report)
    print(
        f"dpo: {report.steps} steps, margin {report.margin_before:.6f} -> "
        f"{report.margin_after:.6f}, checkpoint -> {args.out}"
    )
    return 0


def cmd_generate(args) -> int:
    model = load_checkpoint(args.model)
    queries = read_queries_tsv(args.queries)
    specials = {model.vocab.bos, model.vocab.eos, model.vocab.pad, model.vocab.unk}
    started = time.perf_counter()
    with open(args.out, "w", encoding="utf-8") as out:
        for qid, text in queries:
            ids = greedy_generate(model, model.vocab.encode(text), args.max_len)
            expansion = model.vocab.decode([i for i in ids if i not in specials])
            out.write(
                json.dumps(
                    {"query_id": qid, "query": text, "expansion": expansion},
                    ensure_ascii=False,
                )
                + "\n"
            )
    elapsed = time.perf_counter() - started
    print(
        f"generated {len(queries)} expansions -> {args.out} "
        f"[{elapsed:.3f}s total, {elapsed / max(1, len(queries)):.4f}s/query]"
    )
    return 0


def cmd_pipeline(args) -> int:
    try:
        cfg = load_config(args.config)
        summary = run_pipeline(cfg, force=args.force)
    except PipelineError as exc:
        print(f"pipeline failed: {exc}", file=sys.stderr)
        return 1
    print(
        f"pipeline complete: {len(summary['stages'])} stages "
        f"({len(summary['skipped'])} cached) in {summary['workdir']}"
    )
    return 0


def cmd_gen_synthetic(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = SyntheticConfig(
        seed=args.seed,
        n_topics=args.topics,
        queries_per_topic=args.queries_per_topic,
        total_docs=args.docs,
        distractor_fraction=args.distractor_fraction,
    )
    stats = write_benchmark(
        cfg,
        out_dir / "corpus.jsonl",
        out_dir / "queries.tsv",
        out_dir / "qrels.txt",
    )
    if args.write_config:
        # Defaults tuned for the bigram student on this benchmark; the
        # paper-scale lrs are far too small for a logits table.
        config = {
            "corpus": "corpus.jsonl",
            "queries": "queries.tsv",
            "qrels": "qrels.txt",
            "workdir": "work",
            "seed": args.seed,
            "analyzer": {"lowercase": True, "stemmer": "none"},
            "toy_echo_repeats": 2,
            "sft": {"lr": 0.1, "epochs": 2},
            "dpo": {"lr": 0.05, "epochs": 2, "beta": 0.05},
        }
        with open(out_dir / "config.json", "w", encoding="utf-8") as out:
            json.dump(config, out, indent=2)
    print(
        f"synthetic benchmark in {out_dir}: {stats['docs']} docs, "
        f"{stats['queries']} queries, {stats['judgments']} judgments"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qedistill",
        description="Query-expansion distillation and retrieval-feedback alignment",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", help="build an inverted index from a JSONL corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--stemmer", choices=["porter", "none"], default="porter")
    p.add_argument("--no-lowercase", action="store_true")
    p.set_defaults(fn=cmd_index)

    p = sub.add_parser("retrieve", help="BM25 retrieval to a TREC run file")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True, help="TSV: qid<TAB>text")
    p.add_argument("--k", type=int, default=1000)
    p.add_argument("--k1", type=float, default=0.9)
    p.add_argument("--b", type=float, default=0.4)
    p.add_argument("--output", required=True)
    p.add_argument("--run-tag", default="qedistill")
    p.add_argument("--expansions", help="JSONL with expansions to compose with queries")
    p.add_argument(
        "--expansion-field", default="expansion", help="JSONL field holding the text"
    )
    p.set_defaults(fn=cmd_retrieve)

    p = sub.add_parser("eval", help="score a run against qrels")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--ndcg-gain", choices=["linear", "exp"], default="linear")
    p.add_argument("--threshold", type=int, default=2)
    p.add_argument("--cutoff", type=int, default=10)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ttest", help="paired t-test between two runs")
    p.add_argument("--run-a", required=True)
    p.add_argument("--run-b", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--metric", choices=sorted(_METRIC_PICKERS), default="ndcg10")
    p.add_argument("--threshold", type=int, default=2)
    p.add_argument(
        "--alternative", choices=["two-sided", "greater", "less"], default="two-sided"
    )
    p.set_defaults(fn=cmd_ttest)

    p = sub.add_parser("expand", help="generate teacher expansions (e1/e2) per query")
    p.add_argument("--queries", required=True)
    p.add_argument("--source", choices=["toy", "api"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--index", help="index path (toy source)")
    p.add_argument("--endpoint", help="chat-completions URL (api source)")
    p.add_argument("--model", dest="model_name", help="teacher model name (api source)")
    p.add_argument("--key-env", default="TEACHER_API_KEY")
    p.add_argument("--max-retries", type=int, default=3)
    p.add_argument("--timeout", type=float, default=60.0)
    p.set_defaults(fn=cmd_expand)

    p = sub.add_parser("build-prefs", help="margin-filtered DPO pairs from expansions")
    p.add_argument("--expansions", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--delta", type=float, default=0.01)
    p.add_argument("--k", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(fn=cmd_build_prefs)

    p = sub.add_parser("sft", help="supervised fine-tuning on expansion records")
    p.add_argument("--data", required=True, help="ExpansionRecord JSONL")
    p.add_argument("--out", required=True)
    p.add_argument("--model", help="starting checkpoint; omit to initialize fresh")
    p.add_argument(
        "--arch", choices=["bigram_softmax", "tiny_transformer"], default="bigram_softmax"
    )
    p.add_argument("--seed", type=int, default=0)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--e1-only", action="store_true")
    group.add_argument("--e2-only", action="store_true")
    p.add_argument("--lr", type=float, default=SftConfig.lr)
    p.add_argument("--batch-size", type=int, default=SftConfig.batch_size)
    p.add_argument("--grad-accum", type=int, default=SftConfig.grad_accum)
    p.add_argument("--epochs", type=int, default=SftConfig.epochs)
    p.add_argument("--warmup", type=float, default=SftConfig.warmup_fraction)
    p.add_argument("--report")
    p.set_defaults(fn=cmd_sft)

    p = sub.add_parser("dpo", help="preference alignment against a frozen reference")
    p.add_argument("--model", required=True, help="policy init (SFT checkpoint)")
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--beta", type=float, default=DpoConfig.beta)
    p.add_argument(
        "--ref",
        choices=["sft-init", "raw"],
        default="sft-init",
        help="reference = policy init snapshot, or the raw seeded backbone",
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=DpoConfig.lr)
    p.add_argument("--batch-size", type=int, default=DpoConfig.batch_size)
    p.add_argument("--grad-accum", type=int, default=DpoConfig.grad_accum)
    p.add_argument("--epochs", type=int, default=DpoConfig.epochs)
    p.add_argument("--warmup", type=float, default=DpoConfig.warmup_fraction)
    p.add_argument("--report")
    p.set_defaults(fn=cmd_dpo)

    p = sub.add_parser("generate", help="greedy expansions from a trained checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-len", type=int, default=64)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("pipeline", help="run every stage from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--force", action="store_true", help="ignore cached stages")
    p.set_defaults(fn=cmd_pipeline)

    p = sub.add_parser("gen-synthetic", help="write the bundled synthetic benchmark")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--docs", type=int, default=1000)
    p.add_argument("--topics", type=int, default=25)
    p.add_argument("--queries-per-topic", type=int, default=4)
    p.add_argument("--distractor-fraction", type=float, default=0.4)
    p.add_argument("--write-config", action="store_true")
    p.set_defaults(fn=cmd_gen_synthetic)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
