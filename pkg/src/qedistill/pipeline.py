"""End-to-end pipeline: index, teacher expansion, SFT, preference pairs,
DPO, student generation, retrieval, evaluation and significance tests.

Every stage is content-addressed: its key hashes the relevant config
slice plus all input artifact hashes, so re-runs skip completed stages
and ablation edits only invalidate downstream stages. A manifest in the
workdir records every artifact with its content hash.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .analysis import DEFAULT_STOPWORDS, AnalyzerConfig
from .bm25 import Bm25Params, batch_search, compose_query
from .expansion import api_source, generate_dataset, read_expansion_records, toy_source
from .expansion import TeacherEndpointConfig
from .index import build_index, load_index, read_corpus_jsonl, save_index
from .lm import BigramLM, TinyTransformerLM, build_vocab, greedy_generate
from .lm import load_checkpoint, save_checkpoint
from .metrics import MetricConfig, evaluate_run
from .prefs import PrefBuildConfig, build_pairs, read_pairs, write_pair_report, write_pairs
from .stats import paired_t_test
from .training import DpoConfig, SftConfig, dpo_examples_from_pairs
from .training import sft_examples_from_records, train_dpo, train_sft, write_train_report
from .trec import parse_qrels, write_run


class PipelineError(Exception):
    pass


class ConfigError(Exception):
    pass


@dataclass
class PipelineConfig:
    corpus: str
    queries: str
    qrels: str
    workdir: str
    seed: int = 0
    analyzer: AnalyzerConfig = AnalyzerConfig()
    bm25: Bm25Params = Bm25Params()
    metric: MetricConfig = MetricConfig()
    pref: PrefBuildConfig = PrefBuildConfig()
    sft: SftConfig = SftConfig()
    dpo: DpoConfig = DpoConfig()
    sft_composition: str = "both"  # "both" | "e1" | "e2"
    dpo_reference: str = "sft-init"  # "sft-init" | "raw"
    expansion_source: str = "toy"  # "toy" | "api"
    toy_echo_repeats: int = 1
    teacher: TeacherEndpointConfig | None = None
    architecture: str = "bigram_softmax"
    gen_max_len: int = 64
    retrieval_k: int = 1000
    ttest_alternative: str = "two-sided"


_TOP_KEYS = {
    "corpus", "queries", "qrels", "workdir", "seed", "analyzer", "bm25",
    "metric", "pref", "sft", "dpo", "sft_composition", "dpo_reference",
    "expansion_source", "toy_echo_repeats", "teacher", "architecture", "gen_max_len",
    "retrieval_k", "ttest_alternative",
}
_SECTION_KEYS = {
    "analyzer": {"lowercase", "stopwords", "stemmer"},
    "bm25": {"k1", "b"},
    "metric": {"ndcg_cutoff", "binary_threshold", "ndcg_gain"},
    "pref": {"delta", "retrieval_k"},
    "sft": {"lr", "batch_size", "grad_accum", "epochs", "warmup_fraction"},
    "dpo": {"beta", "lr", "batch_size", "grad_accum", "epochs", "warmup_fraction"},
    "teacher": {"base_url", "model_name", "api_key_env", "max_retries",
                "timeout", "backoff_seconds"},
}


def _check_keys(obj: dict, allowed: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys in {where}: {sorted(unknown)}")


def load_config(path) -> PipelineConfig:
    """Parse and validate a pipeline config JSON file.

    Relative paths are resolved against the config file's directory;
    unknown keys anywhere are rejected.
    """
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(raw, _TOP_KEYS, "config root")
    for section, allowed in _SECTION_KEYS.items():
        if section in raw and raw[section] is not None:
            if not isinstance(raw[section], dict):
                raise ConfigError(f"config section {section!r} must be an object")
            _check_keys(raw[section], allowed, section)
    for required in ("corpus", "queries", "qrels", "workdir"):
        if required not in raw:
            raise ConfigError(f"config is missing required key {required!r}")

    base = Path(path).resolve().parent

    def resolve(p: str) -> str:
        return str((base / p).resolve()) if not os.path.isabs(p) else p

    analyzer_raw = dict(raw.get("analyzer", {}))
    if analyzer_raw.get("stopwords") is None:
        analyzer_raw["stopwords"] = DEFAULT_STOPWORDS
    else:
        analyzer_raw["stopwords"] = frozenset(analyzer_raw["stopwords"])
    teacher = None
    if raw.get("teacher"):
        teacher = TeacherEndpointConfig(**raw["teacher"])
    cfg = PipelineConfig(
        corpus=resolve(raw["corpus"]),
        queries=resolve(raw["queries"]),
        qrels=resolve(raw["qrels"]),
        workdir=resolve(raw["workdir"]),
        seed=int(raw.get("seed", 0)),
        analyzer=AnalyzerConfig(**analyzer_raw),
        bm25=Bm25Params(**raw.get("bm25", {})),
        metric=MetricConfig(**raw.get("metric", {})),
        sft=SftConfig(**raw.get("sft", {})),
        dpo=DpoConfig(**raw.get("dpo", {})),
        sft_composition=raw.get("sft_composition", "both"),
        dpo_reference=raw.get("dpo_reference", "sft-init"),
        expansion_source=raw.get("expansion_source", "toy"),
        toy_echo_repeats=int(raw.get("toy_echo_repeats", 1)),
        teacher=teacher,
        architecture=raw.get("architecture", "bigram_softmax"),
        gen_max_len=int(raw.get("gen_max_len", 64)),
        retrieval_k=int(raw.get("retrieval_k", 1000)),
        ttest_alternative=raw.get("ttest_alternative", "two-sided"),
    )
    pref_raw = dict(raw.get("pref", {}))
    cfg.pref = PrefBuildConfig(
        delta=float(pref_raw.get("delta", 0.01)),
        retrieval_k=int(pref_raw.get("retrieval_k", 1000)),
        bm25=cfg.bm25,
        metric=cfg.metric,
    )
    if cfg.sft_composition not in ("both", "e1", "e2"):
        raise ConfigError(f"bad sft_composition: {cfg.sft_composition!r}")
    if cfg.dpo_reference not in ("sft-init", "raw"):
        raise ConfigError(f"bad dpo_reference: {cfg.dpo_reference!r}")
    if cfg.expansion_source not in ("toy", "api"):
        raise ConfigError(f"bad expansion_source: {cfg.expansion_source!r}")
    if cfg.expansion_source == "api" and cfg.teacher is None:
        raise ConfigError("expansion_source 'api' requires a teacher section")
    if cfg.architecture not in ("bigram_softmax", "tiny_transformer"):
        raise ConfigError(f"bad architecture: {cfg.architecture!r}")
    for p, name in ((cfg.corpus, "corpus"), (cfg.queries, "queries"), (cfg.qrels, "qrels")):
        if not os.path.exists(p):
            raise ConfigError(f"{name} file not found: {p}")
    return cfg


def read_queries_tsv(path) -> list[tuple[str, str]]:
    queries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise PipelineError(f"{path}:{lineno}: expected qid<TAB>text")
            qid, text = line.split("\t", 1)
            queries.append((qid, text))
    return queries


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _key_of(payload) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, default=str).encode()
    ).hexdigest()


class Manifest:
    def __init__(self, path: Path):
        self.path = path
        self.stages: dict[str, dict] = {}
        if path.exists():
            with open(path, "r", encoding="utf-8") as fh:
                self.stages = json.load(fh).get("stages", {})

    def save(self) -> None:
        with open(self.path, "w", encoding="utf-8") as out:
            json.dump({"stages": self.stages}, out, indent=2)

    def fresh(self, stage: str, key: str, workdir: Path) -> bool:
        entry = self.stages.get(stage)
        if not entry or entry.get("key") != key:
            return False
        for rel, digest in entry.get("artifacts", {}).items():
            p = workdir / rel
            if not p.exists() or file_sha256(p) != digest:
                return False
        return True

    def guard_overwrite(self, stage: str, artifacts: list[str], workdir: Path, force: bool) -> None:
        """Refuse to clobber an artifact that changed outside the pipeline."""
        entry = self.stages.get(stage, {})
        recorded = entry.get("artifacts", {})
        for rel in artifacts:
            p = workdir / rel
            if p.exists() and rel in recorded and file_sha256(p) != recorded[rel] and not force:
                raise PipelineError(
                    f"stage {stage}: artifact {rel} differs from the manifest "
                    "record (modified outside the pipeline); re-run with --force"
                )

    def record(self, stage: str, key: str, artifacts: list[str], workdir: Path, extra: dict | None = None) -> None:
        self.stages[stage] = {
            "key": key,
            "artifacts": {rel: file_sha256(workdir / rel) for rel in artifacts},
            "extra": extra or {},
        }
        self.save()


@dataclass
class StageResult:
    name: str
    skipped: bool
    artifacts: list[str]
    extra: dict = field(default_factory=dict)


class Pipeline:
    """Runs the full desk-scale distillation-and-alignment loop."""

    def __init__(self, cfg: PipelineConfig, force: bool = False, log=print):
        self.cfg = cfg
        self.force = force
        self.log = log
        self.workdir = Path(cfg.workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.manifest = Manifest(self.workdir / "manifest.json")
        self.results: list[StageResult] = []

    # -- stage driver -------------------------------------------------------

    def _stage(self, name: str, key_payload, artifacts: list[str], run, extra_fn=None):
        key = _key_of(key_payload)
        if not self.force and self.manifest.fresh(name, key, self.workdir):
            self.log(f"[{name}] cached, skipping")
            self.results.append(StageResult(name, True, artifacts,
                                            self.manifest.stages[name].get("extra", {})))
            return
        self.manifest.guard_overwrite(name, artifacts, self.workdir, self.force)
        self.log(f"[{name}] running")
        started = time.perf_counter()
        try:
            extra = run() or {}
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(f"stage {name} failed: {exc}") from exc
        extra["wall_seconds"] = time.perf_counter() - started
        self.manifest.record(name, key, artifacts, self.workdir, extra)
        self.results.append(StageResult(name, False, artifacts, extra))

    def _path(self, rel: str) -> Path:
        return self.workdir / rel

    def _hash(self, rel: str) -> str:
        return file_sha256(self._path(rel))

    # -- stages -------------------------------------------------------------

    def run(self) -> dict:
        cfg = self.cfg
        analyzer_payload = {
            "lowercase": cfg.analyzer.lowercase,
            "stemmer": cfg.analyzer.stemmer,
            "stopwords": sorted(cfg.analyzer.stopwords),
        }
        bm25_payload = asdict(cfg.bm25)
        metric_payload = asdict(cfg.metric)

        self._stage(
            "index",
            {"analyzer": analyzer_payload, "corpus": file_sha256(cfg.corpus)},
            ["index.bin"],
            self._run_index,
        )
        self._stage(
            "expand_teacher",
            {
                "source": cfg.expansion_source,
                "echo_repeats": cfg.toy_echo_repeats,
                "teacher": asdict(cfg.teacher) if cfg.teacher else None,
                "bm25": bm25_payload,
                "queries": file_sha256(cfg.queries),
                "index": self._hash("index.bin"),
            },
            ["expansions.jsonl"],
            self._run_expand_teacher,
        )
        self._stage(
            "sft",
            {
                "sft": asdict(cfg.sft),
                "composition": cfg.sft_composition,
                "architecture": cfg.architecture,
                "seed": cfg.seed,
                "expansions": self._hash("expansions.jsonl"),
            },
            ["model_sft.ckpt", "sft_report.jsonl"],
            self._run_sft,
        )
        self._stage(
            "build_prefs",
            {
                "pref": {"delta": cfg.pref.delta, "retrieval_k": cfg.pref.retrieval_k},
                "bm25": bm25_payload,
                "metric": metric_payload,
                "expansions": self._hash("expansions.jsonl"),
                "index": self._hash("index.bin"),
                "qrels": file_sha256(cfg.qrels),
            },
            ["pairs.jsonl", "pairs_report.json"],
            self._run_build_prefs,
        )
        self._stage(
            "dpo",
            {
                "dpo": asdict(cfg.dpo),
                "reference": cfg.dpo_reference,
                "seed": cfg.seed,
                "pairs": self._hash("pairs.jsonl"),
                "model": self._hash("model_sft.ckpt"),
            },
            ["model_dpo.ckpt", "dpo_report.jsonl"],
            self._run_dpo,
        )
        for tag in ("sft", "dpo"):
            self._stage(
                f"generate_{tag}",
                {
                    "gen_max_len": cfg.gen_max_len,
                    "model": self._hash(f"model_{tag}.ckpt"),
                    "queries": file_sha256(cfg.queries),
                },
                [f"expansions_{tag}.jsonl"],
                lambda tag=tag: self._run_generate(tag),
            )
        self._stage(
            "retrieve",
            {
                "bm25": bm25_payload,
                "k": cfg.retrieval_k,
                "index": self._hash("index.bin"),
                "queries": file_sha256(cfg.queries),
                "gen_sft": self._hash("expansions_sft.jsonl"),
                "gen_dpo": self._hash("expansions_dpo.jsonl"),
            },
            ["run_baseline.trec", "run_sft.trec", "run_dpo.trec"],
            self._run_retrieve,
        )
        self._stage(
            "eval",
            {
                "metric": metric_payload,
                "qrels": file_sha256(cfg.qrels),
                "runs": [self._hash(f"run_{t}.trec") for t in ("baseline", "sft", "dpo")],
            },
            ["eval.json"],
            self._run_eval,
        )
        self._stage(
            "ttest",
            {
                "alternative": cfg.ttest_alternative,
                "metric": metric_payload,
                "qrels": file_sha256(cfg.qrels),
                "runs": [self._hash(f"run_{t}.trec") for t in ("baseline", "sft", "dpo")],
            },
            ["ttest.json"],
            self._run_ttest,
        )
        return {
            "workdir": str(self.workdir),
            "stages": [r.name for r in self.results],
            "skipped": [r.name for r in self.results if r.skipped],
        }

    def _run_index(self):
        index = build_index(read_corpus_jsonl(self.cfg.corpus), self.cfg.analyzer)
        save_index(index, self._path("index.bin"))
        return {"docs": index.doc_count}

    def _run_expand_teacher(self):
        cfg = self.cfg
        queries = read_queries_tsv(cfg.queries)
        if cfg.expansion_source == "toy":
            index = load_index(self._path("index.bin"))
            source = toy_source(index, cfg.bm25, cfg.toy_echo_repeats)
        else:
            source = api_source(cfg.teacher)
        out = self._path("expansions.jsonl")
        if out.exists():
            out.unlink()  # invalidated key: regenerate from scratch
        started = time.perf_counter()
        written, failed = generate_dataset(queries, source, out)
        elapsed = time.perf_counter() - started
        if failed:
            raise PipelineError(f"{failed} of {len(queries)} expansions failed")
        per_query = elapsed / max(1, written)
        self.log(
            f"  generated {written} expansion records "
            f"({elapsed:.3f}s total, {per_query:.4f}s/query)"
        )
        return {
            "queries": written,
            "total_seconds": elapsed,
            "seconds_per_query": per_query,
        }

    def _build_model(self, vocab):
        if self.cfg.architecture == "bigram_softmax":
            return BigramLM(vocab, seed=self.cfg.seed)
        return TinyTransformerLM(vocab, seed=self.cfg.seed)

    def _run_sft(self):
        cfg = self.cfg
        records = read_expansion_records(self._path("expansions.jsonl"))
        texts = [r.query for r in records] + [r.e1 for r in records] + [r.e2 for r in records]
        model = self._build_model(build_vocab(texts))
        examples = sft_examples_from_records(
            records, model.vocab, cfg.sft_composition, model.max_context
        )
        model, report = train_sft(model, examples, cfg.sft, seed=cfg.seed + 1)
        save_checkpoint(model, self._path("model_sft.ckpt"))
        report.checkpoint_path = "model_sft.ckpt"
        write_train_report(report, self._path("sft_report.jsonl"))
        return {
            "examples": len(examples),
            "steps": report.steps,
            "final_epoch_loss": report.epoch_mean_losses[-1],
        }

    def _run_build_prefs(self):
        cfg = self.cfg
        records = read_expansion_records(self._path("expansions.jsonl"))
        index = load_index(self._path("index.bin"))
        qrels = parse_qrels(cfg.qrels)
        pairs, skipped, report = build_pairs(records, index, qrels, cfg.pref)
        write_pairs(pairs, self._path("pairs.jsonl"))
        write_pair_report(report, self._path("pairs_report.json"))
        self.log(f"  kept {report.kept} pairs, skipped {skipped}")
        return {"kept": report.kept, "skipped": skipped}

    def _run_dpo(self):
        cfg = self.cfg
        policy = load_checkpoint(self._path("model_sft.ckpt"))
        pairs = read_pairs(self._path("pairs.jsonl"))
        if not pairs:
            raise PipelineError(
                "no preference pairs survived the margin filter; "
                "lower pref.delta or inspect pairs_report.json"
            )
        examples = dpo_examples_from_pairs(pairs, policy.vocab, policy.max_context)
        reference = None
        if cfg.dpo_reference == "raw":
            reference = self._build_model(policy.vocab)
            for p in reference.parameters():
                p.requires_grad_(False)
        policy, report = train_dpo(
            policy, examples, cfg.dpo, seed=cfg.seed + 2, reference=reference
        )
        save_checkpoint(policy, self._path("model_dpo.ckpt"))
        report.checkpoint_path = "model_dpo.ckpt"
        write_train_report(report, self._path("dpo_report.jsonl"))
        return {
            "pairs": len(pairs),
            "steps": report.steps,
            "margin_before": report.margin_before,
            "margin_after": report.margin_after,
        }

    def _run_generate(self, tag: str):
        cfg = self.cfg
        model = load_checkpoint(self._path(f"model_{tag}.ckpt"))
        queries = read_queries_tsv(cfg.queries)
        out_path = self._path(f"expansions_{tag}.jsonl")
        specials = {model.vocab.bos, model.vocab.eos, model.vocab.pad, model.vocab.unk}
        started = time.perf_counter()
        with open(out_path, "w", encoding="utf-8") as out:
            for qid, text in queries:
                ids = greedy_generate(model, model.vocab.encode(text), cfg.gen_max_len)
                expansion = model.vocab.decode([i for i in ids if i not in specials])
                out.write(
                    json.dumps(
                        {"query_id": qid, "query": text, "expansion": expansion},
                        ensure_ascii=False,
                    )
                    + "\n"
                )
        elapsed = time.perf_counter() - started
        per_query = elapsed / max(1, len(queries))
        self.log(
            f"  generated {len(queries)} expansions "
            f"({elapsed:.3f}s total, {per_query:.4f}s/query)"
        )
        return {
            "queries": len(queries),
            "total_seconds": elapsed,
            "seconds_per_query": per_query,
        }

    def _read_generated(self, tag: str) -> dict[str, str]:
        out = {}
        with open(self._path(f"expansions_{tag}.jsonl"), "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    obj = json.loads(line)
                    out[obj["query_id"]] = obj["expansion"]
        return out

    def _run_retrieve(self):
        cfg = self.cfg
        index = load_index(self._path("index.bin"))
        queries = read_queries_tsv(cfg.queries)
        run = batch_search(index, cfg.bm25, queries, cfg.retrieval_k)
        write_run(run, self._path("run_baseline.trec"), run_tag="baseline")
        for tag in ("sft", "dpo"):
            generated = self._read_generated(tag)
            composed = [
                (qid, compose_query(text, generated.get(qid, "")))
                for qid, text in queries
            ]
            run = batch_search(index, cfg.bm25, composed, cfg.retrieval_k)
            write_run(run, self._path(f"run_{tag}.trec"), run_tag=tag)
        return {"queries": len(queries), "k": cfg.retrieval_k}

    def _evaluate_all(self):
        from .trec import parse_run

        qrels = parse_qrels(self.cfg.qrels)
        results = {}
        for tag in ("baseline", "sft", "dpo"):
            run = parse_run(self._path(f"run_{tag}.trec"))
            results[tag] = evaluate_run(run, qrels, self.cfg.metric)
        return results

    def _run_eval(self):
        results = self._evaluate_all()
        payload = {}
        for tag, res in results.items():
            payload[tag] = {
                "ndcg@10": res.mean_ndcg,
                "map": res.mean_ap,
                "mrr": res.mean_mrr,
                "queries": len(res.per_query),
                "skipped": res.skipped,
                "per_query": {
                    qid: {"ndcg": m.ndcg, "ap": m.ap, "mrr": m.mrr}
                    for qid, m in sorted(res.per_query.items())
                },
            }
        with open(self._path("eval.json"), "w", encoding="utf-8") as out:
            json.dump(payload, out, indent=2)
        self.log("  method        nDCG@10      MAP      MRR")
        for tag in ("baseline", "sft", "dpo"):
            r = results[tag]
            label = {"baseline": "no-expansion", "sft": "sft-only", "dpo": "sft+dpo"}[tag]
            self.log(
                f"  {label:<12} {r.mean_ndcg:8.4f} {r.mean_ap:8.4f} {r.mean_mrr:8.4f}"
            )
        return {tag: results[tag].mean_ndcg for tag in results}

    def _run_ttest(self):
        results = self._evaluate_all()
        shared = sorted(
            set(results["dpo"].per_query)
            & set(results["baseline"].per_query)
            & set(results["sft"].per_query)
        )
        payload = {}
        for other in ("baseline", "sft"):
            a = [results["dpo"].per_query[q].ndcg for q in shared]
            b = [results[other].per_query[q].ndcg for q in shared]
            res = paired_t_test(a, b, alternative=self.cfg.ttest_alternative)
            payload[f"dpo_vs_{other}"] = {
                "metric": "ndcg@10",
                "t": res.t,
                "p": res.p,
                "n": res.n,
                "degenerate": res.degenerate,
            }
            self.log(
                f"  sft+dpo vs {other}: t={res.t:.4f} p={res.p:.3g} (n={res.n})"
            )
        with open(self._path("ttest.json"), "w", encoding="utf-8") as out:
            json.dump(payload, out, indent=2)
        return payload


def run_pipeline(cfg: PipelineConfig, force: bool = False, log=print) -> dict:
    return Pipeline(cfg, force=force, log=log).run()
