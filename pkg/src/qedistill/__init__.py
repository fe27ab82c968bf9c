"""Query-expansion distillation with retrieval-feedback preference alignment.

Pipeline: BM25 index + retrieval, TREC evaluation, dual-prompt teacher
expansion generation, margin-filtered preference pairs, and SFT + DPO
training of a small autoregressive model against a frozen reference.
"""

from .analysis import AnalyzerConfig, DEFAULT_STOPWORDS, analyze, porter_stem
from .bm25 import Bm25Params, RankedList, batch_search, bm25_score, compose_query, search
from .expansion import (
    ExpansionRecord,
    TeacherEndpointConfig,
    fetch_expansion,
    generate_dataset,
    normalize_expansion,
    toy_teacher,
)
from .index import Document, InvertedIndex, build_index, load_index, save_index
from .lm import (
    BigramLM,
    SequenceBatch,
    TinyTransformerLM,
    Vocab,
    build_vocab,
    clone_frozen,
    greedy_generate,
    load_checkpoint,
    log_prob,
    save_checkpoint,
)
from .metrics import EvalResult, MetricConfig, average_precision, evaluate_run, mrr, ndcg_at_k
from .prefs import PreferencePair, PrefBuildConfig, build_pairs, score_expansion_pair
from .prompts import build_prompt, render_prompt
from .stats import TTestResult, paired_t_test
from .training import (
    DpoConfig,
    SftConfig,
    TrainReport,
    dpo_loss,
    sft_loss,
    train_dpo,
    train_sft,
)
from .trec import Qrels, parse_qrels, parse_run, write_run

__version__ = "0.1.0"
